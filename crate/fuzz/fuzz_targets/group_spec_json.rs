#![no_main]

use bcpi::GroupSpec;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = GroupSpec::from_json_str(s) {
        let back = GroupSpec::from_json_str(&spec.to_json_string()).unwrap();
        assert_eq!(back, spec);
        // validation must not panic for any width
        for p in [0, 1, 8, 1000] {
            let _ = spec.validate(p);
        }
    }
});
