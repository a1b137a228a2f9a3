#![no_main]

use bcpi::bench::{aggregate, read_raw_jsonl};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = read_raw_jsonl(data) {
        // aggregation must cope with arbitrary (even inconsistent) archives
        let _ = aggregate(&records, 0.05);
    }
});
