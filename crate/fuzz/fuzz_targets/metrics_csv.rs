#![no_main]

use bcpi::bench::{read_metrics_csv, write_metrics_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = read_metrics_csv(data) {
        assert!(!rows.is_empty());
        for r in &rows {
            for rate in [r.auc, r.type1, r.power].into_iter().flatten() {
                assert!((0.0..=1.0).contains(&rate));
            }
        }
        let mut out = Vec::new();
        write_metrics_csv(&mut out, &rows).unwrap();
        assert_eq!(read_metrics_csv(out.as_slice()).unwrap().len(), rows.len());
    }
});
