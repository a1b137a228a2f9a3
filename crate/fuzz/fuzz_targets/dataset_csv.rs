#![no_main]

use bcpi::io::{read_dataset, write_dataset};
use bcpi::Task;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    for task in [Task::Regression, Task::Binary] {
        if let Ok(ds) = read_dataset(data, "y", task) {
            assert_eq!(ds.x().rows(), ds.y().len());
            let mut out = Vec::new();
            write_dataset(&mut out, &ds, "y").unwrap();
            let back = read_dataset(out.as_slice(), "y", task).unwrap();
            assert_eq!(back.n(), ds.n());
            assert_eq!(back.p(), ds.p());
        }
    }
});
