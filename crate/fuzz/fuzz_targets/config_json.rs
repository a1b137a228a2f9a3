#![no_main]

use bcpi::bench::ExperimentConfig;
use bcpi::inference::ImportanceConfig;
use bcpi::simulation::SimulationConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = serde_json::from_slice::<ImportanceConfig>(data) {
        let _ = cfg.validate();
    }
    if let Ok(cfg) = serde_json::from_slice::<ExperimentConfig>(data) {
        let _ = cfg.validate();
    }
    if let Ok(cfg) = serde_json::from_slice::<SimulationConfig>(data) {
        let _ = cfg.covariance.validate();
    }
});
