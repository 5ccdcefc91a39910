#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(cfg) = incrdet::experiment::ExperimentConfig::parse(data) {
        let _ = cfg.adaptation.resolve_plan(None);
        let _ = cfg.baseline.plan().validate();
    }
});
