#![no_main]

use hardylab::experiments::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = ExperimentConfig::from_json(text) {
        let echo = serde_json::to_string(&cfg).expect("configs serialize");
        let again = ExperimentConfig::from_json(&echo).expect("echoed configs parse");
        assert_eq!(serde_json::to_string(&again).unwrap(), echo);
        let _ = cfg.grid.grid();
    }
});
