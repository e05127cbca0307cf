#![no_main]

use libfuzzer_sys::fuzz_target;
use optrepair::experiment::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = text.parse::<ExperimentConfig>() {
        let once = cfg.to_text();
        let again: ExperimentConfig = once.parse().expect("serialized config parses");
        assert_eq!(again.to_text(), once);
        let _ = cfg.grid();
    }
});
