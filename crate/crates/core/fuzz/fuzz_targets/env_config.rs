#![no_main]

use libfuzzer_sys::fuzz_target;
use optrepair::env::GridLanderEnv;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(env) = text.parse::<GridLanderEnv>() {
        let once = env.to_config_string();
        let again: GridLanderEnv = once.parse().expect("serialized config parses");
        assert_eq!(again.to_config_string(), once);
    }
});
