#![no_main]

use libfuzzer_sys::fuzz_target;
use optrepair::attacks::AttackSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = text.parse::<AttackSpec>() {
        let again: AttackSpec = spec.to_string().parse().expect("displayed spec parses");
        assert_eq!(again.to_string(), spec.to_string());
        let _ = spec.budget(data.len());
        let _ = spec.attacked_count(data.len());
    }
});
