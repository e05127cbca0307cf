#![no_main]

use libfuzzer_sys::fuzz_target;
use optrepair::imitation::Policy;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(pi) = Policy::parse(text) {
        let once = pi.to_text();
        let again = Policy::parse(&once).expect("serialized policy parses");
        assert_eq!(again.to_text(), once);
    }
});
