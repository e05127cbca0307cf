#![no_main]

use libfuzzer_sys::fuzz_target;
use optrepair::classifier::Chi;
use optrepair::divergence::DivergenceFeatures;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(chi) = Chi::parse(text) {
        let once = chi.to_text();
        let again = Chi::parse(&once).expect("dumped model parses");
        assert_eq!(again.to_text(), once);
        let _ = chi.predict(&DivergenceFeatures { oc: 0.5, fd: 0.5 });
    }
});
