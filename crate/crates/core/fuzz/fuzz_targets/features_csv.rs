#![no_main]

use libfuzzer_sys::fuzz_target;
use optrepair::divergence::{read_features, write_features};

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = read_features(data) {
        let mut once = Vec::new();
        write_features(&rows, &mut once).expect("in-memory write");
        let again = read_features(once.as_slice()).expect("written rows parse");
        let mut twice = Vec::new();
        write_features(&again, &mut twice).expect("in-memory write");
        assert_eq!(once, twice);
    }
});
