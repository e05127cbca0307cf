#![no_main]

use libfuzzer_sys::fuzz_target;
use optrepair::trajectories::TrajectorySet;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(set) = TrajectorySet::parse(text) {
        let once = set.to_text();
        let again = TrajectorySet::parse(&once).expect("serialized set parses");
        assert_eq!(again.to_text(), once);
    }
});
