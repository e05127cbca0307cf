#![no_main]

use libfuzzer_sys::fuzz_target;
use optrepair::experiment::{rows_from_csv, rows_to_csv, ClassifierRow, H1Row, OptionsRow, OverrideRow};
use optrepair::repair::{read_report_rows, write_report_rows};

fn check<R: optrepair::experiment::CsvRow>(text: &str) {
    if let Ok(rows) = rows_from_csv::<R>(text) {
        let once = rows_to_csv(&rows).expect("in-memory write");
        let again = rows_from_csv::<R>(&once).expect("written rows parse");
        assert_eq!(rows_to_csv(&again).expect("in-memory write"), once);
    }
}

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = read_report_rows(data) {
        let mut once = Vec::new();
        write_report_rows(&rows, &mut once).expect("in-memory write");
        let again = read_report_rows(once.as_slice()).expect("written rows parse");
        let mut twice = Vec::new();
        write_report_rows(&again, &mut twice).expect("in-memory write");
        assert_eq!(once, twice);
    }
    let Ok(text) = std::str::from_utf8(data) else { return };
    check::<H1Row>(text);
    check::<OverrideRow>(text);
    check::<OptionsRow>(text);
    check::<ClassifierRow>(text);
});
