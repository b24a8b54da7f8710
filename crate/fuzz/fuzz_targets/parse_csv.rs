#![no_main]

use libfuzzer_sys::fuzz_target;
use trimfa::io::{parse_csv, ColumnRef, CsvOptions};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let _ = parse_csv(text, &CsvOptions::default());
    // Same input with the first column read as labels.
    let labelled = CsvOptions {
        label_column: Some(ColumnRef::parse("1")),
        ..Default::default()
    };
    let _ = parse_csv(text, &labelled);
});
