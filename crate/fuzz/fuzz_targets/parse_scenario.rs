#![no_main]

use libfuzzer_sys::fuzz_target;
use trimfa::datagen::ScenarioSpec;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(spec) = ScenarioSpec::parse(text) {
            let again = ScenarioSpec::parse(&spec.to_text()).expect("printed scenario parses");
            assert_eq!(again, spec);
        }
    }
});
