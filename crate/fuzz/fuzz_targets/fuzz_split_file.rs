#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let names = ldsr::data::parse_split(text);
        // No blank entries survive parsing.
        assert!(names.iter().all(|n| !n.trim().is_empty()));
    }
});
