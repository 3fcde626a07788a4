#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(manifest) = ldsr::train::Manifest::from_bytes(data) {
        // A parsed manifest must re-serialize byte-identically.
        assert_eq!(manifest.to_bytes(), data);
    }
});
