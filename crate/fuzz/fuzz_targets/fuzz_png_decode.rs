#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = ldsr::data::decode_png(data) {
        // Decoded images satisfy the pixel-tensor invariants.
        assert!(img.height >= 1 && img.width >= 1);
        assert!(img.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }
});
