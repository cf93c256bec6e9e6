#![no_main]

use libfuzzer_sys::fuzz_target;
use quantsparse::attention::SparsityMask;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(mask) = SparsityMask::from_rle_json(text) {
        let back = SparsityMask::from_rle_json(&mask.to_rle_json()).expect("round trip");
        assert_eq!(back, mask);
        assert_eq!(mask.bits().len(), mask.len() * mask.len());
    }
});
