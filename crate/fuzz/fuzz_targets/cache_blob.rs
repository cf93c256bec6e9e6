#![no_main]

use libfuzzer_sys::fuzz_target;
use quantsparse::ssar::{decode_cache, encode_cache};

fuzz_target!(|data: &[u8]| {
    if let Ok(cache) = decode_cache(data) {
        let again = decode_cache(&encode_cache(&cache)).expect("re-encoded blob decodes");
        assert_eq!(again.shape(), cache.shape());
        assert_eq!(again.rank, cache.rank);
    }
});
