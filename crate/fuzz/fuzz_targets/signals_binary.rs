#![no_main]

use libfuzzer_sys::fuzz_target;
use stnas_core::data::{decode_binary, encode_binary};

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = decode_binary(data, None) {
        assert_eq!(encode_binary(&m), data);
    }
});
