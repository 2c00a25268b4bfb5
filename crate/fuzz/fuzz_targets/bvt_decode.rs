#![no_main]

use std::path::Path;

use bevbeam::data::bvt::{decode_tensor, encode_tensor};
use libfuzzer_sys::fuzz_target;

// Anything the decoder accepts must re-encode to the same bytes.
fuzz_target!(|data: &[u8]| {
    if let Ok(t) = decode_tensor(data, Path::new("fuzz.bvt")) {
        assert_eq!(encode_tensor(&t).unwrap(), data);
    }
});
