#![no_main]

use std::path::Path;

use bevbeam::data::checkpoint::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

// Tensors may hold NaN, so compare encodings rather than values.
fuzz_target!(|data: &[u8]| {
    let path = Path::new("fuzz.ckpt");
    if let Ok(ck) = decode_checkpoint(data, path) {
        let once = encode_checkpoint(&ck).unwrap();
        let twice = encode_checkpoint(&decode_checkpoint(&once, path).unwrap()).unwrap();
        assert_eq!(once, twice);
    }
});
