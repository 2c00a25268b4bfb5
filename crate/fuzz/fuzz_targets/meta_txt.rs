#![no_main]

use bevbeam::data::dataset::{format_meta, parse_meta};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(meta) = parse_meta(text) {
        assert_eq!(parse_meta(&format_meta(&meta)).unwrap(), meta);
    }
});
