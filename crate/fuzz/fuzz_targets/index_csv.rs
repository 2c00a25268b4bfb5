#![no_main]

use bevbeam::data::dataset::{parse_index, write_index};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(entries) = parse_index(data) {
        let mut out = Vec::new();
        write_index(&mut out, &entries).unwrap();
        assert_eq!(parse_index(out.as_slice()).unwrap(), entries);
    }
});
