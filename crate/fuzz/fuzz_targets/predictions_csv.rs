#![no_main]

use bevbeam::metrics::parse_predictions;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = parse_predictions(data, 64) {
        for r in rows {
            assert!(r.rank1 < 64 && r.rank2 < 64 && r.rank3 < 64 && r.label < 64);
        }
    }
});
