#![no_main]

use fusedet::detector::{format_labels, parse_labels};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(boxes) = parse_labels(text) {
        for b in &boxes {
            assert!(b.validate().is_ok());
        }
        assert_eq!(parse_labels(&format_labels(&boxes)).unwrap(), boxes);
    }
});
