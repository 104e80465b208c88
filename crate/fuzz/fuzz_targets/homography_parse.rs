#![no_main]

use fusedet::registration::Homography;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(h) = Homography::from_text(text) {
        assert_eq!(Homography::from_text(&h.to_text()).unwrap(), h);
    }
});
