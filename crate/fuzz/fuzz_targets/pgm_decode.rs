#![no_main]

use fusedet::registration::decode_pgm;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_pgm(data) {
        assert_eq!(img.pixels().len(), img.width() * img.height());
        assert!(img.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        // Encoding always writes maxval 255, so the first round trip may
        // requantize by at most half a step; after that it is exact.
        let once = decode_pgm(&img.encode_pgm()).unwrap();
        for (a, b) in once.pixels().iter().zip(img.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        assert_eq!(decode_pgm(&once.encode_pgm()).unwrap(), once);
    }
});
