#![no_main]

use fusedet::detector::{decode_checkpoint, encode_checkpoint};
use fusedet::tensor::ParamSet;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(params) = decode_checkpoint(data) {
        let again = decode_checkpoint(&encode_checkpoint(&params)).unwrap();
        assert_eq!(again.config(), params.config());
        let (a, b) = (again.flatten(), params.flatten());
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
});
