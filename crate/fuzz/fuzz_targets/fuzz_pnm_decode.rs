#![no_main]
use libfuzzer_sys::fuzz_target;

use pidinet::pnm::{decode_pnm, encode_pnm};

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_pnm(data) {
        // Anything we accept we must be able to write back and re-read
        // bit-identically (the encoder always emits the raw variant).
        let bytes = encode_pnm(&img).expect("decoded images re-encode");
        assert_eq!(decode_pnm(&bytes).expect("re-encoded images re-decode"), img);
    }
});
