#![no_main]
use libfuzzer_sys::fuzz_target;

use pidinet::checkpoint::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = decode_checkpoint::<f32>(data) {
        // Accepted checkpoints re-encode and re-decode to the same content.
        let bytes = encode_checkpoint(&ck);
        let back = decode_checkpoint::<f32>(&bytes).expect("re-encoded checkpoint re-decodes");
        assert_eq!(back.spec, ck.spec);
        assert_eq!(back.params.len(), ck.params.len());
        for ((an, at), (bn, bt)) in ck.params.iter().zip(&back.params) {
            assert_eq!(an, bn);
            assert_eq!(at.shape(), bt.shape());
        }
    }
});
