use pidinet::binary::BitTensor;
use pidinet::blocks::{build_bipidinet, NetworkSpec};
use pidinet::checkpoint::{encode_bit_tensor, encode_checkpoint, encode_tensor, Checkpoint};
use pidinet::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn write_fuzz_seeds() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus");
    let mut r = ChaCha8Rng::seed_from_u64(5);

    let mut t32 = Tensor::<f32>::zeros(Shape::new(1, 2, 3, 4));
    for v in t32.data_mut() {
        *v = r.gen_range(-1.0..1.0);
    }
    std::fs::write(dir.join("fuzz_tensor_record/record_f32"), encode_tensor(&t32)).unwrap();

    let mut t64 = Tensor::<f64>::zeros(Shape::new(2, 1, 2, 2));
    for v in t64.data_mut() {
        *v = r.gen_range(-1.0..1.0);
    }
    std::fs::write(dir.join("fuzz_tensor_record/record_f64"), encode_tensor(&t64)).unwrap();

    let mut wide = Tensor::<f64>::zeros(Shape::new(1, 1, 5, 17));
    for v in wide.data_mut() {
        *v = r.gen_range(-1.0..1.0);
    }
    let bits = BitTensor::pack(&wide, 0.0);
    std::fs::write(dir.join("fuzz_tensor_record/record_bits"), encode_bit_tensor(&bits)).unwrap();

    // A structurally complete checkpoint with a stub parameter table keeps
    // the seed small; the decoder does not cross-check tables against the
    // architecture text.
    let ck = Checkpoint {
        spec: NetworkSpec::edge_tiny(),
        params: vec![("block0.w".to_string(), t32.clone())],
        buffers: Vec::new(),
    };
    std::fs::write(dir.join("fuzz_checkpoint/edge_stub"), encode_checkpoint(&ck)).unwrap();

    let spec = NetworkSpec::classify_small(0.2, 3);
    let cls = Checkpoint::<f32> {
        spec,
        params: Vec::new(),
        buffers: vec![("init_bn.mean".to_string(), Tensor::zeros(Shape::new(8, 1, 1, 1)))],
    };
    std::fs::write(dir.join("fuzz_checkpoint/classifier_stub"), encode_checkpoint(&cls)).unwrap();
}
