//! Checkpoint archives survive write, read, write byte for byte.

mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;
use svs_core::tensor_store::{read_checkpoint, write_checkpoint, Checkpoint, DType, Tensor};

#[test]
fn fifty_random_checkpoints_round_trip() {
    let mut r = common::rng(7);
    for i in 0..50 {
        let mut ck = common::random_checkpoint(&mut r, 1 + i % 6, None);
        if i % 3 == 0 {
            ck.set_metadata(Some(BTreeMap::from([("format".to_string(), "pt".to_string())])));
        }
        let bytes = write_checkpoint(&ck);
        let back = read_checkpoint(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(write_checkpoint(&back), bytes);
    }
}

#[test]
fn header_is_padded_and_payload_packed() {
    let ck = common::random_checkpoint(&mut common::rng(1), 3, None);
    let bytes = write_checkpoint(&ck);
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    assert_eq!(n % 8, 0);
    let payload: usize = ck.tensors().map(|t| t.bytes().len()).sum();
    assert_eq!(bytes.len(), 8 + n + payload);
}

#[test]
fn save_and_load_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.st");
    let ck = common::random_checkpoint(&mut common::rng(2), 2, Some(DType::F32));
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
}

fn arb_tensor() -> impl Strategy<Value = (Vec<usize>, bool, Vec<f64>)> {
    (prop::collection::vec(1usize..4, 1..4), any::<bool>()).prop_flat_map(|(shape, f32)| {
        let n = shape.iter().product::<usize>();
        (Just(shape), Just(f32), prop::collection::vec(-1e6f64..1e6, n))
    })
}

proptest! {
    #[test]
    fn round_trip_is_identity(tensors in prop::collection::btree_map("[a-z]{1,6}(\\.[a-z]{1,4})?", arb_tensor(), 0..6)) {
        let ck = Checkpoint::from_tensors(tensors.iter().map(|(name, (shape, f32, vals))| {
            let dtype = if *f32 { DType::F32 } else { DType::F64 };
            Tensor::from_f64(name.clone(), shape.clone(), dtype, vals).unwrap()
        }))
        .unwrap();
        let bytes = write_checkpoint(&ck);
        let back = read_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(write_checkpoint(&back), bytes);
    }

    #[test]
    fn f64_values_are_exact(vals in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..20)) {
        let t = Tensor::from_f64("t", vec![vals.len()], DType::F64, &vals).unwrap();
        let ck = Checkpoint::from_tensors([t]).unwrap();
        let back = read_checkpoint(&write_checkpoint(&ck)).unwrap();
        prop_assert_eq!(back.get("t").unwrap().to_f64(), vals);
    }

    #[test]
    fn truncation_never_panics(cut in 0usize..200) {
        let ck = common::random_checkpoint(&mut common::rng(3), 2, None);
        let bytes = write_checkpoint(&ck);
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(read_checkpoint(&bytes[..cut]).is_err());
    }
}
