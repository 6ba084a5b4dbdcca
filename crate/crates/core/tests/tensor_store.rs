use cloq_core::tensor_store::{
    decode, encode, read_bundle_file, write_bundle_file, DType, Tensor, TensorBundle,
};
use cloq_core::{Error, FormatError};
use cloq_testkit::{rng, sha256_hex, RngExt};

fn fixed_bundle() -> TensorBundle {
    let mut b = TensorBundle::new();
    b.insert("layer0/W", Tensor::from_f32(vec![3, 2], &[1.0, -2.0, 0.5, 4.0, 8.0, -0.25]).unwrap())
        .unwrap();
    b.insert("layer0/A", Tensor::from_f32_as_f16(vec![3, 1], &[0.1, 0.2, 0.3]).unwrap())
        .unwrap();
    b.insert("layer0/codes", Tensor::from_u8(vec![2, 3], vec![0, 1, 2, 3, 4, 5]).unwrap())
        .unwrap();
    b.set_metadata("origin", "fixture");
    b
}

#[test]
fn two_serializations_hash_equal() {
    let b = fixed_bundle();
    let first = sha256_hex(&encode(&b).unwrap());
    let second = sha256_hex(&encode(&b.clone()).unwrap());
    assert_eq!(first, second);
}

#[test]
fn insertion_order_does_not_change_bytes() {
    let mut b = TensorBundle::new();
    b.set_metadata("origin", "fixture");
    b.insert("layer0/codes", Tensor::from_u8(vec![2, 3], vec![0, 1, 2, 3, 4, 5]).unwrap())
        .unwrap();
    b.insert("layer0/A", Tensor::from_f32_as_f16(vec![3, 1], &[0.1, 0.2, 0.3]).unwrap())
        .unwrap();
    b.insert("layer0/W", Tensor::from_f32(vec![3, 2], &[1.0, -2.0, 0.5, 4.0, 8.0, -0.25]).unwrap())
        .unwrap();
    assert_eq!(encode(&b).unwrap(), encode(&fixed_bundle()).unwrap());
}

#[test]
fn f16_bytes_survive_unchanged() {
    let mut r = rng(7);
    let raw: Vec<u8> = (0..64).map(|_| r.random()).collect();
    let mut b = TensorBundle::new();
    b.insert("h", Tensor::new(DType::F16, vec![4, 8], raw.clone()).unwrap())
        .unwrap();
    let back = decode(&encode(&b).unwrap()).unwrap();
    let t = back.get("h").unwrap();
    assert_eq!(t.dtype(), DType::F16);
    assert_eq!(t.bytes(), raw.as_slice());
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.clqb");
    let b = fixed_bundle();
    let n = write_bundle_file(&b, &path).unwrap();
    assert_eq!(n, std::fs::metadata(&path).unwrap().len());
    assert_eq!(read_bundle_file(&path).unwrap(), b);
}

#[test]
fn truncation_inside_payload_names_entry() {
    let bytes = encode(&fixed_bundle()).unwrap();
    // layer0/codes sorts last; its 6 bytes open the final 64-byte block
    let cut = &bytes[..bytes.len() - 64 + 3];
    match decode(cut) {
        Err(Error::Format(FormatError::Truncated { entry })) => assert_eq!(entry, "layer0/codes"),
        other => panic!("expected truncation, got {other:?}"),
    }
}
