use cloq_core::calibration::{gram_from_bundle, validate_gram, GramAccumulator};
use cloq_core::tensor_store::{discover_layers, DType, Tensor, TensorBundle};
use cloq_core::Error;
use cloq_testkit::{gaussian, oracle, rel_frob, rng};
use nalgebra::DMatrix;

#[test]
fn accumulate_matches_explicit_gram() {
    let mut r = rng(1);
    let x = gaussian(&mut r, 10, 4);
    let mut acc = GramAccumulator::<f64>::new(4);
    acc.accumulate(&x).unwrap();
    assert!(rel_frob(acc.gram(), &oracle::gram(&x)) <= 1e-12);
    assert_eq!(acc.sample_rows(), 10);
}

#[test]
fn split_batches_add_up() {
    let mut r = rng(2);
    let b1 = gaussian(&mut r, 7, 5);
    let b2 = gaussian(&mut r, 13, 5);
    let mut split = GramAccumulator::<f64>::new(5);
    split.accumulate(&b1).unwrap();
    split.accumulate(&b2).unwrap();
    let mut whole = GramAccumulator::<f64>::new(5);
    let stacked = DMatrix::from_fn(20, 5, |i, j| if i < 7 { b1[(i, j)] } else { b2[(i - 7, j)] });
    whole.accumulate(&stacked).unwrap();
    assert!(rel_frob(split.gram(), whole.gram()) <= 1e-9);
}

#[test]
fn damped_spectrum_is_shifted() {
    let mut r = rng(3);
    let x = gaussian(&mut r, 4, 6);
    let mut acc = GramAccumulator::<f64>::new(6);
    acc.accumulate(&x).unwrap();
    let d = acc.damp(0.01).unwrap();
    let before = oracle::jacobi_eigenvalues(acc.gram());
    let after = oracle::jacobi_eigenvalues(&d.matrix);
    assert!(after[5] >= d.lambda - 1e-10);
    let scale = before[0];
    for (b, a) in before.iter().zip(&after) {
        assert!((a - b - d.lambda).abs() <= 1e-8 * scale);
    }
    let tr = acc.gram().trace() + 6.0 * d.lambda;
    assert!((d.matrix.trace() - tr).abs() <= 1e-12 * tr);
}

#[test]
fn bundle_activations_match_direct_accumulation() {
    let mut r = rng(4);
    let x = gaussian(&mut r, 20, 4);
    let w = gaussian(&mut r, 4, 3);
    let mut b = TensorBundle::new();
    b.insert("l/W", Tensor::from_matrix(&w, DType::F32).unwrap()).unwrap();
    b.insert("l/acts", Tensor::from_matrix(&x, DType::F32).unwrap()).unwrap();
    let rec = &discover_layers(&b).unwrap()[0];
    let from_bundle = gram_from_bundle::<f64>(&b, rec).unwrap();

    let stored = b.matrix::<f64>("l/acts").unwrap().unwrap();
    let mut direct = GramAccumulator::<f64>::new(4);
    direct.accumulate(&stored).unwrap();
    assert!(rel_frob(from_bundle.gram(), direct.gram()) <= 1e-12);
}

#[test]
fn strongly_asymmetric_gram_is_rejected() {
    // ‖H − Hᵀ‖/‖H‖ = 0.5
    let a = 15f64.sqrt();
    let h = DMatrix::from_row_slice(2, 2, &[a, 1.0, -1.0, a]);
    let rel = (&h - h.transpose()).norm() / h.norm();
    assert!((rel - 0.5).abs() < 1e-12);
    assert!(matches!(validate_gram(h), Err(Error::AsymmetricGram(_))));
}

#[test]
fn random_gram_is_psd() {
    let mut r = rng(5);
    let x = gaussian(&mut r, 3, 6);
    let h = oracle::gram(&x);
    for _ in 0..100 {
        let v = gaussian(&mut r, 6, 1);
        assert!((v.transpose() * &h * &v)[(0, 0)] >= -1e-12);
    }
    assert!(validate_gram(h).is_ok());
}
