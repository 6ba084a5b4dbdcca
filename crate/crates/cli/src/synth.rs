//! Seeded synthetic input bundles for demos and tests.

use cloq_core::tensor_store::{names, DType, Tensor, TensorBundle};
use cloq_core::{Matrix, Vector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::CliResult;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub layers: usize,
    pub m: usize,
    pub n: usize,
    /// Calibration rows per layer.
    pub rows: usize,
    /// Condition number of the activation mixing matrix.
    pub cond: f64,
    pub seed: u64,
    /// Store `L/gram` instead of `L/acts`.
    pub store_gram: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            layers: 4,
            m: 64,
            n: 64,
            rows: 256,
            cond: 100.0,
            seed: 0,
            store_gram: false,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Orthogonal factor of a Gaussian matrix.
fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    gaussian(rng, n, n).qr().q()
}

/// Weights with a few outliers and activations `X = G·C`, where `C` has
/// log-spaced singular values from 1 down to `1/cond`.
pub fn synth_layer(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> (Matrix, Matrix) {
    let mut w = gaussian(rng, spec.m, spec.n) * 0.02;
    for _ in 0..(spec.m * spec.n / 100).max(1) {
        let i = rng.random_range(0..spec.m);
        let j = rng.random_range(0..spec.n);
        w[(i, j)] *= 8.0;
    }
    let s = Vector::from_fn(spec.m, |i, _| {
        let t = if spec.m > 1 { i as f64 / (spec.m - 1) as f64 } else { 0.0 };
        spec.cond.powf(-t)
    });
    let c = orthogonal(rng, spec.m) * Matrix::from_diagonal(&s) * orthogonal(rng, spec.m).transpose();
    let x = gaussian(rng, spec.rows, spec.m) * c;
    (w, x)
}

pub fn synth_bundle(spec: &SynthSpec) -> CliResult<TensorBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut b = TensorBundle::new();
    let width = spec.layers.saturating_sub(1).to_string().len();
    for l in 0..spec.layers {
        let id = format!("layer{l:0width$}");
        let (w, x) = synth_layer(&mut rng, spec);
        b.insert(names::weight(&id), Tensor::from_matrix(&w, DType::F32)?)?;
        if spec.store_gram {
            let h = x.transpose() * &x;
            b.insert(names::gram(&id), Tensor::from_matrix(&h, DType::F32)?)?;
        } else {
            b.insert(names::acts(&id), Tensor::from_matrix(&x, DType::F32)?)?;
        }
    }
    b.set_metadata("synthetic_seed", spec.seed.to_string());
    Ok(b)
}
