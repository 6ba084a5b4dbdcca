//! Calibration Gram matrices `H = XᵀX` and their diagonal damping.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor_store::{LayerRecord, TensorBundle};

/// Rows streamed per accumulation block when ingesting activations.
pub const ACTIVATION_BLOCK_ROWS: usize = 512;
/// Relative Frobenius asymmetry tolerated in a precomputed Gram.
pub const SYMMETRY_TOL: f64 = 1e-6;
/// Eigenvalues down to `-PSD_TOL·‖H‖₂` are accepted as rounding noise.
pub const PSD_TOL: f64 = 1e-8;
pub const DEFAULT_DAMP_RATIO: f64 = 0.01;

/// Running sum of `batchᵀ·batch` over calibration batches.
#[derive(Debug, Clone, PartialEq)]
pub struct GramAccumulator<T: Real> {
    sum: DMatrix<T>,
    sample_rows: usize,
}

impl<T: Real> GramAccumulator<T> {
    pub fn new(m: usize) -> Self {
        Self {
            sum: DMatrix::zeros(m, m),
            sample_rows: 0,
        }
    }

    /// Wraps an already formed Gram matrix.
    pub fn from_gram(gram: DMatrix<T>, sample_rows: usize) -> Result<Self> {
        if !gram.is_square() || gram.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "Gram matrix must be square and nonempty, got {:?}",
                gram.shape()
            )));
        }
        Ok(Self {
            sum: gram,
            sample_rows,
        })
    }

    pub fn dim(&self) -> usize {
        self.sum.nrows()
    }

    pub fn sample_rows(&self) -> usize {
        self.sample_rows
    }

    pub fn gram(&self) -> &DMatrix<T> {
        &self.sum
    }

    pub fn into_gram(self) -> DMatrix<T> {
        self.sum
    }

    pub fn accumulate(&mut self, batch: &DMatrix<T>) -> Result<()> {
        if batch.ncols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "activation batch has {} columns, Gram dimension is {}",
                batch.ncols(),
                self.dim()
            )));
        }
        if batch.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("activation batch".into()));
        }
        self.sum.gemm_tr(T::one(), batch, batch, T::one());
        self.sample_rows += batch.nrows();
        Ok(())
    }

    /// Returns `H + λI` with `λ = ratio·Tr(H)/m`.
    ///
    /// A zero trace leaves `λ = 0` and sets [`DampedGram::degenerate`].
    pub fn damp(&self, ratio: f64) -> Result<DampedGram<T>> {
        if !(ratio >= 0.0 && ratio.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "damping ratio must be finite and >= 0, got {ratio}"
            )));
        }
        let m = self.dim();
        let trace = self.sum.trace();
        let degenerate = trace <= T::zero();
        let lambda = if degenerate {
            T::zero()
        } else {
            T::of(ratio) * trace / T::of(m as f64)
        };
        let mut matrix = self.sum.clone();
        for i in 0..m {
            matrix[(i, i)] += lambda;
        }
        Ok(DampedGram {
            matrix,
            lambda,
            trace_pre: trace,
            degenerate: degenerate && ratio > 0.0,
        })
    }
}

/// `H + λI` together with the damping that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct DampedGram<T: Real> {
    pub matrix: DMatrix<T>,
    pub lambda: T,
    pub trace_pre: T,
    /// Damping was requested but `Tr(H) = 0`.
    pub degenerate: bool,
}

impl<T: Real> DampedGram<T> {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `c·I`, the Gram of whitened activations.
    pub fn scaled_identity(m: usize, c: T) -> Self {
        Self {
            matrix: DMatrix::identity(m, m) * c,
            lambda: T::zero(),
            trace_pre: c * T::of(m as f64),
            degenerate: false,
        }
    }

    /// Uses `matrix` as-is (no damping applied).
    pub fn undamped(matrix: DMatrix<T>) -> Self {
        let trace = matrix.trace();
        Self {
            matrix,
            lambda: T::zero(),
            trace_pre: trace,
            degenerate: false,
        }
    }
}

/// Symmetrizes a precomputed Gram after checking it is symmetric and PSD
/// within tolerance.
pub fn validate_gram<T: Real>(gram: DMatrix<T>) -> Result<DMatrix<T>> {
    if !gram.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "Gram matrix must be square, got {:?}",
            gram.shape()
        )));
    }
    if gram.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Gram matrix".into()));
    }
    let norm = gram.norm();
    let asym = (&gram - gram.transpose()).norm();
    if asym > T::of(SYMMETRY_TOL) * norm {
        return Err(Error::AsymmetricGram((asym / norm).as_f64()));
    }
    let sym = (&gram + gram.transpose()) * T::of(0.5);
    let eig = sym
        .clone()
        .try_symmetric_eigen(T::decomp_tol(), 0)
        .ok_or(Error::Decomposition("symmetric eigendecomposition"))?;
    let max_abs = eig.eigenvalues.iter().fold(T::zero(), |a, v| a.max(v.abs()));
    let min = eig.eigenvalues.iter().copied().fold(T::max_value().unwrap(), T::min);
    if min < -T::of(PSD_TOL) * max_abs {
        return Err(Error::NotPsd {
            min_eig: min.as_f64(),
        });
    }
    Ok(sym)
}

/// Builds the accumulator for one layer from either its precomputed Gram or
/// its raw activations.
pub fn gram_from_bundle<T: Real>(
    bundle: &TensorBundle,
    record: &LayerRecord,
) -> Result<GramAccumulator<T>> {
    record.check(true)?;
    if let Some(name) = &record.gram_name {
        let t = bundle.get(name).ok_or_else(|| Error::MissingTensor {
            layer: record.layer_id.clone(),
            entry: name.clone(),
        })?;
        if t.shape() != [record.m, record.m] {
            return Err(Error::DimensionMismatch(format!(
                "{name} has shape {:?}, expected [{m}, {m}]",
                t.shape(),
                m = record.m
            )));
        }
        let gram = validate_gram(t.to_matrix::<T>()?)?;
        return GramAccumulator::from_gram(gram, 0);
    }
    let name = record.activation_name.as_ref().expect("checked above");
    let t = bundle.get(name).ok_or_else(|| Error::MissingTensor {
        layer: record.layer_id.clone(),
        entry: name.clone(),
    })?;
    if t.shape().last() != Some(&record.m) {
        return Err(Error::DimensionMismatch(format!(
            "{name} has shape {:?}, last dim must be {}",
            t.shape(),
            record.m
        )));
    }
    let x = t.to_matrix::<T>()?;
    let mut acc = GramAccumulator::new(record.m);
    let mut start = 0;
    while start < x.nrows() {
        let rows = ACTIVATION_BLOCK_ROWS.min(x.nrows() - start);
        acc.accumulate(&x.rows(start, rows).into_owned())?;
        start += rows;
    }
    Ok(acc)
}
