//! Calibrated post-training quantization with closed-form low-rank adapter
//! initialization.
//!
//! Given a layer weight `W` (m × n, rows indexed by input features) and the
//! calibration Gram matrix `H = XᵀX + λI`, the crate produces a quantized
//! weight `Q` and rank-r factors `(A, B)` minimizing `‖X(Q + ABᵀ − W)‖²_F`.
//! The quantization step uses RTN or an error-compensating greedy sweep; the
//! low-rank step is solved exactly with two symmetric/singular value
//! decompositions.
//!
//! All numerical code is generic over [`Real`] (`f32` or `f64`); the aliases
//! below pin the `f64` instantiation used by the pipeline.

pub mod calibration;
pub mod diagnostics;
pub mod error;
pub mod lowrank_init;
pub mod ptq_solver;
pub mod quant_grid;
pub mod scalar;
pub mod tensor_store;

pub use error::{Error, ErrorCategory, FormatError, Result};
pub use scalar::Real;

/// Dense matrix in the pipeline's working precision.
pub type Matrix = nalgebra::DMatrix<f64>;
/// Dense vector in the pipeline's working precision.
pub type Vector = nalgebra::DVector<f64>;

pub type GramAccumulator = calibration::GramAccumulator<f64>;
pub type DampedGram = calibration::DampedGram<f64>;
pub type QuantGrid = quant_grid::QuantGrid<f64>;
pub type GridSet = quant_grid::GridSet<f64>;
pub type PtqResult = ptq_solver::PtqResult<f64>;
pub type RootTransform = lowrank_init::RootTransform<f64>;
pub type AdapterPair = lowrank_init::AdapterPair<f64>;
pub type LayerInitResult = lowrank_init::LayerInitResult<f64>;

pub type GramAccumulatorF32 = calibration::GramAccumulator<f32>;
pub type DampedGramF32 = calibration::DampedGram<f32>;
pub type QuantGridF32 = quant_grid::QuantGrid<f32>;
pub type AdapterPairF32 = lowrank_init::AdapterPair<f32>;
