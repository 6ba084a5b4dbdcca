//! Uniform asymmetric b-bit integer quantizer.
//!
//! A grid is a scale `δ > 0` and an integer zero-point `z`. Codes live in
//! `0..=2^b-1` and dequantize to `δ·(k − z)`. Groups partition the input
//! dimension (rows of `W`); every group carries one grid per output column
//! unless the granularity is per-tensor.

use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Rounding applied by the nearest-integer operation on exact ties.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieRule {
    #[default]
    HalfAwayFromZero,
    HalfToEven,
}

impl TieRule {
    pub fn round<T: Real>(self, x: T) -> T {
        match self {
            TieRule::HalfAwayFromZero => x.round(),
            TieRule::HalfToEven => {
                let r = x.round();
                let two = T::one() + T::one();
                if (r - x).abs() == T::of(0.5) {
                    (x / two).round() * two
                } else {
                    r
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One grid for the whole matrix.
    PerTensor,
    /// One grid per output column.
    PerChannel,
    /// One grid per (row-group, output column); the value is the group size.
    PerGroup(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub bits: u8,
    pub granularity: Granularity,
    pub rounding: TieRule,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits: 4,
            granularity: Granularity::PerGroup(64),
            rounding: TieRule::HalfAwayFromZero,
        }
    }
}

impl QuantConfig {
    pub fn new(bits: u8, granularity: Granularity) -> Self {
        Self {
            bits,
            granularity,
            rounding: TieRule::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(Error::InvalidConfig(format!(
                "bits = {} is outside [2, 8]",
                self.bits
            )));
        }
        if let Granularity::PerGroup(g) = self.granularity {
            if g < 2 {
                return Err(Error::InvalidConfig(format!("group size {g} must be >= 2")));
            }
        }
        Ok(())
    }

    pub fn max_code(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    /// Group size for reporting; 0 when grids span whole columns.
    pub fn group_size(&self) -> usize {
        match self.granularity {
            Granularity::PerGroup(g) => g,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantGrid<T> {
    pub scale: T,
    pub zero_point: i32,
    pub bits: u8,
}

impl<T: Real> QuantGrid<T> {
    pub fn max_code(&self) -> u32 {
        (1u32 << self.bits) - 1
    }

    /// `clip(⌊w/δ⌉ + z, 0, 2^b − 1)`
    pub fn code(&self, w: T, rounding: TieRule) -> u8 {
        let k = rounding.round(w / self.scale) + T::of(self.zero_point as f64);
        let k = k.max(T::zero()).min(T::of(self.max_code() as f64));
        k.to_u8().expect("clipped code fits in u8")
    }

    pub fn dequantize(&self, code: u8) -> T {
        self.scale * T::of((code as i64 - self.zero_point as i64) as f64)
    }

    pub fn project(&self, w: T, rounding: TieRule) -> T {
        self.dequantize(self.code(w, rounding))
    }

    /// All representable values, ascending.
    pub fn levels(&self) -> Vec<T> {
        (0..=self.max_code()).map(|k| self.dequantize(k as u8)).collect()
    }
}

/// Codes of one group together with the grid they refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedGroup<T> {
    pub codes: Vec<u8>,
    pub grid: QuantGrid<T>,
}

impl<T: Real> QuantizedGroup<T> {
    pub fn dequantize(&self) -> Vec<T> {
        self.codes.iter().map(|&k| self.grid.dequantize(k)).collect()
    }
}

/// Fits `δ = (max − min)/(2^b − 1)` and `z = −⌊min/δ⌉` to the values.
///
/// A constant group gets `δ = 1, z = −⌊c⌉`, so code 0 reconstructs the
/// nearest integer to the constant.
pub fn fit_grid<T: Real>(w: &[T], cfg: &QuantConfig) -> Result<QuantGrid<T>> {
    if w.is_empty() {
        return Err(Error::DimensionMismatch("cannot fit a grid to an empty group".into()));
    }
    let mut lo = w[0];
    let mut hi = w[0];
    for &v in w {
        if !v.is_finite() {
            return Err(Error::NonFinite("quantization group".into()));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let levels = T::of(cfg.max_code() as f64);
    let scale = (hi - lo) / levels;
    let zero = -cfg.rounding.round(lo / scale);
    let limit = T::of(i32::MAX as f64 / 2.0);
    if hi > lo && scale > T::zero() && zero.abs() < limit {
        return Ok(QuantGrid {
            scale,
            zero_point: zero.to_i32().expect("bounded zero-point"),
            bits: cfg.bits,
        });
    }
    let zero = (-cfg.rounding.round(lo)).max(-limit).min(limit);
    Ok(QuantGrid {
        scale: T::one(),
        zero_point: zero.to_i32().expect("bounded zero-point"),
        bits: cfg.bits,
    })
}

pub fn quantize_rtn<T: Real>(w: &[T], grid: &QuantGrid<T>, rounding: TieRule) -> QuantizedGroup<T> {
    QuantizedGroup {
        codes: w.iter().map(|&v| grid.code(v, rounding)).collect(),
        grid: *grid,
    }
}

/// Splits `0..m` into the row ranges that share a grid.
pub fn partition_rows(m: usize, cfg: &QuantConfig) -> Vec<Range<usize>> {
    match cfg.granularity {
        Granularity::PerTensor | Granularity::PerChannel => vec![0..m],
        Granularity::PerGroup(g) => (0..m.div_ceil(g)).map(|i| i * g..((i + 1) * g).min(m)).collect(),
    }
}

/// Every grid used to quantize one m × n matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSet<T> {
    pub config: QuantConfig,
    pub ranges: Vec<Range<usize>>,
    /// Number of grid columns: `n`, or 1 for per-tensor.
    pub grid_cols: usize,
    /// Row-major `ranges.len() × grid_cols`.
    pub grids: Vec<QuantGrid<T>>,
    row_group: Vec<usize>,
}

impl<T: Real> GridSet<T> {
    /// Fits one grid per (row group, column) of `w` according to `cfg`.
    pub fn fit(w: &DMatrix<T>, cfg: &QuantConfig) -> Result<Self> {
        cfg.validate()?;
        let (m, n) = w.shape();
        if m == 0 || n == 0 {
            return Err(Error::DimensionMismatch("empty weight matrix".into()));
        }
        let ranges = partition_rows(m, cfg);
        let mut row_group = vec![0; m];
        for (g, r) in ranges.iter().enumerate() {
            row_group[r.clone()].fill(g);
        }
        let (grid_cols, grids) = if cfg.granularity == Granularity::PerTensor {
            (1, vec![fit_grid(w.as_slice(), cfg)?])
        } else {
            let mut grids = Vec::with_capacity(ranges.len() * n);
            let mut buf = Vec::new();
            for r in &ranges {
                for j in 0..n {
                    buf.clear();
                    buf.extend(w.view((r.start, j), (r.len(), 1)).iter().copied());
                    grids.push(fit_grid(&buf, cfg)?);
                }
            }
            (n, grids)
        };
        Ok(Self {
            config: *cfg,
            ranges,
            grid_cols,
            grids,
            row_group,
        })
    }

    pub fn nrows(&self) -> usize {
        self.row_group.len()
    }

    pub fn grid(&self, row: usize, col: usize) -> &QuantGrid<T> {
        let c = if self.grid_cols == 1 { 0 } else { col };
        &self.grids[self.row_group[row] * self.grid_cols + c]
    }

    pub fn code(&self, row: usize, col: usize, w: T) -> u8 {
        self.grid(row, col).code(w, self.config.rounding)
    }

    pub fn project(&self, row: usize, col: usize, w: T) -> T {
        self.grid(row, col).project(w, self.config.rounding)
    }

    /// Round-to-nearest on every entry; returns dequantized values and codes.
    pub fn quantize(&self, w: &DMatrix<T>) -> (DMatrix<T>, DMatrix<u8>) {
        let codes = DMatrix::from_fn(w.nrows(), w.ncols(), |i, j| self.code(i, j, w[(i, j)]));
        let q = DMatrix::from_fn(w.nrows(), w.ncols(), |i, j| {
            self.grid(i, j).dequantize(codes[(i, j)])
        });
        (q, codes)
    }

    /// Scales as a `groups × grid_cols` matrix.
    pub fn scales(&self) -> DMatrix<T> {
        DMatrix::from_fn(self.ranges.len(), self.grid_cols, |g, c| {
            self.grids[g * self.grid_cols + c].scale
        })
    }

    pub fn zeros(&self) -> DMatrix<T> {
        DMatrix::from_fn(self.ranges.len(), self.grid_cols, |g, c| {
            T::of(self.grids[g * self.grid_cols + c].zero_point as f64)
        })
    }
}
