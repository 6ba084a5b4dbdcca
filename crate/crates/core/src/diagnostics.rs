//! Discrepancy metrics `‖X(Q + ABᵀ − W)‖` and run reports.
//!
//! Norms are evaluated through the damped Gram actually used for the
//! initialization ("damped discrepancy"); the damping `λ` is carried in
//! every report row. The spectral norm is the largest singular value of
//! `R·M` (m × n), so the activation count never enters the cost.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::calibration::DampedGram;
use crate::error::{Error, Result};
use crate::lowrank_init::{build_root, plain_lowrank, LayerInitResult, RootTransform, DEFAULT_EIG_FLOOR};
use crate::ptq_solver::weighted_objective;
use crate::scalar::Real;

pub const REPORT_SCHEMA: &str = "cloq-report/1";
/// Relative slack for the dominance checks, covering rounding only.
pub const DOMINANCE_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Norm {
    Frobenius,
    Spectral,
}

/// `Q + ABᵀ − W`, with the adapter term omitted when `adapters` is `None`.
pub fn residual_matrix<T: Real>(
    w: &DMatrix<T>,
    q: &DMatrix<T>,
    adapters: Option<(&DMatrix<T>, &DMatrix<T>)>,
) -> Result<DMatrix<T>> {
    if w.shape() != q.shape() {
        return Err(Error::DimensionMismatch(format!(
            "W is {:?}, Q is {:?}",
            w.shape(),
            q.shape()
        )));
    }
    let mut m = q - w;
    if let Some((a, b)) = adapters {
        if a.nrows() != w.nrows() || b.nrows() != w.ncols() || a.ncols() != b.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "A is {:?}, B is {:?}, W is {:?}",
                a.shape(),
                b.shape(),
                w.shape()
            )));
        }
        m.gemm(T::one(), a, &b.transpose(), T::one());
    }
    Ok(m)
}

/// Spectral norm of `R·M`.
pub fn spectral_with_root<T: Real>(m: &DMatrix<T>, root: &RootTransform<T>) -> Result<T> {
    let rm = &root.r * m;
    if rm.iter().all(|v| *v == T::zero()) {
        return Ok(T::zero());
    }
    let sv = rm
        .try_svd(false, false, T::decomp_tol(), 0)
        .ok_or(Error::Decomposition("SVD"))?
        .singular_values;
    Ok(sv.iter().fold(T::zero(), |a, &s| a.max(s)))
}

/// `‖X(Q + ABᵀ − W)‖` in the requested norm, measured through `H_damped`.
pub fn discrepancy<T: Real>(
    w: &DMatrix<T>,
    q: &DMatrix<T>,
    a: &DMatrix<T>,
    b: &DMatrix<T>,
    gram: &DampedGram<T>,
    norm: Norm,
) -> Result<T> {
    let m = residual_matrix(w, q, Some((a, b)))?;
    if gram.dim() != w.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "Gram is {0}x{0}, W has {1} rows",
            gram.dim(),
            w.nrows()
        )));
    }
    match norm {
        Norm::Frobenius => weighted_objective(&m, &gram.matrix),
        Norm::Spectral => spectral_with_root(&m, &build_root(gram, DEFAULT_EIG_FLOOR)?),
    }
}

/// One row of the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer_id: String,
    /// `‖X(Q + ABᵀ − W)‖_F`
    pub frob_disc: f64,
    /// `‖X(Q + ABᵀ − W)‖₂`
    pub spec_disc: f64,
    /// `‖X(Q − W)‖_F`
    pub frob_q_only: f64,
    /// Frobenius discrepancy with `ABᵀ = LR_r(ΔW)` substituted.
    pub frob_baseline_loftq: f64,
    pub lambda: f64,
    pub bits: u8,
    pub rank: usize,
    pub group_size: usize,
    pub variant: String,
}

impl LayerReport {
    /// Computes the row for a finished layer, checking the dominance
    /// relations that the closed form guarantees.
    pub fn from_result<T: Real>(
        layer_id: &str,
        w: &DMatrix<T>,
        result: &LayerInitResult<T>,
        gram: &DampedGram<T>,
        root: &RootTransform<T>,
        bits: u8,
        group_size: usize,
    ) -> Result<Self> {
        let h = &gram.matrix;
        let q = result.q();
        let adapters = &result.adapters;
        let m = residual_matrix(w, q, Some((&adapters.a, &adapters.b)))?;
        let frob_disc = weighted_objective(&m, h)?.as_f64();
        let spec_disc = spectral_with_root(&m, root)?.as_f64();
        let residual = w - q;
        let frob_q_only = weighted_objective(&residual, h)?.as_f64();
        let baseline = plain_lowrank(&residual, adapters.rank())?;
        let frob_baseline_loftq = weighted_objective(&(baseline - &residual), h)?.as_f64();
        let row = Self {
            layer_id: layer_id.to_string(),
            frob_disc,
            spec_disc,
            frob_q_only,
            frob_baseline_loftq,
            lambda: gram.lambda.as_f64(),
            bits,
            rank: adapters.rank(),
            group_size,
            variant: adapters.variant.as_str().to_string(),
        };
        row.check()?;
        Ok(row)
    }

    /// Row for a quantization-only run (no adapters).
    pub fn quantization_only<T: Real>(
        layer_id: &str,
        w: &DMatrix<T>,
        q: &DMatrix<T>,
        gram: &DampedGram<T>,
        root: &RootTransform<T>,
        bits: u8,
        group_size: usize,
    ) -> Result<Self> {
        let m = residual_matrix(w, q, None)?;
        let frob = weighted_objective(&m, &gram.matrix)?.as_f64();
        let row = Self {
            layer_id: layer_id.to_string(),
            frob_disc: frob,
            spec_disc: spectral_with_root(&m, root)?.as_f64(),
            frob_q_only: frob,
            frob_baseline_loftq: frob,
            lambda: gram.lambda.as_f64(),
            bits,
            rank: 0,
            group_size,
            variant: "none".into(),
        };
        row.check()?;
        Ok(row)
    }

    /// Norm ordering and dominance: `spec ≤ frob ≤ min(q_only, baseline)`.
    pub fn check(&self) -> Result<()> {
        let slack = |x: f64| x * DOMINANCE_RTOL + 1e-300;
        let all = [self.frob_disc, self.spec_disc, self.frob_q_only, self.frob_baseline_loftq];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Invariant(format!("{}: invalid norm values", self.layer_id)));
        }
        if self.frob_disc > self.frob_q_only + slack(self.frob_q_only) {
            return Err(Error::Invariant(format!(
                "{}: discrepancy {} exceeds quantization-only {}",
                self.layer_id, self.frob_disc, self.frob_q_only
            )));
        }
        if self.frob_disc > self.frob_baseline_loftq + slack(self.frob_baseline_loftq) {
            return Err(Error::Invariant(format!(
                "{}: discrepancy {} exceeds unweighted baseline {}",
                self.layer_id, self.frob_disc, self.frob_baseline_loftq
            )));
        }
        if self.spec_disc > self.frob_disc + slack(self.frob_disc) {
            return Err(Error::Invariant(format!(
                "{}: spectral norm {} exceeds Frobenius norm {}",
                self.layer_id, self.spec_disc, self.frob_disc
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormSummary {
    pub mean: f64,
    pub max: f64,
}

impl NormSummary {
    fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count().max(1) as f64;
        Self {
            mean: values.clone().sum::<f64>() / n,
            max: values.fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub frob_disc: NormSummary,
    pub spec_disc: NormSummary,
    pub frob_q_only: NormSummary,
    pub frob_baseline_loftq: NormSummary,
}

impl Aggregates {
    pub fn from_rows(rows: &[LayerReport]) -> Self {
        Self {
            frob_disc: NormSummary::of(rows.iter().map(|r| r.frob_disc)),
            spec_disc: NormSummary::of(rows.iter().map(|r| r.spec_disc)),
            frob_q_only: NormSummary::of(rows.iter().map(|r| r.frob_q_only)),
            frob_baseline_loftq: NormSummary::of(rows.iter().map(|r| r.frob_baseline_loftq)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub toolkit_version: String,
    /// Discrepancies are measured through `XᵀX + λI`.
    pub metric: String,
    pub config: serde_json::Value,
    pub layers: Vec<LayerReport>,
    pub aggregates: Aggregates,
}

impl RunReport {
    pub fn new(layers: Vec<LayerReport>, config: serde_json::Value) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::EmptyReport);
        }
        let aggregates = Aggregates::from_rows(&layers);
        Ok(Self {
            schema: REPORT_SCHEMA.to_string(),
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            metric: "damped discrepancy".to_string(),
            config,
            layers,
            aggregates,
        })
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::Report(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Table,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            "table" => Ok(Self::Table),
            _ => Err(Error::InvalidConfig(format!("unknown report format {s:?}"))),
        }
    }
}

pub const CSV_HEADER: [&str; 10] = [
    "layer_id",
    "frob_disc",
    "spec_disc",
    "frob_q_only",
    "frob_baseline_loftq",
    "lambda",
    "bits",
    "rank",
    "group_size",
    "variant",
];

/// Writes the report in the requested format.
pub fn emit_report<W: Write>(report: &RunReport, format: ReportFormat, mut sink: W) -> Result<()> {
    if report.layers.is_empty() {
        return Err(Error::EmptyReport);
    }
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut sink, report).map_err(|e| Error::Report(e.to_string()))?;
            sink.write_all(b"\n")?;
        }
        ReportFormat::Csv => {
            let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(&mut sink);
            w.write_record(CSV_HEADER)?;
            for row in &report.layers {
                w.serialize(row)?;
            }
            w.flush()?;
        }
        ReportFormat::Table => {
            let header = format!(
                "{:<32} {:>12} {:>12} {:>12} {:>12} {:>4} {:>5} {:>6} {:<10}",
                "layer", "frob", "spectral", "q-only", "baseline", "bits", "rank", "group", "variant"
            );
            writeln!(sink, "{header}")?;
            writeln!(sink, "{}", "-".repeat(header.len()))?;
            for r in &report.layers {
                writeln!(
                    sink,
                    "{:<32} {:>12.5e} {:>12.5e} {:>12.5e} {:>12.5e} {:>4} {:>5} {:>6} {:<10}",
                    r.layer_id,
                    r.frob_disc,
                    r.spec_disc,
                    r.frob_q_only,
                    r.frob_baseline_loftq,
                    r.bits,
                    r.rank,
                    r.group_size,
                    r.variant
                )?;
            }
            let a = &report.aggregates;
            writeln!(
                sink,
                "{:<32} {:>12.5e} {:>12.5e} {:>12.5e} {:>12.5e}",
                "mean", a.frob_disc.mean, a.spec_disc.mean, a.frob_q_only.mean, a.frob_baseline_loftq.mean
            )?;
            writeln!(
                sink,
                "{:<32} {:>12.5e} {:>12.5e} {:>12.5e} {:>12.5e}",
                "max", a.frob_disc.max, a.spec_disc.max, a.frob_q_only.max, a.frob_baseline_loftq.max
            )?;
        }
    }
    sink.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str) -> LayerReport {
        LayerReport {
            layer_id: id.into(),
            frob_disc: 1.0,
            spec_disc: 0.5,
            frob_q_only: 2.0,
            frob_baseline_loftq: 1.5,
            lambda: 0.01,
            bits: 2,
            rank: 4,
            group_size: 64,
            variant: "a-sigma".into(),
        }
    }

    #[test]
    fn zero_residual_has_zero_discrepancy() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let a = DMatrix::zeros(2, 1);
        let b = DMatrix::zeros(2, 1);
        let g = DampedGram::scaled_identity(2, 3.0);
        assert_eq!(discrepancy(&w, &w, &a, &b, &g, Norm::Frobenius).unwrap(), 0.0);
        assert_eq!(discrepancy(&w, &w, &a, &b, &g, Norm::Spectral).unwrap(), 0.0);
    }

    #[test]
    fn identity_gram_gives_plain_norm() {
        let w = DMatrix::<f64>::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let q = DMatrix::from_row_slice(2, 2, &[1.5, 2.0, 2.0, 4.0]);
        let a = DMatrix::from_row_slice(2, 1, &[0.1, 0.2]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let g = DampedGram::scaled_identity(2, 1.0);
        let expect = (&q + &a * b.transpose() - &w).norm();
        let got = discrepancy(&w, &q, &a, &b, &g, Norm::Frobenius).unwrap();
        assert!((got - expect).abs() < 1e-14);
        assert!(discrepancy(&w, &q, &a, &b, &DampedGram::scaled_identity(3, 1.0), Norm::Frobenius).is_err());
    }

    #[test]
    fn csv_has_ten_columns() {
        let report = RunReport::new(vec![row("l0")], serde_json::json!({})).unwrap();
        let mut out = Vec::new();
        emit_report(&report, ReportFormat::Csv, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], CSV_HEADER.join(","));
        assert_eq!(lines[1].split(',').count(), 10);
    }

    #[test]
    fn empty_report_is_an_error() {
        assert!(matches!(
            RunReport::new(vec![], serde_json::json!({})),
            Err(Error::EmptyReport)
        ));
    }

    #[test]
    fn json_round_trip_and_table() {
        let report = RunReport::new(vec![row("a"), row("b")], serde_json::json!({"k": 1})).unwrap();
        let mut out = Vec::new();
        emit_report(&report, ReportFormat::Json, &mut out).unwrap();
        assert_eq!(RunReport::from_json(&out).unwrap(), report);
        let mut table = Vec::new();
        emit_report(&report, ReportFormat::Table, &mut table).unwrap();
        assert_eq!(String::from_utf8(table).unwrap().lines().count(), 6);
    }

    #[test]
    fn dominance_violation_is_caught() {
        let mut r = row("x");
        r.frob_disc = 3.0;
        assert!(matches!(r.check(), Err(Error::Invariant(_))));
    }
}
