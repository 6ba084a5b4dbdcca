//! Layer-wise post-training quantization: `min_{Q on grid} ‖X(Q − W)‖²_F`.
//!
//! Two solvers are provided. RTN projects every entry independently. The
//! greedy sweep quantizes input-feature rows in order and pushes each row's
//! rounding error onto the rows not yet quantized, using the lower Cholesky
//! factor `L` of `H⁻¹`: `W[j,:] -= (L[j,i]/L[i,i])·e_i` for `j > i`.
//! Grids are fitted once on the (optionally preprocessed) weights and stay
//! fixed through the sweep.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::calibration::{DampedGram, DEFAULT_DAMP_RATIO};
use crate::error::{Error, Result};
use crate::quant_grid::{GridSet, QuantConfig};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PtqMethod {
    Rtn,
    #[default]
    Optq,
}

/// ℓ∞-regularized magnitude reduction applied before quantization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MagrConfig {
    /// Penalty weight; `None` picks `1e-3·mean|W|`.
    pub alpha: Option<f64>,
    pub iters: usize,
    pub tol: f64,
}

impl Default for MagrConfig {
    fn default() -> Self {
        Self {
            alpha: None,
            iters: 50,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PtqConfig {
    pub method: PtqMethod,
    pub quant: QuantConfig,
    pub magr: Option<MagrConfig>,
    pub damp_ratio: f64,
}

impl Default for PtqConfig {
    fn default() -> Self {
        Self {
            method: PtqMethod::Optq,
            quant: QuantConfig::default(),
            magr: None,
            damp_ratio: DEFAULT_DAMP_RATIO,
        }
    }
}

impl PtqConfig {
    pub fn validate(&self) -> Result<()> {
        self.quant.validate()?;
        if !(self.damp_ratio >= 0.0 && self.damp_ratio.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "damp_ratio must be finite and >= 0, got {}",
                self.damp_ratio
            )));
        }
        if let Some(magr) = &self.magr {
            if magr.iters == 0 {
                return Err(Error::InvalidConfig("magr.iters must be >= 1".into()));
            }
            if let Some(a) = magr.alpha {
                if !(a > 0.0 && a.is_finite()) {
                    return Err(Error::InvalidConfig(format!("magr.alpha must be > 0, got {a}")));
                }
            }
        }
        Ok(())
    }
}

/// Outcome of the magnitude-reduction preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct MagrOutcome<T: Real> {
    pub weights: DMatrix<T>,
    pub alpha: T,
    /// Summed objective, starting with the value at the input weights.
    pub objective_trace: Vec<T>,
    /// Per-column objective at every iterate (row = iterate).
    pub column_trace: Vec<DVector<T>>,
    pub iterations: usize,
    /// `false` when `iters` ran out before the relative change fell below `tol`.
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PtqResult<T: Real> {
    /// Dequantized weights, every entry on its grid.
    pub q: DMatrix<T>,
    pub codes: DMatrix<u8>,
    pub grids: GridSet<T>,
    /// `‖X(Q − W)‖_F` against the input `W`, when a Gram was supplied.
    pub obj_weighted: Option<T>,
    pub obj_plain: T,
    /// The matrix actually quantized (post-preprocessing).
    pub w_pre: DMatrix<T>,
    pub magr: Option<MagrOutcome<T>>,
}

/// `sqrt(Tr(MᵀHM))`, i.e. `‖XM‖_F` when `H = XᵀX`.
pub fn weighted_objective<T: Real>(m: &DMatrix<T>, h: &DMatrix<T>) -> Result<T> {
    if h.nrows() != m.nrows() || !h.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "weighted objective: M is {:?}, H is {:?}",
            m.shape(),
            h.shape()
        )));
    }
    let hm = h * m;
    let tr = m.dot(&hm);
    Ok(tr.max(T::zero()).sqrt())
}

fn check_finite<T: Real>(w: &DMatrix<T>, what: &str) -> Result<()> {
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    Ok(())
}

/// Round-to-nearest, independent of calibration data.
pub fn ptq_rtn<T: Real>(w: &DMatrix<T>, cfg: &PtqConfig) -> Result<PtqResult<T>> {
    cfg.validate()?;
    check_finite(w, "weight matrix")?;
    let grids = GridSet::fit(w, &cfg.quant)?;
    let (q, codes) = grids.quantize(w);
    let obj_plain = (&q - w).norm();
    Ok(PtqResult {
        q,
        codes,
        grids,
        obj_weighted: None,
        obj_plain,
        w_pre: w.clone(),
        magr: None,
    })
}

/// Greedy error-compensating quantization against `H_damped`.
pub fn ptq_optq<T: Real>(
    w: &DMatrix<T>,
    gram: &DampedGram<T>,
    cfg: &PtqConfig,
) -> Result<PtqResult<T>> {
    cfg.validate()?;
    check_finite(w, "weight matrix")?;
    let h = &gram.matrix;
    let (m, n) = w.shape();
    if h.nrows() != m || !h.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "Gram is {:?}, weight has {m} rows",
            h.shape()
        )));
    }

    let magr = match &cfg.magr {
        Some(mc) => {
            let alpha = mc.alpha.map(T::of).unwrap_or_else(|| default_magr_alpha(w));
            Some(magr_preprocess(w, gram, alpha, mc.iters, mc.tol)?)
        }
        None => None,
    };
    let w_pre = magr.as_ref().map_or_else(|| w.clone(), |o| o.weights.clone());

    let grids = GridSet::fit(&w_pre, &cfg.quant)?;
    let l = inverse_cholesky_lower(h)?;

    let mut work = w_pre.clone();
    let mut q = DMatrix::zeros(m, n);
    let mut codes = DMatrix::zeros(m, n);
    let mut err = DVector::zeros(n);
    for i in 0..m {
        for j in 0..n {
            let k = grids.code(i, j, work[(i, j)]);
            codes[(i, j)] = k;
            q[(i, j)] = grids.grid(i, j).dequantize(k);
            err[j] = work[(i, j)] - q[(i, j)];
        }
        let d = l[(i, i)];
        for r in i + 1..m {
            let coef = l[(r, i)] / d;
            if coef != T::zero() {
                for j in 0..n {
                    work[(r, j)] -= coef * err[j];
                }
            }
        }
    }

    let obj_weighted = Some(weighted_objective(&(&q - w), h)?);
    let obj_plain = (&q - w).norm();
    Ok(PtqResult {
        q,
        codes,
        grids,
        obj_weighted,
        obj_plain,
        w_pre,
        magr,
    })
}

/// Dispatches on `cfg.method`; fills the weighted objective whenever a Gram
/// is available.
pub fn solve<T: Real>(
    w: &DMatrix<T>,
    gram: Option<&DampedGram<T>>,
    cfg: &PtqConfig,
) -> Result<PtqResult<T>> {
    match (cfg.method, gram) {
        (PtqMethod::Optq, Some(g)) => ptq_optq(w, g, cfg),
        (PtqMethod::Optq, None) => Err(Error::InvalidConfig(
            "the optq method requires calibration data".into(),
        )),
        (PtqMethod::Rtn, g) => {
            let mut res = ptq_rtn(w, cfg)?;
            if let Some(g) = g {
                res.obj_weighted = Some(weighted_objective(&(&res.q - w), &g.matrix)?);
            }
            Ok(res)
        }
    }
}

/// Lower Cholesky factor of `H⁻¹`.
fn inverse_cholesky_lower<T: Real>(h: &DMatrix<T>) -> Result<DMatrix<T>> {
    let chol = h.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
    let mut inv = chol.inverse();
    inv = (&inv + inv.transpose()) * T::of(0.5);
    let chol_inv = inv.cholesky().ok_or(Error::NotPositiveDefinite)?;
    Ok(chol_inv.l())
}

pub fn default_magr_alpha<T: Real>(w: &DMatrix<T>) -> T {
    let mean_abs = w.iter().fold(T::zero(), |a, v| a + v.abs()) / T::of(w.len().max(1) as f64);
    T::of(1e-3) * mean_abs
}

/// Euclidean projection of `v` onto the ℓ1 ball of the given radius.
pub fn project_l1_ball<T: Real>(v: &[T], radius: T) -> Vec<T> {
    let l1 = v.iter().fold(T::zero(), |a, x| a + x.abs());
    if l1 <= radius {
        return v.to_vec();
    }
    if radius <= T::zero() {
        return vec![T::zero(); v.len()];
    }
    let mut mags: Vec<T> = v.iter().map(|x| x.abs()).collect();
    mags.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let mut cum = T::zero();
    let mut theta = T::zero();
    for (j, &u) in mags.iter().enumerate() {
        cum += u;
        let t = (cum - radius) / T::of((j + 1) as f64);
        if u > t {
            theta = t;
        } else {
            break;
        }
    }
    v.iter()
        .map(|&x| {
            let s = (x.abs() - theta).max(T::zero());
            if x < T::zero() {
                -s
            } else {
                s
            }
        })
        .collect()
}

/// `prox_{t‖·‖∞}(v) = v − P_{‖·‖₁ ≤ t}(v)`.
pub fn prox_linf<T: Real>(v: &[T], t: T) -> Vec<T> {
    let p = project_l1_ball(v, t);
    v.iter().zip(p).map(|(&a, b)| a - b).collect()
}

fn column_objectives<T: Real>(
    x: &DMatrix<T>,
    w: &DMatrix<T>,
    h: &DMatrix<T>,
    alpha: T,
) -> DVector<T> {
    let d = x - w;
    let hd = h * &d;
    DVector::from_fn(x.ncols(), |j, _| {
        let quad = d.column(j).dot(&hd.column(j));
        quad + alpha * x.column(j).amax()
    })
}

/// Proximal-gradient minimization, per output column, of
/// `(x − w)ᵀH(x − w) + α‖x‖∞` starting from `x = w`.
///
/// The step is `1/L` with `L = 2λ_max(H)`; a column whose objective would
/// rise (rounding) keeps its previous iterate, so every column's objective
/// is non-increasing and `‖x‖∞ ≤ ‖w‖∞` holds throughout.
pub fn magr_preprocess<T: Real>(
    w: &DMatrix<T>,
    gram: &DampedGram<T>,
    alpha: T,
    iters: usize,
    tol: f64,
) -> Result<MagrOutcome<T>> {
    let h = &gram.matrix;
    if h.nrows() != w.nrows() || !h.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "Gram is {:?}, weight has {} rows",
            h.shape(),
            w.nrows()
        )));
    }
    if !(alpha > T::zero()) {
        return Err(Error::InvalidConfig("magr alpha must be > 0".into()));
    }
    if iters == 0 {
        return Err(Error::InvalidConfig("magr iters must be >= 1".into()));
    }
    let lmax = h
        .clone()
        .try_symmetric_eigen(T::decomp_tol(), 0)
        .ok_or(Error::Decomposition("symmetric eigendecomposition"))?
        .eigenvalues
        .iter()
        .fold(T::zero(), |a, &v| a.max(v));
    let mut x = w.clone();
    let mut col_obj = column_objectives(&x, w, h, alpha);
    let mut objective_trace = vec![col_obj.sum()];
    let mut column_trace = vec![col_obj.clone()];
    if lmax <= T::zero() {
        // No data term: the minimizer is 0 for every column.
        x.fill(T::zero());
        let obj = column_objectives(&x, w, h, alpha);
        objective_trace.push(obj.sum());
        column_trace.push(obj);
        return Ok(MagrOutcome {
            weights: x,
            alpha,
            objective_trace,
            column_trace,
            iterations: 1,
            converged: true,
        });
    }
    let step = T::one() / (T::of(2.0) * lmax);
    let thresh = alpha * step;

    let mut converged = false;
    let mut iterations = 0;
    let mut col = vec![T::zero(); w.nrows()];
    while iterations < iters {
        iterations += 1;
        let grad = (h * (&x - w)) * T::of(2.0);
        let mut cand = &x - grad * step;
        for j in 0..cand.ncols() {
            col.clear();
            col.extend(cand.column(j).iter().copied());
            let p = prox_linf(&col, thresh);
            cand.column_mut(j).copy_from_slice(&p);
        }
        let cand_obj = column_objectives(&cand, w, h, alpha);
        for j in 0..cand.ncols() {
            if cand_obj[j] <= col_obj[j] {
                x.set_column(j, &cand.column(j));
                col_obj[j] = cand_obj[j];
            }
        }
        let prev = *objective_trace.last().expect("nonempty");
        let cur = col_obj.sum();
        objective_trace.push(cur);
        column_trace.push(col_obj.clone());
        let rel = if prev > T::zero() { (prev - cur) / prev } else { T::zero() };
        if rel.as_f64() < tol {
            converged = true;
            break;
        }
    }
    Ok(MagrOutcome {
        weights: x,
        alpha,
        objective_trace,
        column_trace,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant_grid::Granularity;

    fn cfg(bits: u8, gran: Granularity, method: PtqMethod) -> PtqConfig {
        PtqConfig {
            method,
            quant: QuantConfig::new(bits, gran),
            ..PtqConfig::default()
        }
    }

    #[test]
    fn objective_basics() {
        let m = DMatrix::<f64>::zeros(3, 2);
        assert_eq!(weighted_objective(&m, &DMatrix::identity(3, 3)).unwrap(), 0.0);
        let m = DMatrix::<f64>::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let v = weighted_objective(&m, &DMatrix::identity(2, 2)).unwrap();
        assert!((v - m.norm()).abs() < 1e-14);
        assert!(weighted_objective(&m, &DMatrix::identity(3, 3)).is_err());
    }

    #[test]
    fn rtn_exact_channels() {
        let w = DMatrix::from_row_slice(4, 2, &[0.0, 3.0, 1.0, 6.0, 2.0, 9.0, 3.0, 12.0]);
        let r = ptq_rtn(&w, &cfg(2, Granularity::PerChannel, PtqMethod::Rtn)).unwrap();
        assert_eq!(r.q, w);
        assert_eq!(r.obj_plain, 0.0);
    }

    #[test]
    fn optq_on_grid_is_identity() {
        let w = DMatrix::from_row_slice(4, 2, &[0.0, 3.0, 1.0, 6.0, 2.0, 9.0, 3.0, 12.0]);
        let h = DMatrix::from_row_slice(
            4,
            4,
            &[4.0, 1.0, 0.5, 0.0, 1.0, 3.0, 0.2, 0.1, 0.5, 0.2, 2.0, 0.3, 0.0, 0.1, 0.3, 1.0],
        );
        let g = DampedGram::undamped(h);
        let r = ptq_optq(&w, &g, &cfg(2, Granularity::PerChannel, PtqMethod::Optq)).unwrap();
        assert_eq!(r.q, w);
        assert_eq!(r.obj_weighted, Some(0.0));
    }

    #[test]
    fn optq_rejects_indefinite() {
        let w = DMatrix::from_row_slice(2, 1, &[0.1, 0.7]);
        let g = DampedGram::undamped(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]));
        assert!(matches!(
            ptq_optq(&w, &g, &cfg(2, Granularity::PerChannel, PtqMethod::Optq)),
            Err(Error::NotPositiveDefinite)
        ));
        assert!(matches!(
            solve(&w, None, &cfg(2, Granularity::PerChannel, PtqMethod::Optq)),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn l1_projection() {
        let p = project_l1_ball(&[3.0f64, -1.0, 0.5], 2.0);
        let l1: f64 = p.iter().map(|v| v.abs()).sum();
        assert!((l1 - 2.0).abs() < 1e-12);
        assert!((p[0] - 2.0).abs() < 1e-12 && p[1] == 0.0 && p[2] == 0.0);
        assert_eq!(project_l1_ball(&[0.1, 0.2], 1.0), vec![0.1, 0.2]);
        // prox of t‖·‖∞ on [3,-1,0.5] with t=2 clips the peak to 1.
        let q = prox_linf(&[3.0f64, -1.0, 0.5], 2.0);
        assert!((q[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn magr_vanishing_penalty() {
        let w = DMatrix::from_row_slice(3, 2, &[0.5, -1.0, 2.0, 0.3, -0.7, 1.1]);
        let g = DampedGram::scaled_identity(3, 1.0);
        let out = magr_preprocess(&w, &g, 1e-12, 50, 1e-6).unwrap();
        assert!((&out.weights - &w).norm() <= 1e-6 * w.norm());
    }

    #[test]
    fn magr_shrinks_peak() {
        let w = DMatrix::<f64>::from_row_slice(3, 1, &[1.0, 0.0, 0.0]);
        let g = DampedGram::scaled_identity(3, 1.0);
        let out = magr_preprocess(&w, &g, 1.0, 200, 1e-12).unwrap();
        // min_x (x-1)^2 + |x| over the peak → x = 0.5.
        assert!((out.weights[(0, 0)] - 0.5).abs() < 1e-9);
        assert!(out.objective_trace.windows(2).all(|p| p[1] <= p[0]));
        assert!(out.converged);
    }
}
