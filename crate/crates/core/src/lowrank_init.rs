//! Exact minimization of `‖X(ABᵀ − ΔW)‖²_F` over rank-r factor pairs.
//!
//! With `H = XᵀX = U_H Σ_H U_Hᵀ` and the root `R = Σ_H^{1/2} U_Hᵀ` (so that
//! `RᵀR = H`), the objective equals `‖R·ABᵀ − R·ΔW‖²_F`. Its minimizers are
//! exactly the pairs with `R·ABᵀ = LR_r(RΔW)`, the truncated SVD of `RΔW`,
//! hence `ABᵀ = R⁻¹ LR_r(RΔW)` (or `R†` when `H` is singular). The optimal
//! value is the tail energy `Σ_{i>r} σ_i(RΔW)²`.

use nalgebra::{DMatrix, DVector, SVD};
use serde::{Deserialize, Serialize};

use crate::calibration::DampedGram;
use crate::error::{Error, Result};
use crate::ptq_solver::{self, weighted_objective, PtqConfig, PtqResult};
use crate::scalar::Real;

pub const DEFAULT_RANK: usize = 64;
pub const DEFAULT_EIG_FLOOR: f64 = 1e-12;

/// How the singular values of `LR_r(RΔW) = U Σ Vᵀ` are split between factors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// `A = R⁻¹UΣ`, `B = V`.
    #[default]
    #[serde(rename = "a-sigma")]
    ASigma,
    /// `A = R⁻¹U`, `B = VΣ`.
    #[serde(rename = "b-sigma")]
    BSigma,
    /// `A = R⁻¹UΣ^{1/2}`, `B = VΣ^{1/2}`.
    #[serde(rename = "split-sqrt")]
    SplitSqrt,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::ASigma, Variant::BSigma, Variant::SplitSqrt];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::ASigma => "a-sigma",
            Variant::BSigma => "b-sigma",
            Variant::SplitSqrt => "split-sqrt",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub rank: usize,
    pub variant: Variant,
    pub altmin_iters: usize,
    pub eig_floor_ratio: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            rank: DEFAULT_RANK,
            variant: Variant::ASigma,
            altmin_iters: 1,
            eig_floor_ratio: DEFAULT_EIG_FLOOR,
        }
    }
}

impl InitConfig {
    pub fn with_rank(rank: usize) -> Self {
        Self {
            rank,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidConfig("rank must be >= 1".into()));
        }
        if self.altmin_iters == 0 {
            return Err(Error::InvalidConfig("altmin_iters must be >= 1".into()));
        }
        if !(self.eig_floor_ratio >= 0.0 && self.eig_floor_ratio < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "eig_floor_ratio must lie in [0, 1), got {}",
                self.eig_floor_ratio
            )));
        }
        Ok(())
    }
}

/// Non-symmetric root `R` of a Gram matrix and its (pseudo-)inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct RootTransform<T: Real> {
    pub r: DMatrix<T>,
    pub r_inv: DMatrix<T>,
    /// Number of eigenvalues above the floor.
    pub rank: usize,
    /// Absolute eigenvalue threshold used for the rank decision.
    pub eig_floor: T,
    /// Eigenvalues of `H`, descending, negatives clamped to zero.
    pub eigenvalues: DVector<T>,
}

impl<T: Real> RootTransform<T> {
    pub fn dim(&self) -> usize {
        self.r.nrows()
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank == self.dim()
    }

    /// The trivial root of `I`.
    pub fn identity(m: usize) -> Self {
        Self {
            r: DMatrix::identity(m, m),
            r_inv: DMatrix::identity(m, m),
            rank: m,
            eig_floor: T::zero(),
            eigenvalues: DVector::from_element(m, T::one()),
        }
    }
}

/// Builds `R = Σ^{1/2}Uᵀ` from the eigendecomposition of `H`.
///
/// `R` uses every component; the inverse only those with
/// `σ_i > floor_ratio·σ_max`, which makes it the Moore–Penrose inverse of
/// `R` restricted to the retained spectrum.
pub fn build_root<T: Real>(gram: &DampedGram<T>, eig_floor_ratio: f64) -> Result<RootTransform<T>> {
    let h = &gram.matrix;
    if !h.is_square() || h.nrows() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "Gram matrix must be square, got {:?}",
            h.shape()
        )));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Gram matrix".into()));
    }
    let m = h.nrows();
    let sym = (h + h.transpose()) * T::of(0.5);
    let eig = sym
        .try_symmetric_eigen(T::decomp_tol(), 0)
        .ok_or(Error::Decomposition("symmetric eigendecomposition"))?;

    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
    });
    let values = DVector::from_fn(m, |i, _| eig.eigenvalues[order[i]].max(T::zero()));
    let sigma_max = values[0];
    let floor = T::of(eig_floor_ratio) * sigma_max;

    let mut r = DMatrix::zeros(m, m);
    let mut r_inv = DMatrix::zeros(m, m);
    let mut rank = 0;
    for (i, &src) in order.iter().enumerate() {
        let u = eig.eigenvectors.column(src);
        let s = values[i].sqrt();
        r.row_mut(i).copy_from(&(u.transpose() * s));
        if values[i] > floor && values[i] > T::zero() {
            r_inv.column_mut(i).copy_from(&(u / s));
            rank += 1;
        }
    }
    Ok(RootTransform {
        r,
        r_inv,
        rank,
        eig_floor: floor,
        eigenvalues: values,
    })
}

/// Leading singular triplets of a matrix plus its full spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSvd<T: Real> {
    /// m × r, orthonormal columns.
    pub u: DMatrix<T>,
    /// r leading singular values, non-increasing.
    pub singular_values: DVector<T>,
    /// n × r, orthonormal columns.
    pub v: DMatrix<T>,
    /// All min(m, n) singular values, non-increasing.
    pub spectrum: DVector<T>,
}

impl<T: Real> TruncatedSvd<T> {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `Σ_{i>r} σ_i²`
    pub fn tail_energy(&self) -> T {
        self.spectrum
            .iter()
            .skip(self.rank())
            .fold(T::zero(), |a, &s| a + s * s)
    }

    /// `UΣVᵀ`
    pub fn reconstruct(&self) -> DMatrix<T> {
        let mut us = self.u.clone();
        for (mut c, &s) in us.column_iter_mut().zip(self.singular_values.iter()) {
            c *= s;
        }
        us * self.v.transpose()
    }
}

/// Best rank-r approximation `LR_r(M)` in Frobenius norm.
///
/// Signs are canonical: the largest-magnitude entry of every `V` column is
/// non-negative.
pub fn truncated_lr<T: Real>(m: &DMatrix<T>, r: usize) -> Result<TruncatedSvd<T>> {
    let (rows, cols) = m.shape();
    if r == 0 || r > rows.min(cols) {
        return Err(Error::RankExceedsDimension {
            rank: r,
            m: rows,
            n: cols,
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix to factorize".into()));
    }
    let svd = SVD::try_new(m.clone(), true, true, T::decomp_tol(), 0).ok_or(Error::Decomposition("SVD"))?;
    let u_full = svd.u.expect("requested U");
    let vt_full = svd.v_t.expect("requested Vᵀ");
    let spectrum = svd.singular_values;

    let mut u = u_full.columns(0, r).into_owned();
    let mut v = vt_full.rows(0, r).transpose();
    for k in 0..r {
        let col = v.column(k);
        let (imax, _) = col
            .iter()
            .enumerate()
            .fold((0, T::zero()), |(bi, bv), (i, &x)| if x.abs() > bv { (i, x.abs()) } else { (bi, bv) });
        if col[imax] < T::zero() {
            v.column_mut(k).neg_mut();
            u.column_mut(k).neg_mut();
        }
    }
    Ok(TruncatedSvd {
        u,
        singular_values: spectrum.rows(0, r).into_owned(),
        v,
        spectrum,
    })
}

/// Rank-r factors `A` (m × r) and `B` (n × r).
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair<T: Real> {
    pub a: DMatrix<T>,
    pub b: DMatrix<T>,
    pub variant: Variant,
    /// Full singular spectrum of the transformed residual `RΔW`.
    pub spectrum: DVector<T>,
}

impl<T: Real> AdapterPair<T> {
    pub fn rank(&self) -> usize {
        self.a.ncols()
    }

    pub fn product(&self) -> DMatrix<T> {
        &self.a * self.b.transpose()
    }

    /// Optimal value of the weighted objective, `Σ_{i>r} σ_i(RΔW)²`.
    pub fn tail_energy(&self) -> T {
        self.spectrum
            .iter()
            .skip(self.rank())
            .fold(T::zero(), |a, &s| a + s * s)
    }
}

/// Splits `LR_r = UΣVᵀ` into factors according to `variant`, mapping the
/// left factor back through `R⁻¹`.
pub fn factorize<T: Real>(
    lr: &TruncatedSvd<T>,
    r_inv: &DMatrix<T>,
    variant: Variant,
) -> (DMatrix<T>, DMatrix<T>) {
    let mut left = lr.u.clone();
    let mut right = lr.v.clone();
    for (k, &s) in lr.singular_values.iter().enumerate() {
        let (ls, rs) = match variant {
            Variant::ASigma => (s, T::one()),
            Variant::BSigma => (T::one(), s),
            Variant::SplitSqrt => (s.sqrt(), s.sqrt()),
        };
        left.column_mut(k).scale_mut(ls);
        right.column_mut(k).scale_mut(rs);
    }
    (r_inv * left, right)
}

/// Closed-form optimal `(A, B)` for residual `ΔW` under the root transform.
pub fn cloq_init<T: Real>(
    delta_w: &DMatrix<T>,
    root: &RootTransform<T>,
    cfg: &InitConfig,
) -> Result<AdapterPair<T>> {
    cfg.validate()?;
    let (m, n) = delta_w.shape();
    if root.dim() != m {
        return Err(Error::DimensionMismatch(format!(
            "root is {0}x{0}, residual has {m} rows",
            root.dim()
        )));
    }
    if cfg.rank > m.min(n) {
        return Err(Error::RankExceedsDimension {
            rank: cfg.rank,
            m,
            n,
        });
    }
    let transformed = &root.r * delta_w;
    let lr = truncated_lr(&transformed, cfg.rank)?;
    let (a, b) = factorize(&lr, &root.r_inv, cfg.variant);
    Ok(AdapterPair {
        a,
        b,
        variant: cfg.variant,
        spectrum: lr.spectrum,
    })
}

/// Objective values around one low-rank step of the alternating scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AltMinStep<T> {
    /// `‖X(Q^{t+1} + A^t B^tᵀ − W)‖_F`
    pub before: T,
    /// `‖X(Q^{t+1} + A^{t+1} B^{t+1}ᵀ − W)‖_F`
    pub after: T,
}

/// Quantized weight, adapters, and diagnostics for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerInitResult<T: Real> {
    pub ptq: PtqResult<T>,
    pub adapters: AdapterPair<T>,
    /// `‖X(Q − W)‖_F`
    pub obj_q_only: T,
    /// `‖X(Q + ABᵀ − W)‖_F`
    pub obj_total: T,
    /// `‖Q − W‖_F`
    pub plain_q_only: T,
    /// `‖Q + ABᵀ − W‖_F`
    pub plain_total: T,
    pub lambda: T,
    pub root_rank: usize,
    pub altmin: Vec<AltMinStep<T>>,
}

impl<T: Real> LayerInitResult<T> {
    pub fn q(&self) -> &DMatrix<T> {
        &self.ptq.q
    }
}

/// Alternating minimization over `Q` and `(A, B)` starting from `ABᵀ = 0`.
///
/// Iteration t quantizes `W − A^t B^tᵀ` and then solves the low-rank step
/// exactly on `W − Q^{t+1}`. One iteration is the standard pipeline.
pub fn altmin_refine<T: Real>(
    w: &DMatrix<T>,
    gram: &DampedGram<T>,
    cfg_ptq: &PtqConfig,
    cfg_init: &InitConfig,
) -> Result<LayerInitResult<T>> {
    let root = build_root(gram, cfg_init.eig_floor_ratio)?;
    altmin_with_root(w, gram, &root, cfg_ptq, cfg_init)
}

/// [`altmin_refine`] with a precomputed root of `gram`.
pub fn altmin_with_root<T: Real>(
    w: &DMatrix<T>,
    gram: &DampedGram<T>,
    root: &RootTransform<T>,
    cfg_ptq: &PtqConfig,
    cfg_init: &InitConfig,
) -> Result<LayerInitResult<T>> {
    cfg_init.validate()?;
    let (m, n) = w.shape();
    if gram.dim() != m || root.dim() != m {
        return Err(Error::DimensionMismatch(format!(
            "Gram is {0}x{0}, weight has {m} rows",
            gram.dim()
        )));
    }
    if cfg_init.rank > m.min(n) {
        return Err(Error::RankExceedsDimension {
            rank: cfg_init.rank,
            m,
            n,
        });
    }
    let h = &gram.matrix;
    let mut ab = DMatrix::zeros(m, n);
    let mut trace = Vec::with_capacity(cfg_init.altmin_iters);
    let mut last = None;
    for t in 0..cfg_init.altmin_iters {
        let target = if t == 0 { w.clone() } else { w - &ab };
        let ptq = ptq_solver::solve(&target, Some(gram), cfg_ptq)?;
        let residual = w - &ptq.q;
        let before = weighted_objective(&(&ab - &residual), h)?;
        let adapters = cloq_init(&residual, root, cfg_init)?;
        ab = adapters.product();
        let after = weighted_objective(&(&ab - &residual), h)?;
        trace.push(AltMinStep { before, after });
        last = Some((ptq, adapters));
    }
    let (ptq, adapters) = last.expect("altmin_iters >= 1");
    let residual = w - &ptq.q;
    let obj_q_only = weighted_objective(&residual, h)?;
    let obj_total = weighted_objective(&(&ab - &residual), h)?;
    Ok(LayerInitResult {
        obj_q_only,
        obj_total,
        plain_q_only: residual.norm(),
        plain_total: (&ab - &residual).norm(),
        lambda: gram.lambda,
        root_rank: root.rank,
        altmin: trace,
        ptq,
        adapters,
    })
}

/// One layer end to end: quantize, then initialize the adapters.
pub fn layer_pipeline<T: Real>(
    w: &DMatrix<T>,
    gram: &DampedGram<T>,
    cfg_ptq: &PtqConfig,
    cfg_init: &InitConfig,
) -> Result<LayerInitResult<T>> {
    altmin_refine(w, gram, cfg_ptq, cfg_init)
}

/// Unweighted baseline `ABᵀ = LR_r(ΔW)`, i.e. the closed form with `R = I`.
pub fn plain_lowrank<T: Real>(delta_w: &DMatrix<T>, rank: usize) -> Result<DMatrix<T>> {
    Ok(truncated_lr(delta_w, rank)?.reconstruct())
}
