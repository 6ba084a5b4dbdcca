//! Seeded fixtures and reference oracles for the test suites.
//!
//! The oracles here deliberately avoid the code paths they check: Gram
//! matrices and weighted norms use explicit loops, eigenvalues come from a
//! cyclic Jacobi sweep rather than the library's QR-based solver, nearest
//! codes and discrete optima are found by enumeration, and the low-rank
//! optimum is approached by alternating least squares.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub use rand::{self, RngExt};

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn uniform(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

/// Haar-ish random orthogonal matrix from the QR of a Gaussian matrix.
pub fn orthogonal(rng: &mut Rng, n: usize) -> DMatrix<f64> {
    let g = gaussian(rng, n, n);
    let qr = g.qr();
    let (q, r) = (qr.q(), qr.r());
    let mut q = q;
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `U·diag(s)·Vᵀ` with singular values log-spaced from 1 down to `1/cond`.
pub fn ill_conditioned(rng: &mut Rng, n: usize, cond: f64) -> DMatrix<f64> {
    let u = orthogonal(rng, n);
    let v = orthogonal(rng, n);
    let s = DVector::from_fn(n, |i, _| {
        let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
        cond.powf(-t)
    });
    u * DMatrix::from_diagonal(&s) * v.transpose()
}

/// Correlated activations `X = G·C` with `C` of condition number `cond`.
pub fn correlated_activations(rng: &mut Rng, rows: usize, m: usize, cond: f64) -> DMatrix<f64> {
    let g = gaussian(rng, rows, m);
    let c = ill_conditioned(rng, m, cond);
    g * c
}

/// Random `r × r` matrix with singular values in `[1, max_cond]`.
pub fn random_invertible(rng: &mut Rng, r: usize, max_cond: f64) -> DMatrix<f64> {
    let u = orthogonal(rng, r);
    let v = orthogonal(rng, r);
    let s = DVector::from_fn(r, |_, _| rng.random_range(1.0..max_cond));
    u * DMatrix::from_diagonal(&s) * v.transpose()
}

/// A synthetic layer: heavy-ish tailed weights and correlated activations.
pub struct SyntheticLayer {
    pub w: DMatrix<f64>,
    pub x: DMatrix<f64>,
}

pub fn correlated_layer(seed: u64, m: usize, n: usize, rows: usize, cond: f64) -> SyntheticLayer {
    let mut r = rng(seed);
    let mut w = gaussian(&mut r, m, n) * 0.05;
    // a few outliers per layer
    for _ in 0..(m * n / 50).max(1) {
        let i = r.random_range(0..m);
        let j = r.random_range(0..n);
        w[(i, j)] *= 6.0;
    }
    let x = correlated_activations(&mut r, rows, m, cond);
    SyntheticLayer { w, x }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

pub fn rel_frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

pub mod oracle {
    use super::*;

    /// `XᵀX` by explicit summation.
    pub fn gram(x: &DMatrix<f64>) -> DMatrix<f64> {
        let m = x.ncols();
        let mut h = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                let mut s = 0.0;
                for k in 0..x.nrows() {
                    s += x[(k, i)] * x[(k, j)];
                }
                h[(i, j)] = s;
            }
        }
        h
    }

    /// `‖X·M‖_F` by explicit summation.
    pub fn frob_of_product(x: &DMatrix<f64>, m: &DMatrix<f64>) -> f64 {
        let mut total = 0.0;
        for r in 0..x.nrows() {
            for c in 0..m.ncols() {
                let mut s = 0.0;
                for k in 0..x.ncols() {
                    s += x[(r, k)] * m[(k, c)];
                }
                total += s * s;
            }
        }
        total.sqrt()
    }

    /// `Tr(MᵀHM)` by explicit summation.
    pub fn quad_trace(h: &DMatrix<f64>, m: &DMatrix<f64>) -> f64 {
        let mut total = 0.0;
        for c in 0..m.ncols() {
            for i in 0..m.nrows() {
                for j in 0..m.nrows() {
                    total += m[(i, c)] * h[(i, j)] * m[(j, c)];
                }
            }
        }
        total
    }

    /// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations,
    /// sorted descending.
    pub fn jacobi_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
        let n = a.nrows();
        let mut a = (a + a.transpose()) * 0.5;
        for _sweep in 0..100 {
            let mut off = 0.0;
            for p in 0..n {
                for q in p + 1..n {
                    off += a[(p, q)] * a[(p, q)];
                }
            }
            if off.sqrt() <= 1e-300 + 1e-17 * a.norm() {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a[(p, q)];
                    if apq == 0.0 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
        ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
        ev
    }

    /// Singular values via Jacobi on the smaller Gram, descending.
    pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
        let g = if m.nrows() <= m.ncols() {
            m * m.transpose()
        } else {
            m.transpose() * m
        };
        jacobi_eigenvalues(&g).into_iter().map(|v| v.max(0.0).sqrt()).collect()
    }

    /// Code whose grid value `scale·(k − zero)` is closest to `w`.
    pub fn nearest_code(w: f64, scale: f64, zero: i32, bits: u8) -> u8 {
        let mut best = 0u8;
        let mut best_d = f64::INFINITY;
        for k in 0..(1u32 << bits) {
            let d = (scale * (k as f64 - zero as f64) - w).abs();
            if d < best_d {
                best_d = d;
                best = k as u8;
            }
        }
        best
    }

    /// Exhaustive minimum of `sqrt(Tr((Q−W)ᵀH(Q−W)))` over per-entry level
    /// sets.
    pub fn enumerate_discrete_optimum(
        w: &DMatrix<f64>,
        levels: &[Vec<Vec<f64>>],
        h: &DMatrix<f64>,
    ) -> f64 {
        let (m, n) = w.shape();
        let cells: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
        let mut idx = vec![0usize; cells.len()];
        let mut best = f64::INFINITY;
        loop {
            let mut d = DMatrix::zeros(m, n);
            for (c, &(i, j)) in cells.iter().enumerate() {
                d[(i, j)] = levels[i][j][idx[c]] - w[(i, j)];
            }
            best = best.min(quad_trace(h, &d).max(0.0).sqrt());
            let mut c = 0;
            loop {
                if c == cells.len() {
                    return best;
                }
                let (i, j) = cells[c];
                idx[c] += 1;
                if idx[c] < levels[i][j].len() {
                    break;
                }
                idx[c] = 0;
                c += 1;
            }
        }
    }

    /// Sequential error-compensating quantization written directly from
    /// Schur-complement updates of `H⁻¹`; `project(i, c, v)` rounds entry
    /// (i, c) onto its grid.
    pub fn sequential_quantize(
        w: &DMatrix<f64>,
        h: &DMatrix<f64>,
        project: &dyn Fn(usize, usize, f64) -> f64,
    ) -> DMatrix<f64> {
        let (m, n) = w.shape();
        let mut w = w.clone();
        let mut q = DMatrix::zeros(m, n);
        let mut hinv = h.clone().try_inverse().expect("invertible H");
        for i in 0..m {
            for c in 0..n {
                q[(i, c)] = project(i, c, w[(i, c)]);
                let e = (w[(i, c)] - q[(i, c)]) / hinv[(i, i)];
                for j in i + 1..m {
                    w[(j, c)] -= e * hinv[(i, j)];
                }
            }
            let col = hinv.column(i).clone_owned();
            let d = hinv[(i, i)];
            hinv -= &col * col.transpose() / d;
        }
        q
    }

    pub struct AlsOutcome {
        /// Best squared objective over restarts.
        pub best: f64,
        pub per_restart: Vec<f64>,
    }

    fn solve_small(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        // x·a = b  →  x = b·a⁻¹
        a.clone().try_inverse().map(|inv| b * inv)
    }

    /// Alternating least squares for `min ‖X(ABᵀ − Δ)‖²_F` given `H = XᵀX`
    /// (assumed invertible), best of `restarts` random starts.
    pub fn als_lowrank(
        h: &DMatrix<f64>,
        delta: &DMatrix<f64>,
        r: usize,
        restarts: usize,
        max_iters: usize,
        rng: &mut Rng,
    ) -> AlsOutcome {
        let (m, n) = delta.shape();
        let objective = |a: &DMatrix<f64>, b: &DMatrix<f64>| quad_trace(h, &(a * b.transpose() - delta));
        let scale = quad_trace(h, delta).max(f64::MIN_POSITIVE);
        let mut per_restart = Vec::with_capacity(restarts);
        for _ in 0..restarts {
            let mut a = gaussian(rng, m, r);
            let mut b = gaussian(rng, n, r);
            let mut prev = objective(&a, &b);
            for _ in 0..max_iters {
                // A-step: H A (BᵀB) = H Δ B  →  A = Δ B (BᵀB)⁻¹
                match solve_small(&(b.transpose() * &b), &(delta * &b)) {
                    Some(next) => a = next,
                    None => break,
                }
                // B-step: B (AᵀHA) = Δᵀ H A
                let ha = h * &a;
                match solve_small(&(a.transpose() * &ha), &(delta.transpose() * &ha)) {
                    Some(next) => b = next,
                    None => break,
                }
                let cur = objective(&a, &b);
                let grad_a = (h * (&a * b.transpose() - delta)) * &b;
                let stationarity = grad_a.norm() / scale.sqrt();
                let stalled = (prev - cur).abs() <= 1e-16 * scale;
                prev = cur;
                if stationarity < 1e-12 || stalled {
                    break;
                }
            }
            per_restart.push(prev);
        }
        let best = per_restart.iter().copied().fold(f64::INFINITY, f64::min);
        AlsOutcome { best, per_restart }
    }
}
