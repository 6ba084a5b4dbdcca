use cloq_core::calibration::{DampedGram, GramAccumulator};
use cloq_core::ptq_solver::{
    magr_preprocess, ptq_optq, ptq_rtn, weighted_objective, PtqConfig, PtqMethod,
};
use cloq_core::quant_grid::{Granularity, QuantConfig};
use cloq_testkit::{correlated_activations, gaussian, oracle, rel_diff, rng, uniform};
use nalgebra::DMatrix;

fn cfg(bits: u8, gran: Granularity, method: PtqMethod) -> PtqConfig {
    PtqConfig {
        method,
        quant: QuantConfig::new(bits, gran),
        ..PtqConfig::default()
    }
}

#[test]
fn rtn_matches_nearest_code_oracle() {
    let mut r = rng(21);
    let w = uniform(&mut r, 8, 4, -1.0, 1.0);
    for gran in [Granularity::PerChannel, Granularity::PerGroup(3), Granularity::PerTensor] {
        let res = ptq_rtn(&w, &cfg(3, gran, PtqMethod::Rtn)).unwrap();
        for i in 0..8 {
            for j in 0..4 {
                let g = res.grids.grid(i, j);
                let k = oracle::nearest_code(w[(i, j)], g.scale, g.zero_point, 3);
                assert_eq!(res.codes[(i, j)], k);
                assert_eq!(res.q[(i, j)], g.dequantize(k));
            }
        }
    }
}

#[test]
fn weighted_objective_matches_dense_product() {
    let mut r = rng(22);
    let x = gaussian(&mut r, 12, 4);
    let m = gaussian(&mut r, 4, 3);
    let got = weighted_objective(&m, &oracle::gram(&x)).unwrap();
    assert!(rel_diff(got, oracle::frob_of_product(&x, &m)) <= 1e-10);
}

#[test]
fn correlated_two_by_one_against_enumeration() {
    let h = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
    let gram = DampedGram::undamped(h.clone());
    let c = cfg(2, Granularity::PerChannel, PtqMethod::Optq);
    let mut r = rng(23);
    let mut gaps = Vec::new();
    for _ in 0..10 {
        let w = uniform(&mut r, 2, 1, -1.0, 1.0);
        let optq = ptq_optq(&w, &gram, &c).unwrap();
        let rtn = ptq_rtn(&w, &c).unwrap();
        let opt_obj = optq.obj_weighted.unwrap();
        let rtn_obj = weighted_objective(&(&rtn.q - &w), &h).unwrap();
        assert!(opt_obj <= rtn_obj + 1e-12);

        let grid = optq.grids.grid(0, 0);
        let levels: Vec<Vec<Vec<f64>>> = vec![vec![grid.levels()], vec![grid.levels()]];
        let best = oracle::enumerate_discrete_optimum(&w, &levels, &h);
        assert!(best <= opt_obj + 1e-12);
        gaps.push(opt_obj / best.max(1e-300));
    }
    eprintln!("greedy/optimum ratios: {gaps:?}");
}

#[test]
fn scaled_identity_reduces_to_rtn() {
    let mut r = rng(24);
    let w = gaussian(&mut r, 9, 5);
    let c = cfg(3, Granularity::PerGroup(4), PtqMethod::Optq);
    let optq = ptq_optq(&w, &DampedGram::scaled_identity(9, 2.5), &c).unwrap();
    let rtn = ptq_rtn(&w, &c).unwrap();
    assert_eq!(optq.codes, rtn.codes);
    assert_eq!(optq.q, rtn.q);
}

#[test]
fn magr_scalar_case_matches_line_search() {
    // H = I, w = [1, 0, 0]: only x₀ moves and f(t) = (t − 1)² + α|t|.
    let w = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
    let alpha = 1.0;
    let out = magr_preprocess(&w, &DampedGram::scaled_identity(3, 1.0), alpha, 200, 0.0).unwrap();

    let f = |t: f64| (t - 1.0) * (t - 1.0) + alpha * t.abs();
    let (mut lo, mut hi) = (-2.0f64, 2.0f64);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let a = hi - phi * (hi - lo);
        let b = lo + phi * (hi - lo);
        if f(a) < f(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    let t_star = 0.5 * (lo + hi);
    assert!((out.weights[(0, 0)] - t_star).abs() < 1e-6);
    assert!(out.weights[(0, 0)] < 1.0);
    for pair in out.objective_trace.windows(2) {
        assert!(pair[1] <= pair[0]);
    }
}

#[test]
fn magr_objective_never_increases() {
    let mut r = rng(25);
    for _ in 0..20 {
        let x = correlated_activations(&mut r, 40, 8, 50.0);
        let mut acc = GramAccumulator::<f64>::new(8);
        acc.accumulate(&x).unwrap();
        let gram = acc.damp(0.01).unwrap();
        let w = gaussian(&mut r, 8, 4);
        let out = magr_preprocess(&w, &gram, 0.5, 30, 0.0).unwrap();
        for pair in out.column_trace.windows(2) {
            for j in 0..4 {
                assert!(pair[1][j] <= pair[0][j]);
            }
        }
        for j in 0..4 {
            assert!(out.weights.column(j).amax() <= w.column(j).amax() + 1e-15);
        }
    }
}

#[test]
fn vanishing_penalty_keeps_weights() {
    let mut r = rng(26);
    let w = gaussian(&mut r, 6, 3);
    let x = gaussian(&mut r, 30, 6);
    let mut acc = GramAccumulator::<f64>::new(6);
    acc.accumulate(&x).unwrap();
    let out = magr_preprocess(&w, &acc.damp(0.01).unwrap(), 1e-12, 50, 1e-6).unwrap();
    assert!((&out.weights - &w).norm() / w.norm() <= 1e-6);
}

#[test]
fn optq_matches_schur_complement_reference() {
    let mut r = rng(25);
    for k in 0..30 {
        let m = 2 + k % 7;
        let n = 1 + k % 3;
        let x = correlated_activations(&mut r, 6 * m, m, 50.0);
        let mut acc = GramAccumulator::new(m);
        acc.accumulate(&x).unwrap();
        let gram = acc.damp(0.01).unwrap();
        let w = uniform(&mut r, m, n, -1.0, 1.0);
        let gran = if k % 2 == 0 { Granularity::PerChannel } else { Granularity::PerGroup(2) };
        let res = ptq_optq(&w, &gram, &cfg(3, gran, PtqMethod::Optq)).unwrap();
        let grids = res.grids.clone();
        let q = oracle::sequential_quantize(&w, &gram.matrix, &|i, c, v| grids.project(i, c, v));
        assert!((&q - &res.q).norm() <= 1e-12 * w.norm(), "instance {k}");
    }
}
