use cloq_core::quant_grid::{fit_grid, quantize_rtn, Granularity, QuantConfig, TieRule};
use cloq_testkit::{oracle, rng, RngExt};

fn ulps_apart(a: f64, b: f64) -> u64 {
    (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs()
}

#[test]
fn fit_matches_direct_formula() {
    let mut r = rng(11);
    for _ in 0..50 {
        let w: Vec<f64> = (0..100).map(|_| r.random_range(-1.0..2.0)).collect();
        let cfg = QuantConfig::new(4, Granularity::PerChannel);
        let g = fit_grid(&w, &cfg).unwrap();

        let lo = w.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let delta = (hi - lo) / 15.0;
        let z = -(lo / delta).round();
        assert!(ulps_apart(g.scale, delta) <= 1);
        assert_eq!(g.zero_point as f64, z);
    }
}

#[test]
fn frozen_grid_for_seeded_group() {
    let mut r = rng(2024);
    let w: Vec<f64> = (0..100).map(|_| r.random_range(-1.0..2.0)).collect();
    let g = fit_grid(&w, &QuantConfig::new(4, Granularity::PerChannel)).unwrap();
    assert_eq!(g.zero_point, 5);
    assert!((g.scale - 0.194_994_845_381_198_7).abs() < 1e-15, "{}", g.scale);
}

#[test]
fn rtn_matches_nearest_code() {
    let w = [0.4, 2.6, 0.0, 2.2];
    let cfg = QuantConfig::new(2, Granularity::PerChannel);
    let g = fit_grid(&w, &cfg).unwrap();
    let q = quantize_rtn(&w, &g, TieRule::default());
    for (&v, &k) in w.iter().zip(&q.codes) {
        assert_eq!(k, oracle::nearest_code(v, g.scale, g.zero_point, 2));
    }
    assert_eq!(q.codes, vec![0, 3, 0, 3]);
}

#[test]
fn rounding_bound_holds_in_range() {
    let mut r = rng(3);
    for bits in [2u8, 3, 4, 8] {
        let w: Vec<f64> = (0..37).map(|_| r.random_range(-5.0..5.0)).collect();
        let g = fit_grid(&w, &QuantConfig::new(bits, Granularity::PerChannel)).unwrap();
        let q = quantize_rtn(&w, &g, TieRule::default()).dequantize();
        for (a, b) in w.iter().zip(q) {
            assert!((a - b).abs() <= g.scale / 2.0 + 1e-12);
        }
    }
}
