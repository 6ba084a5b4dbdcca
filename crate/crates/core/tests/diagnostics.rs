use cloq_core::calibration::GramAccumulator;
use cloq_core::diagnostics::{discrepancy, emit_report, LayerReport, Norm, ReportFormat, RunReport};
use cloq_core::lowrank_init::{build_root, layer_pipeline, InitConfig};
use cloq_core::ptq_solver::PtqConfig;
use cloq_core::quant_grid::{Granularity, QuantConfig};
use cloq_testkit::{gaussian, oracle, rel_diff, rng, sha256_hex};

#[test]
fn damped_free_paths_match_dense_products() {
    let mut r = rng(51);
    let x = gaussian(&mut r, 15, 5);
    let w = gaussian(&mut r, 5, 4);
    let q = gaussian(&mut r, 5, 4);
    let a = gaussian(&mut r, 5, 2);
    let b = gaussian(&mut r, 4, 2);
    let mut acc = GramAccumulator::new(5);
    acc.accumulate(&x).unwrap();
    let g = acc.damp(0.0).unwrap();
    let m = &q + &a * b.transpose() - &w;

    let frob = discrepancy(&w, &q, &a, &b, &g, Norm::Frobenius).unwrap();
    assert!(rel_diff(frob, oracle::frob_of_product(&x, &m)) <= 1e-9);
    let spec = discrepancy(&w, &q, &a, &b, &g, Norm::Spectral).unwrap();
    let sv = oracle::singular_values(&(&x * &m));
    assert!(rel_diff(spec, sv[0]) <= 1e-9);
}

fn sample_report() -> RunReport {
    let mut r = rng(52);
    let mut rows = Vec::new();
    for i in 0..3 {
        let x = gaussian(&mut r, 30, 6);
        let w = gaussian(&mut r, 6, 5);
        let mut acc = GramAccumulator::new(6);
        acc.accumulate(&x).unwrap();
        let g = acc.damp(0.01).unwrap();
        let pc = PtqConfig {
            quant: QuantConfig::new(3, Granularity::PerGroup(4)),
            ..PtqConfig::default()
        };
        let ic = InitConfig::with_rank(2);
        let root = build_root(&g, ic.eig_floor_ratio).unwrap();
        let res = layer_pipeline(&w, &g, &pc, &ic).unwrap();
        rows.push(LayerReport::from_result(&format!("layer{i}"), &w, &res, &g, &root, 3, 4).unwrap());
    }
    RunReport::new(rows, serde_json::json!({"bits": 3})).unwrap()
}

#[test]
fn reports_are_byte_stable() {
    for fmt in [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Table] {
        let mut first = Vec::new();
        let mut second = Vec::new();
        emit_report(&sample_report(), fmt, &mut first).unwrap();
        emit_report(&sample_report(), fmt, &mut second).unwrap();
        assert_eq!(sha256_hex(&first), sha256_hex(&second));
    }
}

#[test]
fn aggregates_recompute_from_rows() {
    let report = sample_report();
    let mean = report.layers.iter().map(|l| l.frob_disc).sum::<f64>() / 3.0;
    let max = report.layers.iter().map(|l| l.frob_disc).fold(0.0, f64::max);
    assert!(rel_diff(report.aggregates.frob_disc.mean, mean) <= 1e-15);
    assert_eq!(report.aggregates.frob_disc.max, max);
}
