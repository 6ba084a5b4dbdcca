use cloq_core::calibration::GramAccumulator;
use cloq_core::lowrank_init::{build_root, cloq_init, InitConfig, Variant};
use cloq_core::quant_grid::{fit_grid, quantize_rtn, Granularity, QuantConfig, TieRule};
use cloq_core::tensor_store::{decode, encode, DType, Tensor, TensorBundle};
use cloq_testkit::oracle;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    (prop::collection::vec(1usize..5, 1..=4), 0u8..3).prop_flat_map(|(shape, kind)| {
        let numel: usize = shape.iter().product();
        let dtype = match kind {
            0 => DType::F32,
            1 => DType::F16,
            _ => DType::U8,
        };
        prop::collection::vec(any::<u8>(), numel * dtype.size())
            .prop_map(move |bytes| Tensor::new(dtype, shape.clone(), bytes).unwrap())
    })
}

fn bundle_strategy() -> impl Strategy<Value = TensorBundle> {
    (
        prop::collection::btree_map("[a-z]{1,6}(/[A-Za-z0-9._-]{1,6})?", tensor_strategy(), 0..6),
        prop::collection::btree_map("[a-z]{1,8}", "[ -~]{0,12}", 0..3),
    )
        .prop_map(|(entries, meta)| {
            let mut b = TensorBundle::new();
            for (k, t) in entries {
                b.insert(k, t).unwrap();
            }
            for (k, v) in meta {
                b.set_metadata(k, v);
            }
            b
        })
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-3.0f64..3.0, rows * cols)
        .prop_map(move |v| DMatrix::from_row_slice(rows, cols, &v))
}

proptest! {
    #[test]
    fn bundle_round_trip(b in bundle_strategy()) {
        let bytes = encode(&b).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(&back, &b);
        prop_assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn quantizer_invariants(
        w in prop::collection::vec(-10.0f64..10.0, 1..40),
        bits in 2u8..=8,
        even in any::<bool>(),
    ) {
        let mut cfg = QuantConfig::new(bits, Granularity::PerChannel);
        if even {
            cfg.rounding = TieRule::HalfToEven;
        }
        let g = fit_grid(&w, &cfg).unwrap();
        let q = quantize_rtn(&w, &g, cfg.rounding);
        let deq = q.dequantize();
        // idempotence
        prop_assert_eq!(&quantize_rtn(&deq, &g, cfg.rounding).codes, &q.codes);
        // monotonicity
        for i in 0..w.len() {
            for j in 0..w.len() {
                if w[i] <= w[j] {
                    prop_assert!(q.codes[i] <= q.codes[j]);
                }
            }
        }
        // bound, for a non-degenerate fit every entry is in range
        let lo = w.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            for (a, b) in w.iter().zip(&deq) {
                let ulp = f64::EPSILON * a.abs().max(b.abs()).max(g.scale);
                prop_assert!((a - b).abs() <= g.scale / 2.0 + 4.0 * ulp);
            }
        }
        // cardinality
        let mut distinct: Vec<u64> = deq.iter().map(|v| v.to_bits()).collect();
        distinct.sort_unstable();
        distinct.dedup();
        prop_assert!(distinct.len() <= 1 << bits);
    }

    #[test]
    fn gram_is_psd_and_damping_shifts(x in matrix(5, 4), ratio in 0.0f64..0.2) {
        let mut acc = GramAccumulator::new(4);
        acc.accumulate(&x).unwrap();
        let d = acc.damp(ratio).unwrap();
        let ev = oracle::jacobi_eigenvalues(acc.gram());
        let evd = oracle::jacobi_eigenvalues(&d.matrix);
        let scale = ev[0].max(1e-300);
        prop_assert!(ev[3] >= -1e-8 * scale);
        for (a, b) in ev.iter().zip(&evd) {
            prop_assert!((b - a - d.lambda).abs() <= 1e-8 * scale.max(1.0));
        }
    }

    #[test]
    fn closed_form_hits_tail_energy(
        x in matrix(12, 4),
        dw in matrix(4, 3),
        r in 1usize..=3,
        variant in prop::sample::select(Variant::ALL.to_vec()),
    ) {
        let mut acc = GramAccumulator::new(4);
        acc.accumulate(&x).unwrap();
        let g = acc.damp(0.01).unwrap();
        prop_assume!(g.lambda > 1e-6);
        let root = build_root(&g, 1e-12).unwrap();
        let cfg = InitConfig { variant, ..InitConfig::with_rank(r) };
        let ad = cloq_init(&dw, &root, &cfg).unwrap();
        let achieved = oracle::quad_trace(&g.matrix, &(ad.product() - &dw));
        let tail = ad.tail_energy();
        let total = oracle::quad_trace(&g.matrix, &dw);
        prop_assert!((achieved - tail).abs() <= 1e-7 * tail.max(1e-9 * total));
    }
}
