use gqa_core::config::{AttentionHeads, SizeField};
use gqa_core::fit::{
    fit_head_law, fit_power_law, invert_curve, joint_fit_shared_constant, predict_loss, FitOptions, HeadAxis,
    LossRecord, ScalingCurve,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn head_records(a: f64, b: f64, c: f64, context_length: u64) -> Vec<LossRecord> {
    (0..8)
        .map(|k| {
            let n = 1u32 << k;
            LossRecord {
                model_id: format!("h{n}"),
                heads: AttentionHeads::mha(n).unwrap(),
                n_params_non_embedding: 4.7e8,
                n_params_total: 5.0e8,
                context_length,
                train_tokens: 1e10,
                loss: a * f64::from(n).powf(b) + c,
            }
        })
        .collect()
}

fn size_records(a: f64, b: f64, e: f64, sizes: &[f64]) -> Vec<LossRecord> {
    sizes
        .iter()
        .map(|&n| LossRecord {
            model_id: format!("n{n:e}"),
            heads: AttentionHeads::new(16, 4).unwrap(),
            n_params_non_embedding: n,
            n_params_total: n + 5e7,
            context_length: 8192,
            train_tokens: 2e10,
            loss: (a / n).powf(b) + e,
        })
        .collect()
}

fn log_spaced(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    (0..k).map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (k - 1) as f64).exp()).collect()
}

fn rel(got: f64, want: f64) -> f64 {
    (got / want - 1.0).abs()
}

#[test]
fn head_law_curves_by_model_size() {
    for (a, b, c) in [(0.579, -0.124, 2.473), (0.398, -0.177, 2.583), (0.301, -0.227, 2.622)] {
        let (curve, diag) = fit_head_law(&head_records(a, b, c, 1024), HeadAxis::QueryHeads).unwrap();
        assert!(rel(curve.a, a) < 0.01 && rel(curve.b, b) < 0.01 && rel(curve.c, c) < 0.01, "{curve:?}");
        assert!(diag.r_squared >= 0.999);
    }
}

#[test]
fn head_law_small_exponent_curve() {
    let (curve, _) = fit_head_law(&head_records(1.513, -0.039, 1.53, 1024), HeadAxis::QueryHeads).unwrap();
    assert!(rel(curve.c, 1.53) < 0.01, "{curve:?}");
}

#[test]
fn shared_constant_context_curves() {
    let groups: Vec<_> = [(1.513, -0.039, 1024), (1.436, -0.041, 2048), (1.356, -0.044, 8192)]
        .iter()
        .map(|&(a, b, t)| head_records(a, b, 1.53, t))
        .collect();
    let fit = joint_fit_shared_constant(&groups, HeadAxis::QueryHeads).unwrap();
    assert!(rel(fit.constant, 1.53) < 0.01, "{fit:?}");
    for (curve, (a, b)) in fit.curves.iter().zip([(1.513, -0.039), (1.436, -0.041), (1.356, -0.044)]) {
        assert!(rel(curve.a, a) < 0.02 && rel(curve.b, b) < 0.02, "{curve:?}");
    }
    assert!(!fit.poor_fit);
}

#[test]
fn shared_constant_with_incompatible_asymptotes_is_flagged() {
    // strongly curved groups whose true asymptotes differ by a full unit
    let g1 = head_records(2.0, -1.0, 1.0, 1024);
    let g2 = head_records(2.0, -1.0, 2.0, 2048);
    // the generating functions fit their own data exactly
    for (g, c) in [(&g1, 1.0), (&g2, 2.0)] {
        for r in g.iter() {
            let n = f64::from(r.heads.n_h());
            assert!((r.loss - (2.0 / n + c)).abs() < 1e-15);
        }
    }
    let fit = joint_fit_shared_constant(&[g1, g2], HeadAxis::QueryHeads).unwrap();
    assert!(fit.poor_fit, "{fit:?}");
    assert!(fit.diagnostics.iter().any(|d| d.r_squared < 0.999));
}

#[test]
fn noisy_fits_recover_asymptote() {
    let sizes = log_spaced(1e6, 1e11, 12);
    let (a, b, e) = (2e8, 0.5, 1.5);
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut recs = size_records(a, b, e, &sizes);
        for r in &mut recs {
            // i.i.d. multiplicative noise with 0.2% standard deviation (Box-Muller)
            let (u1, u2): (f64, f64) = (rng.gen_range(f64::EPSILON..1.0), rng.gen());
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            r.loss *= 1.0 + 0.002 * z;
        }
        let (curve, _) = fit_power_law(&recs, &FitOptions::default()).unwrap();
        worst = worst.max(rel(curve.e, e));
    }
    assert!(worst < 0.02, "worst relative error in E: {worst}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn noiseless_fit_recovery(log_a in 6.0f64..10.0, b in 0.05f64..1.0, e in 0.5f64..3.0) {
        let a = 10f64.powf(log_a);
        let sizes = log_spaced(1e6, 1e10, 8);
        let (curve, diag) = fit_power_law(&size_records(a, b, e, &sizes), &FitOptions::default()).unwrap();
        prop_assert!(rel(curve.a, a) < 1e-3, "a {} vs {}", curve.a, a);
        prop_assert!(rel(curve.b, b) < 1e-3, "b {} vs {}", curve.b, b);
        prop_assert!(rel(curve.e, e) < 1e-3, "E {} vs {}", curve.e, e);
        prop_assert!(diag.r_squared >= 0.999_999);
        // fitted curves decrease strictly
        let mut prev = f64::INFINITY;
        for n in log_spaced(1e5, 1e12, 30) {
            let l = predict_loss(&curve, n);
            prop_assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn predict_invert_round_trip(log_a in 5.0f64..11.0, b in 0.05f64..1.5, e in 0.0f64..3.0, gap in 1e-3f64..5.0) {
        let curve = ScalingCurve::new(AttentionHeads::new(4, 2).unwrap(), 10f64.powf(log_a), b, e, SizeField::NonEmbedding, 8192, (1e6, 1e9)).unwrap();
        let target = e + gap;
        let n = invert_curve(&curve, target).unwrap();
        prop_assert!(rel(predict_loss(&curve, n), target) <= 1e-12);
    }
}
