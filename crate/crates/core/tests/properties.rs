mod common;

use common::*;
use nalgebra::DVector;
use pads::fusion::{fusion_weights, product_fuse, temporal_fuse, AxisGaussian};
use pads::geo_frames::{from_local, to_local, GeoPoint, LocalPoint};
use pads::gp_uncertainty::{gp_weights, ConfidenceInterval, GpKernel};
use pads::loda_detector::{calibrate_threshold, decide, LodaModel};
use pads::motion_regression::{fit, RegressionConfig};
use pads::trace_model::Hypothesis;
use proptest::prelude::*;

fn gaussian() -> impl Strategy<Value = AxisGaussian> {
    (-50.0..50.0f64, -50.0..50.0f64, 0.01..100.0f64, 0.01..100.0f64).prop_map(|(e, n, ve, vn)| AxisGaussian {
        mean: LocalPoint::new(e, n),
        var: [ve, vn],
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn constrained_fit_is_feasible_and_optimal(seed in any::<u64>()) {
        let inst = random_instance(&mut rng(seed));
        let cfg = RegressionConfig { degree: inst.degree, kappa: inst.kappa, ..RegressionConfig::default() };
        let f = fit(&inst.window, &inst.cons, &cfg, inst.t).unwrap();
        for axis in 0..2 {
            let p = AxisProblem::new(&inst.window, &inst.cons, inst.t, inst.kappa, inst.degree, axis);
            let x = DVector::from_column_slice(&f.coeffs.w[axis]);
            prop_assert!(p.max_violation(&x) <= 1e-8);
            let (_, best) = p.enumerate().unwrap();
            prop_assert!((p.objective(&x) - best).abs() <= 1e-6 * best.abs().max(1.0));
        }
    }

    #[test]
    fn kriging_weights_sum_to_one(
        gaps in prop::collection::vec(0.2..5.0f64, 1..25),
        ahead in 0.1..3.0f64,
        ls in 0.3..20.0f64,
        sv in 0.01..100.0f64,
    ) {
        let times: Vec<f64> = gaps.iter().scan(0.0, |t, g| { *t += g; Some(*t) }).collect();
        let target = times.last().unwrap() + ahead;
        let kernel = GpKernel::squared_exponential(ls, sv, 1e-3 * sv);
        let kw = gp_weights(&times, &kernel, target).unwrap();
        prop_assert!((kw.lambda.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(kw.variance >= -1e-9 * sv);
    }

    #[test]
    fn temporal_weights_are_a_distribution(
        times in prop::collection::vec(0.0..30.0f64, 1..30),
        kappa in 0.0..3.0f64,
    ) {
        let w = fusion_weights(&times, 30.0, kappa);
        prop_assert_eq!(w.len(), times.len());
        prop_assert!(w.iter().all(|x| *x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn product_is_sharper_and_between_inputs(gs in prop::collection::vec(gaussian(), 1..6)) {
        let f = product_fuse(&gs).unwrap();
        for axis in 0..2 {
            let min_var = gs.iter().map(|g| g.var[axis]).fold(f64::INFINITY, f64::min);
            prop_assert!(f.sigma[axis].powi(2) <= min_var * (1.0 + 1e-12));
            let lo = gs.iter().map(|g| g.mean.axis(axis)).fold(f64::INFINITY, f64::min);
            let hi = gs.iter().map(|g| g.mean.axis(axis)).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(f.mu.axis(axis) >= lo - 1e-9 && f.mu.axis(axis) <= hi + 1e-9);
        }
    }

    #[test]
    fn temporal_fusion_matches_weighted_sum(gs in prop::collection::vec(gaussian(), 1..6), raw in prop::collection::vec(0.01..1.0f64, 6)) {
        let cis: Vec<ConfidenceInterval> = gs.iter().map(|g| ConfidenceInterval { mean: g.mean, var: g.var }).collect();
        let total: f64 = raw[..cis.len()].iter().sum();
        let w: Vec<f64> = raw[..cis.len()].iter().map(|x| x / total).collect();
        let f = temporal_fuse(&cis, &w).unwrap();
        for axis in 0..2 {
            let mean: f64 = cis.iter().zip(&w).map(|(c, w)| w * c.mean.axis(axis)).sum();
            let var: f64 = cis.iter().zip(&w).map(|(c, w)| w * w * c.var[axis]).sum();
            prop_assert!((f.mean.axis(axis) - mean).abs() <= 1e-9 * (1.0 + mean.abs()));
            prop_assert!((f.var[axis] - var).abs() <= 1e-12 * (1.0 + var));
        }
    }

    #[test]
    fn local_frame_round_trip(lat in -70.0..70.0f64, lon in -179.0..179.0f64, e in -5e3..5e3f64, n in -5e3..5e3f64) {
        let origin = GeoPoint::new(lat, lon).unwrap();
        let p = from_local(LocalPoint::new(e, n), origin).unwrap();
        let back = to_local(p, origin).unwrap();
        prop_assert!(back.distance(LocalPoint::new(e, n)) <= 1e-6);
    }

    #[test]
    fn calibrated_threshold_respects_target(
        scores in prop::collection::vec(0.0..50.0f64, 10..300),
        target in 0.01..0.5f64,
    ) {
        let gamma = calibrate_threshold(&scores, target);
        let flagged = scores.iter().filter(|s| decide(**s, gamma) == Hypothesis::H1).count();
        prop_assert!(flagged as f64 <= target * scores.len() as f64 + 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn loda_scores_are_finite_and_nonnegative(seed in any::<u64>(), probe in prop::array::uniform4(-1e3..1e3f64)) {
        let mut r = rng(seed);
        let data: Vec<[f64; 4]> = (0..64)
            .map(|_| std::array::from_fn(|_| rand::Rng::random_range(&mut r, -3.0..3.0)))
            .collect();
        let m = LodaModel::train(&data, 20, seed).unwrap();
        let s = m.score(&probe);
        prop_assert!(s.is_finite() && s >= 0.0);
        prop_assert_eq!(m.score(&probe).to_bits(), LodaModel::train(&data, 20, seed).unwrap().score(&probe).to_bits());
    }
}
