//! Property and invariant tests: integrator order, density tracking against
//! closed forms, asymptotic accumulator behaviour, objective consistency, and
//! the kl machinery under randomized inputs.

mod common;

use std::sync::Arc;

use proptest::prelude::*;

use flowcert::bounds::{binary_kl, kl_inverse, BoundCertificate, BoundInputs};
use flowcert::data::{gaussian_clusters, ToyConfig};
use flowcert::experiment::{self, ExperimentConfig, HorizonSpec, SurrogateKind};
use flowcert::flow::{self, FlowState, IntegratorConfig, Scheme};
use flowcert::linear::{Batch, CrossEntropySurrogate, FeatureCache, FeatureMap, QuadraticSurrogate};
use flowcert::objective::{Objective, QuadraticObjective};
use flowcert::prior::{IsotropicGaussian, Prior};

use common::{fd_gradient, max_rel_err, PerturbedBasin};

fn scalar_error(scheme: Scheme, dt: f64) -> f64 {
    // flow of C = h^2/2 from 1; exact solution e^{-t}
    let q = QuadraticObjective::diagonal(&[1.0]);
    let cfg = IntegratorConfig::new(scheme, dt, vec![1.0]).unwrap();
    let res = flow::integrate(&[1.0], &q, &cfg).unwrap();
    (res.snapshots[0].h[0] - (-1.0f64).exp()).abs()
}

#[test]
fn euler_is_first_order() {
    let mut dt = 0.1;
    for _ in 0..4 {
        let ratio = scalar_error(Scheme::Euler, dt) / scalar_error(Scheme::Euler, dt / 2.0);
        assert!((1.8..=2.3).contains(&ratio), "euler halving ratio {ratio} at dt {dt}");
        dt /= 2.0;
    }
}

#[test]
fn rk4_is_fourth_order() {
    let mut dt = 0.1;
    for _ in 0..4 {
        let ratio = scalar_error(Scheme::Rk4, dt) / scalar_error(Scheme::Rk4, dt / 2.0);
        assert!((13.0..=19.0).contains(&ratio), "rk4 halving ratio {ratio} at dt {dt}");
        dt /= 2.0;
    }
}

#[test]
fn density_tracking_matches_gaussian_pushforward_rotated() {
    // H = R diag(1, 3) R^T; exact flow h_t = R diag(e^{-t}, e^{-3t}) R^T h0.
    let (c, s) = (0.6f64.cos(), 0.6f64.sin());
    let (l1, l2) = (1.0, 3.0);
    let hess = vec![
        c * c * l1 + s * s * l2,
        c * s * (l1 - l2),
        c * s * (l1 - l2),
        s * s * l1 + c * c * l2,
    ];
    let q = QuadraticObjective::new(hess, 2);
    let h0 = [0.9, -0.4];
    let t = 0.8;
    let cfg = IntegratorConfig::new(Scheme::Rk4, 1e-3, vec![t]).unwrap();
    let res = flow::integrate(&h0, &q, &cfg).unwrap();
    let snap = &res.snapshots[0];

    // accumulator equals T tr H for a quadratic
    assert!((snap.laplacian_integral - t * (l1 + l2)).abs() < 1e-10);

    // exact endpoint through the eigenbasis
    let u = [c * h0[0] + s * h0[1], -s * h0[0] + c * h0[1]];
    let v = [u[0] * (-l1 * t).exp(), u[1] * (-l2 * t).exp()];
    let exact = [c * v[0] - s * v[1], s * v[0] + c * v[1]];
    assert!(max_rel_err(&exact, &snap.h) < 1e-9);

    // complexity term equals the exact pushforward log-density change
    let prior = IsotropicGaussian::new(2, 1.0).unwrap();
    let tracked = flow::complexity_term(&prior, &h0, &snap.h, snap.laplacian_integral);
    let exact_change = prior.log_density_ratio(&h0, &exact) + t * (l1 + l2);
    assert!((tracked - exact_change).abs() < 1e-8);
}

#[test]
fn perturbed_basin_slope_approaches_hessian_trace() {
    // Quartic perturbation dies out as the flow reaches the minimum; the
    // accumulator slope over the last quarter converges to tr H.
    let basin = PerturbedBasin { diag: vec![1.0, 2.0], lambda: 0.05 };
    let total = 12.0;
    let cfg = IntegratorConfig::new(Scheme::Rk4, 1e-3, vec![0.75 * total, total]).unwrap();
    let res = flow::integrate(&[1.5, -1.2], &basin, &cfg).unwrap();
    let (a, b) = (&res.snapshots[0], &res.snapshots[1]);
    let slope = (b.laplacian_integral - a.laplacian_integral) / (0.25 * total);
    let trace = 3.0;
    assert!((slope - trace).abs() / trace < 0.02, "slope {slope}");

    // and the pure quadratic accumulator is exactly linear
    let q = QuadraticObjective::diagonal(&[1.0, 2.0]);
    let res = flow::integrate(&[1.5, -1.2], &q, &cfg).unwrap();
    let s0 = res.snapshots[0].laplacian_integral / (0.75 * total);
    let s1 = res.snapshots[1].laplacian_integral / total;
    assert!((s0 - s1).abs() < 1e-9);
}

fn small_toy_batch(seed: u64, width: usize) -> (FeatureMap, Batch) {
    let cfg = ToyConfig { per_cluster: 20, train_size: 30, ..ToyConfig::new(seed) };
    let (train, _) = gaussian_clusters(&cfg).unwrap();
    let map = FeatureMap::generate(train.d_in, width, seed + 100);
    let cache = Arc::new(FeatureCache::build(&map, &train).unwrap());
    let labels = Arc::new(train.labels.clone());
    (map, Batch::full(cache, labels))
}

#[test]
fn gradients_match_finite_differences() {
    let (_, batch) = small_toy_batch(3, 10);
    let prior = IsotropicGaussian::inverse_dim_variance(10).unwrap();
    let h = prior.sample(17);

    let lin = flowcert::linear::LinearSurrogate::new(&batch).unwrap();
    let quad = QuadraticSurrogate::new(batch.clone(), 0.7, 1.3).unwrap();
    let objs: Vec<&dyn Objective> = vec![&lin, &quad];
    for obj in objs {
        let mut grad = vec![0.0; 10];
        obj.gradient(&h, &mut grad);
        assert!(max_rel_err(&fd_gradient(obj, &h), &grad) < 1e-5);
    }

    let ce = CrossEntropySurrogate::new(batch, 2).unwrap();
    let h2 = IsotropicGaussian::inverse_dim_variance(20).unwrap().sample(18);
    let mut grad = vec![0.0; 20];
    ce.gradient(&h2, &mut grad);
    assert!(max_rel_err(&fd_gradient(&ce, &h2), &grad) < 1e-5);
}

#[test]
fn surrogate_descends_along_trajectories() {
    let (_, batch) = small_toy_batch(5, 12);
    let quad = QuadraticSurrogate::new(batch.clone(), 1.0, 1.0).unwrap();
    let ce = CrossEntropySurrogate::new(batch, 2).unwrap();
    let objs: Vec<(&dyn Objective, usize)> = vec![(&quad, 12), (&ce, 24)];
    for (obj, n) in objs {
        let prior = IsotropicGaussian::inverse_dim_variance(n).unwrap();
        let h0 = prior.sample(9);
        let cfg = IntegratorConfig::new(Scheme::Euler, 0.01, vec![2.0]).unwrap();
        let res = flow::integrate_dense(&h0, obj, &cfg).unwrap();
        let path = res.path.unwrap();
        let mut prev = f64::INFINITY;
        for state in &path {
            let v = obj.value(&state.h);
            assert!(v <= prev + 1e-8, "objective rose from {prev} to {v} at t {}", state.t);
            prev = v;
        }
    }
}

#[test]
fn cross_entropy_laplacian_within_bounds() {
    let (_, batch) = small_toy_batch(8, 6);
    let k_out = 2;
    let ce = CrossEntropySurrogate::new(batch.clone(), k_out).unwrap();
    // bound per example is ||Phi||^2 (1 - 1/K); summed with 1/m weights
    let m = batch.indices.len() as f64;
    let cap: f64 = batch
        .indices
        .iter()
        .map(|&i| batch.cache.norm_sq(i as usize))
        .sum::<f64>()
        * (1.0 - 1.0 / k_out as f64)
        / m;
    let prior = IsotropicGaussian::inverse_dim_variance(12).unwrap();
    for seed in 0..50 {
        let h: Vec<f64> = prior.sample(seed).iter().map(|x| x * 10.0).collect();
        let lap = ce.laplacian(&h);
        assert!(lap >= 0.0 && lap <= cap + 1e-12, "lap {lap} outside [0, {cap}]");
        assert!(lap > 0.0, "softmax never literally saturates at finite h");
    }
}

#[test]
fn toy_constant_predictor_near_half() {
    let (train, test) = gaussian_clusters(&ToyConfig::new(11)).unwrap();
    // default sizes: 500 training points out of 8 x 5000
    assert_eq!(train.len(), 500);
    assert_eq!(test.len(), 39_500);
    let negative = test.labels.iter().filter(|&&y| y == -1).count() as f64;
    let err = negative / test.len() as f64; // constant +1 predictor
    assert!((err - 0.5).abs() < 0.02, "constant-predictor error {err}");
}

#[test]
fn certificates_recompute_bitwise_from_rows() {
    let mut cfg = ExperimentConfig::default();
    cfg.toy_per_cluster = 30;
    cfg.toy_train_size = 80;
    cfg.width = 30;
    cfg.dt = 0.01;
    cfg.horizons = HorizonSpec::Geometric { t_min: 0.05, t_max: 0.5, k: 6 };
    cfg.surrogate = SurrogateKind::Quadratic;
    let rec = experiment::certify(&cfg).unwrap();
    for row in &rec.rows {
        let cert = BoundCertificate::evaluate(
            row.train_error,
            row.log_density_ratio,
            row.laplacian_integral,
            rec.m,
            rec.delta,
            rec.k,
        )
        .unwrap();
        assert_eq!(cert.mcallester, row.mcallester);
        assert_eq!(cert.kl_inv, row.kl);
    }
}

#[test]
fn trajectory_csv_has_expected_shape() {
    let q = QuadraticObjective::diagonal(&[1.0]);
    let cfg = IntegratorConfig::new(Scheme::Euler, 0.1, vec![0.3]).unwrap();
    let res = flow::integrate_dense(&[1.0], &q, &cfg).unwrap();
    let mut buf = Vec::new();
    flow::write_trajectory_csv(&mut buf, res.path.as_ref().unwrap(), &q).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,h_norm,laplacian_integral,objective_value");
    assert_eq!(lines.count(), 4); // initial state + 3 steps
}

#[test]
fn config_text_round_trips_through_apply() {
    let text = "surrogate=cross-entropy\nwidth=64\ndt=0.25\nhorizons=explicit:0.5,1.0\n\
                batch_size=16\nseed=9\n# comment\n\nfull_scale=true\n";
    let cfg = ExperimentConfig::from_kv_text(text).unwrap();
    assert_eq!(cfg.surrogate, SurrogateKind::CrossEntropy);
    assert_eq!(cfg.width, 64);
    assert_eq!(cfg.batch_size, Some(16));
    assert!(cfg.full_scale);
    let echo = cfg.to_kv_text();
    let back = ExperimentConfig::from_kv_text(&echo).unwrap();
    assert_eq!(back.to_kv_text(), echo);
}

#[test]
fn data_dependent_complexity_reduces_bitwise_at_zero() {
    let q = QuadraticObjective::diagonal(&[1.0, 2.0]);
    let prior = IsotropicGaussian::new(2, 1.0).unwrap();
    let h0 = vec![1.0, -0.5];
    let cfg = IntegratorConfig::new(Scheme::Rk4, 1e-3, vec![1.0]).unwrap();
    let res = flow::integrate(&h0, &q, &cfg).unwrap();
    let end = &res.snapshots[0];
    let direct = flow::complexity_term(&prior, &h0, &end.h, end.laplacian_integral);
    let dd = flow::data_dependent_complexity(
        &prior,
        &FlowState::initial(h0.clone()),
        end,
        &q,
        Scheme::Rk4,
        1e-3,
    )
    .unwrap();
    assert_eq!(dd.total, direct);
}

proptest! {
    #[test]
    fn kl_dominates_pinsker(u in 0.0f64..=1.0, v in 1e-9f64..1.0) {
        prop_assume!(v < 1.0);
        let kl = binary_kl(u, v).unwrap();
        prop_assert!(kl + 1e-12 >= 2.0 * (u - v) * (u - v));
    }

    #[test]
    fn kl_inverse_round_trips(u in 0.0f64..0.95, c in 1e-4f64..2.0) {
        let v = kl_inverse(u, c);
        prop_assert!(v >= u);
        if v < 1.0 {
            let back = binary_kl(u, v).unwrap();
            // near v = 1 the inverse is ill-conditioned: one ulp of v moves
            // kl by kl'(v) ulp, which caps the achievable round-trip error
            let conditioning = (v - u) / (v * (1.0 - v)) * (4.0 * f64::EPSILON);
            let tol = 1e-9 + conditioning;
            prop_assert!((back - c).abs() < tol, "kl({u}||{v}) = {back} vs c = {c} (tol {tol})");
        }
    }

    #[test]
    fn kl_inverse_monotone_in_cost(u in 0.0f64..1.0, c1 in 0.0f64..3.0, c2 in 0.0f64..3.0) {
        let (lo, hi) = if c1 <= c2 { (c1, c2) } else { (c2, c1) };
        prop_assert!(kl_inverse(u, lo) <= kl_inverse(u, hi));
    }

    #[test]
    fn bounds_monotone_in_complexity(c1 in -5.0f64..20.0, c2 in -5.0f64..20.0,
                                     loss in 0.0f64..1.0) {
        let (lo, hi) = if c1 <= c2 { (c1, c2) } else { (c2, c1) };
        let a = BoundInputs::new(loss, lo, 200, 0.05, 5).unwrap();
        let b = BoundInputs::new(loss, hi, 200, 0.05, 5).unwrap();
        prop_assert!(flowcert::bounds::mcallester_bound(&a) <= flowcert::bounds::mcallester_bound(&b));
        prop_assert!(flowcert::bounds::kl_bound(&a) <= flowcert::bounds::kl_bound(&b));
    }

    #[test]
    fn prior_ratio_antisymmetric(ax in -3.0f64..3.0, ay in -3.0f64..3.0,
                                 bx in -3.0f64..3.0, by in -3.0f64..3.0,
                                 var in 0.1f64..4.0) {
        let p = IsotropicGaussian::new(2, var).unwrap();
        let (a, b) = ([ax, ay], [bx, by]);
        prop_assert_eq!(p.log_density_ratio(&a, &b), -p.log_density_ratio(&b, &a));
    }

    #[test]
    fn idx_roundtrip_random(n in 1usize..5, rows in 1usize..6, cols in 1usize..6, seed in 0u64..1000) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pixels: Vec<u8> = (0..n * rows * cols).map(|_| rng.gen()).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..10)).collect();
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("i.idx");
        let lbl = dir.path().join("l.idx");
        flowcert::data::write_idx(&img, &lbl, &pixels, n, rows, cols, &labels).unwrap();
        let ds = flowcert::data::load_idx(&img, &lbl, flowcert::data::SplitTag::Train).unwrap();
        prop_assert_eq!(ds.len(), n);
        prop_assert_eq!(ds.d_in, rows * cols);
        for (i, &p) in pixels.iter().enumerate() {
            prop_assert_eq!(ds.inputs[i], p as f64 / 255.0);
        }
        for (y, &l) in ds.labels.iter().zip(&labels) {
            prop_assert_eq!(*y, l as i32);
        }
    }
}
