mod common;

use common::{liouville_det, rk4_kernel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vsmd::kernels::{cholesky, mat_exp, Mat};
use vsmd::processes::{
    build_kernel, default_sigma0, forward_sample, gaussian_score, AugmentedState, BetaSchedule, DiffusionConfig, Mode, PropagatorMode,
    VariationalSchedule,
};
use vsmd::variational::a_x_upper_bound;

fn rel_frobenius(a: &Mat, b: &Mat) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

fn mode_cfg(mode: Mode, beta: f64, grid: usize) -> DiffusionConfig {
    let damping_ratio = if matches!(mode, Mode::Uld | Mode::Vsuld) { 0.6 } else { 1.0 };
    DiffusionConfig {
        mode,
        beta: BetaSchedule::Constant { value: beta },
        damping_ratio,
        grid_size: grid,
        ..Default::default()
    }
}

fn any_mode() -> impl Strategy<Value = Mode> {
    prop_oneof![Just(Mode::Cld), Just(Mode::Uld), Just(Mode::Vscld), Just(Mode::Vsuld), Just(Mode::VsdmOverdamped)]
}

/// Feasible schedule with independent `a_x`, `a_v` draws per node.
fn schedule(cfg: &DiffusionConfig, dim: usize, raw: &[(f64, f64)]) -> VariationalSchedule {
    let mut s = VariationalSchedule::zeros(cfg.grid_size, dim);
    if !cfg.mode.is_variational() {
        return s;
    }
    let ub = a_x_upper_bound(cfg);
    for i in 0..cfg.grid_size {
        for c in 0..dim {
            let (u, w) = raw[(i * dim + c) % raw.len()];
            s.a_x[i][c] = -1.0 + u * (0.9 * ub + 1.0);
            s.a_v[i][c] = 0.5 - 0.5 * (0.05 + 2.95 * w);
        }
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn exp_times_exp_of_negative_is_identity(entries in prop::collection::vec(-1.0f64..1.0, 16), norm in 0.0f64..10.0) {
        let m = Mat::from_vec(4, 4, entries);
        let m = if m.norm() > 0.0 { &m * (norm / m.norm()) } else { m };
        let p = mat_exp(&m).unwrap() * mat_exp(&(-&m)).unwrap();
        prop_assert!((p - Mat::identity(4, 4)).abs().max() < 1e-9);
    }

    #[test]
    fn cholesky_inverts_gram(entries in prop::collection::vec(-2.0f64..2.0, 16), diag in prop::collection::vec(0.1f64..3.0, 4)) {
        let mut l = Mat::from_vec(4, 4, entries).lower_triangle();
        for i in 0..4 {
            l[(i, i)] = diag[i];
        }
        let back = cholesky(&(&l * l.transpose())).unwrap();
        prop_assert!((back - &l).abs().max() < 1e-10);
    }

    #[test]
    fn kernel_matches_rk4_and_stays_psd(
        mode in any_mode(),
        beta in 0.5f64..12.0,
        dim in 1usize..3,
        raw in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..8),
        time_varying in any::<bool>(),
    ) {
        let cfg = mode_cfg(mode, beta, 9);
        let mut sched = schedule(&cfg, dim, &raw);
        if !time_varying {
            sched = VariationalSchedule::constant(cfg.grid_size, &sched.a_x[0].clone(), &sched.a_v[0].clone());
        }
        let sigma0 = default_sigma0(&cfg, dim);
        let kern = build_kernel(&cfg, &sched, &sigma0).unwrap();
        let oracle = rk4_kernel(&cfg, &sched, &sigma0[0], 128);
        for (i, nk) in kern.nodes.iter().enumerate() {
            for (c, ck) in nk.coords.iter().enumerate() {
                let (phi, sigma) = &oracle[i][c];
                prop_assert!(rel_frobenius(&ck.phi, phi) < 1e-6, "phi node {i}");
                prop_assert!(rel_frobenius(&ck.sigma, sigma) < 1e-6, "sigma node {i}");
                prop_assert!((&ck.sigma - ck.sigma.transpose()).abs().max() <= 1e-12 * ck.sigma.norm());
                let eig = ck.sigma.clone().symmetric_eigenvalues();
                prop_assert!(eig.min() > -1e-12 * ck.sigma.norm());
                // Φ is invertible with the determinant Liouville's formula predicts.
                let det = liouville_det(&cfg, &sched, i, c);
                prop_assert!(det > 0.0);
                prop_assert!((ck.phi.determinant() - det).abs() <= 1e-9 * ck.phi.norm_squared().max(1.0), "det node {i}");
                prop_assert!(ck.phi.iter().chain(ck.sigma.iter()).all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn conditional_score_identity(mode in any_mode(), beta in 1.0f64..10.0, node in 1usize..9, seed in any::<u64>()) {
        let cfg = mode_cfg(mode, beta, 9);
        let sched = VariationalSchedule::initial(&cfg, 2).unwrap();
        let kern = build_kernel(&cfg, &sched, &default_sigma0(&cfg, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = kern.state_dim();
        let a0v = vsmd::processes::standard_normal_vec(width, &mut rng);
        let eps = vsmd::processes::standard_normal_vec(width, &mut rng);
        let a0 = AugmentedState::from_slice(&a0v, 2);
        let (at, score) = forward_sample(&kern, &a0, node, &eps).unwrap();
        let nk = kern.node(node);
        let mean = (nk.phi_full() * nalgebra::DVector::from_vec(a0v)).as_slice().to_vec();
        let exact = gaussian_score(&at.to_vec(), &mean, &nk.sigma_full()).unwrap();
        let scale = exact.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (s, e) in score.iter().zip(&exact) {
            prop_assert!((s - e).abs() <= 1e-8 * scale, "{s} vs {e}");
        }
    }

    #[test]
    fn propagator_modes_agree_for_time_invariant_schedules(beta in 0.5f64..10.0, u in 0.0f64..1.0) {
        let cfg = mode_cfg(Mode::Vsuld, beta, 11);
        let ax = -1.0 + u * (0.9 * a_x_upper_bound(&cfg) + 1.0);
        let av = vsmd::processes::damping_transform(&cfg, ax).unwrap();
        let sched = VariationalSchedule::constant(cfg.grid_size, &[ax], &[av]);
        let a = build_kernel(&cfg, &sched, &default_sigma0(&cfg, 1)).unwrap();
        let cfg_b = DiffusionConfig { propagator: PropagatorMode::IntegralExponential, ..cfg.clone() };
        let b = build_kernel(&cfg_b, &sched, &default_sigma0(&cfg_b, 1)).unwrap();
        for (na, nb) in a.nodes.iter().zip(&b.nodes) {
            prop_assert!(rel_frobenius(&na.phi_full(), &nb.phi_full()) < 1e-10);
            prop_assert!(rel_frobenius(&na.sigma_full(), &nb.sigma_full()) < 1e-10);
        }
    }
}

#[test]
fn cld_forward_samples_reach_standard_normal() {
    let cfg = DiffusionConfig {
        horizon: 10.0,
        grid_size: 50,
        ..DiffusionConfig::cld(4.0)
    };
    let sched = VariationalSchedule::zeros(cfg.grid_size, 2);
    let kern = build_kernel(&cfg, &sched, &default_sigma0(&cfg, 2)).unwrap();
    let nk = kern.terminal();
    assert!((nk.sigma_full() - Mat::identity(4, 4)).abs().max() < 1e-6);
    assert!(nk.phi_full().abs().max() < 1e-6);

    let n = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = ndarray::Array2::from_shape_fn((n, 2), |(_, c)| if c == 0 { 2.0 } else { -1.0 });
    let eps = ndarray::Array2::from_shape_fn((n, 4), |_| rng.sample::<f64, _>(rand_distr::StandardNormal));
    let nodes = vec![cfg.grid_size - 1; n];
    let (at, _) = vsmd::processes::forward_sample_batch(&kern, x0.view(), &nodes, eps.view()).unwrap();
    let (mean, cov) = vsmd::samplers::sample_moments(at.view());
    let band = 3.0 * (2.0 / n as f64).sqrt();
    for i in 0..4 {
        assert!(mean[i].abs() < 3.0 / (n as f64).sqrt(), "mean {i}: {}", mean[i]);
        for j in 0..4 {
            let target = if i == j { 1.0 } else { 0.0 };
            assert!((cov[[i, j]] - target).abs() < band, "cov[{i},{j}] = {}", cov[[i, j]]);
        }
    }
}
