use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vsmd::analytic::{AnalyticScore, GaussianData};
use vsmd::config::{DataConfig, RunConfig, TrainConfig};
use vsmd::data::ToySpec;
use vsmd::processes::{build_kernel, default_sigma0, forward_sample_batch, DiffusionConfig, VariationalSchedule};
use vsmd::samplers::ScoreModel;
use vsmd::scorenet::{DsmBatch, NetConfig, NetScore, Parameterization, ScoreNetwork};
use vsmd::training::{Checkpoint, Trainer};
use vsmd::variational::{FKLossConfig, SaConfig};

fn gaussian_config(diffusion: DiffusionConfig, steps: usize, stages: usize) -> RunConfig {
    RunConfig {
        seed: 4,
        diffusion,
        net: NetConfig {
            hidden: vec![32, 32],
            ema_beta: 0.99,
            ..Default::default()
        },
        data: DataConfig::Gaussian {
            variances: vec![1.0, 4.0],
            n_points: 4000,
            seed: 1,
        },
        train: TrainConfig {
            lr: 2e-3,
            batch_size: 128,
            steps_per_stage: steps,
            stages,
            log_every: 10,
        },
        sa: SaConfig {
            eta0: 1e-3,
            fk: FKLossConfig {
                samples_per_stage: 128,
                ..Default::default()
            },
            ..Default::default()
        },
        ..Default::default()
    }
}

fn mean_loss(records: &[vsmd::training::LossRecord]) -> f64 {
    records.iter().map(|r| r.loss).sum::<f64>() / records.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn dsm_gradient_matches_finite_differences(
        seed in any::<u64>(),
        score_param in any::<bool>(),
        hidden in prop::collection::vec(3usize..10, 1..3),
        beta in 2.0f64..10.0,
    ) {
        let cfg = DiffusionConfig { grid_size: 21, ..DiffusionConfig::vsuld(beta, 0.7) };
        let sched = VariationalSchedule::initial(&cfg, 2).unwrap();
        let kern = build_kernel(&cfg, &sched, &default_sigma0(&cfg, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nc = NetConfig {
            hidden,
            time_features: 4,
            parameterization: if score_param { Parameterization::Score } else { Parameterization::Noise },
            zero_init_output: false,
            ..Default::default()
        };
        let net = ScoreNetwork::new(nc, 4, 1.0, 0, &mut rng).unwrap();
        let data = Array2::from_shape_fn((32, 2), |_| rng.sample::<f64, _>(StandardNormal));
        let batch = DsmBatch::draw(data.view(), None, &kern, 16, &mut rng);
        let (_, grad) = net.dsm_loss(&net.params, &kern, &batch).unwrap();
        for _ in 0..20 {
            let k = rng.random_range(0..net.n_params());
            let h = 1e-6 * net.params[k].abs().max(1.0);
            let mut p = net.params.clone();
            p[k] += h;
            let up = net.dsm_loss(&p, &kern, &batch).unwrap().0;
            p[k] -= 2.0 * h;
            let down = net.dsm_loss(&p, &kern, &batch).unwrap().0;
            let fd = (up - down) / (2.0 * h);
            let err = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-6);
            prop_assert!(err < 1e-4, "param {k}: fd {fd} vs analytic {}", grad[k]);
        }
    }
}

#[test]
fn dsm_batches_come_from_the_closed_form_kernel() {
    let cfg = DiffusionConfig { grid_size: 21, ..DiffusionConfig::vsuld(5.0, 0.7) };
    let sched = VariationalSchedule::initial(&cfg, 2).unwrap();
    let kern = build_kernel(&cfg, &sched, &default_sigma0(&cfg, 2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data = Array2::from_shape_fn((10, 2), |_| rng.sample::<f64, _>(StandardNormal));
    let batch = DsmBatch::draw(data.view(), None, &kern, 64, &mut rng);
    assert!(batch.nodes.iter().all(|&n| n >= 1 && n < cfg.grid_size));
    let (at, target) = forward_sample_batch(&kern, batch.x0.view(), &batch.nodes, batch.eps.view()).unwrap();
    assert!(at.iter().chain(target.iter()).all(|v| v.is_finite()));
}

#[test]
fn score_training_fits_gaussian_marginal_score() {
    let cfg = gaussian_config(DiffusionConfig { grid_size: 51, ..DiffusionConfig::cld(10.0) }, 3000, 1);
    let mut tr = Trainer::new(cfg.clone()).unwrap();
    let rep = tr.run_stage().unwrap();
    let first = mean_loss(&rep.losses[..10]);
    let last = mean_loss(&rep.losses[rep.losses.len() - 10..]);
    assert!(last <= 0.5 * first, "loss {first} -> {last}");

    let data = GaussianData::diagonal(&[1.0, 4.0]).unwrap();
    let exact = AnalyticScore::new(&tr.kernel, data.clone());
    let net = NetScore::new(&tr.net, &tr.kernel, true);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x0 = data.sample(400, &mut rng).unwrap();
    let mut worst = 0.0f64;
    for node in (cfg.diffusion.grid_size / 10..cfg.diffusion.grid_size).step_by(5) {
        let t = cfg.diffusion.time(node);
        let eps = Array2::from_shape_fn((x0.nrows(), 4), |_| rng.sample::<f64, _>(StandardNormal));
        let (at, _) = forward_sample_batch(&tr.kernel, x0.view(), &vec![node; x0.nrows()], eps.view()).unwrap();
        let diff = net.score(at.view(), t).unwrap() - exact.score(at.view(), t).unwrap();
        let mse = diff.mapv(|v| v * v).mean().unwrap();
        worst = worst.max(mse);
    }
    assert!(worst < 5e-2, "per-dimension score MSE {worst}");
}

#[test]
fn resumed_training_is_bitwise_identical() {
    let cfg = gaussian_config(DiffusionConfig { grid_size: 21, ..DiffusionConfig::vsuld(5.0, 0.7) }, 50, 3);
    let dir = std::env::temp_dir().join(format!("vsmd-resume-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("checkpoint.json");

    let mut full = Trainer::new(cfg.clone()).unwrap();
    let mut log_full = Vec::new();
    while !full.finished() {
        log_full.push(full.run_stage().unwrap());
    }

    let mut part = Trainer::new(cfg.clone()).unwrap();
    let mut log_part = vec![part.run_stage().unwrap(), part.run_stage().unwrap()];
    part.checkpoint().save(&path).unwrap();
    drop(part);
    let mut resumed = Trainer::resume(cfg.clone(), Checkpoint::load(&path).unwrap()).unwrap();
    log_part.push(resumed.run_stage().unwrap());
    std::fs::remove_dir_all(&dir).ok();

    for (a, b) in log_full.iter().zip(&log_part) {
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.schedule, b.schedule);
    }
    assert_eq!(full.net.params, resumed.net.params);
    assert_eq!(full.net.ema, resumed.net.ema);
    assert_eq!(full.sched, resumed.sched);

    let other = RunConfig { seed: 5, ..cfg };
    assert!(matches!(
        Trainer::resume(other, full.checkpoint()),
        Err(vsmd::Error::Checkpoint(_))
    ));
}

#[test]
fn variational_schedule_separates_stretched_axis() {
    let mut cfg = gaussian_config(DiffusionConfig { grid_size: 31, ..DiffusionConfig::vsuld(5.0, 0.7) }, 400, 6);
    cfg.data = DataConfig::Toy(ToySpec::spiral_8y(4000, 3));
    cfg.sa.eta0 = 1e-2;
    let mut tr = Trainer::new(cfg).unwrap();
    while !tr.finished() {
        tr.run_stage().unwrap();
    }
    let n = tr.sched.grid_size() as f64;
    let mean = |c: usize| tr.sched.a_x.iter().map(|r| r[c]).sum::<f64>() / n;
    let (x, y) = (mean(0), mean(1));
    assert!((x - y).abs() > 1e-3, "mean a_x: x {x}, y {y}");
    assert!(y.abs() > x.abs(), "stretched axis moved less: x {x}, y {y}");
}
