//! The alternating training loop: score-matching epochs on the cached
//! kernel, then one stochastic-approximation stage on the variational
//! scores from simulated backward trajectories, then a kernel rebuild.
//! State is checkpointed as versioned JSON after every stage.

use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytic::GaussianData;
use crate::config::{DataConfig, RunConfig};
use crate::data::{context_pairs, gen_series, gen_toy, Standardizer};
use crate::error::{Error, Result};
use crate::processes::{build_kernel, default_sigma0, PerturbationKernel, VariationalSchedule};
use crate::samplers::{sample, SamplerOptions};
use crate::scorenet::{train_step, NetScore, ScoreNetwork, TrainState};
use crate::variational::{sa_step, SAState};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Points (and conditioning windows for series) the score network fits.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub x: Array2<f64>,
    pub context: Option<Array2<f64>>,
    /// Fitted on the training part of a series; `None` otherwise.
    pub standardizer: Option<Standardizer>,
}

/// Standardized series split at `train_fraction`.
pub struct SeriesSplit {
    pub standardizer: Standardizer,
    /// Whole series in standardized units.
    pub series: Array2<f64>,
    pub train_len: usize,
}

pub fn split_series(cfg: &RunConfig) -> Result<SeriesSplit> {
    let DataConfig::Series(spec) = &cfg.data else {
        return Err(Error::Config("data source is not a series".into()));
    };
    let raw = gen_series(spec)?;
    let train_len = (raw.nrows() as f64 * cfg.forecast.train_fraction).round() as usize;
    if train_len <= spec.context + 1 {
        return Err(Error::Config(format!(
            "training part of {train_len} rows is shorter than the context window {}",
            spec.context
        )));
    }
    let standardizer = Standardizer::fit(raw.slice(s![..train_len, ..]));
    let series = standardizer.apply(raw.view());
    Ok(SeriesSplit {
        standardizer,
        series,
        train_len,
    })
}

pub fn load_training_data(cfg: &RunConfig) -> Result<TrainingData> {
    match &cfg.data {
        DataConfig::Toy(spec) => Ok(TrainingData {
            x: gen_toy(spec)?.points,
            context: None,
            standardizer: None,
        }),
        DataConfig::Gaussian { variances, n_points, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            Ok(TrainingData {
                x: GaussianData::diagonal(variances)?.sample(*n_points, &mut rng)?,
                context: None,
                standardizer: None,
            })
        }
        DataConfig::Series(spec) => {
            let split = split_series(cfg)?;
            let (windows, targets) = context_pairs(split.series.slice(s![..split.train_len, ..]), spec.context);
            Ok(TrainingData {
                x: targets,
                context: Some(windows),
                standardizer: Some(split.standardizer),
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub stage: usize,
    pub step: u64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRecord {
    pub stage: usize,
    pub node: usize,
    pub coord: usize,
    pub a_x: f64,
    pub a_v: f64,
    pub eta: f64,
}

#[derive(Clone, Debug, Default)]
pub struct StageReport {
    pub losses: Vec<LossRecord>,
    pub schedule: Vec<ScheduleRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub crate_version: String,
    pub config_hash: String,
    /// Completed stages.
    pub stage: usize,
    pub net: ScoreNetwork,
    pub sched: VariationalSchedule,
    pub train_state: TrainState,
    pub sa_state: Option<SAState>,
    pub rng: ChaCha8Rng,
    pub standardizer: Option<Standardizer>,
}

impl Checkpoint {
    /// Writes JSON next to `path` and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        let file = std::fs::File::create(&tmp)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)
            .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let ck: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }

    /// Refuses a checkpoint produced under different model sections.
    pub fn check_config(&self, cfg: &RunConfig) -> Result<()> {
        let want = cfg.model_hash();
        if self.config_hash != want {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {} vs config {}; the diffusion, net, data, train, sa or seed settings differ from the run that wrote it",
                short(&self.config_hash),
                short(&want)
            )));
        }
        Ok(())
    }

    /// Kernel for the stored schedule.
    pub fn kernel(&self, cfg: &RunConfig) -> Result<PerturbationKernel> {
        build_kernel(&cfg.diffusion, &self.sched, &default_sigma0(&cfg.diffusion, self.sched.dim()))
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub data: TrainingData,
    pub net: ScoreNetwork,
    pub sched: VariationalSchedule,
    pub kernel: PerturbationKernel,
    pub state: TrainState,
    pub sa: Option<SAState>,
    /// Completed stages.
    pub stage: usize,
    pub rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let data = load_training_data(&cfg)?;
        let dim = data.x.ncols();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let sched = VariationalSchedule::initial(&cfg.diffusion, dim)?;
        let kernel = build_kernel(&cfg.diffusion, &sched, &default_sigma0(&cfg.diffusion, dim))?;
        let ctx_dim = data.context.as_ref().map_or(0, |c| c.ncols());
        let net = ScoreNetwork::new(cfg.net.clone(), kernel.state_dim(), cfg.diffusion.horizon, ctx_dim, &mut rng)?;
        let state = TrainState::new(&net, cfg.train.lr, cfg.train.batch_size);
        let sa = if cfg.diffusion.mode.is_variational() {
            Some(SAState::new(cfg.sa.clone())?)
        } else {
            None
        };
        Ok(Trainer {
            cfg,
            data,
            net,
            sched,
            kernel,
            state,
            sa,
            stage: 0,
            rng,
        })
    }

    pub fn resume(cfg: RunConfig, ck: Checkpoint) -> Result<Self> {
        cfg.validate()?;
        ck.check_config(&cfg)?;
        let data = load_training_data(&cfg)?;
        let kernel = ck.kernel(&cfg)?;
        Ok(Trainer {
            cfg,
            data,
            net: ck.net,
            sched: ck.sched,
            kernel,
            state: ck.train_state,
            sa: ck.sa_state,
            stage: ck.stage,
            rng: ck.rng,
        })
    }

    pub fn finished(&self) -> bool {
        self.stage >= self.cfg.train.stages
    }

    /// Score epoch followed, for variational modes, by one SA stage. The
    /// schedule is reported for every mode (`eta = 0` without SA).
    pub fn run_stage(&mut self) -> Result<StageReport> {
        let mut report = StageReport::default();
        let stage = self.stage + 1;
        let log_every = self.cfg.train.log_every as u64;
        for _ in 0..self.cfg.train.steps_per_stage {
            let loss = train_step(
                &mut self.state,
                &mut self.net,
                &self.kernel,
                self.data.x.view(),
                self.data.context.as_ref().map(|c| c.view()),
                &mut self.rng,
            )?;
            if self.state.step.is_multiple_of(log_every) {
                report.losses.push(LossRecord {
                    stage,
                    step: self.state.step,
                    loss,
                });
            }
        }
        let mut eta = 0.0;
        if let Some(sa) = self.sa.as_mut() {
            let n = sa.config.fk.samples_per_stage;
            let ctx = self.data.context.as_ref().map(|c| {
                let idx: Vec<usize> = (0..n).map(|_| self.rng.random_range(0..c.nrows())).collect();
                c.select(Axis(0), &idx)
            });
            let mut score = NetScore::new(&self.net, &self.kernel, true);
            if let Some(c) = &ctx {
                score = score.with_context(c.view());
            }
            let traj = sample(sa.config.sampler, &score, &self.kernel, n, &SamplerOptions::with_trajectory(), &mut self.rng)?;
            let records = sa_step(sa, &mut self.sched, &self.cfg.diffusion, &traj, &score)?;
            eta = records.first().map_or(0.0, |r| r.eta);
            self.kernel = build_kernel(
                &self.cfg.diffusion,
                &self.sched,
                &default_sigma0(&self.cfg.diffusion, self.sched.dim()),
            )?;
        }
        for (node, (ax, av)) in self.sched.a_x.iter().zip(&self.sched.a_v).enumerate() {
            for (coord, (&a_x, &a_v)) in ax.iter().zip(av).enumerate() {
                report.schedule.push(ScheduleRecord {
                    stage,
                    node,
                    coord,
                    a_x,
                    a_v,
                    eta,
                });
            }
        }
        self.stage = stage;
        Ok(report)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: self.cfg.model_hash(),
            stage: self.stage,
            net: self.net.clone(),
            sched: self.sched.clone(),
            train_state: self.state.clone(),
            sa_state: self.sa.clone(),
            rng: self.rng.clone(),
            standardizer: self.data.standardizer.clone(),
        }
    }
}
