//! Stochastic approximation of the diagonal variational scores through the
//! Feynman–Kac loss.
//!
//! For a backward state `a = (x, v)` at a node the per-sample loss is
//! `ℓ(A) = ½‖z̄‖² + β√γ·tr(A_v) + ζ·z̄ᵀz⃗` with `z̄ = √(βγ)(A_x x + A_v v)`
//! and `z⃗ = √(βγ)·s_v`. Only `A_x` is descended; `A_v` follows from the
//! damping transform. Without momentum the analogues are `z̄ = √β A_x x`,
//! `z⃗ = √β s_x` and a divergence term `β·tr(A_x)`.

use ndarray::{s, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::processes::{damping_transform, DiffusionConfig, Mode, VariationalSchedule};
use crate::samplers::{SamplerKind, ScoreModel, Trajectory};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Control cost, divergence and the score coupling term.
    #[default]
    FeynmanKac,
    /// Control cost and divergence only.
    ControlCost,
}

fn default_zeta() -> f64 {
    1.0
}

fn default_samples() -> usize {
    2048
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FKLossConfig {
    #[serde(default = "default_zeta")]
    pub zeta: f64,
    #[serde(default)]
    pub estimator: Estimator,
    /// Backward trajectories simulated per SA stage.
    #[serde(default = "default_samples")]
    pub samples_per_stage: usize,
    /// Nodes updated per stage, evenly spread; `None` updates all nodes.
    #[serde(default)]
    pub nodes_per_stage: Option<usize>,
    /// Ascend instead of descend the per-sample loss.
    #[serde(default)]
    pub flip_sign: bool,
    /// Overrides the `√(βγ)` factor between `A_a a` and `z̄`.
    #[serde(default)]
    pub z_scale: Option<f64>,
}

impl Default for FKLossConfig {
    fn default() -> Self {
        FKLossConfig {
            zeta: default_zeta(),
            estimator: Estimator::FeynmanKac,
            samples_per_stage: default_samples(),
            nodes_per_stage: None,
            flip_sign: false,
            z_scale: None,
        }
    }
}

impl FKLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.zeta.is_finite() {
            return Err(Error::Config("zeta must be finite".into()));
        }
        if self.samples_per_stage == 0 {
            return Err(Error::Config("samples_per_stage must be positive".into()));
        }
        if self.nodes_per_stage == Some(0) {
            return Err(Error::Config("nodes_per_stage must be positive".into()));
        }
        if let Some(z) = self.z_scale {
            if !(z > 0.0 && z.is_finite()) {
                return Err(Error::Config(format!("z_scale must be positive, got {z}")));
            }
        }
        Ok(())
    }

    /// Factor `c` with `z̄ = c·(A_a a)` and `z⃗ = c·s`.
    pub fn z_factor(&self, beta: f64, gamma: f64, momentum: bool) -> f64 {
        self.z_scale
            .unwrap_or_else(|| if momentum { (beta * gamma).sqrt() } else { beta.sqrt() })
    }
}

struct NodeTerms {
    beta: f64,
    gamma: f64,
    momentum: bool,
    z: f64,
}

fn node_terms(cfg: &DiffusionConfig, node: usize, flc: &FKLossConfig) -> NodeTerms {
    let beta = cfg.beta_on(node.min(cfg.grid_size - 2));
    let gamma = cfg.effective_gamma();
    let momentum = cfg.mode.has_momentum();
    NodeTerms {
        beta,
        gamma,
        momentum,
        z: flc.z_factor(beta, gamma, momentum),
    }
}

fn check_batch(states: ArrayView2<f64>, score_v: ArrayView2<f64>, d: usize, b: usize) -> Result<()> {
    if states.nrows() == 0 {
        return Err(Error::invalid("empty batch of backward states"));
    }
    if states.ncols() != b * d || score_v.dim() != (states.nrows(), d) {
        return Err(Error::invalid(format!(
            "fk loss expects states n×{} and scores n×{d}",
            b * d
        )));
    }
    Ok(())
}

/// Batch mean of `ℓ` at `node`. `score_v` is the noise-driven block of the
/// score (the `v` block with momentum, the `x` block without).
pub fn fk_loss_value(sched: &VariationalSchedule, cfg: &DiffusionConfig, node: usize, states: ArrayView2<f64>, score_v: ArrayView2<f64>, flc: &FKLossConfig) -> Result<f64> {
    let d = sched.dim();
    check_batch(states, score_v, d, cfg.block_dim())?;
    let nt = node_terms(cfg, node, flc);
    let ax = &sched.a_x[node];
    let av = &sched.a_v[node];
    let zeta = match flc.estimator {
        Estimator::FeynmanKac => flc.zeta,
        Estimator::ControlCost => 0.0,
    };
    let mut total = 0.0;
    for (row, srow) in states.rows().into_iter().zip(score_v.rows()) {
        let mut l = 0.0;
        for i in 0..d {
            let lin = if nt.momentum { ax[i] * row[i] + av[i] * row[d + i] } else { ax[i] * row[i] };
            let zbar = nt.z * lin;
            let zvec = nt.z * srow[i];
            l += 0.5 * zbar * zbar + zeta * zbar * zvec;
        }
        total += l;
    }
    let div: f64 = if nt.momentum {
        nt.beta * nt.gamma.sqrt() * av.iter().sum::<f64>()
    } else {
        nt.beta * ax.iter().sum::<f64>()
    };
    Ok(total / states.nrows() as f64 + div)
}

/// `∂ℓ/∂a_x` averaged over the batch, with `A_v` held fixed.
pub fn fk_loss_grad(sched: &VariationalSchedule, cfg: &DiffusionConfig, node: usize, states: ArrayView2<f64>, score_v: ArrayView2<f64>, flc: &FKLossConfig) -> Result<Vec<f64>> {
    let d = sched.dim();
    check_batch(states, score_v, d, cfg.block_dim())?;
    let nt = node_terms(cfg, node, flc);
    let ax = &sched.a_x[node];
    let av = &sched.a_v[node];
    let zeta = match flc.estimator {
        Estimator::FeynmanKac => flc.zeta,
        Estimator::ControlCost => 0.0,
    };
    let z2 = nt.z * nt.z;
    let mut g = vec![0.0; d];
    for (row, srow) in states.rows().into_iter().zip(score_v.rows()) {
        for i in 0..d {
            let x = row[i];
            let lin = if nt.momentum { ax[i] * x + av[i] * row[d + i] } else { ax[i] * x };
            g[i] += z2 * (lin + zeta * srow[i]) * x;
        }
    }
    let n = states.nrows() as f64;
    let div = if nt.momentum { 0.0 } else { nt.beta };
    Ok(g.into_iter().map(|v| v / n + div).collect())
}

fn default_eta0() -> f64 {
    3e-6
}

fn default_alpha() -> f64 {
    0.75
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaConfig {
    #[serde(default = "default_eta0")]
    pub eta0: f64,
    /// Decay exponent, must lie in `(½, 1]`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Extra multiplicative decay per stage (e.g. 0.99).
    #[serde(default)]
    pub step_decay: Option<f64>,
    #[serde(default = "default_sampler")]
    pub sampler: SamplerKind,
    #[serde(default)]
    pub fk: FKLossConfig,
}

fn default_sampler() -> SamplerKind {
    SamplerKind::Em
}

impl Default for SaConfig {
    fn default() -> Self {
        SaConfig {
            eta0: default_eta0(),
            alpha: default_alpha(),
            step_decay: None,
            sampler: default_sampler(),
            fk: FKLossConfig::default(),
        }
    }
}

impl SaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(Error::Config(format!("eta0 must be positive, got {}", self.eta0)));
        }
        if !(self.alpha > 0.5 && self.alpha <= 1.0) {
            return Err(Error::Config(format!(
                "step-size exponent alpha must lie in (0.5, 1], got {}",
                self.alpha
            )));
        }
        if let Some(g) = self.step_decay {
            if !(g > 0.0 && g <= 1.0) {
                return Err(Error::Config(format!("step_decay must lie in (0, 1], got {g}")));
            }
        }
        self.fk.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SAState {
    pub config: SaConfig,
    /// Number of completed stages.
    pub stage: u64,
    /// Coordinates clipped by the feasibility projection, cumulative.
    pub projections: u64,
}

impl SAState {
    pub fn new(config: SaConfig) -> Result<Self> {
        config.validate()?;
        Ok(SAState {
            config,
            stage: 0,
            projections: 0,
        })
    }
}

/// `η_k = η₀·k^{-α}` (times `decay^{k-1}` when a step decay is set), `k ≥ 1`.
pub fn step_size(sa: &SAState, k: u64) -> f64 {
    let k = k.max(1);
    let base = sa.config.eta0 / (k as f64).powf(sa.config.alpha);
    match sa.config.step_decay {
        Some(g) => base * g.powi((k - 1) as i32),
        None => base,
    }
}

/// Largest feasible `a_x`: keeps `1 - 2γa_x ≥ ε` and, after the damping
/// transform, `1 - 2a_v ≥ ε`.
pub fn a_x_upper_bound(cfg: &DiffusionConfig) -> f64 {
    let eps = cfg.eps_feasible;
    if cfg.mode.has_momentum() {
        let gamma = cfg.effective_gamma();
        let k_min = eps.max(gamma * gamma * eps * eps / (4.0 * cfg.damping_ratio));
        (1.0 - k_min) / (2.0 * gamma)
    } else {
        (1.0 - eps) / 2.0
    }
}

/// Nodes updated at a stage: all, or `m` evenly spread ones.
pub fn stage_nodes(cfg: &DiffusionConfig, flc: &FKLossConfig) -> Vec<usize> {
    let n = cfg.grid_size;
    match flc.nodes_per_stage {
        Some(m) if m < n => (0..m)
            .map(|j| ((j as f64 + 0.5) * n as f64 / m as f64) as usize)
            .collect(),
        _ => (0..n).collect(),
    }
}

/// Applies the transform `a_v = T(a_x)` at every node (variational momentum
/// modes only).
pub fn apply_damping_transform(cfg: &DiffusionConfig, sched: &mut VariationalSchedule) -> Result<()> {
    if !matches!(cfg.mode, Mode::Vscld | Mode::Vsuld) {
        return Ok(());
    }
    for (ax_row, av_row) in sched.a_x.iter().zip(sched.a_v.iter_mut()) {
        for (ax, av) in ax_row.iter().zip(av_row.iter_mut()) {
            *av = damping_transform(cfg, *ax)?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaNodeRecord {
    pub stage: u64,
    pub node: usize,
    pub mean_a_x: f64,
    pub mean_a_v: f64,
    pub eta: f64,
}

/// One SA stage: descend `ℓ` in `a_x` at the selected nodes using states
/// from freshly simulated backward trajectories (saved at every grid node),
/// project onto the feasible set, then re-derive `a_v`.
pub fn sa_step(sa: &mut SAState, sched: &mut VariationalSchedule, cfg: &DiffusionConfig, traj: &Trajectory, score: &dyn ScoreModel) -> Result<Vec<SaNodeRecord>> {
    if !cfg.mode.is_variational() {
        return Err(Error::invalid(format!(
            "mode {} has no variational score",
            cfg.mode.name()
        )));
    }
    let d = sched.dim();
    let flc = sa.config.fk.clone();
    let k = sa.stage + 1;
    let eta = step_size(sa, k);
    let sign = if flc.flip_sign { -1.0 } else { 1.0 };
    let upper = a_x_upper_bound(cfg);
    let noise_off = if cfg.mode.has_momentum() { d } else { 0 };
    let mut updates = Vec::new();
    for node in stage_nodes(cfg, &flc) {
        let t = cfg.time(node);
        let j = traj
            .times
            .iter()
            .position(|&tt| (tt - t).abs() <= 1e-9 * cfg.horizon.max(1.0))
            .ok_or_else(|| Error::invalid(format!("trajectory has no state at node {node} (t = {t})")))?;
        let states = traj.states[j].view();
        let sc = score.score(states, t)?;
        let sv = sc.slice(s![.., noise_off..noise_off + d]);
        let g = fk_loss_grad(sched, cfg, node, states, sv, &flc)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!("FK gradient at node {node}, stage {k}")));
        }
        updates.push((node, g));
    }
    for (node, g) in updates {
        for (ax, gi) in sched.a_x[node].iter_mut().zip(&g) {
            *ax -= sign * eta * gi;
            if *ax > upper {
                *ax = upper;
                sa.projections += 1;
            }
        }
    }
    apply_damping_transform(cfg, sched)?;
    sched.check_feasible(cfg)?;
    sa.stage = k;
    Ok((0..cfg.grid_size)
        .map(|node| SaNodeRecord {
            stage: k,
            node,
            mean_a_x: mean(&sched.a_x[node]),
            mean_a_v: mean(&sched.a_v[node]),
            eta,
        })
        .collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}
