//! Reverse-time integrators: Euler–Maruyama and ABOBA splitting for the
//! backward SDE, Euler and Heun for the probability-flow ODE.
//!
//! All samplers walk a uniform grid from `T` down to `0`. The drift
//! coefficients of a step are those of the schedule interval containing the
//! step midpoint.

use std::io::{Read, Write};

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::processes::{Coefficients, PerturbationKernel};

/// Approximation of the full augmented score `∇ log ρ_t(a)`.
pub trait ScoreModel {
    fn state_dim(&self) -> usize;

    /// Scores for each row of `a` (shape `n × state_dim`).
    fn score(&self, a: ArrayView2<f64>, t: f64) -> Result<Array2<f64>>;
}

#[derive(Clone, Copy, Debug)]
pub struct ZeroScore {
    pub state_dim: usize,
}

impl ScoreModel for ZeroScore {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn score(&self, a: ArrayView2<f64>, _t: f64) -> Result<Array2<f64>> {
        Ok(Array2::zeros(a.raw_dim()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Em,
    Aboba,
    OdeEuler,
    OdeHeun,
}

impl SamplerKind {
    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Em => "em",
            SamplerKind::Aboba => "aboba",
            SamplerKind::OdeEuler => "ode_euler",
            SamplerKind::OdeHeun => "ode_heun",
        }
    }
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "em" => Ok(SamplerKind::Em),
            "aboba" => Ok(SamplerKind::Aboba),
            "ode_euler" | "euler" => Ok(SamplerKind::OdeEuler),
            "ode_heun" | "heun" => Ok(SamplerKind::OdeHeun),
            other => Err(Error::Config(format!("unknown sampler '{other}'"))),
        }
    }
}

/// What happens on the step that lands on `t = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalStep {
    /// Noise-free Euler step from `t_1`, so no score is evaluated at `t = 0`.
    #[default]
    Denoise,
    /// Same update as every other step.
    Regular,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplerOptions {
    /// Number of integration steps; defaults to the kernel's `N - 1`.
    #[serde(default)]
    pub steps: Option<usize>,
    /// Keep every `save_every`-th state (0 keeps only the endpoints).
    #[serde(default)]
    pub save_every: usize,
    #[serde(default)]
    pub final_step: FinalStep,
    /// Disables the Brownian increments (testing aid).
    #[serde(default = "default_true")]
    pub noise: bool,
    #[serde(default = "default_divergence_bound")]
    pub divergence_bound: f64,
}

fn default_true() -> bool {
    true
}

fn default_divergence_bound() -> f64 {
    1e6
}

impl Default for SamplerOptions {
    fn default() -> Self {
        SamplerOptions {
            steps: None,
            save_every: 0,
            final_step: FinalStep::Denoise,
            noise: true,
            divergence_bound: default_divergence_bound(),
        }
    }
}

impl SamplerOptions {
    pub fn with_trajectory() -> Self {
        SamplerOptions {
            save_every: 1,
            ..Default::default()
        }
    }
}

/// Saved states of a batch of reverse-time paths.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// Strictly decreasing, from `T` to `0`.
    pub times: Vec<f64>,
    /// One `n × state_dim` array per saved time.
    pub states: Vec<Array2<f64>>,
    /// Data dimension `d` (the first `d` columns are `x`).
    pub dim: usize,
}

impl Trajectory {
    pub fn n_samples(&self) -> usize {
        self.states.first().map_or(0, |s| s.nrows())
    }

    pub fn terminal(&self) -> &Array2<f64> {
        self.states.last().expect("trajectory holds at least one state")
    }

    /// Generated data: `x` block of the `t = 0` state.
    pub fn samples_x(&self) -> Array2<f64> {
        self.terminal().slice(s![.., ..self.dim]).to_owned()
    }

    /// Path of one coordinate: `n × n_times`, ordered as `times`.
    pub fn coordinate_paths(&self, col: usize) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_samples(), self.times.len()));
        for (j, st) in self.states.iter().enumerate() {
            out.column_mut(j).assign(&st.column(col));
        }
        out
    }

    /// Rows `sample,t,x_1..x_d,v_1..v_d`, sample-major.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = std::io::BufWriter::new(w);
        let width = self.states.first().map_or(0, |s| s.ncols());
        let mut header = vec!["sample".to_string(), "t".to_string()];
        header.extend((0..self.dim).map(|i| format!("x{i}")));
        header.extend((0..width - self.dim).map(|i| format!("v{i}")));
        writeln!(w, "{}", header.join(",")).map_err(Error::Io)?;
        for s in 0..self.n_samples() {
            for (t, st) in self.times.iter().zip(&self.states) {
                write!(w, "{s},{}", fmt_f64(*t)).map_err(Error::Io)?;
                for v in st.row(s) {
                    write!(w, ",{}", fmt_f64(*v)).map_err(Error::Io)?;
                }
                writeln!(w).map_err(Error::Io)?;
            }
        }
        w.flush().map_err(Error::Io)
    }

    pub fn write_binary<W: Write>(&self, w: W) -> Result<()> {
        let mut w = std::io::BufWriter::new(w);
        let width = self.states.first().map_or(0, |s| s.ncols());
        w.write_all(TRAJ_MAGIC).map_err(Error::Io)?;
        for v in [self.n_samples(), width, self.dim, self.times.len()] {
            w.write_all(&(v as u64).to_le_bytes()).map_err(Error::Io)?;
        }
        for t in &self.times {
            w.write_all(&t.to_le_bytes()).map_err(Error::Io)?;
        }
        for st in &self.states {
            for v in st.iter() {
                w.write_all(&v.to_le_bytes()).map_err(Error::Io)?;
            }
        }
        w.flush().map_err(Error::Io)
    }

    pub fn read_binary<R: Read>(r: R) -> Result<Self> {
        let mut r = std::io::BufReader::new(r);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(Error::Io)?;
        if &magic != TRAJ_MAGIC {
            return Err(Error::invalid("not a trajectory file"));
        }
        let mut u = [0u64; 4];
        for slot in &mut u {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(Error::Io)?;
            *slot = u64::from_le_bytes(b);
        }
        let [n, width, dim, nt] = u.map(|v| v as usize);
        let read_f64 = |r: &mut std::io::BufReader<R>| -> Result<f64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(Error::Io)?;
            Ok(f64::from_le_bytes(b))
        };
        let times = (0..nt).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        let mut states = Vec::with_capacity(nt);
        for _ in 0..nt {
            let data = (0..n * width).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
            states.push(Array2::from_shape_vec((n, width), data).map_err(|e| Error::invalid(e.to_string()))?);
        }
        Ok(Trajectory { times, states, dim })
    }
}

const TRAJ_MAGIC: &[u8; 8] = b"VSMDTRJ1";

/// Scientific notation with 17 significant digits (exact round trip).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Per-interval linear dynamics in the `(x, v)` layout.
struct Dynamics {
    dim: usize,
    momentum: bool,
    coeffs: Vec<Coefficients>,
    horizon: f64,
    grid_dt: f64,
}

impl Dynamics {
    fn new(kernel: &PerturbationKernel) -> Result<Self> {
        let cfg = &kernel.cfg;
        let coeffs = (0..cfg.grid_size - 1)
            .map(|i| Coefficients::at(cfg, &kernel.sched, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dynamics {
            dim: kernel.dim(),
            momentum: cfg.mode.has_momentum(),
            coeffs,
            horizon: cfg.horizon,
            grid_dt: cfg.dt(),
        })
    }

    fn interval(&self, t_mid: f64) -> &Coefficients {
        let i = ((t_mid / self.grid_dt).floor().max(0.0) as usize).min(self.coeffs.len() - 1);
        &self.coeffs[i]
    }

    /// First column of the noise-driven block and `g gᵀ` scale.
    fn noise_block(&self, c: &Coefficients) -> (usize, f64) {
        if self.momentum {
            (self.dim, c.beta * c.gamma)
        } else {
            (0, c.beta)
        }
    }

    /// Forward drift `-½βD a` row by row.
    fn drift(&self, c: &Coefficients, a: &Array2<f64>) -> Array2<f64> {
        let d = self.dim;
        let hb = 0.5 * c.beta;
        let mut out = Array2::zeros(a.raw_dim());
        for (row, mut o) in a.rows().into_iter().zip(out.rows_mut()) {
            for i in 0..d {
                if self.momentum {
                    let (x, v) = (row[i], row[d + i]);
                    o[i] = hb * v;
                    o[d + i] = -hb * (c.spring[i] * x + c.gamma * c.friction[i] * v);
                } else {
                    o[i] = -hb * c.spring[i] * row[i];
                }
            }
        }
        out
    }

    /// Probability-flow velocity `-½βDa - ½ g gᵀ s`.
    fn ode_velocity(&self, score: &dyn ScoreModel, c: &Coefficients, a: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
        let mut f = self.drift(c, a);
        let s = score.score(a.view(), t)?;
        let (off, diff) = self.noise_block(c);
        let w = self.noise_width();
        let mut fb = f.slice_mut(s![.., off..off + w]);
        fb.scaled_add(-0.5 * diff, &s.slice(s![.., off..off + w]));
        Ok(f)
    }

    fn noise_width(&self) -> usize {
        self.dim
    }
}

fn check_state(a: &Array2<f64>, step: usize, h: f64, bound: f64) -> Result<()> {
    let mut worst: f64 = 0.0;
    for row in a.rows() {
        let n = row.dot(&row).sqrt();
        if !n.is_finite() {
            return Err(Error::Diverged { step, h, norm: f64::INFINITY });
        }
        worst = worst.max(n);
    }
    if worst > bound {
        return Err(Error::Diverged { step, h, norm: worst });
    }
    Ok(())
}

fn add_noise<R: Rng + ?Sized>(a: &mut Array2<f64>, off: usize, width: usize, scale: f64, rng: &mut R) {
    for mut row in a.rows_mut() {
        for j in off..off + width {
            let z: f64 = rng.sample(StandardNormal);
            row[j] += scale * z;
        }
    }
}

struct Recorder {
    save_every: usize,
    times: Vec<f64>,
    states: Vec<Array2<f64>>,
}

impl Recorder {
    fn new(save_every: usize, t0: f64, a0: &Array2<f64>) -> Self {
        Recorder {
            save_every,
            times: vec![t0],
            states: vec![a0.clone()],
        }
    }

    fn record(&mut self, step: usize, last: bool, t: f64, a: &Array2<f64>) {
        if last || (self.save_every > 0 && step.is_multiple_of(self.save_every)) {
            self.times.push(t);
            self.states.push(a.clone());
        }
    }

    fn finish(self, dim: usize) -> Trajectory {
        Trajectory {
            times: self.times,
            states: self.states,
            dim,
        }
    }
}

fn grid(kernel: &PerturbationKernel, opts: &SamplerOptions) -> Result<(usize, f64)> {
    let steps = opts.steps.unwrap_or(kernel.cfg.grid_size - 1);
    if steps == 0 {
        return Err(Error::invalid("sampler needs at least one step"));
    }
    Ok((steps, kernel.cfg.horizon / steps as f64))
}

fn check_prior(kernel: &PerturbationKernel, score: &dyn ScoreModel, prior: &Array2<f64>) -> Result<()> {
    let n = kernel.state_dim();
    if prior.ncols() != n || score.state_dim() != n {
        return Err(Error::invalid(format!(
            "state width mismatch: kernel {n}, prior {}, score {}",
            prior.ncols(),
            score.state_dim()
        )));
    }
    if prior.nrows() == 0 {
        return Err(Error::invalid("empty prior batch"));
    }
    Ok(())
}

fn time_at(horizon: f64, steps: usize, n: usize) -> f64 {
    if n == steps {
        0.0
    } else {
        horizon * (steps - n) as f64 / steps as f64
    }
}

/// Reverse-time Euler–Maruyama:
/// `a ← a + h(½βDa + g gᵀ s(a, t)) + √(h) g ξ`.
pub fn backward_em<R: Rng + ?Sized>(score: &dyn ScoreModel, kernel: &PerturbationKernel, prior: Array2<f64>, opts: &SamplerOptions, rng: &mut R) -> Result<Trajectory> {
    check_prior(kernel, score, &prior)?;
    let dyns = Dynamics::new(kernel)?;
    let (steps, h) = grid(kernel, opts)?;
    let mut a = prior;
    let mut rec = Recorder::new(opts.save_every, dyns.horizon, &a);
    for n in 0..steps {
        let t = time_at(dyns.horizon, steps, n);
        let last = n + 1 == steps;
        let c = dyns.interval(t - 0.5 * h);
        let (off, diff) = dyns.noise_block(c);
        let f = dyns.drift(c, &a);
        let sc = score.score(a.view(), t)?;
        a.scaled_add(-h, &f);
        a.slice_mut(s![.., off..off + dyns.dim])
            .scaled_add(h * diff, &sc.slice(s![.., off..off + dyns.dim]));
        let denoise = last && opts.final_step == FinalStep::Denoise;
        if opts.noise && !denoise {
            add_noise(&mut a, off, dyns.dim, (diff * h).sqrt(), rng);
        }
        check_state(&a, n + 1, h, opts.divergence_bound)?;
        rec.record(n + 1, last, time_at(dyns.horizon, steps, n + 1), &a);
    }
    Ok(rec.finish(dyns.dim))
}

/// Symmetric ABOBA splitting of the reverse kinetic dynamics. The O-part
/// integrates friction exactly, with the score held at its value at the
/// start of the step.
pub fn backward_aboba<R: Rng + ?Sized>(score: &dyn ScoreModel, kernel: &PerturbationKernel, prior: Array2<f64>, opts: &SamplerOptions, rng: &mut R) -> Result<Trajectory> {
    check_prior(kernel, score, &prior)?;
    let dyns = Dynamics::new(kernel)?;
    if !dyns.momentum {
        return Err(Error::invalid("ABOBA splitting needs a velocity block"));
    }
    let (steps, h) = grid(kernel, opts)?;
    let d = dyns.dim;
    let mut a = prior;
    let mut rec = Recorder::new(opts.save_every, dyns.horizon, &a);
    for n in 0..steps {
        let t = time_at(dyns.horizon, steps, n);
        let last = n + 1 == steps;
        if last && opts.final_step == FinalStep::Denoise {
            // Noise-free Euler step, shared with the EM sampler.
            let c = dyns.interval(t - 0.5 * h);
            let f = dyns.drift(c, &a);
            let sc = score.score(a.view(), t)?;
            a.scaled_add(-h, &f);
            a.slice_mut(s![.., d..]).scaled_add(h * c.beta * c.gamma, &sc.slice(s![.., d..]));
            check_state(&a, n + 1, h, opts.divergence_bound)?;
            rec.record(n + 1, true, 0.0, &a);
            break;
        }
        let c = dyns.interval(t - 0.5 * h);
        let qb = 0.25 * h * c.beta;
        let sc = score.score(a.view(), t)?;
        a_half_step(&mut a, d, qb);
        b_half_step(&mut a, d, qb, &c.spring);
        let diff = c.beta * c.gamma;
        for (mut row, srow) in a.rows_mut().into_iter().zip(sc.rows()) {
            for i in 0..d {
                let lam = 0.5 * diff * c.friction[i];
                let grow = (lam * h).exp();
                let phi1 = (lam * h).exp_m1() / lam;
                let var = diff * (2.0 * lam * h).exp_m1() / (2.0 * lam);
                let mut v = grow * row[d + i] + diff * srow[d + i] * phi1;
                if opts.noise {
                    let z: f64 = rng.sample(StandardNormal);
                    v += var.sqrt() * z;
                }
                row[d + i] = v;
            }
        }
        b_half_step(&mut a, d, qb, &c.spring);
        a_half_step(&mut a, d, qb);
        check_state(&a, n + 1, h, opts.divergence_bound)?;
        rec.record(n + 1, last, time_at(dyns.horizon, steps, n + 1), &a);
    }
    Ok(rec.finish(d))
}

/// Reverse free flight over half a step: `x ← x - (h/2)·½β v`.
fn a_half_step(a: &mut Array2<f64>, d: usize, qb: f64) {
    for mut row in a.rows_mut() {
        for i in 0..d {
            row[i] -= qb * row[d + i];
        }
    }
}

/// Reverse spring kick over half a step: `v ← v + (h/2)·½β k x`.
fn b_half_step(a: &mut Array2<f64>, d: usize, qb: f64, spring: &[f64]) {
    for mut row in a.rows_mut() {
        for i in 0..d {
            row[d + i] += qb * spring[i] * row[i];
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdeMethod {
    Euler,
    Heun,
}

/// Probability-flow ODE `da/dt = -½βDa - ½ g gᵀ s(a, t)` integrated
/// backward. Deterministic given the prior batch.
pub fn pf_ode(score: &dyn ScoreModel, kernel: &PerturbationKernel, prior: Array2<f64>, opts: &SamplerOptions, method: OdeMethod) -> Result<Trajectory> {
    check_prior(kernel, score, &prior)?;
    let dyns = Dynamics::new(kernel)?;
    let (steps, h) = grid(kernel, opts)?;
    let mut a = prior;
    let mut rec = Recorder::new(opts.save_every, dyns.horizon, &a);
    for n in 0..steps {
        let t = time_at(dyns.horizon, steps, n);
        let t_next = time_at(dyns.horizon, steps, n + 1);
        let last = n + 1 == steps;
        let c = dyns.interval(t - 0.5 * h);
        let f1 = dyns.ode_velocity(score, c, &a, t)?;
        let euler_only = method == OdeMethod::Euler || (last && opts.final_step == FinalStep::Denoise);
        if euler_only {
            a.scaled_add(-h, &f1);
        } else {
            let mut pred = a.clone();
            pred.scaled_add(-h, &f1);
            let f2 = dyns.ode_velocity(score, c, &pred, t_next)?;
            a.scaled_add(-0.5 * h, &f1);
            a.scaled_add(-0.5 * h, &f2);
        }
        check_state(&a, n + 1, h, opts.divergence_bound)?;
        rec.record(n + 1, last, t_next, &a);
    }
    Ok(rec.finish(dyns.dim))
}

/// Draws the prior batch and runs the chosen integrator.
pub fn sample<R: Rng + ?Sized>(kind: SamplerKind, score: &dyn ScoreModel, kernel: &PerturbationKernel, n: usize, opts: &SamplerOptions, rng: &mut R) -> Result<Trajectory> {
    let prior = kernel.terminal_prior().sample(n, rng);
    match kind {
        SamplerKind::Em => backward_em(score, kernel, prior, opts, rng),
        SamplerKind::Aboba => backward_aboba(score, kernel, prior, opts, rng),
        SamplerKind::OdeEuler => pf_ode(score, kernel, prior, opts, OdeMethod::Euler),
        SamplerKind::OdeHeun => pf_ode(score, kernel, prior, opts, OdeMethod::Heun),
    }
}

/// Classic RK4 on the probability-flow ODE with `substeps` per grid step.
/// Reference solution for integrator tests.
pub fn pf_ode_rk4(score: &dyn ScoreModel, kernel: &PerturbationKernel, prior: Array2<f64>, steps: usize, t_end: f64) -> Result<Array2<f64>> {
    check_prior(kernel, score, &prior)?;
    let dyns = Dynamics::new(kernel)?;
    let t0 = dyns.horizon;
    let h = (t0 - t_end) / steps as f64;
    let mut a = prior;
    for n in 0..steps {
        let t = t0 - n as f64 * h;
        // Coefficients are piecewise constant, so keep one interval per step.
        let c = dyns.interval(t - 0.5 * h);
        let k1 = dyns.ode_velocity(score, c, &a, t)?;
        let y2 = &a - &(&k1 * (0.5 * h));
        let k2 = dyns.ode_velocity(score, c, &y2, t - 0.5 * h)?;
        let y3 = &a - &(&k2 * (0.5 * h));
        let k3 = dyns.ode_velocity(score, c, &y3, t - 0.5 * h)?;
        let y4 = &a - &(&k3 * h);
        let k4 = dyns.ode_velocity(score, c, &y4, t - h)?;
        let incr = (&k1 + &(&k2 * 2.0) + &(&k3 * 2.0) + &k4) * (h / 6.0);
        a -= &incr;
    }
    Ok(a)
}

/// Mean and covariance of the rows of `x`.
pub fn sample_moments(x: ArrayView2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = x.nrows() as f64;
    let mean = x.mean_axis(Axis(0)).expect("nonempty sample");
    let centered = &x - &mean;
    let cov = centered.t().dot(&centered) / (n - 1.0);
    (mean.to_vec(), cov)
}
