//! MLP score network with denoising score matching, Adam and an EMA shadow.
//!
//! Parameters live in one flat vector so the optimizer, EMA and checkpoints
//! treat them uniformly. Each dense layer stores `W` as `in × out` row-major
//! followed by the bias.

use std::collections::VecDeque;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::processes::{forward_sample_batch, AugmentedState, NodeKernel, PerturbationKernel};
use crate::samplers::ScoreModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => 1.0 - x.tanh().powi(2),
        }
    }
}

/// Dense feed-forward stack over a slice of a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    /// Offset of this network's parameters inside the flat vector.
    pub offset: usize,
}

/// Intermediate values kept for the backward pass.
pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn new(sizes: Vec<usize>, activation: Activation, offset: usize) -> Self {
        Mlp {
            sizes,
            activation,
            offset,
        }
    }

    pub fn n_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn layer_ranges(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut off = self.offset;
        self.sizes
            .windows(2)
            .map(|w| {
                let r = (off, w[0], w[1], off + w[0] * w[1]);
                off += w[0] * w[1] + w[1];
                r
            })
            .collect()
    }

    /// Fan-in scaled Gaussian weights, zero biases; the last layer optionally
    /// zero so the initial output vanishes.
    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], zero_last: bool, rng: &mut R) {
        let layers = self.layer_ranges();
        let n_layers = layers.len();
        for (l, &(w_off, fan_in, fan_out, b_off)) in layers.iter().enumerate() {
            let std = (1.0 / fan_in as f64).sqrt();
            for p in &mut params[w_off..w_off + fan_in * fan_out] {
                *p = if zero_last && l + 1 == n_layers {
                    0.0
                } else {
                    std * rng.sample::<f64, _>(StandardNormal)
                };
            }
            params[b_off..b_off + fan_out].iter_mut().for_each(|b| *b = 0.0);
        }
    }

    pub fn forward(&self, params: &[f64], x: Array2<f64>) -> (Array2<f64>, MlpCache) {
        let layers = self.layer_ranges();
        let n_layers = layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers.saturating_sub(1));
        let mut h = x;
        for (l, &(w_off, fan_in, fan_out, b_off)) in layers.iter().enumerate() {
            let w = ArrayView2::from_shape((fan_in, fan_out), &params[w_off..w_off + fan_in * fan_out])
                .expect("layer shape");
            let b = ArrayView1::from(&params[b_off..b_off + fan_out]);
            let z = h.dot(&w) + b;
            inputs.push(h);
            if l + 1 == n_layers {
                h = z;
            } else {
                let act = self.activation;
                h = z.mapv(|v| act.apply(v));
                pre.push(z);
            }
        }
        (h, MlpCache { inputs, pre })
    }

    pub fn eval(&self, params: &[f64], x: Array2<f64>) -> Array2<f64> {
        self.forward(params, x).0
    }

    /// Accumulates `∂L/∂θ` into `grad` and returns `∂L/∂input`.
    pub fn backward(&self, params: &[f64], cache: &MlpCache, grad_out: Array2<f64>, grad: &mut [f64]) -> Array2<f64> {
        let layers = self.layer_ranges();
        let mut g = grad_out;
        for (l, &(w_off, fan_in, fan_out, b_off)) in layers.iter().enumerate().rev() {
            let input = &cache.inputs[l];
            let gw = input.t().dot(&g);
            for (dst, src) in grad[w_off..w_off + fan_in * fan_out].iter_mut().zip(gw.iter()) {
                *dst += src;
            }
            let gb = g.sum_axis(Axis(0));
            for (dst, src) in grad[b_off..b_off + fan_out].iter_mut().zip(gb.iter()) {
                *dst += src;
            }
            let w = ArrayView2::from_shape((fan_in, fan_out), &params[w_off..w_off + fan_in * fan_out])
                .expect("layer shape");
            let mut gin = g.dot(&w.t());
            if l > 0 {
                let act = self.activation;
                ndarray::Zip::from(&mut gin)
                    .and(&cache.pre[l - 1])
                    .for_each(|gv, &z| *gv *= act.derivative(z));
            }
            g = gin;
        }
        g
    }
}

/// What the network's raw output represents.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// Output predicts `ε`; the score is `-L_t⁻ᵀ ε̂` and the loss is measured
    /// in noise space.
    #[default]
    Noise,
    /// Output is the score itself, regressed on `-L_t⁻ᵀ ε`.
    Score,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub time_features: usize,
    pub activation: Activation,
    pub parameterization: Parameterization,
    pub zero_init_output: bool,
    pub ema_beta: f64,
    /// Context encoder for conditional models; `None` for unconditional ones.
    pub encoder: Option<EncoderConfig>,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden: vec![128, 128, 128],
            time_features: 16,
            activation: Activation::Silu,
            parameterization: Parameterization::Noise,
            zero_init_output: true,
            ema_beta: 0.9999,
            encoder: None,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be non-empty and positive".into()));
        }
        if !self.time_features.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "time_features must be even, got {}",
                self.time_features
            )));
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            return Err(Error::Config(format!("ema_beta must lie in [0, 1), got {}", self.ema_beta)));
        }
        if let Some(enc) = &self.encoder {
            if enc.output_dim == 0 || enc.hidden.contains(&0) {
                return Err(Error::Config("encoder widths must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreNetwork {
    pub config: NetConfig,
    pub state_dim: usize,
    pub horizon: f64,
    pub score_mlp: Mlp,
    pub encoder: Option<Mlp>,
    pub params: Vec<f64>,
    pub ema: Vec<f64>,
}

impl ScoreNetwork {
    /// `context_dim` is the flattened conditioning window width (0 when
    /// unconditional).
    pub fn new<R: Rng + ?Sized>(config: NetConfig, state_dim: usize, horizon: f64, context_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if config.encoder.is_some() != (context_dim > 0) {
            return Err(Error::Config(
                "an encoder needs a context window and vice versa".into(),
            ));
        }
        let emb = config.encoder.as_ref().map_or(0, |e| e.output_dim);
        let mut sizes = vec![state_dim + config.time_features + emb];
        sizes.extend(&config.hidden);
        sizes.push(state_dim);
        let score_mlp = Mlp::new(sizes, config.activation, 0);
        let encoder = config.encoder.as_ref().map(|e| {
            let mut sizes = vec![context_dim];
            sizes.extend(&e.hidden);
            sizes.push(e.output_dim);
            Mlp::new(sizes, config.activation, score_mlp.n_params())
        });
        let total = score_mlp.n_params() + encoder.as_ref().map_or(0, |e| e.n_params());
        let mut params = vec![0.0; total];
        score_mlp.init(&mut params, config.zero_init_output, rng);
        if let Some(enc) = &encoder {
            enc.init(&mut params, false, rng);
        }
        Ok(ScoreNetwork {
            ema: params.clone(),
            config,
            state_dim,
            horizon,
            score_mlp,
            encoder,
            params,
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn context_dim(&self) -> usize {
        self.encoder.as_ref().map_or(0, |e| e.input_dim())
    }

    /// Sinusoidal features of `t / T`.
    pub fn time_features(&self, t: f64) -> Vec<f64> {
        let tau = t / self.horizon;
        let k = self.config.time_features / 2;
        let mut out = Vec::with_capacity(2 * k);
        for j in 1..=k {
            let w = std::f64::consts::PI * j as f64;
            out.push((w * tau).sin());
            out.push((w * tau).cos());
        }
        out
    }

    fn build_input(&self, a: ArrayView2<f64>, times: &[f64], emb: Option<&Array2<f64>>) -> Array2<f64> {
        let n = a.nrows();
        let f = self.config.time_features;
        let mut tf = Array2::zeros((n, f));
        let mut last: Option<(f64, Vec<f64>)> = None;
        for (i, &t) in times.iter().enumerate() {
            let feats = match &last {
                Some((lt, v)) if *lt == t => v.clone(),
                _ => {
                    let v = self.time_features(t);
                    last = Some((t, v.clone()));
                    v
                }
            };
            tf.row_mut(i).assign(&Array1::from(feats));
        }
        match emb {
            Some(e) => concatenate![Axis(1), a, tf, e.view()],
            None => concatenate![Axis(1), a, tf],
        }
    }

    /// Raw network output for rows of `a` at per-row times.
    pub fn raw_forward(&self, params: &[f64], a: ArrayView2<f64>, times: &[f64], context: Option<ArrayView2<f64>>) -> Result<Array2<f64>> {
        let emb = self.embed(params, context)?;
        let input = self.build_input(a, times, emb.as_ref());
        let out = self.score_mlp.eval(params, input);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("score network output"));
        }
        Ok(out)
    }

    fn embed(&self, params: &[f64], context: Option<ArrayView2<f64>>) -> Result<Option<Array2<f64>>> {
        match (&self.encoder, context) {
            (Some(enc), Some(ctx)) => Ok(Some(enc.eval(params, ctx.to_owned()))),
            (None, None) => Ok(None),
            (Some(_), None) => Err(Error::invalid("conditional network needs a context window")),
            (None, Some(_)) => Err(Error::invalid("unconditional network got a context window")),
        }
    }

    /// Score of a single state, using the live or EMA parameters.
    pub fn score_forward(&self, a: &AugmentedState, t: f64, kernel: &PerturbationKernel, use_ema: bool) -> Result<Vec<f64>> {
        let row = Array2::from_shape_vec((1, self.state_dim), a.to_vec())
            .map_err(|_| Error::invalid("state width differs from network"))?;
        let s = NetScore::new(self, kernel, use_ema).score(row.view(), t)?;
        Ok(s.row(0).to_vec())
    }

    /// DSM loss and its gradient on one batch.
    pub fn dsm_loss(&self, params: &[f64], kernel: &PerturbationKernel, batch: &DsmBatch) -> Result<(f64, Vec<f64>)> {
        let n = batch.x0.nrows();
        if n == 0 {
            return Err(Error::invalid("empty DSM batch"));
        }
        let (at, target) = forward_sample_batch(kernel, batch.x0.view(), &batch.nodes, batch.eps.view())?;
        let times: Vec<f64> = batch.nodes.iter().map(|&i| kernel.cfg.time(i)).collect();
        let (emb, enc_cache) = match (&self.encoder, &batch.context) {
            (Some(enc), Some(ctx)) => {
                let (e, c) = enc.forward(params, ctx.clone());
                (Some(e), Some(c))
            }
            (None, None) => (None, None),
            _ => return Err(Error::invalid("context presence differs from network")),
        };
        let input = self.build_input(at.view(), &times, emb.as_ref());
        let (out, cache) = self.score_mlp.forward(params, input);
        let goal = match self.config.parameterization {
            Parameterization::Noise => &batch.eps,
            Parameterization::Score => &target,
        };
        let resid = &out - goal;
        let loss = resid.iter().map(|r| r * r).sum::<f64>() / n as f64;
        if !loss.is_finite() {
            return Err(Error::numerical("DSM loss"));
        }
        let mut grad = vec![0.0; params.len()];
        let gin = self.score_mlp.backward(params, &cache, resid * (2.0 / n as f64), &mut grad);
        if let (Some(enc), Some(c)) = (&self.encoder, enc_cache) {
            let off = self.state_dim + self.config.time_features;
            let gemb = gin.slice(s![.., off..]).to_owned();
            enc.backward(params, &c, gemb, &mut grad);
        }
        Ok((loss, grad))
    }

    /// EMA update with warmup: effective decay `min(β, (1 + k)/(10 + k))`.
    pub fn update_ema(&mut self, step: u64) {
        let k = step as f64;
        let beta = self.config.ema_beta.min((1.0 + k) / (10.0 + k));
        for (e, p) in self.ema.iter_mut().zip(&self.params) {
            *e = beta * *e + (1.0 - beta) * p;
        }
    }
}

/// Inputs of one DSM step: data points, grid nodes and standard normals.
#[derive(Clone, Debug)]
pub struct DsmBatch {
    pub x0: Array2<f64>,
    pub nodes: Vec<usize>,
    pub eps: Array2<f64>,
    /// Flattened conditioning windows, one row per sample.
    pub context: Option<Array2<f64>>,
}

impl DsmBatch {
    /// Uniform rows of `data`, nodes uniform on `{1, …, N-1}`, fresh noise.
    pub fn draw<R: Rng + ?Sized>(data: ArrayView2<f64>, context: Option<ArrayView2<f64>>, kernel: &PerturbationKernel, batch_size: usize, rng: &mut R) -> Self {
        let n_data = data.nrows();
        let width = kernel.state_dim();
        let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..n_data)).collect();
        let nodes = (0..batch_size)
            .map(|_| rng.random_range(1..kernel.cfg.grid_size))
            .collect();
        let eps = Array2::from_shape_fn((batch_size, width), |_| rng.sample(StandardNormal));
        DsmBatch {
            x0: data.select(Axis(0), &idx),
            nodes,
            eps,
            context: context.map(|c| c.select(Axis(0), &idx)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

const LOSS_HISTORY: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub adam: Adam,
    pub batch_size: usize,
    pub loss_history: VecDeque<f64>,
}

impl TrainState {
    pub fn new(net: &ScoreNetwork, lr: f64, batch_size: usize) -> Self {
        TrainState {
            step: 0,
            adam: Adam::new(net.n_params(), lr),
            batch_size,
            loss_history: VecDeque::with_capacity(LOSS_HISTORY),
        }
    }

    pub fn recent_loss(&self, window: usize) -> f64 {
        let w = window.min(self.loss_history.len()).max(1);
        self.loss_history.iter().rev().take(w).sum::<f64>() / w as f64
    }
}

/// One Adam step on a fresh kernel-sampled batch, then the EMA update.
/// Returns the batch loss.
pub fn train_step<R: Rng + ?Sized>(state: &mut TrainState, net: &mut ScoreNetwork, kernel: &PerturbationKernel, data: ArrayView2<f64>, context: Option<ArrayView2<f64>>, rng: &mut R) -> Result<f64> {
    if data.nrows() == 0 {
        return Err(Error::invalid("empty training set"));
    }
    let batch = DsmBatch::draw(data, context, kernel, state.batch_size, rng);
    let (loss, grad) = net.dsm_loss(&net.params, kernel, &batch).map_err(|e| match e {
        Error::Numerical { context } => Error::numerical(format!("{context} at step {}", state.step)),
        other => other,
    })?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::numerical(format!("DSM gradient at step {}", state.step)));
    }
    state.adam.step(&mut net.params, &grad);
    net.update_ema(state.step);
    state.step += 1;
    if state.loss_history.len() == LOSS_HISTORY {
        state.loss_history.pop_front();
    }
    state.loss_history.push_back(loss);
    Ok(loss)
}

/// Maps raw outputs to scores for rows evaluated at a common time.
pub fn output_to_score(param: Parameterization, nk: &NodeKernel, raw: &mut Array2<f64>) {
    if param == Parameterization::Score {
        return;
    }
    let d = nk.dim();
    let b = nk.block_dim();
    let mut tmp = vec![0.0; b];
    for mut row in raw.rows_mut() {
        for (i, ck) in nk.coords.iter().enumerate() {
            for r in 0..b {
                tmp[r] = (0..b).map(|c| -ck.linv_t[(r, c)] * row[c * d + i]).sum();
            }
            for r in 0..b {
                row[r * d + i] = tmp[r];
            }
        }
    }
}

/// Adapter exposing a trained network as a [`ScoreModel`].
pub struct NetScore<'a> {
    pub net: &'a ScoreNetwork,
    pub kernel: &'a PerturbationKernel,
    pub use_ema: bool,
    /// Conditioning windows, one row per sampled path.
    pub context: Option<ArrayView2<'a, f64>>,
}

impl<'a> NetScore<'a> {
    pub fn new(net: &'a ScoreNetwork, kernel: &'a PerturbationKernel, use_ema: bool) -> Self {
        NetScore {
            net,
            kernel,
            use_ema,
            context: None,
        }
    }

    pub fn with_context(mut self, context: ArrayView2<'a, f64>) -> Self {
        self.context = Some(context);
        self
    }
}

impl ScoreModel for NetScore<'_> {
    fn state_dim(&self) -> usize {
        self.net.state_dim
    }

    fn score(&self, a: ArrayView2<f64>, t: f64) -> Result<Array2<f64>> {
        let params = if self.use_ema { &self.net.ema } else { &self.net.params };
        let times = vec![t; a.nrows()];
        let mut raw = self.net.raw_forward(params, a, &times, self.context)?;
        let nk = self.kernel.at_time(t)?;
        output_to_score(self.net.config.parameterization, &nk, &mut raw);
        Ok(raw)
    }
}
