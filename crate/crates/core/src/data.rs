//! Toy 2-D datasets, a synthetic multivariate series corpus, and the
//! context encoder used by the conditional forecaster.

use std::io::Write;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorenet::Mlp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyKind {
    Spiral,
    Checkerboard,
    Gaussian,
    AnisotropicGaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StretchAxis {
    X,
    Y,
    None,
}

impl StretchAxis {
    pub fn index(self) -> Option<usize> {
        match self {
            StretchAxis::X => Some(0),
            StretchAxis::Y => Some(1),
            StretchAxis::None => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySpec {
    pub kind: ToyKind,
    pub stretch_axis: StretchAxis,
    pub stretch_factor: f64,
    pub n_points: usize,
    pub seed: u64,
    /// Gaussian jitter of spiral points, in raw (pre-normalization) units.
    pub jitter: f64,
    /// Rescale so the unstretched axis has unit variance (spiral and
    /// checkerboard only; the Gaussian kinds are already standard).
    pub normalize: bool,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            kind: ToyKind::Spiral,
            stretch_axis: StretchAxis::Y,
            stretch_factor: 8.0,
            n_points: 10_000,
            seed: 0,
            jitter: 0.05,
            normalize: true,
        }
    }
}

impl ToySpec {
    pub fn spiral_8y(n_points: usize, seed: u64) -> Self {
        ToySpec {
            n_points,
            seed,
            ..Default::default()
        }
    }

    pub fn checkerboard_6x(n_points: usize, seed: u64) -> Self {
        ToySpec {
            kind: ToyKind::Checkerboard,
            stretch_axis: StretchAxis::X,
            stretch_factor: 6.0,
            n_points,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stretch_factor >= 1.0 && self.stretch_factor.is_finite()) {
            return Err(Error::Config(format!(
                "stretch_factor must be at least 1, got {}",
                self.stretch_factor
            )));
        }
        if self.n_points == 0 {
            return Err(Error::Config("n_points must be positive".into()));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::Config("jitter must be non-negative".into()));
        }
        Ok(())
    }
}

/// Two-arm Archimedean spiral, radius up to 1.
fn spiral<R: Rng>(n: usize, jitter: f64, rng: &mut R) -> Array2<f64> {
    let turns = 1.5;
    let mut out = Array2::zeros((n, 2));
    for mut row in out.rows_mut() {
        let u: f64 = rng.random::<f64>().sqrt();
        let theta = u * turns * 2.0 * std::f64::consts::PI;
        let arm = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let r = u;
        row[0] = arm * r * theta.cos() + jitter * rng.sample::<f64, _>(StandardNormal);
        row[1] = arm * r * theta.sin() + jitter * rng.sample::<f64, _>(StandardNormal);
    }
    out
}

/// Uniform over the dark cells of a 4×4 board on `[-2, 2]²`.
fn checkerboard<R: Rng>(n: usize, rng: &mut R) -> Array2<f64> {
    let mut out = Array2::zeros((n, 2));
    for mut row in out.rows_mut() {
        let (i, j) = loop {
            let i = rng.random_range(0..4);
            let j = rng.random_range(0..4);
            if (i + j) % 2 == 0 {
                break (i, j);
            }
        };
        row[0] = -2.0 + i as f64 + rng.random::<f64>();
        row[1] = -2.0 + j as f64 + rng.random::<f64>();
    }
    out
}

/// Half-width of the raw checkerboard.
pub const BOARD_HALF_WIDTH: f64 = 2.0;

/// Generated points with the scale applied before stretching.
#[derive(Clone, Debug)]
pub struct ToyData {
    pub points: Array2<f64>,
    pub scale: f64,
}

pub fn gen_toy(spec: &ToySpec) -> Result<ToyData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_points;
    let mut pts = match spec.kind {
        ToyKind::Spiral => spiral(n, spec.jitter, &mut rng),
        ToyKind::Checkerboard => checkerboard(n, &mut rng),
        ToyKind::Gaussian | ToyKind::AnisotropicGaussian => {
            Array2::from_shape_fn((n, 2), |_| rng.sample(StandardNormal))
        }
    };
    let mut scale = 1.0;
    if spec.normalize && matches!(spec.kind, ToyKind::Spiral | ToyKind::Checkerboard) {
        let ref_axis = match spec.stretch_axis.index() {
            Some(0) => 1,
            _ => 0,
        };
        let col = pts.column(ref_axis);
        let std = col.std(0.0);
        if std > 0.0 {
            scale = 1.0 / std;
            pts *= scale;
        }
    }
    let stretch = match spec.kind {
        ToyKind::Gaussian => None,
        _ => spec.stretch_axis.index(),
    };
    if let Some(ax) = stretch {
        pts.column_mut(ax).mapv_inplace(|v| v * spec.stretch_factor);
    }
    Ok(ToyData { points: pts, scale })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeriesSpec {
    pub dims: usize,
    pub length: usize,
    pub trend: f64,
    pub seasonal_amplitudes: [f64; 2],
    pub seasonal_periods: [f64; 2],
    pub noise_scale: f64,
    pub ar_coef: f64,
    pub context: usize,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for SeriesSpec {
    fn default() -> Self {
        SeriesSpec {
            dims: 4,
            length: 2000,
            trend: 0.001,
            seasonal_amplitudes: [1.0, 0.5],
            seasonal_periods: [24.0, 168.0],
            noise_scale: 0.3,
            ar_coef: 0.7,
            context: 24,
            horizon: 24,
            seed: 0,
        }
    }
}

impl SeriesSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims == 0 || self.context == 0 || self.horizon == 0 {
            return Err(Error::Config("dims, context and horizon must be positive".into()));
        }
        if self.length <= self.context + self.horizon {
            return Err(Error::Config(format!(
                "series length {} must exceed context + horizon = {}",
                self.length,
                self.context + self.horizon
            )));
        }
        if !(self.ar_coef.abs() < 1.0) {
            return Err(Error::Config(format!("ar_coef must lie in (-1, 1), got {}", self.ar_coef)));
        }
        if self.seasonal_periods.iter().any(|p| !(*p > 0.0)) || !(self.noise_scale >= 0.0) {
            return Err(Error::Config("periods must be positive and noise non-negative".into()));
        }
        Ok(())
    }
}

/// Linear trend + two seasonalities (random phase per dimension) + AR(1)
/// noise. Returns `length × dims`.
pub fn gen_series(spec: &SeriesSpec) -> Result<Array2<f64>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tau = 2.0 * std::f64::consts::PI;
    let phases: Vec<[f64; 2]> = (0..spec.dims)
        .map(|_| [tau * rng.random::<f64>(), tau * rng.random::<f64>()])
        .collect();
    let mut out = Array2::zeros((spec.length, spec.dims));
    let stationary = spec.noise_scale / (1.0 - spec.ar_coef * spec.ar_coef).sqrt();
    for (dim, ph) in phases.iter().enumerate() {
        let mut e = stationary * rng.sample::<f64, _>(StandardNormal);
        for t in 0..spec.length {
            let tf = t as f64;
            let mut v = spec.trend * tf;
            for k in 0..2 {
                v += spec.seasonal_amplitudes[k] * (tau * tf / spec.seasonal_periods[k] + ph[k]).sin();
            }
            if t > 0 {
                e = spec.ar_coef * e + spec.noise_scale * rng.sample::<f64, _>(StandardNormal);
            }
            out[[t, dim]] = v + e;
        }
    }
    Ok(out)
}

/// Per-dimension affine standardization with stored parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let mean = x.mean_axis(Axis(0)).expect("nonempty series");
        let std = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 0.0 { s } else { 1.0 });
        Standardizer {
            mean: mean.to_vec(),
            std: std.to_vec(),
        }
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &Array1::from(self.mean.clone())) / &Array1::from(self.std.clone())
    }

    pub fn invert(&self, z: ArrayView2<f64>) -> Array2<f64> {
        &z * &Array1::from(self.std.clone()) + &Array1::from(self.mean.clone())
    }
}

/// Supervised pairs `(flattened window of C rows, next row)` from a series.
pub fn context_pairs(series: ArrayView2<f64>, context: usize) -> (Array2<f64>, Array2<f64>) {
    let (len, dims) = series.dim();
    let n = len.saturating_sub(context);
    let mut windows = Array2::zeros((n, context * dims));
    let mut targets = Array2::zeros((n, dims));
    for i in 0..n {
        let w = series.slice(s![i..i + context, ..]);
        windows.row_mut(i).assign(&Array1::from_iter(w.iter().copied()));
        targets.row_mut(i).assign(&series.row(i + context));
    }
    (windows, targets)
}

/// Embedding `h` of one context window through the encoder MLP.
pub fn encode_context(window: ArrayView2<f64>, encoder: &Mlp, params: &[f64]) -> Result<Vec<f64>> {
    let flat: Vec<f64> = window.iter().copied().collect();
    if flat.len() != encoder.input_dim() {
        return Err(Error::invalid(format!(
            "window has {} values, encoder expects {}",
            flat.len(),
            encoder.input_dim()
        )));
    }
    let x = Array2::from_shape_vec((1, flat.len()), flat).expect("row shape");
    Ok(encoder.eval(params, x).row(0).to_vec())
}

/// Writes rows with a header, every float with 17 significant digits.
pub fn write_csv_matrix<W: Write>(w: W, header: &[String], rows: ArrayView2<f64>) -> Result<()> {
    let mut w = std::io::BufWriter::new(w);
    writeln!(w, "{}", header.join(","))?;
    for row in rows.rows() {
        let line: Vec<String> = row.iter().map(|v| crate::samplers::fmt_f64(*v)).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush().map_err(Error::from)
}
