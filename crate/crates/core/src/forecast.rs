//! Probabilistic multivariate forecasting: the conditional score model
//! generates the next row given the last `C` rows, and a horizon is rolled
//! out autoregressively, one fresh prior draw per step.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::eval::crps_sum;
use crate::processes::PerturbationKernel;
use crate::samplers::{sample, SamplerKind, SamplerOptions};
use crate::scorenet::{NetScore, ScoreNetwork};

/// `S × P × dims` paths continuing `window` (`C × dims`, standardized
/// units). Every path conditions on its own generated history.
pub fn rollout<R: Rng + ?Sized>(net: &ScoreNetwork, kernel: &PerturbationKernel, window: ArrayView2<f64>, horizon: usize, n_paths: usize, kind: SamplerKind, steps: Option<usize>, rng: &mut R) -> Result<Array3<f64>> {
    let (c, dims) = window.dim();
    if c * dims != net.context_dim() {
        return Err(Error::invalid(format!(
            "window of {c}×{dims} does not match the encoder input {}",
            net.context_dim()
        )));
    }
    if kernel.dim() != dims {
        return Err(Error::invalid("kernel dimension differs from the series dimension"));
    }
    let flat: Vec<f64> = window.iter().copied().collect();
    let mut windows = Array2::from_shape_fn((n_paths, c * dims), |(_, j)| flat[j]);
    let opts = SamplerOptions {
        steps,
        ..Default::default()
    };
    let mut out = Array3::zeros((n_paths, horizon, dims));
    for p in 0..horizon {
        let score = NetScore::new(net, kernel, true).with_context(windows.view());
        let x = sample(kind, &score, kernel, n_paths, &opts, rng)?.samples_x();
        out.slice_mut(s![.., p, ..]).assign(&x);
        let shifted = concat_rows(windows.slice(s![.., dims..]), x.view());
        windows = shifted;
    }
    Ok(out)
}

fn concat_rows(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    ndarray::concatenate(Axis(1), &[a, b]).expect("row counts match")
}

/// Climatology baseline: every step is an independent draw of a whole row
/// of the training history.
pub fn climatology<R: Rng + ?Sized>(history: ArrayView2<f64>, horizon: usize, n_paths: usize, rng: &mut R) -> Result<Array3<f64>> {
    let (n, dims) = history.dim();
    if n == 0 {
        return Err(Error::invalid("empty history"));
    }
    let mut out = Array3::zeros((n_paths, horizon, dims));
    for i in 0..n_paths {
        for p in 0..horizon {
            let r = rng.random_range(0..n);
            out.slice_mut(s![i, p, ..]).assign(&history.row(r));
        }
    }
    Ok(out)
}

/// Maps standardized paths back to the original scale.
pub fn invert_paths(st: &Standardizer, paths: &Array3<f64>) -> Array3<f64> {
    let mut out = paths.clone();
    for mut path in out.outer_iter_mut() {
        let inv = st.invert(path.view());
        path.assign(&inv);
    }
    out
}

/// `n` forecast origins evenly spread over the held-out tail, each with a
/// full window before it and a full horizon after it.
pub fn forecast_origins(len: usize, train_len: usize, context: usize, horizon: usize, n: usize) -> Result<Vec<usize>> {
    let first = train_len.max(context);
    if first + horizon > len {
        return Err(Error::invalid(format!(
            "horizon {horizon} exceeds the {} held-out rows",
            len.saturating_sub(first)
        )));
    }
    let last = len - horizon;
    if n == 1 || last == first {
        return Ok(vec![first]);
    }
    let span = (last - first) as f64;
    let mut out: Vec<usize> = (0..n)
        .map(|i| first + (span * i as f64 / (n - 1) as f64).round() as usize)
        .collect();
    out.dedup();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OriginScore {
    pub origin: usize,
    pub crps_sum: f64,
    pub climatology_crps_sum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub sampler: SamplerKind,
    pub origins: Vec<OriginScore>,
    pub crps_sum: f64,
    pub climatology_crps_sum: f64,
}

pub struct ForecastSetup<'a> {
    pub net: &'a ScoreNetwork,
    pub kernel: &'a PerturbationKernel,
    pub standardizer: &'a Standardizer,
    /// Whole series, standardized.
    pub series: ArrayView2<'a, f64>,
    pub train_len: usize,
    pub context: usize,
    pub horizon: usize,
}

/// Scores model and climatology forecasts at each origin in original units.
/// Returns the report and the model paths per origin.
pub fn evaluate<R: Rng + ?Sized>(setup: &ForecastSetup, origins: &[usize], n_paths: usize, kind: SamplerKind, steps: Option<usize>, rng: &mut R) -> Result<(ForecastReport, Vec<Array3<f64>>)> {
    let raw = setup.standardizer.invert(setup.series);
    let history = raw.slice(s![..setup.train_len, ..]);
    let mut scores = Vec::with_capacity(origins.len());
    let mut all_paths = Vec::with_capacity(origins.len());
    for &o in origins {
        if o < setup.context || o + setup.horizon > setup.series.nrows() {
            return Err(Error::invalid(format!("origin {o} leaves no room for window and horizon")));
        }
        let window = setup.series.slice(s![o - setup.context..o, ..]);
        let paths = rollout(setup.net, setup.kernel, window, setup.horizon, n_paths, kind, steps, rng)?;
        let paths = invert_paths(setup.standardizer, &paths);
        let observed = raw.slice(s![o..o + setup.horizon, ..]);
        let clim = climatology(history, setup.horizon, n_paths, rng)?;
        scores.push(OriginScore {
            origin: o,
            crps_sum: crps_sum(paths.view(), observed)?,
            climatology_crps_sum: crps_sum(clim.view(), observed)?,
        });
        all_paths.push(paths);
    }
    let m = scores.len().max(1) as f64;
    let report = ForecastReport {
        sampler: kind,
        crps_sum: scores.iter().map(|s| s.crps_sum).sum::<f64>() / m,
        climatology_crps_sum: scores.iter().map(|s| s.climatology_crps_sum).sum::<f64>() / m,
        origins: scores,
    };
    Ok((report, all_paths))
}
