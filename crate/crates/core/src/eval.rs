//! Evaluation metrics: histogram RMSE, path straightness, CRPS-Sum, and a
//! Monte-Carlo check of the forward SDE's invariant measure.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Mat;
use crate::processes::{BetaSchedule, Coefficients, DiffusionConfig, VariationalSchedule};
use crate::samplers::Trajectory;

/// Regular 2-D histogram grid. Points outside the bounds are counted in
/// the nearest edge bin, so every histogram carries unit mass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmfGrid {
    pub bounds: [(f64, f64); 2],
    pub bins: usize,
}

impl PmfGrid {
    pub fn new(bounds: [(f64, f64); 2], bins: usize) -> Result<Self> {
        if bins == 0 || bounds.iter().any(|(lo, hi)| !(hi > lo)) {
            return Err(Error::invalid("grid needs positive bins and increasing bounds"));
        }
        Ok(PmfGrid { bounds, bins })
    }

    /// Box spanning the reference's 0.5–99.5 percentiles, widened by 10%.
    pub fn covering(reference: ArrayView2<f64>, bins: usize) -> Result<Self> {
        if reference.nrows() == 0 || reference.ncols() != 2 {
            return Err(Error::invalid("reference must be a nonempty n×2 sample"));
        }
        let mut bounds = [(0.0, 0.0); 2];
        for (ax, b) in bounds.iter_mut().enumerate() {
            let mut col: Vec<f64> = reference.column(ax).to_vec();
            col.sort_by(f64::total_cmp);
            let lo = quantile(&col, 0.005);
            let hi = quantile(&col, 0.995);
            let pad = 0.1 * (hi - lo).max(1e-12);
            *b = (lo - pad, hi + pad);
        }
        Self::new(bounds, bins)
    }

    fn bin(&self, ax: usize, v: f64) -> usize {
        let (lo, hi) = self.bounds[ax];
        let f = ((v - lo) / (hi - lo) * self.bins as f64).floor();
        if f.is_nan() || f < 0.0 {
            0
        } else {
            (f as usize).min(self.bins - 1)
        }
    }

    /// Normalized counts, row-major over `(x bin, y bin)`.
    pub fn pmf(&self, samples: ArrayView2<f64>) -> Result<Vec<f64>> {
        if samples.nrows() == 0 {
            return Err(Error::invalid("empty sample set"));
        }
        if samples.ncols() != 2 {
            return Err(Error::invalid("PMF grid expects 2-D samples"));
        }
        let mut counts = vec![0.0; self.bins * self.bins];
        for row in samples.rows() {
            counts[self.bin(0, row[0]) * self.bins + self.bin(1, row[1])] += 1.0;
        }
        let n = samples.nrows() as f64;
        counts.iter_mut().for_each(|c| *c /= n);
        Ok(counts)
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

/// `√(Σ(p - q)² / B)` over the `B` bins of the grid.
pub fn pmf_rmse(generated: ArrayView2<f64>, reference: ArrayView2<f64>, grid: &PmfGrid) -> Result<f64> {
    let p = grid.pmf(generated)?;
    let q = grid.pmf(reference)?;
    let ss: f64 = p.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / p.len() as f64).sqrt())
}

/// Time-averaged squared deviation of each path's rate from its chord rate,
/// averaged over paths. `paths` is `n × m` with values at `times`.
pub fn straightness_paths(paths: ArrayView2<f64>, times: &[f64]) -> Result<f64> {
    let m = times.len();
    if m < 2 || paths.ncols() != m {
        return Err(Error::invalid("straightness needs at least two saved nodes per path"));
    }
    if paths.nrows() == 0 {
        return Err(Error::invalid("no paths"));
    }
    let total = (times[m - 1] - times[0]).abs();
    if total <= 0.0 {
        return Err(Error::invalid("saved times span zero duration"));
    }
    let mut acc = 0.0;
    for row in paths.rows() {
        let chord = (row[m - 1] - row[0]) / total;
        let mut s = 0.0;
        for k in 0..m - 1 {
            let dt = (times[k + 1] - times[k]).abs();
            if dt == 0.0 {
                return Err(Error::invalid("repeated time in trajectory"));
            }
            let rate = (row[k + 1] - row[k]) / dt;
            s += dt * (chord - rate).powi(2);
        }
        acc += s / total;
    }
    Ok(acc / paths.nrows() as f64)
}

/// Straightness of coordinate `axis` of the `x` block.
pub fn straightness(traj: &Trajectory, axis: usize) -> Result<f64> {
    if axis >= traj.dim {
        return Err(Error::invalid(format!("axis {axis} outside data dimension {}", traj.dim)));
    }
    straightness_paths(traj.coordinate_paths(axis).view(), &traj.times)
}

/// Sample CRPS `mean|X - y| - ½ mean|X - X'|` of a scalar ensemble.
pub fn crps_ensemble(samples: &[f64], y: f64) -> f64 {
    let s = samples.len() as f64;
    let abs_err = samples.iter().map(|x| (x - y).abs()).sum::<f64>() / s;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Σ_{i,j} |x_i - x_j| = 2 Σ_i (2i - S + 1) x_(i).
    let pair: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, x)| (2.0 * i as f64 - s + 1.0) * x)
        .sum::<f64>()
        * 2.0;
    abs_err - 0.5 * pair / (s * s)
}

/// CRPS of the dimension-summed series, averaged over the horizon and
/// divided by the mean absolute observed sum. `forecast` is `S × P × dims`.
pub fn crps_sum(forecast: ArrayView3<f64>, observed: ArrayView2<f64>) -> Result<f64> {
    let (s, p, dims) = forecast.dim();
    if s == 0 {
        return Err(Error::invalid("forecast needs at least one sample"));
    }
    if observed.dim() != (p, dims) || p == 0 {
        return Err(Error::invalid("forecast and observation shapes differ"));
    }
    let mut total = 0.0;
    let mut norm = 0.0;
    for step in 0..p {
        let y: f64 = observed.row(step).sum();
        let xs: Vec<f64> = (0..s)
            .map(|i| (0..dims).map(|d| forecast[[i, step, d]]).sum())
            .collect();
        total += crps_ensemble(&xs, y);
        norm += y.abs();
    }
    if norm == 0.0 {
        return Err(Error::invalid("observed sums are all zero; CRPS-Sum is undefined"));
    }
    Ok(total / norm)
}

/// Closed-form CRPS of `N(μ, σ²)` at `y`.
pub fn gaussian_crps(mu: f64, sigma: f64, y: f64) -> f64 {
    let z = (y - mu) / sigma;
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let cdf = 0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2));
    sigma * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - 1.0 / std::f64::consts::PI.sqrt())
}

/// Forecast array from per-step sample matrices (`P` arrays of `S × dims`).
pub fn stack_forecast(steps: &[Array2<f64>]) -> Array3<f64> {
    let p = steps.len();
    let (s, dims) = steps.first().map_or((0, 0), |a| a.dim());
    Array3::from_shape_fn((s, p, dims), |(i, j, k)| steps[j][[i, k]])
}

/// Stationary covariance `diag(B₁⁻¹, B₂⁻¹)` per coordinate, `B₁ = k·c`,
/// `B₂ = c` (or `1/k` without momentum), in the `(x, v)` layout.
pub fn invariant_covariance(cfg: &DiffusionConfig, sched: &VariationalSchedule) -> Result<Mat> {
    let c = Coefficients::at(cfg, sched, 0)?;
    let d = c.dim();
    let b = cfg.block_dim();
    let mut m = Mat::zeros(b * d, b * d);
    for i in 0..d {
        if b == 2 {
            m[(i, i)] = 1.0 / (c.spring[i] * c.friction[i]);
            m[(d + i, d + i)] = 1.0 / c.friction[i];
        } else {
            m[(i, i)] = 1.0 / c.spring[i];
        }
    }
    Ok(m)
}

#[derive(Clone, Debug)]
pub struct InvariantReport {
    pub target: Mat,
    pub empirical: Mat,
    /// Largest `|Ĉ_ij - C_ij| / √(C_ii C_jj)`.
    pub max_rel_err: f64,
}

/// Simulates the time-invariant forward SDE with Euler–Maruyama from
/// `a = 0` up to `t_long` and compares the empirical covariance with the
/// analytic invariant measure.
pub fn invariant_measure_check<R: Rng + ?Sized>(cfg: &DiffusionConfig, sched: &VariationalSchedule, n: usize, t_long: f64, h: f64, rng: &mut R) -> Result<InvariantReport> {
    if !sched.is_time_invariant() {
        return Err(Error::invalid("invariant measure needs a time-invariant schedule"));
    }
    let beta = match cfg.beta {
        BetaSchedule::Constant { value } => value,
        _ => return Err(Error::invalid("invariant measure needs a constant beta")),
    };
    if !(h > 0.0 && t_long > 0.0) || n < 2 {
        return Err(Error::invalid("invariant check needs h > 0, t_long > 0 and n ≥ 2"));
    }
    let target = invariant_covariance(cfg, sched)?;
    let c = Coefficients::at(cfg, sched, 0)?;
    let d = c.dim();
    let momentum = cfg.mode.has_momentum();
    let b = cfg.block_dim();
    let steps = (t_long / h).ceil() as usize;
    let hb = 0.5 * beta * h;
    let noise = if momentum { (beta * c.gamma * h).sqrt() } else { (beta * h).sqrt() };
    let mut a = Array2::<f64>::zeros((n, b * d));
    for mut row in a.rows_mut() {
        for _ in 0..steps {
            for i in 0..d {
                if momentum {
                    let (x, v) = (row[i], row[d + i]);
                    let z: f64 = rng.sample(StandardNormal);
                    row[i] = x + hb * v;
                    row[d + i] = v - hb * (c.spring[i] * x + c.gamma * c.friction[i] * v) + noise * z;
                } else {
                    let z: f64 = rng.sample(StandardNormal);
                    row[i] += -hb * c.spring[i] * row[i] + noise * z;
                }
            }
        }
    }
    let (_, cov) = crate::samplers::sample_moments(a.view());
    let empirical = Mat::from_fn(b * d, b * d, |i, j| cov[[i, j]]);
    let mut worst: f64 = 0.0;
    for i in 0..b * d {
        for j in 0..b * d {
            let scale = (target[(i, i)] * target[(j, j)]).sqrt();
            worst = worst.max((empirical[(i, j)] - target[(i, j)]).abs() / scale);
        }
    }
    Ok(InvariantReport {
        target,
        empirical,
        max_rel_err: worst,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metric: String,
    pub value: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub config_hash: String,
    pub wall_time_s: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_sets_have_zero_rmse() {
        let x = array![[0.0, 0.0], [1.0, 1.0], [0.5, -0.3]];
        let g = PmfGrid::covering(x.view(), 50).unwrap();
        assert_eq!(pmf_rmse(x.view(), x.view(), &g).unwrap(), 0.0);
    }

    #[test]
    fn disjoint_point_masses() {
        let g = PmfGrid::new([(0.0, 10.0), (0.0, 10.0)], 10).unwrap();
        let a = array![[0.5, 0.5]];
        let b = array![[5.5, 5.5]];
        let r = pmf_rmse(a.view(), b.view(), &g).unwrap();
        assert!((r - (2.0f64).sqrt() / 10.0).abs() < 1e-15);
    }

    #[test]
    fn pmf_sums_to_one_with_outliers() {
        let g = PmfGrid::new([(0.0, 1.0), (0.0, 1.0)], 5).unwrap();
        let x = array![[-3.0, 0.2], [0.5, 9.0], [0.5, 0.5], [f64::NAN, 0.1]];
        let p = g.pmf(x.view()).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_inputs_rejected() {
        let g = PmfGrid::new([(0.0, 1.0), (0.0, 1.0)], 5).unwrap();
        let e = Array2::<f64>::zeros((0, 2));
        assert!(pmf_rmse(e.view(), array![[0.1, 0.1]].view(), &g).is_err());
    }

    #[test]
    fn straightness_examples() {
        let times = [0.0, 1.0, 2.0];
        let line = array![[0.0, 1.5, 3.0]];
        assert_eq!(straightness_paths(line.view(), &times).unwrap(), 0.0);
        let zigzag = array![[0.0, 1.0, 0.0]];
        assert!((straightness_paths(zigzag.view(), &times).unwrap() - 1.0).abs() < 1e-15);
        assert!(straightness_paths(array![[1.0]].view(), &[0.0]).is_err());
    }

    #[test]
    fn crps_point_forecasts() {
        let obs = array![[1.0, 2.0]];
        let exact = Array3::from_shape_fn((4, 1, 2), |(_, _, k)| obs[[0, k]]);
        assert_eq!(crps_sum(exact.view(), obs.view()).unwrap(), 0.0);
        let point = Array3::from_elem((3, 1, 2), 2.0);
        let v = crps_sum(point.view(), obs.view()).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ensemble_pair_term_matches_brute_force() {
        let xs: [f64; 5] = [0.3, -1.2, 2.5, 0.0, 0.7];
        let y: f64 = 0.4;
        let s = xs.len() as f64;
        let a = xs.iter().map(|x| (x - y).abs()).sum::<f64>() / s;
        let mut b = 0.0;
        for x in &xs {
            for z in &xs {
                b += (x - z).abs();
            }
        }
        let expected = a - 0.5 * b / (s * s);
        assert!((crps_ensemble(&xs, y) - expected).abs() < 1e-14);
    }
}
