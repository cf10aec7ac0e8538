//! Exact marginal scores for Gaussian data pushed through the linear forward
//! SDE. These serve as oracles for the samplers and the schedule optimizer.

use nalgebra::DVector;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{cholesky, Mat};
use crate::processes::PerturbationKernel;
use crate::samplers::ScoreModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianData {
    pub mean: Vec<f64>,
    /// Row-major `d × d` covariance.
    pub cov: Vec<f64>,
}

impl GaussianData {
    pub fn new(mean: Vec<f64>, cov: Mat) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::invalid("gaussian data covariance shape mismatch"));
        }
        cholesky(&cov)?;
        Ok(GaussianData {
            mean,
            cov: cov.transpose().as_slice().to_vec(),
        })
    }

    pub fn diagonal(variances: &[f64]) -> Result<Self> {
        let d = variances.len();
        Self::new(vec![0.0; d], Mat::from_diagonal(&DVector::from_row_slice(variances)))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cov_mat(&self) -> Mat {
        let d = self.dim();
        Mat::from_row_slice(d, d, &self.cov)
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Array2<f64>> {
        let d = self.dim();
        let l = cholesky(&self.cov_mat())?;
        let mut out = Array2::zeros((n, d));
        for mut row in out.rows_mut() {
            let z = crate::processes::standard_normal_vec(d, rng);
            for i in 0..d {
                let mut acc = self.mean[i];
                for (j, zj) in z.iter().enumerate().take(i + 1) {
                    acc += l[(i, j)] * zj;
                }
                row[i] = acc;
            }
        }
        Ok(out)
    }
}

/// Mean and covariance of the full augmented state at time `t` when
/// `x_0 ~ data` and the remainder of `a_0` follows `Σ0`.
pub fn marginal(kernel: &PerturbationKernel, data: &GaussianData, t: f64) -> Result<(Vec<f64>, Mat)> {
    let nk = kernel.at_time(t)?;
    let d = data.dim();
    if d != kernel.dim() {
        return Err(Error::invalid("data dimension differs from kernel dimension"));
    }
    let n = kernel.state_dim();
    let phi = nk.phi_full();
    let mut s_aug = Mat::zeros(n, n);
    s_aug.view_mut((0, 0), (d, d)).copy_from(&data.cov_mat());
    let mut m_aug = DVector::zeros(n);
    m_aug.rows_mut(0, d).copy_from_slice(&data.mean);
    let mean = &phi * m_aug;
    let cov = &phi * s_aug * phi.transpose() + nk.sigma_full();
    Ok((mean.as_slice().to_vec(), crate::kernels::symmetrize(&cov)))
}

/// `∇ log ρ_t` for Gaussian data under a given forward kernel.
pub struct AnalyticScore<'a> {
    pub kernel: &'a PerturbationKernel,
    pub data: GaussianData,
}

impl<'a> AnalyticScore<'a> {
    pub fn new(kernel: &'a PerturbationKernel, data: GaussianData) -> Self {
        AnalyticScore { kernel, data }
    }

    /// Mean and precision of the marginal at `t`.
    pub fn precision(&self, t: f64) -> Result<(Vec<f64>, Mat)> {
        let (mean, cov) = marginal(self.kernel, &self.data, t)?;
        let l = cholesky(&cov)?;
        let linv = l
            .solve_lower_triangular(&Mat::identity(cov.nrows(), cov.nrows()))
            .ok_or_else(|| Error::SingularMatrix("marginal covariance factor".into()))?;
        Ok((mean, linv.transpose() * linv))
    }
}

impl ScoreModel for AnalyticScore<'_> {
    fn state_dim(&self) -> usize {
        self.kernel.state_dim()
    }

    fn score(&self, a: ArrayView2<f64>, t: f64) -> Result<Array2<f64>> {
        let (mean, p) = self.precision(t)?;
        let n = mean.len();
        if a.ncols() != n {
            return Err(Error::invalid("state width differs from kernel state dimension"));
        }
        let mut out = Array2::zeros(a.raw_dim());
        for (row, mut o) in a.rows().into_iter().zip(out.rows_mut()) {
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..n {
                    acc -= p[(i, j)] * (row[j] - mean[j]);
                }
                o[i] = acc;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::processes::{build_kernel, default_sigma0, DiffusionConfig, VariationalSchedule};
    use ndarray::array;

    #[test]
    fn marginal_at_zero_is_data_times_sigma0() {
        let cfg = DiffusionConfig { grid_size: 5, ..DiffusionConfig::cld(5.0) };
        let s = VariationalSchedule::zeros(5, 2);
        let k = build_kernel(&cfg, &s, &default_sigma0(&cfg, 2)).unwrap();
        let data = GaussianData::diagonal(&[1.0, 64.0]).unwrap();
        let (m, c) = marginal(&k, &data, 0.0).unwrap();
        assert!(m.iter().all(|&v| v == 0.0));
        assert!((c[(1, 1)] - (64.0 + 1e-6)).abs() < 1e-12);
        assert!((c[(3, 3)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn score_of_mean_is_zero() {
        let cfg = DiffusionConfig { grid_size: 5, ..DiffusionConfig::cld(5.0) };
        let s = VariationalSchedule::zeros(5, 1);
        let k = build_kernel(&cfg, &s, &default_sigma0(&cfg, 1)).unwrap();
        let data = GaussianData::new(vec![0.0], Mat::from_element(1, 1, 2.0)).unwrap();
        let sc = AnalyticScore::new(&k, data);
        let out = sc.score(array![[0.0, 0.0]].view(), 0.5).unwrap();
        assert_eq!(out, array![[0.0, 0.0]]);
    }
}
