//! Dense small-matrix numerics behind the simulation-free forward kernel.
//!
//! Everything here is a pure function of its inputs. Matrices are at most a
//! few dozen rows (the Lyapunov block system doubles a `2d`-dimensional
//! state), so plain dense algorithms are used throughout.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub type Mat = DMatrix<f64>;

/// Largest acceptable 1-norm condition number of `H_t`.
pub const MAX_KERNEL_CONDITION: f64 = 1e12;

/// Row-major 2×2 matrix, used for the per-coordinate blocks of the drift.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Matrix2(pub [f64; 4]);

impl Matrix2 {
    pub const IDENTITY: Matrix2 = Matrix2([1.0, 0.0, 0.0, 1.0]);
    pub const ZERO: Matrix2 = Matrix2([0.0; 4]);

    pub fn new(m00: f64, m01: f64, m10: f64, m11: f64) -> Self {
        Matrix2([m00, m01, m10, m11])
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.0[2 * r + c]
    }

    pub fn transpose(&self) -> Self {
        let [a, b, c, d] = self.0;
        Matrix2([a, c, b, d])
    }

    pub fn mul(&self, o: &Matrix2) -> Self {
        let [a, b, c, d] = self.0;
        let [e, f, g, h] = o.0;
        Matrix2([a * e + b * g, a * f + b * h, c * e + d * g, c * f + d * h])
    }

    #[inline]
    pub fn apply(&self, v: [f64; 2]) -> [f64; 2] {
        [
            self.0[0] * v[0] + self.0[1] * v[1],
            self.0[2] * v[0] + self.0[3] * v[1],
        ]
    }

    pub fn scale(&self, s: f64) -> Self {
        Matrix2(self.0.map(|x| x * s))
    }

    pub fn det(&self) -> f64 {
        self.0[0] * self.0[3] - self.0[1] * self.0[2]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn to_mat(&self) -> Mat {
        Mat::from_row_slice(2, 2, &self.0)
    }

    pub fn from_mat(m: &Mat) -> Self {
        assert_eq!(m.shape(), (2, 2), "Matrix2::from_mat needs a 2x2 input");
        Matrix2([m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]])
    }
}

/// `(C_t, H_t)` of the matrix-fraction solution `Σ_t = C_t H_t⁻¹`.
#[derive(Clone, Debug)]
pub struct BlockExpResult {
    pub c: Mat,
    pub h: Mat,
}

impl BlockExpResult {
    /// Forms `Σ = C H⁻¹` and symmetrizes it.
    pub fn covariance(&self) -> Result<Mat> {
        let h_inv = self
            .h
            .clone()
            .try_inverse()
            .ok_or(Error::SingularKernel {
                node: None,
                cond: f64::INFINITY,
            })?;
        let sigma = &self.c * h_inv;
        Ok(symmetrize(&sigma))
    }
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

fn norm1(m: &Mat) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// 1-norm condition number; infinite for singular input.
pub fn condition_number(m: &Mat) -> f64 {
    match m.clone().try_inverse() {
        Some(inv) => norm1(m) * norm1(&inv),
        None => f64::INFINITY,
    }
}

// Scaling-and-squaring with diagonal Padé approximants (Higham 2005).
const PADE_ORDERS: [(usize, f64); 5] = [
    (3, 1.495585217958292e-2),
    (5, 2.53939833006323e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068e0),
    (13, 5.371920351148152e0),
];

fn pade_coefficients(m: usize) -> Vec<f64> {
    // b_j = (2m - j)! m! / ((2m)! j! (m - j)!), built by recurrence to
    // avoid overflowing factorials.
    let mut b = vec![1.0; m + 1];
    for j in 0..m {
        b[j + 1] = b[j] * (m - j) as f64 / (((2 * m - j) * (j + 1)) as f64);
    }
    b
}

fn pade_approximant(a: &Mat, m: usize) -> Result<Mat> {
    let n = a.nrows();
    let b = pade_coefficients(m);
    let ident = Mat::identity(n, n);
    let a2 = a * a;
    let (u, v) = if m <= 9 {
        let mut powers = vec![ident.clone(), a2.clone()];
        while powers.len() <= m / 2 {
            let next = powers.last().unwrap() * &a2;
            powers.push(next);
        }
        let mut u_inner = Mat::zeros(n, n);
        let mut v = Mat::zeros(n, n);
        for (k, p) in powers.iter().enumerate() {
            u_inner += p * b[2 * k + 1];
            v += p * b[2 * k];
        }
        (a * u_inner, v)
    } else {
        let a4 = &a2 * &a2;
        let a6 = &a4 * &a2;
        let u_hi = &a6 * b[13] + &a4 * b[11] + &a2 * b[9];
        let u = a * (&a6 * u_hi + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &ident * b[1]);
        let v_hi = &a6 * b[12] + &a4 * b[10] + &a2 * b[8];
        let v = &a6 * v_hi + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &ident * b[0];
        (u, v)
    };
    let p = &v + &u;
    let q = &v - &u;
    q.lu()
        .solve(&p)
        .ok_or_else(|| Error::SingularMatrix("Padé denominator in mat_exp".into()))
}

/// Matrix exponential by scaling and squaring.
pub fn mat_exp(m: &Mat) -> Result<Mat> {
    if !m.is_square() {
        return Err(Error::invalid(format!(
            "mat_exp needs a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("mat_exp input has non-finite entries"));
    }
    let n = m.nrows();
    if n == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    let norm = norm1(m);
    for &(order, theta) in &PADE_ORDERS[..4] {
        if norm <= theta {
            return pade_approximant(m, order);
        }
    }
    let theta13 = PADE_ORDERS[4].1;
    let s = if norm > theta13 {
        (norm / theta13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let scaled = m / 2f64.powi(s);
    let mut r = pade_approximant(&scaled, 13)?;
    for _ in 0..s {
        r = &r * &r;
    }
    Ok(r)
}

/// Solves the differential Lyapunov equation through the block exponential
///
/// ```text
/// [C; H] = exp([[-½ drift_int, diffusion_int], [0, ½ drift_intᵀ]]) · [Σ0; I]
/// ```
///
/// where `drift_int` is the accumulated β-weighted drift `∫ β D ds` and
/// `diffusion_int` is `∫ β g gᵀ/β ds` (γβ[J] for the momentum process).
pub fn lyapunov_blockexp(drift_int: &Mat, diffusion_int: &Mat, sigma0: &Mat) -> Result<BlockExpResult> {
    let n = drift_int.nrows();
    if !drift_int.is_square() || diffusion_int.shape() != (n, n) || sigma0.shape() != (n, n) {
        return Err(Error::invalid(format!(
            "lyapunov_blockexp shape mismatch: drift {:?}, diffusion {:?}, sigma0 {:?}",
            drift_int.shape(),
            diffusion_int.shape(),
            sigma0.shape()
        )));
    }
    let mut block = Mat::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(&(drift_int * -0.5));
    block.view_mut((0, n), (n, n)).copy_from(diffusion_int);
    block
        .view_mut((n, n), (n, n))
        .copy_from(&(drift_int.transpose() * 0.5));
    let e = mat_exp(&block)?;
    let mut stacked = Mat::zeros(2 * n, n);
    stacked.view_mut((0, 0), (n, n)).copy_from(sigma0);
    stacked.view_mut((n, 0), (n, n)).fill_with_identity();
    let ch = e * stacked;
    let c = ch.rows(0, n).into_owned();
    let h = ch.rows(n, n).into_owned();
    let cond = condition_number(&h);
    if !(cond <= MAX_KERNEL_CONDITION) {
        return Err(Error::SingularKernel { node: None, cond });
    }
    Ok(BlockExpResult { c, h })
}

fn cholesky_plain(a: &Mat) -> Option<Mat> {
    let n = a.nrows();
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) {
            return None;
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Some(l)
}

/// Lower Cholesky factor of a symmetric positive semi-definite matrix.
///
/// The input is symmetrized first; if the plain factorization hits a
/// non-positive pivot, a diagonal jitter of `1e-10`, `1e-9` and finally
/// `1e-8` times `trace/dim` is tried.
pub fn cholesky(sigma: &Mat) -> Result<Mat> {
    if !sigma.is_square() {
        return Err(Error::invalid("cholesky needs a square matrix"));
    }
    if sigma.iter().any(|x| !x.is_finite()) {
        return Err(Error::Decomposition("non-finite entries".into()));
    }
    let n = sigma.nrows();
    let sym = symmetrize(sigma);
    if let Some(l) = cholesky_plain(&sym) {
        return Ok(l);
    }
    let scale = (sym.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    for factor in [1e-10, 1e-9, 1e-8] {
        let jittered = &sym + Mat::identity(n, n) * (factor * scale);
        if let Some(l) = cholesky_plain(&jittered) {
            return Ok(l);
        }
    }
    Err(Error::Decomposition(format!(
        "matrix of dimension {n} is indefinite after maximum jitter"
    )))
}

/// Solves `Lᵀ x = y` for lower-triangular `L` by back substitution.
pub fn solve_lower_transpose(l: &Mat, y: &[f64]) -> Result<Vec<f64>> {
    let n = l.nrows();
    if !l.is_square() || y.len() != n {
        return Err(Error::invalid(format!(
            "solve_lower_transpose shape mismatch: L {:?}, y {}",
            l.shape(),
            y.len()
        )));
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let lii = l[(i, i)];
        if lii == 0.0 {
            return Err(Error::SingularMatrix(format!("zero diagonal at row {i}")));
        }
        let mut s = y[i];
        for k in (i + 1)..n {
            // (Lᵀ)[i, k] = L[k, i]
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / lii;
    }
    Ok(x)
}

/// Solves `L x = y` for lower-triangular `L` by forward substitution.
pub fn solve_lower(l: &Mat, y: &[f64]) -> Result<Vec<f64>> {
    let n = l.nrows();
    if !l.is_square() || y.len() != n {
        return Err(Error::invalid("solve_lower shape mismatch"));
    }
    let mut x = vec![0.0; n];
    for i in 0..n {
        let lii = l[(i, i)];
        if lii == 0.0 {
            return Err(Error::SingularMatrix(format!("zero diagonal at row {i}")));
        }
        let mut s = y[i];
        for k in 0..i {
            s -= l[(i, k)] * x[k];
        }
        x[i] = s / lii;
    }
    Ok(x)
}

/// `L⁻ᵀ` for a lower-triangular `L`, built column by column.
pub fn inverse_transpose_lower(l: &Mat) -> Result<Mat> {
    let n = l.nrows();
    let mut out = Mat::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|x| *x = 0.0);
        e[j] = 1.0;
        let col = solve_lower_transpose(l, &e)?;
        for i in 0..n {
            out[(i, j)] = col[i];
        }
    }
    Ok(out)
}
