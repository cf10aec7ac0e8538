//! Independent oracles shared by the integration and acceptance tests.
//! Everything here is recomputed from the model definition with plain
//! small-matrix arithmetic and RK4, without the library's kernel code.
#![allow(dead_code)]

use nalgebra::DMatrix;
use vsmd::processes::{DiffusionConfig, VariationalSchedule};

pub type M = DMatrix<f64>;

/// Per-coordinate drift block `D` and noise block `Q` on interval `i`
/// (schedule row `i`), with β taken at the interval midpoint.
pub fn blocks(cfg: &DiffusionConfig, sched: &VariationalSchedule, i: usize, coord: usize) -> (f64, M, M) {
    let mid = (i as f64 + 0.5) * cfg.horizon / (cfg.grid_size - 1) as f64;
    let beta = cfg.beta.eval(mid, cfg.horizon);
    let ax = sched.a_x[i][coord];
    let av = sched.a_v[i][coord];
    if cfg.mode.has_momentum() {
        let gamma = cfg.effective_gamma();
        let d = M::from_row_slice(2, 2, &[0.0, -1.0, 1.0 - 2.0 * gamma * ax, gamma * (1.0 - 2.0 * av)]);
        let q = M::from_row_slice(2, 2, &[0.0, 0.0, 0.0, gamma]);
        (beta, d, q)
    } else {
        (beta, M::from_element(1, 1, 1.0 - 2.0 * ax), M::from_element(1, 1, 1.0))
    }
}

/// RK4 on `Φ' = -½βDΦ`, `Σ' = -½β(DΣ + ΣDᵀ) + βQ` over `tau`.
pub fn rk4_moments(beta: f64, d: &M, q: &M, phi: &M, sigma: &M, tau: f64, steps: usize) -> (M, M) {
    let a = d * (-0.5 * beta);
    let bq = q * beta;
    let fp = |p: &M| &a * p;
    let fs = |s: &M| &a * s + s * a.transpose() + &bq;
    let h = tau / steps as f64;
    let (mut p, mut s) = (phi.clone(), sigma.clone());
    for _ in 0..steps {
        let k1 = fp(&p);
        let k2 = fp(&(&p + &k1 * (0.5 * h)));
        let k3 = fp(&(&p + &k2 * (0.5 * h)));
        let k4 = fp(&(&p + &k3 * h));
        p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        let l1 = fs(&s);
        let l2 = fs(&(&s + &l1 * (0.5 * h)));
        let l3 = fs(&(&s + &l2 * (0.5 * h)));
        let l4 = fs(&(&s + &l3 * h));
        s += (l1 + l2 * 2.0 + l3 * 2.0 + l4) * (h / 6.0);
    }
    (p, s)
}

/// `det Φ` at `node` from Liouville's formula, `exp(-∫ ½β tr D dt)`.
pub fn liouville_det(cfg: &DiffusionConfig, sched: &VariationalSchedule, node: usize, coord: usize) -> f64 {
    let dt = cfg.horizon / (cfg.grid_size - 1) as f64;
    let integral: f64 = (0..node)
        .map(|i| {
            let (beta, d, _) = blocks(cfg, sched, i, coord);
            0.5 * beta * d.trace() * dt
        })
        .sum();
    (-integral).exp()
}

/// `(Φ, Σ)` per node and coordinate by RK4 with `sub` steps per interval.
pub fn rk4_kernel(cfg: &DiffusionConfig, sched: &VariationalSchedule, sigma0: &M, sub: usize) -> Vec<Vec<(M, M)>> {
    let dim = sched.dim();
    let b = sigma0.nrows();
    let dt = cfg.horizon / (cfg.grid_size - 1) as f64;
    let mut out = vec![vec![(M::identity(b, b), sigma0.clone()); dim]];
    for i in 0..cfg.grid_size - 1 {
        let next = (0..dim)
            .map(|c| {
                let (beta, d, q) = blocks(cfg, sched, i, c);
                let (p, s) = &out[i][c];
                rk4_moments(beta, &d, &q, p, s, dt, sub)
            })
            .collect();
        out.push(next);
    }
    out
}

/// Marginal covariance per node and coordinate for zero-mean data with
/// per-coordinate variances `var` (Σ0 carries the velocity marginal).
pub fn marginal_covs(kern: &[Vec<(M, M)>], var: &[f64]) -> Vec<Vec<M>> {
    kern.iter()
        .map(|node| {
            node.iter()
                .zip(var)
                .map(|((p, s), &v)| {
                    let b = p.nrows();
                    let mut s0 = M::zeros(b, b);
                    s0[(0, 0)] = v;
                    p * s0 * p.transpose() + s
                })
                .collect()
        })
        .collect()
}

/// Exact second moments of the backward Euler–Maruyama chain driven by the
/// exact linear score `-P_t a`, started from `N(0, Σ_{T|0})`. The last step
/// is noise-free when `denoise` is set. Returns `C[node][coord]`.
pub fn em_backward_covs(cfg: &DiffusionConfig, sched: &VariationalSchedule, kern: &[Vec<(M, M)>], var: &[f64], denoise: bool) -> Vec<Vec<M>> {
    let n = cfg.grid_size;
    let dim = var.len();
    let h = cfg.horizon / (n - 1) as f64;
    let marg = marginal_covs(kern, var);
    let mut out = vec![Vec::new(); n];
    out[n - 1] = (0..dim).map(|c| kern[n - 1][c].1.clone()).collect();
    for j in (0..n - 1).rev() {
        out[j] = (0..dim)
            .map(|c| {
                let (beta, d, q) = blocks(cfg, sched, j, c);
                let b = d.nrows();
                let prec = marg[j + 1][c].clone().try_inverse().expect("marginal covariance invertible");
                let gg = &q * beta;
                let m = M::identity(b, b) + &d * (0.5 * beta * h) - &gg * &prec * h;
                let mut cn = &m * &out[j + 1][c] * m.transpose();
                if !(denoise && j == 0) {
                    cn += &gg * h;
                }
                cn
            })
            .collect();
    }
    out
}

pub fn damping(cfg: &DiffusionConfig, ax: f64) -> f64 {
    0.5 - (cfg.damping_ratio * (1.0 - 2.0 * cfg.gamma * ax)).sqrt() / cfg.gamma
}

/// Stable root of `g(a_x) = a_x C_xx + T(a_x) C_xv + ζ E[s_v x]` reached by
/// descent from `from`: scan in the direction of `-g` until the sign flips,
/// then bisect. Returns the bound when the scan leaves `[lo, hi]`.
pub fn bisect_node(cfg: &DiffusionConfig, c: &M, prec: &M, zeta: f64, from: f64, lo: f64, hi: f64) -> f64 {
    let score_x = -(prec * c)[(1, 0)];
    let g = |ax: f64| ax * c[(0, 0)] + damping(cfg, ax) * c[(0, 1)] + zeta * score_x;
    let up = g(from) < 0.0;
    let step = 1e-3;
    let mut a = from.clamp(lo, hi);
    let mut b;
    loop {
        b = if up { (a + step).min(hi) } else { (a - step).max(lo) };
        if (g(b) < 0.0) != up {
            break;
        }
        if b == hi || b == lo {
            return b;
        }
        a = b;
    }
    let (mut neg, mut pos) = if up { (a, b) } else { (b, a) };
    for _ in 0..200 {
        let m = 0.5 * (neg + pos);
        if g(m) < 0.0 {
            neg = m;
        } else {
            pos = m;
        }
        if (pos - neg).abs() < 1e-15 {
            break;
        }
    }
    0.5 * (neg + pos)
}

/// Fixed point `A*` of the expected SA update for a momentum variational
/// mode on zero-mean Gaussian data with diagonal covariance `var`: the
/// schedule whose per-node FK stationarity holds under the backward moments
/// it generates itself. Returns the schedule and the final sup-change.
pub fn sa_fixed_point(cfg: &DiffusionConfig, var: &[f64], zeta: f64, hi: f64, iters: usize) -> (VariationalSchedule, f64) {
    let n = cfg.grid_size;
    let dim = var.len();
    let mut sched = VariationalSchedule::zeros(n, dim);
    for row in &mut sched.a_v {
        row.iter_mut().for_each(|a| *a = damping(cfg, 0.0));
    }
    let sigma0 = M::from_row_slice(2, 2, &[cfg.x_jitter, 0.0, 0.0, 1.0]);
    let mut change = f64::INFINITY;
    for _ in 0..iters {
        let kern = rk4_kernel(cfg, &sched, &sigma0, 8);
        let marg = marginal_covs(&kern, var);
        let covs = em_backward_covs(cfg, &sched, &kern, var, true);
        change = 0.0;
        for j in 0..n {
            for c in 0..dim {
                let prec = marg[j][c].clone().try_inverse().expect("invertible");
                let old = sched.a_x[j][c];
                let new = bisect_node(cfg, &covs[j][c], &prec, zeta, old, -5.0, hi);
                let upd = 0.5 * old + 0.5 * new;
                change = f64::max(change, (upd - old).abs());
                sched.a_x[j][c] = upd;
                sched.a_v[j][c] = damping(cfg, upd);
            }
        }
        if change < 1e-12 {
            break;
        }
    }
    (sched, change)
}

pub fn schedule_distance(a: &VariationalSchedule, b: &VariationalSchedule) -> f64 {
    a.a_x
        .iter()
        .zip(&b.a_x)
        .flat_map(|(r, s)| r.iter().zip(s).map(|(x, y)| (x - y) * (x - y)))
        .sum::<f64>()
        .sqrt()
}
