//! Independent reference implementations used as test oracles, written
//! entry by entry from the model definitions and solved with LU rather than
//! Cholesky.

#![allow(dead_code)]

use favae::fa::{
    ArdPosterior, GlobalLatent, Hyperparams, NoisePosterior, ProjectionPosterior, RowCovariance,
};
use favae::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller, so the oracles do not share the library's sampler.
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub fn random_matrix(r: usize, c: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * normal(rng))
}

pub fn random_spd(k: usize, scale: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = random_matrix(k, k, 1.0, rng);
    (&a * a.transpose()) * (scale / k as f64) + DMatrix::identity(k, k) * (0.1 * scale)
}

pub fn inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().lu().try_inverse().expect("invertible")
}

/// Relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub fn max_rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| rel_err(*x, *y, floor))
        .fold(0.0, f64::max)
}

/// Everything the linear-layer oracles need to know about one view: values,
/// optional extra second moments and an entry-wise precision matrix
/// (`⟨τ⟩` on observed rows for learned noise, `2λ(ξ)` for labels, 0 where
/// missing).
pub struct OracleView {
    pub x: DMatrix<f64>,
    pub extra: Option<DMatrix<f64>>,
    pub lambda: DMatrix<f64>,
    pub w: ProjectionPosterior,
}

pub fn w_row_cov(w: &ProjectionPosterior, d: usize) -> DMatrix<f64> {
    match &w.cov {
        RowCovariance::Shared(c) => c.clone(),
        RowCovariance::PerRow(cs) => cs[d].clone(),
    }
}

fn w_outer(w: &ProjectionPosterior, d: usize) -> DMatrix<f64> {
    let k = w.mean.ncols();
    let c = w_row_cov(w, d);
    DMatrix::from_fn(k, k, |i, j| w.mean[(d, i)] * w.mean[(d, j)] + c[(i, j)])
}

fn z_outer(z: &GlobalLatent, n: usize) -> DMatrix<f64> {
    let k = z.mean.ncols();
    let c = &z.covs[z.cov_index[n]];
    DMatrix::from_fn(k, k, |i, j| z.mean[(n, i)] * z.mean[(n, j)] + c[(i, j)])
}

/// `q(Z)` row by row: `(mean_n, cov_n)`.
pub fn oracle_q_z(n: usize, k: usize, views: &[OracleView]) -> Vec<(DVector<f64>, DMatrix<f64>)> {
    (0..n)
        .map(|row| {
            let mut prec = DMatrix::<f64>::identity(k, k);
            let mut nat = DVector::<f64>::zeros(k);
            for v in views {
                for d in 0..v.x.ncols() {
                    let l = v.lambda[(row, d)];
                    if l == 0.0 {
                        continue;
                    }
                    prec += w_outer(&v.w, d) * l;
                    for j in 0..k {
                        nat[j] += l * v.x[(row, d)] * v.w.mean[(d, j)];
                    }
                }
            }
            let cov = inverse(&prec);
            (&cov * nat, cov)
        })
        .collect()
}

/// `q(W)` row by row for one view.
pub fn oracle_q_w(
    v: &OracleView,
    z: &GlobalLatent,
    alpha_mean: &DVector<f64>,
    gamma: f64,
) -> Vec<(DVector<f64>, DMatrix<f64>)> {
    let k = z.mean.ncols();
    (0..v.x.ncols())
        .map(|d| {
            let mut prec = DMatrix::<f64>::zeros(k, k);
            for j in 0..k {
                prec[(j, j)] = gamma * alpha_mean[j];
            }
            let mut nat = DVector::<f64>::zeros(k);
            for row in 0..z.mean.nrows() {
                let l = v.lambda[(row, d)];
                if l == 0.0 {
                    continue;
                }
                prec += z_outer(z, row) * l;
                for j in 0..k {
                    nat[j] += l * v.x[(row, d)] * z.mean[(row, j)];
                }
            }
            let cov = inverse(&prec);
            (&cov * nat, cov)
        })
        .collect()
}

pub fn oracle_q_alpha(w: &ProjectionPosterior, hyper: &Hyperparams) -> ArdPosterior {
    let (d_m, k) = w.mean.shape();
    let b = DVector::from_fn(k, |j, _| {
        let s: f64 = (0..d_m)
            .map(|d| w.mean[(d, j)].powi(2) + w_row_cov(w, d)[(j, j)])
            .sum();
        hyper.b_alpha + 0.5 * hyper.gamma_mean * s
    });
    ArdPosterior {
        a: hyper.a_alpha + d_m as f64 / 2.0,
        b,
    }
}

/// `q(τ)` from the element-wise expected squared residual over observed rows.
pub fn oracle_q_tau(
    v: &OracleView,
    observed: &[bool],
    z: &GlobalLatent,
    hyper: &Hyperparams,
) -> NoisePosterior {
    let d_m = v.x.ncols();
    let mut rss = 0.0;
    let mut count = 0usize;
    for row in (0..observed.len()).filter(|&r| observed[r]) {
        let zz = z_outer(z, row);
        for d in 0..d_m {
            let x = v.x[(row, d)];
            let extra = v.extra.as_ref().map_or(0.0, |e| e[(row, d)]);
            let pred: f64 = (0..z.mean.ncols())
                .map(|j| z.mean[(row, j)] * v.w.mean[(d, j)])
                .sum();
            let ww = w_outer(&v.w, d);
            let quad: f64 = zz.iter().zip(ww.iter()).map(|(a, b)| a * b).sum();
            rss += x * x + extra - 2.0 * x * pred + quad;
            count += 1;
        }
    }
    NoisePosterior {
        a: hyper.a_tau + count as f64 / 2.0,
        b: hyper.b_tau + 0.5 * rss,
    }
}

/// Posterior of `z ~ N(0, I)` given `x = W z + ε`, `ε ~ N(0, diag(1/τ))`,
/// by conditioning the dense joint Gaussian of `(z, x)`.
pub fn joint_gaussian_condition(
    w: &DMatrix<f64>,
    noise_var: &DVector<f64>,
    x: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let k = w.ncols();
    let sxx = w * w.transpose() + DMatrix::from_diagonal(noise_var);
    let szx = w.transpose();
    let gain = &szx * inverse(&sxx);
    let mean = &gain * x;
    let cov = DMatrix::identity(k, k) - &gain * szx.transpose();
    (mean, cov)
}

/// Coefficient of determination of predicting each column of `y` by least
/// squares on the columns of `x` (with intercept).
pub fn r2_columns(y: &DMatrix<f64>, x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows();
    let mut design = DMatrix::from_element(n, x.ncols() + 1, 1.0);
    design.view_mut((0, 1), (n, x.ncols())).copy_from(x);
    let gram =
        design.transpose() * &design + DMatrix::identity(x.ncols() + 1, x.ncols() + 1) * 1e-9;
    let coef = inverse(&gram) * (design.transpose() * y);
    let fit = &design * coef;
    (0..y.ncols())
        .map(|c| {
            let col = y.column(c);
            let mean = col.mean();
            let ss_res: f64 = col
                .iter()
                .zip(fit.column(c).iter())
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            let ss_tot: f64 = col.iter().map(|a| (a - mean).powi(2)).sum();
            1.0 - ss_res / ss_tot
        })
        .collect()
}

/// `1 − SS_res / SS_tot` over all entries, with per-column means.
pub fn r2_total(truth: &DMatrix<f64>, pred: &DMatrix<f64>) -> f64 {
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for c in 0..truth.ncols() {
        let mean = truth.column(c).mean();
        for r in 0..truth.nrows() {
            ss_res += (truth[(r, c)] - pred[(r, c)]).powi(2);
            ss_tot += (truth[(r, c)] - mean).powi(2);
        }
    }
    1.0 - ss_res / ss_tot
}
