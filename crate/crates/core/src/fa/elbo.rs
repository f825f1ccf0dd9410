use statrs::function::gamma::{digamma, ln_gamma};

use super::{
    expected_sq_residual, ArdPosterior, GlobalLatent, Hyperparams, NoisePosterior,
    ProjectionPosterior, ViewData, ViewNoise,
};
use crate::error::{FaError, Result};
use crate::views::{lambda_xi, log_sigmoid};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// One view's contribution to the bound.
#[derive(Debug, Clone, Copy)]
pub struct ElboView<'a> {
    pub data: &'a ViewData<'a>,
    pub w: &'a ProjectionPosterior,
    pub ard: &'a ArdPosterior,
}

fn gamma_expected_log(a: f64, b: f64) -> f64 {
    digamma(a) - b.ln()
}

/// `E_q[log Gamma(x | a0, b0)]` under `q = Gamma(a, b)`.
fn gamma_cross(a0: f64, b0: f64, a: f64, b: f64) -> f64 {
    a0 * b0.ln() - ln_gamma(a0) + (a0 - 1.0) * gamma_expected_log(a, b) - b0 * a / b
}

fn gamma_entropy(a: f64, b: f64) -> f64 {
    a - b.ln() + ln_gamma(a) + (1.0 - a) * digamma(a)
}

fn log_det_spd(m: &nalgebra::DMatrix<f64>, context: &str) -> Result<f64> {
    let chol = m
        .clone()
        .cholesky()
        .ok_or_else(|| FaError::numerical(context, "covariance is not positive definite"))?;
    Ok(2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|v| v.ln())
            .sum::<f64>())
}

/// Evidence lower bound of the linear-Gaussian layer with its Gamma priors:
/// the expected complete-data log joint under `q` plus the entropy of `q`.
///
/// Pseudo-observations are treated as data; for multilabel views the
/// likelihood is the logistic bound at the current `ξ`.
pub fn fa_elbo(hyper: &Hyperparams, z: &GlobalLatent, views: &[ElboView]) -> Result<f64> {
    let k = z.n_factors();
    let kf = k as f64;

    // log p(Z) + H[q(Z)]; the 2π terms cancel.
    let mut z_term = 0.0;
    let mut cov_log_dets = Vec::with_capacity(z.covs.len());
    for cov in &z.covs {
        cov_log_dets.push(log_det_spd(cov, "q(Z) entropy")?);
    }
    for n in 0..z.n_samples() {
        let cov = z.cov(n);
        let mu = z.mean.row(n);
        z_term += 0.5 * kf - 0.5 * (mu.dot(&mu) + cov.trace()) + 0.5 * cov_log_dets[z.cov_index[n]];
    }

    let mut total = z_term;
    for view in views {
        total += view_likelihood(view.data, z, view.w)?;
        total += projection_terms(hyper, view.w, view.ard, view.data.name)?;
        total += ard_terms(hyper, view.ard);
        if let ViewNoise::Learned(tau) = view.data.noise {
            total += noise_terms(hyper, tau);
        }
    }
    if !total.is_finite() {
        return Err(FaError::numerical(
            "fa_elbo",
            format!("bound evaluated to {total}"),
        ));
    }
    Ok(total)
}

fn view_likelihood(data: &ViewData, z: &GlobalLatent, w: &ProjectionPosterior) -> Result<f64> {
    match data.noise {
        ViewNoise::Learned(tau) => {
            let terms = expected_sq_residual(data, z, w)?;
            let count = (data.values.ncols() * data.n_observed()) as f64;
            Ok(0.5 * count * (gamma_expected_log(tau.a, tau.b) - LN_2PI)
                - 0.5 * tau.mean() * terms.total())
        }
        ViewNoise::Logistic {
            labels,
            xi,
            entry_mask,
            ..
        } => {
            let k = z.n_factors();
            let w_rows: Vec<_> = (0..w.n_rows())
                .map(|d| (w.mean.row(d).transpose(), w.row_cov(d)))
                .collect();
            let mut acc = 0.0;
            for n in (0..z.n_samples()).filter(|&r| data.observed[r]) {
                let s_n = z.sample_second_moment(n);
                let mu_n = z.mean.row(n);
                for (d, (mu_d, cov_d)) in w_rows.iter().enumerate() {
                    if entry_mask[(n, d)] == 0.0 {
                        continue;
                    }
                    let mean_pred: f64 = (0..k).map(|j| mu_n[j] * mu_d[j]).sum();
                    let second = (mu_d.transpose() * &s_n * mu_d)[(0, 0)]
                        + crate::linalg::trace_of_product(&s_n, cov_d);
                    let x = xi[(n, d)];
                    acc += log_sigmoid(x) + (labels[(n, d)] - 0.5) * mean_pred
                        - 0.5 * x
                        - lambda_xi(x) * (second - x * x);
                }
            }
            Ok(acc)
        }
    }
}

/// `E[log p(W | α)] + H[q(W)]`; the 2π terms cancel.
fn projection_terms(
    hyper: &Hyperparams,
    w: &ProjectionPosterior,
    ard: &ArdPosterior,
    name: &str,
) -> Result<f64> {
    let k = w.n_factors();
    let gamma = hyper.gamma_mean;
    let alpha_mean = ard.mean();
    let alpha_log: Vec<f64> = ard
        .b
        .iter()
        .map(|&b| gamma_expected_log(ard.a, b))
        .collect();
    let prior_log: f64 = alpha_log.iter().map(|l| 0.5 * (l + gamma.ln())).sum();
    let context = format!("q(W) entropy of view `{name}`");
    let shared_log_det = match &w.cov {
        super::RowCovariance::Shared(c) => Some(log_det_spd(c, &context)?),
        super::RowCovariance::PerRow(_) => None,
    };
    let mut acc = 0.0;
    for d in 0..w.n_rows() {
        let cov = w.row_cov(d);
        let mut quad = 0.0;
        for j in 0..k {
            quad += alpha_mean[j] * (w.mean[(d, j)].powi(2) + cov[(j, j)]);
        }
        let log_det = match shared_log_det {
            Some(v) => v,
            None => log_det_spd(cov, &context)?,
        };
        acc += prior_log - 0.5 * gamma * quad + 0.5 * log_det + 0.5 * k as f64;
    }
    Ok(acc)
}

fn ard_terms(hyper: &Hyperparams, ard: &ArdPosterior) -> f64 {
    ard.b
        .iter()
        .map(|&b| gamma_cross(hyper.a_alpha, hyper.b_alpha, ard.a, b) + gamma_entropy(ard.a, b))
        .sum()
}

fn noise_terms(hyper: &Hyperparams, tau: &NoisePosterior) -> f64 {
    gamma_cross(hyper.a_tau, hyper.b_tau, tau.a, tau.b) + gamma_entropy(tau.a, tau.b)
}
