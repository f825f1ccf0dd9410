//! The conjugate linear-Gaussian layer shared by all views.
//!
//! Each view contributes a pseudo-observation matrix `X` (`N × D`) modelled
//! as `X = Z Wᵀ + ε`, with `Z` the `N × K` global latent matrix and `W` a
//! `D × K` projection carrying a column-wise ARD prior. Noise is either a
//! learned isotropic precision `τ` or, for multilabel views, fixed entry-wise
//! precisions coming from the logistic bound.

mod elbo;
mod posterior;
mod prune;
mod rotation;
mod updates;

use nalgebra::DMatrix;

pub use elbo::{fa_elbo, ElboView};
pub use posterior::{
    ArdPosterior, GlobalLatent, Hyperparams, NoisePosterior, ProjectionPosterior, RowCovariance,
};
pub use prune::{factor_mask, relevance_abs, relevance_signed};
pub use rotation::{rotate_latent, rotate_projection, RotationProblem};
pub use updates::{
    expected_sq_residual, update_q_alpha, update_q_tau, update_q_w, update_q_z, ResidualTerms,
};

/// Noise model of a view's pseudo-observations.
#[derive(Debug, Clone, Copy)]
pub enum ViewNoise<'a> {
    /// Isotropic precision with a Gamma posterior.
    Learned(&'a NoisePosterior),
    /// Bernoulli labels through the logistic bound: the effective precision
    /// of entry `(n, d)` is `precision[(n, d)] = 2 λ(ξ_nd)` (0 where missing).
    Logistic {
        labels: &'a DMatrix<f64>,
        xi: &'a DMatrix<f64>,
        entry_mask: &'a DMatrix<f64>,
        precision: &'a DMatrix<f64>,
    },
}

/// What the linear layer sees of one view.
#[derive(Debug, Clone, Copy)]
pub struct ViewData<'a> {
    pub name: &'a str,
    pub values: &'a DMatrix<f64>,
    /// Extra per-entry second moment (encoder variances) added to `X²`.
    pub second_moment_diag: Option<&'a DMatrix<f64>>,
    pub observed: &'a [bool],
    pub noise: ViewNoise<'a>,
}

impl ViewData<'_> {
    pub fn n_observed(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }
}
