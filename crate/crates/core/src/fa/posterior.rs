use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FaError, Result};

/// Hyper-parameters of the linear layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyperparams {
    /// Number of global latent factors.
    pub k_c: usize,
    pub a_alpha: f64,
    pub b_alpha: f64,
    pub a_tau: f64,
    pub b_tau: f64,
    /// Relative relevance cutoff used by factor pruning.
    pub prune_threshold: f64,
    /// Stand-in for the expected feature-wise sparsity precision; 1 disables it.
    pub gamma_mean: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            k_c: 10,
            a_alpha: 1e-3,
            b_alpha: 1e-3,
            a_tau: 1e-3,
            b_tau: 1e-3,
            prune_threshold: 0.1,
            gamma_mean: 1.0,
        }
    }
}

impl Hyperparams {
    pub fn with_k(k_c: usize) -> Self {
        Hyperparams {
            k_c,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_c == 0 {
            return Err(FaError::invalid("k_c must be at least 1"));
        }
        let named = [
            ("a_alpha", self.a_alpha),
            ("b_alpha", self.b_alpha),
            ("a_tau", self.a_tau),
            ("b_tau", self.b_tau),
            ("prune_threshold", self.prune_threshold),
            ("gamma_mean", self.gamma_mean),
        ];
        for (name, v) in named {
            // A zero pruning threshold is the documented "keep everything" setting.
            let ok = if name == "prune_threshold" {
                v >= 0.0
            } else {
                v > 0.0
            };
            if !ok || !v.is_finite() {
                return Err(FaError::invalid(format!(
                    "hyper-parameter {name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Posterior `q(Z)`: one Gaussian per sample.
///
/// Samples that see the same set of views share a covariance; samples with
/// entry-wise precisions (multilabel evidence) get their own. `cov_index`
/// maps each sample to its covariance in `covs`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalLatent {
    pub mean: DMatrix<f64>,
    pub covs: Vec<DMatrix<f64>>,
    pub cov_index: Vec<usize>,
}

impl GlobalLatent {
    /// The prior `N(0, I)` for every sample.
    pub fn prior(n: usize, k: usize) -> Self {
        GlobalLatent {
            mean: DMatrix::zeros(n, k),
            covs: vec![DMatrix::identity(k, k)],
            cov_index: vec![0; n],
        }
    }

    /// Small random means with identity covariance.
    pub fn init<R: Rng>(n: usize, k: usize, rng: &mut R) -> Self {
        let mut z = Self::prior(n, k);
        for v in z.mean.iter_mut() {
            *v = 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        z
    }

    /// A posterior with one covariance shared by all samples.
    pub fn with_shared_cov(mean: DMatrix<f64>, cov: DMatrix<f64>) -> Self {
        let n = mean.nrows();
        GlobalLatent {
            mean,
            covs: vec![cov],
            cov_index: vec![0; n],
        }
    }

    pub fn n_samples(&self) -> usize {
        self.mean.nrows()
    }

    pub fn n_factors(&self) -> usize {
        self.mean.ncols()
    }

    pub fn cov(&self, n: usize) -> &DMatrix<f64> {
        &self.covs[self.cov_index[n]]
    }

    /// The covariance when every sample shares one.
    pub fn shared_cov(&self) -> Option<&DMatrix<f64>> {
        let first = *self.cov_index.first()?;
        self.cov_index
            .iter()
            .all(|&c| c == first)
            .then(|| &self.covs[first])
    }

    pub fn row_mean(&self, n: usize) -> DVector<f64> {
        self.mean.row(n).transpose()
    }

    /// `⟨Z_n Z_nᵀ⟩`.
    pub fn sample_second_moment(&self, n: usize) -> DMatrix<f64> {
        let mu = self.row_mean(n);
        &mu * mu.transpose() + self.cov(n)
    }

    /// `⟨ZᵀZ⟩` over all samples.
    pub fn second_moment(&self) -> DMatrix<f64> {
        self.second_moment_masked(&vec![true; self.n_samples()])
    }

    /// `⟨Z_Oᵀ Z_O⟩` restricted to the samples flagged in `observed`.
    pub fn second_moment_masked(&self, observed: &[bool]) -> DMatrix<f64> {
        let k = self.n_factors();
        let mut acc = DMatrix::zeros(k, k);
        let mut counts = vec![0usize; self.covs.len()];
        for (n, _) in observed.iter().enumerate().filter(|(_, &o)| o) {
            counts[self.cov_index[n]] += 1;
            for i in 0..k {
                let zi = self.mean[(n, i)];
                for j in 0..k {
                    acc[(i, j)] += zi * self.mean[(n, j)];
                }
            }
        }
        for (cov, &count) in self.covs.iter().zip(&counts) {
            if count > 0 {
                acc += cov * count as f64;
            }
        }
        acc
    }

    /// Keeps only the factors flagged in `keep`.
    pub fn select_factors(&self, keep: &[bool]) -> Self {
        let idx: Vec<usize> = keep
            .iter()
            .enumerate()
            .filter(|(_, &k)| k)
            .map(|(i, _)| i)
            .collect();
        GlobalLatent {
            mean: self.mean.select_columns(&idx),
            covs: self
                .covs
                .iter()
                .map(|c| c.select_rows(&idx).select_columns(&idx))
                .collect(),
            cov_index: self.cov_index.clone(),
        }
    }
}

/// Row covariance of `q(W)`.
#[derive(Debug, Clone, PartialEq)]
pub enum RowCovariance {
    /// One covariance for every row (shared noise precision).
    Shared(DMatrix<f64>),
    /// One covariance per row (entry-wise precisions).
    PerRow(Vec<DMatrix<f64>>),
}

/// Posterior `q(W)` of a `D × K` projection; rows are independent Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPosterior {
    pub mean: DMatrix<f64>,
    pub cov: RowCovariance,
}

impl ProjectionPosterior {
    pub fn new(mean: DMatrix<f64>, cov: DMatrix<f64>) -> Self {
        ProjectionPosterior {
            mean,
            cov: RowCovariance::Shared(cov),
        }
    }

    /// Small random means with identity row covariance.
    ///
    /// A zero mean is a fixed point of the alternating Z / W updates, so the
    /// initial means are perturbed.
    pub fn init<R: Rng>(d: usize, k: usize, rng: &mut R) -> Self {
        let mut mean = DMatrix::zeros(d, k);
        for v in mean.iter_mut() {
            *v = 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
        Self::new(mean, DMatrix::identity(k, k))
    }

    pub fn n_rows(&self) -> usize {
        self.mean.nrows()
    }

    pub fn n_factors(&self) -> usize {
        self.mean.ncols()
    }

    pub fn row_cov(&self, d: usize) -> &DMatrix<f64> {
        match &self.cov {
            RowCovariance::Shared(c) => c,
            RowCovariance::PerRow(cs) => &cs[d],
        }
    }

    /// `⟨W_d W_dᵀ⟩`.
    pub fn row_second_moment(&self, d: usize) -> DMatrix<f64> {
        let mu = self.mean.row(d).transpose();
        &mu * mu.transpose() + self.row_cov(d)
    }

    /// `⟨WᵀW⟩ = ⟨W⟩ᵀ⟨W⟩ + Σ_d Σ_W(d)`.
    pub fn second_moment(&self) -> DMatrix<f64> {
        let base = self.mean.tr_mul(&self.mean);
        match &self.cov {
            RowCovariance::Shared(c) => base + c * self.n_rows() as f64,
            RowCovariance::PerRow(cs) => cs.iter().fold(base, |acc, c| acc + c),
        }
    }

    /// `Σ_d ⟨W_dk²⟩` for every factor `k`.
    pub fn column_sq_norms(&self) -> DVector<f64> {
        let k = self.n_factors();
        DVector::from_fn(k, |j, _| {
            (0..self.n_rows())
                .map(|d| self.mean[(d, j)].powi(2) + self.row_cov(d)[(j, j)])
                .sum()
        })
    }

    pub fn select_factors(&self, keep: &[bool]) -> Self {
        let idx: Vec<usize> = keep
            .iter()
            .enumerate()
            .filter(|(_, &k)| k)
            .map(|(i, _)| i)
            .collect();
        let pick = |c: &DMatrix<f64>| c.select_rows(&idx).select_columns(&idx);
        ProjectionPosterior {
            mean: self.mean.select_columns(&idx),
            cov: match &self.cov {
                RowCovariance::Shared(c) => RowCovariance::Shared(pick(c)),
                RowCovariance::PerRow(cs) => RowCovariance::PerRow(cs.iter().map(pick).collect()),
            },
        }
    }
}

/// `q(α) = Π_k Gamma(a, b_k)` (shape / rate).
#[derive(Debug, Clone, PartialEq)]
pub struct ArdPosterior {
    pub a: f64,
    pub b: DVector<f64>,
}

impl ArdPosterior {
    pub fn prior(k: usize, hyper: &Hyperparams) -> Self {
        ArdPosterior {
            a: hyper.a_alpha,
            b: DVector::from_element(k, hyper.b_alpha),
        }
    }

    pub fn mean(&self) -> DVector<f64> {
        self.b.map(|b| self.a / b)
    }

    pub fn select_factors(&self, keep: &[bool]) -> Self {
        let idx: Vec<usize> = keep
            .iter()
            .enumerate()
            .filter(|(_, &k)| k)
            .map(|(i, _)| i)
            .collect();
        ArdPosterior {
            a: self.a,
            b: self.b.select_rows(&idx),
        }
    }
}

/// `q(τ) = Gamma(a, b)` (shape / rate).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisePosterior {
    pub a: f64,
    pub b: f64,
}

impl NoisePosterior {
    pub fn prior(hyper: &Hyperparams) -> Self {
        NoisePosterior {
            a: hyper.a_tau,
            b: hyper.b_tau,
        }
    }

    pub fn mean(&self) -> f64 {
        self.a / self.b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_moment_counts_covariance_per_sample() {
        let z = GlobalLatent::with_shared_cov(
            DMatrix::from_row_slice(2, 1, &[1.0, 2.0]),
            DMatrix::from_element(1, 1, 0.5),
        );
        assert_eq!(z.second_moment()[(0, 0)], 1.0 + 4.0 + 2.0 * 0.5);
        assert_eq!(z.second_moment_masked(&[false, true])[(0, 0)], 4.0 + 0.5);
    }

    #[test]
    fn projection_second_moment_matches_row_sum() {
        let w = ProjectionPosterior::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
            DMatrix::from_row_slice(2, 2, &[0.2, 0.1, 0.1, 0.3]),
        );
        let direct = w.row_second_moment(0) + w.row_second_moment(1);
        assert!((w.second_moment() - direct).abs().max() < 1e-14);
        let norms = w.column_sq_norms();
        assert!((norms[0] - (1.0 + 9.0 + 0.4)).abs() < 1e-14);
    }

    #[test]
    fn hyperparams_reject_non_positive() {
        let mut h = Hyperparams::default();
        h.a_tau = 0.0;
        assert!(h.validate().is_err());
        let h = Hyperparams {
            k_c: 0,
            ..Default::default()
        };
        assert!(h.validate().is_err());
        assert!(Hyperparams::default().validate().is_ok());
    }
}
