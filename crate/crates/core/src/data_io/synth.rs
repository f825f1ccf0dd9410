//! Synthetic multi-view data with known latent structure.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::matrix::write_matrix;
use super::{MultiViewData, ViewObservations};
use crate::error::{FaError, Result};
use crate::rng::stream;
use crate::views::ViewKind;

const STREAM_Z: u64 = 1;
const STREAM_W: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_MAP: u64 = 4;
const STREAM_MASK: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthViewKind {
    /// `X = Z Wᵀ + ε`.
    Real,
    /// `Y ~ Bernoulli(σ(Z Wᵀ))`.
    Multilabel,
    /// A fixed random two-layer tanh network applied to `Z Wᵀ`, plus noise.
    ImageLike,
}

impl SynthViewKind {
    pub fn view_kind(self) -> ViewKind {
        match self {
            SynthViewKind::Real => ViewKind::RealLinear,
            SynthViewKind::Multilabel => ViewKind::Multilabel,
            SynthViewKind::ImageLike => ViewKind::Vae,
        }
    }
}

fn default_noise_tau() -> f64 {
    100.0
}

fn default_code_dim() -> usize {
    4
}

fn default_hidden() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthView {
    pub name: String,
    pub kind: SynthViewKind,
    /// Columns of the view (pixels for image-like views).
    pub d: usize,
    /// Noise precision; `inf` gives noiseless data. Unused by multilabel views.
    #[serde(default = "default_noise_tau")]
    pub noise_tau: f64,
    /// 1-based factor indices shared with other views.
    #[serde(default)]
    pub shared_factors: Vec<usize>,
    /// 1-based factor indices private to this view.
    #[serde(default)]
    pub private_factors: Vec<usize>,
    /// Width of the linear code fed to the nonlinear map (image-like only).
    #[serde(default = "default_code_dim")]
    pub code_dim: usize,
    /// Hidden width of the nonlinear map (image-like only).
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Fraction of samples whose view is missing.
    #[serde(default)]
    pub missing_fraction: f64,
}

impl SynthView {
    pub fn new(
        name: &str,
        kind: SynthViewKind,
        d: usize,
        shared: &[usize],
        private: &[usize],
    ) -> Self {
        SynthView {
            name: name.to_string(),
            kind,
            d,
            noise_tau: default_noise_tau(),
            shared_factors: shared.to_vec(),
            private_factors: private.to_vec(),
            code_dim: default_code_dim(),
            hidden: default_hidden(),
            missing_fraction: 0.0,
        }
    }

    /// 0-based columns of `Z` feeding this view.
    pub fn factor_columns(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self
            .shared_factors
            .iter()
            .chain(&self.private_factors)
            .map(|i| i - 1)
            .collect();
        f.sort_unstable();
        f.dedup();
        f
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub k_true: usize,
    pub seed: u64,
    pub views: Vec<SynthView>,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_true == 0 {
            return Err(FaError::invalid("k_true must be positive"));
        }
        if self.views.is_empty() {
            return Err(FaError::invalid("synthetic data needs at least one view"));
        }
        for (i, v) in self.views.iter().enumerate() {
            let at = |key: &str| format!("views[{i}].{key}");
            if self.views[..i].iter().any(|o| o.name == v.name) {
                return Err(FaError::invalid(format!(
                    "{}: duplicate view name `{}`",
                    at("name"),
                    v.name
                )));
            }
            if v.d == 0 {
                return Err(FaError::invalid(format!("{}: must be positive", at("d"))));
            }
            if v.shared_factors.is_empty() && v.private_factors.is_empty() {
                return Err(FaError::invalid(format!(
                    "{}: view `{}` has no factors",
                    at("shared_factors"),
                    v.name
                )));
            }
            for (key, set) in [
                ("shared_factors", &v.shared_factors),
                ("private_factors", &v.private_factors),
            ] {
                if let Some(&f) = set.iter().find(|&&f| f == 0 || f > self.k_true) {
                    return Err(FaError::invalid(format!(
                        "{}: factor {f} is outside 1..={}",
                        at(key),
                        self.k_true
                    )));
                }
            }
            if !(v.noise_tau > 0.0) {
                return Err(FaError::invalid(format!(
                    "{}: must be positive",
                    at("noise_tau")
                )));
            }
            if !(0.0..1.0).contains(&v.missing_fraction) {
                return Err(FaError::invalid(format!(
                    "{}: must be in [0, 1)",
                    at("missing_fraction")
                )));
            }
            if v.kind == SynthViewKind::ImageLike && (v.code_dim == 0 || v.hidden == 0) {
                return Err(FaError::invalid(format!(
                    "{}: code_dim and hidden must be positive",
                    at("code_dim")
                )));
            }
        }
        Ok(())
    }
}

/// The generating parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub z: DMatrix<f64>,
    /// Per view, `D × k_true` (`code_dim × k_true` for image-like views).
    pub w: Vec<DMatrix<f64>>,
    /// Noise-free signal `Z Wᵀ` passed through the view's map.
    pub clean: Vec<DMatrix<f64>>,
    pub tau: Vec<f64>,
    /// 0-based factor columns per view.
    pub factors: Vec<Vec<usize>>,
}

#[derive(Serialize)]
struct TruthMeta<'a> {
    views: Vec<TruthView<'a>>,
}

#[derive(Serialize)]
struct TruthView<'a> {
    name: &'a str,
    noise_tau: f64,
    factors: Vec<usize>,
}

impl GroundTruth {
    /// Writes `truth_z.favm`, `truth_w_<view>.favm` and `truth.toml`.
    pub fn write(&self, dir: &Path, config: &SynthConfig) -> Result<()> {
        write_matrix(&dir.join("truth_z.favm"), &self.z)?;
        for (v, w) in config.views.iter().zip(&self.w) {
            write_matrix(&dir.join(format!("truth_w_{}.favm", v.name)), w)?;
        }
        let meta = TruthMeta {
            views: config
                .views
                .iter()
                .zip(&self.tau)
                .zip(&self.factors)
                .map(|((v, &t), f)| TruthView {
                    name: &v.name,
                    noise_tau: t,
                    factors: f.iter().map(|i| i + 1).collect(),
                })
                .collect(),
        };
        let path = dir.join("truth.toml");
        let text =
            toml::to_string(&meta).map_err(|e| FaError::format("ground truth", e.to_string()))?;
        fs::write(&path, text).map_err(|e| FaError::io(&path, e))
    }
}

fn normal_matrix<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> DMatrix<f64> {
    // Filled row-major so the draw order does not depend on storage order.
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m[(r, c)] = scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
    m
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Draws `Z ~ N(0, I)`, view projections supported on the view's factors,
/// and observations for every view.
pub fn generate_synthetic(config: &SynthConfig) -> Result<(MultiViewData, GroundTruth)> {
    config.validate()?;
    let (n, k) = (config.n, config.k_true);
    let z = normal_matrix(n, k, 1.0, &mut stream(config.seed, &[STREAM_Z]));
    let mut truth = GroundTruth {
        z,
        w: Vec::new(),
        clean: Vec::new(),
        tau: Vec::new(),
        factors: Vec::new(),
    };
    let mut views = Vec::with_capacity(config.views.len());
    for (vi, spec) in config.views.iter().enumerate() {
        let vi = vi as u64;
        let factors = spec.factor_columns();
        let rows = if spec.kind == SynthViewKind::ImageLike {
            spec.code_dim
        } else {
            spec.d
        };
        let mut w_rng = stream(config.seed, &[STREAM_W, vi]);
        let mut w = DMatrix::zeros(rows, k);
        for r in 0..rows {
            for &c in &factors {
                w[(r, c)] = w_rng.sample::<f64, _>(StandardNormal);
            }
        }
        let linear = &truth.z * w.transpose();
        let clean = match spec.kind {
            SynthViewKind::Real | SynthViewKind::Multilabel => linear,
            SynthViewKind::ImageLike => {
                let mut map_rng = stream(config.seed, &[STREAM_MAP, vi]);
                // Codes have variance about |factors|; scale the first layer to keep tanh unsaturated.
                let s1 = 1.0 / ((spec.code_dim * factors.len()) as f64).sqrt();
                let a1 = normal_matrix(spec.code_dim, spec.hidden, 2.0 * s1, &mut map_rng);
                let b1 = normal_matrix(1, spec.hidden, 0.1, &mut map_rng);
                let a2 = normal_matrix(
                    spec.hidden,
                    spec.d,
                    1.0 / (spec.hidden as f64).sqrt(),
                    &mut map_rng,
                );
                let mut h = linear * a1;
                for r in 0..n {
                    for c in 0..spec.hidden {
                        h[(r, c)] = (h[(r, c)] + b1[(0, c)]).tanh();
                    }
                }
                h * a2
            }
        };
        let mut noise_rng = stream(config.seed, &[STREAM_NOISE, vi]);
        let values = match spec.kind {
            SynthViewKind::Multilabel => clean.map(|logit| {
                let u: f64 = noise_rng.random();
                if u < sigmoid(logit) {
                    1.0
                } else {
                    0.0
                }
            }),
            _ if spec.noise_tau.is_infinite() => clean.clone(),
            _ => {
                let sd = 1.0 / spec.noise_tau.sqrt();
                &clean + normal_matrix(n, spec.d, sd, &mut noise_rng)
            }
        };
        let mask = (spec.missing_fraction > 0.0).then(|| {
            let mut rng = stream(config.seed, &[STREAM_MASK, vi]);
            DMatrix::from_fn(n, 1, |_, _| {
                if rng.random::<f64>() < spec.missing_fraction {
                    0.0
                } else {
                    1.0
                }
            })
        });
        views.push(ViewObservations {
            name: spec.name.clone(),
            kind: spec.kind.view_kind(),
            values,
            mask,
        });
        truth.w.push(w);
        truth.clean.push(clean);
        truth.tau.push(spec.noise_tau);
        truth.factors.push(factors);
    }
    Ok((
        MultiViewData {
            n_samples: n,
            views,
        },
        truth,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> SynthConfig {
        SynthConfig {
            n: 50,
            k_true: 3,
            seed: 7,
            views: vec![
                SynthView::new("a", SynthViewKind::Real, 4, &[1], &[2]),
                SynthView::new("b", SynthViewKind::Multilabel, 3, &[1], &[3]),
            ],
        }
    }

    #[test]
    fn projections_vanish_outside_factor_sets() {
        let (_, truth) = generate_synthetic(&config()).unwrap();
        assert!(truth.w[0].column(2).iter().all(|&v| v == 0.0));
        assert!(truth.w[1].column(1).iter().all(|&v| v == 0.0));
        assert!(truth.w[0].column(0).iter().all(|&v| v != 0.0));
    }

    #[test]
    fn noiseless_real_view_is_exact() {
        let mut c = config();
        c.views[0].noise_tau = f64::INFINITY;
        let (data, truth) = generate_synthetic(&c).unwrap();
        assert_eq!(data.views[0].values, &truth.z * truth.w[0].transpose());
    }

    #[test]
    fn factor_validation() {
        let mut c = config();
        c.views[0].private_factors = vec![4];
        assert!(generate_synthetic(&c).is_err());
        c.views[0].private_factors = vec![0];
        assert!(generate_synthetic(&c).is_err());
        c.views[0].private_factors.clear();
        c.views[0].shared_factors.clear();
        assert!(generate_synthetic(&c).is_err());
    }
}
