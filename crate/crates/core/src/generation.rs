//! Inference on a trained model: conditional posteriors of `Z`, generation,
//! cross-view translation, interpolation and relevance reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{FaError, Result};
use crate::fa::{relevance_abs, relevance_signed, update_q_z, GlobalLatent, ViewData, ViewNoise};
use crate::model::{FaVae, LocalModel};
use crate::rng::stream;
use crate::views::{ensure_finite, lambda_xi, ViewKind};

/// Variance floor on `⟨τ⟩⁻¹` when drawing pseudo-observations.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Fixed-point sweeps of `ξ` when conditioning on labels.
const XI_SWEEPS: usize = 50;

/// Posterior of `Z` for new rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalPosterior {
    pub z: GlobalLatent,
    /// Set when no evidence was supplied and the prior was returned.
    pub prior_only: bool,
}

/// `q(Z* | evidence)` using the trained projections of the given views.
///
/// Evidence maps a view name to pseudo-observation rows (latent codes for
/// VAE views, 0/1 labels for multilabel views). Multilabel evidence is
/// handled by iterating the `ξ` refresh to a fixed point. With no evidence
/// the prior for a single row is returned.
pub fn posterior_z_given(
    model: &FaVae,
    evidence: &BTreeMap<String, DMatrix<f64>>,
) -> Result<ConditionalPosterior> {
    let k = model.n_factors();
    if evidence.is_empty() {
        log::warn!("no evidence given; returning the prior of Z");
        return Ok(ConditionalPosterior {
            z: GlobalLatent::prior(1, k),
            prior_only: true,
        });
    }
    let mut n = None;
    let mut parts = Vec::with_capacity(evidence.len());
    // Evidence is taken in model view order so the result does not depend
    // on how the caller built the map.
    for view in &model.views {
        let Some(x) = evidence.get(&view.name) else {
            continue;
        };
        let rows = *n.get_or_insert(x.nrows());
        if x.nrows() != rows {
            return Err(FaError::dim(
                format!("evidence rows of view `{}`", view.name),
                rows,
                x.nrows(),
            ));
        }
        if x.ncols() != view.dim() {
            return Err(FaError::dim(
                format!("evidence columns of view `{}`", view.name),
                view.dim(),
                x.ncols(),
            ));
        }
        ensure_finite(x, &format!("evidence of view `{}`", view.name))?;
        parts.push((view, x));
    }
    if let Some(name) = evidence.keys().find(|name| model.view(name).is_none()) {
        return Err(FaError::invalid(format!("unknown view `{name}`")));
    }
    let n = n.expect("non-empty evidence");
    let observed = vec![true; n];

    struct Logistic {
        labels: DMatrix<f64>,
        xi: DMatrix<f64>,
        mask: DMatrix<f64>,
        precision: DMatrix<f64>,
        values: DMatrix<f64>,
    }
    let mut logistic: Vec<Option<Logistic>> = parts
        .iter()
        .map(|(view, x)| -> Result<Option<Logistic>> {
            if view.kind() != ViewKind::Multilabel {
                return Ok(None);
            }
            if x.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(FaError::invalid(format!(
                    "evidence of multilabel view `{}` must be 0/1",
                    view.name
                )));
            }
            let mut l = Logistic {
                labels: (*x).clone(),
                xi: DMatrix::zeros(n, x.ncols()),
                mask: DMatrix::from_element(n, x.ncols(), 1.0),
                precision: DMatrix::zeros(n, x.ncols()),
                values: DMatrix::zeros(n, x.ncols()),
            };
            refresh_logistic(&mut l.precision, &mut l.values, &l.labels, &l.xi);
            Ok(Some(l))
        })
        .collect::<Result<_>>()?;

    let solve = |logistic: &[Option<Logistic>]| -> Result<GlobalLatent> {
        let data: Vec<ViewData> = parts
            .iter()
            .zip(logistic)
            .map(|((view, x), l)| match l {
                Some(l) => ViewData {
                    name: &view.name,
                    values: &l.values,
                    second_moment_diag: None,
                    observed: &observed,
                    noise: ViewNoise::Logistic {
                        labels: &l.labels,
                        xi: &l.xi,
                        entry_mask: &l.mask,
                        precision: &l.precision,
                    },
                },
                None => ViewData {
                    name: &view.name,
                    values: x,
                    second_moment_diag: None,
                    observed: &observed,
                    noise: ViewNoise::Learned(view.noise.as_ref().expect("learned noise")),
                },
            })
            .collect();
        let pairs: Vec<_> = data.iter().zip(parts.iter().map(|(v, _)| &v.w)).collect();
        update_q_z(n, k, &pairs)
    };

    let mut z = solve(&logistic)?;
    if logistic.iter().any(Option::is_some) {
        for _ in 0..XI_SWEEPS {
            let mut delta = 0.0f64;
            for ((view, _), l) in parts.iter().zip(logistic.iter_mut()) {
                let Some(l) = l else { continue };
                for row in 0..n {
                    let s_n = z.sample_second_moment(row);
                    for d in 0..l.labels.ncols() {
                        let mu = view.w.mean.row(d).transpose();
                        let second = (mu.transpose() * &s_n * &mu)[(0, 0)]
                            + crate::linalg::trace_of_product(&s_n, view.w.row_cov(d));
                        let xi = second.max(0.0).sqrt();
                        delta = delta.max((xi - l.xi[(row, d)]).abs());
                        l.xi[(row, d)] = xi;
                    }
                }
                refresh_logistic(&mut l.precision, &mut l.values, &l.labels, &l.xi);
            }
            z = solve(&logistic)?;
            if delta < 1e-10 {
                break;
            }
        }
    }
    Ok(ConditionalPosterior {
        z,
        prior_only: false,
    })
}

fn refresh_logistic(
    precision: &mut DMatrix<f64>,
    values: &mut DMatrix<f64>,
    labels: &DMatrix<f64>,
    xi: &DMatrix<f64>,
) {
    for i in 0..labels.len() {
        let lam2 = 2.0 * lambda_xi(xi[i]);
        precision[i] = lam2;
        values[i] = (labels[i] - 0.5) / lam2;
    }
}

/// Maps raw observations of a view to its pseudo-observation space: the
/// encoder mean for VAE views, the data itself otherwise.
pub fn encode_view(model: &FaVae, view: &str, observations: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let v = model.view_or_err(view)?;
    match &model.views[v].local {
        LocalModel::Vae(local) => {
            if observations.ncols() != local.net.input_dim() {
                return Err(FaError::dim(
                    format!("observations of view `{view}`"),
                    local.net.input_dim(),
                    observations.ncols(),
                ));
            }
            ensure_finite(observations, &format!("observations of view `{view}`"))?;
            Ok(local.net.encode_batch(observations)?.0)
        }
        _ => Ok(observations.clone()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    /// Decoded observations (thresholded labels for multilabel views).
    pub values: DMatrix<f64>,
    /// Label probabilities for multilabel views.
    pub probabilities: Option<DMatrix<f64>>,
    /// The pseudo-observations `F*` that were decoded.
    pub latent: DMatrix<f64>,
}

/// For each row of `z`, `n_samples` draws of `F* ~ N(z ⟨W⟩ᵀ, ⟨τ⟩⁻¹ I)`
/// decoded through the target view. Output rows are grouped by `z` row.
/// Multilabel views have no noise draw: their probabilities are `σ(z⟨W⟩ᵀ)`.
pub fn generate_from_z(
    model: &FaVae,
    z: &DMatrix<f64>,
    target: &str,
    n_samples: usize,
    seed: u64,
) -> Result<Generated> {
    let v = model.view_or_err(target)?;
    let view = &model.views[v];
    if z.ncols() != model.n_factors() {
        return Err(FaError::dim(
            "generation codes",
            model.n_factors(),
            z.ncols(),
        ));
    }
    if n_samples == 0 {
        return Err(FaError::invalid("n_samples must be positive"));
    }
    ensure_finite(z, "generation codes")?;
    let mean = z * view.w.mean.transpose();
    let rows: Vec<usize> = (0..z.nrows())
        .flat_map(|r| std::iter::repeat_n(r, n_samples))
        .collect();
    let mut f = mean.select_rows(&rows);
    if let Some(tau) = &view.noise {
        let sd = (1.0 / tau.mean()).max(VARIANCE_FLOOR).sqrt();
        let mut rng = stream(seed, &[v as u64]);
        for r in 0..f.nrows() {
            for c in 0..f.ncols() {
                f[(r, c)] += sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    decode_codes(model, target, f)
}

/// The noise-free output `z ⟨W⟩ᵀ` decoded through the target view.
pub fn generate_mean_from_z(model: &FaVae, z: &DMatrix<f64>, target: &str) -> Result<Generated> {
    let v = model.view_or_err(target)?;
    if z.ncols() != model.n_factors() {
        return Err(FaError::dim(
            "generation codes",
            model.n_factors(),
            z.ncols(),
        ));
    }
    ensure_finite(z, "generation codes")?;
    decode_codes(model, target, z * model.views[v].w.mean.transpose())
}

/// Maps pseudo-observation rows `f` of a view back to observation space.
pub fn decode_codes(model: &FaVae, view: &str, f: DMatrix<f64>) -> Result<Generated> {
    let v = model.view_or_err(view)?;
    if f.ncols() != model.views[v].dim() {
        return Err(FaError::dim(
            format!("codes of view `{view}`"),
            model.views[v].dim(),
            f.ncols(),
        ));
    }
    match &model.views[v].local {
        LocalModel::Vae(local) => Ok(Generated {
            values: local.net.decode_batch(&f)?,
            probabilities: None,
            latent: f,
        }),
        LocalModel::Multilabel(_) => {
            let p = f.map(|x| 1.0 / (1.0 + (-x).exp()));
            Ok(Generated {
                values: p.map(|q| if q >= 0.5 { 1.0 } else { 0.0 }),
                probabilities: Some(p),
                latent: f,
            })
        }
        LocalModel::RealLinear | LocalModel::FrozenLatent => Ok(Generated {
            values: f.clone(),
            probabilities: None,
            latent: f,
        }),
    }
}

/// Translates observations of `source` into `target` through the posterior
/// mean of `Z`.
pub fn cross_generate(
    model: &FaVae,
    source: &str,
    observations: &DMatrix<f64>,
    target: &str,
    seed: u64,
) -> Result<Generated> {
    if source == target {
        log::debug!("cross generation with identical source and target `{source}`");
    }
    let f = encode_view(model, source, observations)?;
    let evidence = BTreeMap::from([(source.to_string(), f)]);
    let post = posterior_z_given(model, &evidence)?;
    generate_from_z(model, &post.z.mean, target, 1, seed)
}

fn interpolate(
    a: &DVector<f64>,
    b: &DVector<f64>,
    lambdas: &[f64],
    what: &str,
) -> Result<Vec<DVector<f64>>> {
    if a.len() != b.len() {
        return Err(FaError::dim(
            format!("{what} interpolation endpoints"),
            a.len(),
            b.len(),
        ));
    }
    lambdas
        .iter()
        .map(|&l| {
            if !(0.0..=1.0).contains(&l) {
                return Err(FaError::invalid(format!(
                    "interpolation weight {l} is outside [0, 1]"
                )));
            }
            Ok(if l == 1.0 {
                a.clone()
            } else if l == 0.0 {
                b.clone()
            } else {
                a * l + b * (1.0 - l)
            })
        })
        .collect()
}

/// `λ f1 + (1 − λ) f2` for each `λ` in private (per-view) code space.
pub fn interpolate_private(
    f1: &DVector<f64>,
    f2: &DVector<f64>,
    lambdas: &[f64],
) -> Result<Vec<DVector<f64>>> {
    interpolate(f1, f2, lambdas, "private")
}

/// `λ g1 + (1 − λ) g2` for each `λ` in global code space.
pub fn interpolate_global(
    g1: &DVector<f64>,
    g2: &DVector<f64>,
    lambdas: &[f64],
) -> Result<Vec<DVector<f64>>> {
    interpolate(g1, g2, lambdas, "global")
}

/// `steps` evenly spaced weights from 1 down to 0.
pub fn lambda_grid(steps: usize) -> Result<Vec<f64>> {
    if steps < 2 {
        return Err(FaError::invalid("interpolation needs at least 2 steps"));
    }
    let last = (steps - 1) as f64;
    Ok((0..steps)
        .map(|i| match i {
            0 => 1.0,
            i if i == steps - 1 => 0.0,
            i => 1.0 - i as f64 / last,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelevanceMode {
    /// Mean absolute projection weight per factor.
    #[default]
    AbsMean,
    /// Plain column mean; opposite signs can cancel.
    SignedMean,
}

impl RelevanceMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RelevanceMode::AbsMean => "abs_mean",
            RelevanceMode::SignedMean => "signed_mean",
        }
    }
}

impl std::str::FromStr for RelevanceMode {
    type Err = FaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "abs_mean" => Ok(RelevanceMode::AbsMean),
            "signed_mean" => Ok(RelevanceMode::SignedMean),
            other => Err(FaError::invalid(format!(
                "unknown relevance mode `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceReport {
    pub mode: RelevanceMode,
    pub views: Vec<String>,
    /// `scores[m][k]`: relevance of factor `k` in view `m`.
    pub scores: Vec<Vec<f64>>,
    pub reference: String,
    /// Factors sorted by the reference view's relevance, descending.
    pub ordering: Vec<usize>,
}

impl RelevanceReport {
    pub fn n_factors(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }

    /// Factors whose relevance is at least `threshold` × the view's largest.
    pub fn active(&self, view: usize, threshold: f64) -> Vec<bool> {
        let r = &self.scores[view];
        let max = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        r.iter()
            .map(|v| max > 0.0 && v.abs() >= threshold * max)
            .collect()
    }

    /// Header lines followed by one row per factor in `ordering`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# relevance mode: {}", self.mode.as_str());
        if self.mode == RelevanceMode::AbsMean {
            let _ = writeln!(
                s,
                "# scores are mean absolute weights; signed means can cancel and hide factors"
            );
        }
        let _ = writeln!(s, "# ordered by view: {}", self.reference);
        let _ = write!(s, "factor");
        for v in &self.views {
            let _ = write!(s, "\t{v}");
        }
        s.push('\n');
        for &k in &self.ordering {
            let _ = write!(s, "{k}");
            for r in &self.scores {
                let _ = write!(s, "\t{:.6e}", r[k]);
            }
            s.push('\n');
        }
        s
    }

    /// Grayscale heat map, one row per view and one column per factor in
    /// `ordering`; white is the largest absolute score.
    pub fn heat_map(&self, cell: u32) -> image::GrayImage {
        let k = self.n_factors() as u32;
        let m = self.views.len() as u32;
        let max = self
            .scores
            .iter()
            .flatten()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        image::GrayImage::from_fn(k * cell, m * cell, |x, y| {
            let factor = self.ordering[(x / cell) as usize];
            let v = self.scores[(y / cell) as usize][factor].abs();
            let level = if max > 0.0 {
                (v / max * 255.0).round()
            } else {
                0.0
            };
            image::Luma([level as u8])
        })
    }

    pub fn write_heat_map(&self, path: &Path) -> Result<()> {
        self.heat_map(16)
            .save(path)
            .map_err(|e| FaError::io(path, std::io::Error::other(e.to_string())))
    }
}

/// Per-view factor relevances of the projection means, ordered by
/// `reference` (the first view when `None`).
pub fn latent_relevance(
    model: &FaVae,
    mode: RelevanceMode,
    reference: Option<&str>,
) -> Result<RelevanceReport> {
    if model.views.is_empty() {
        return Err(FaError::invalid("model has no views"));
    }
    let r = match reference {
        Some(name) => model.view_or_err(name)?,
        None => 0,
    };
    let scores: Vec<Vec<f64>> = model
        .views
        .iter()
        .map(|v| {
            let s = match mode {
                RelevanceMode::AbsMean => relevance_abs(&v.w),
                RelevanceMode::SignedMean => relevance_signed(&v.w),
            };
            s.iter().copied().collect()
        })
        .collect();
    let mut ordering: Vec<usize> = (0..model.n_factors()).collect();
    ordering.sort_by(|&a, &b| scores[r][b].total_cmp(&scores[r][a]).then(a.cmp(&b)));
    Ok(RelevanceReport {
        mode,
        views: model.views.iter().map(|v| v.name.clone()).collect(),
        scores,
        reference: model.views[r].name.clone(),
        ordering,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_endpoints() {
        assert_eq!(lambda_grid(2).unwrap(), vec![1.0, 0.0]);
        assert_eq!(lambda_grid(5).unwrap(), vec![1.0, 0.75, 0.5, 0.25, 0.0]);
        assert!(lambda_grid(1).is_err());
    }

    #[test]
    fn midpoint_and_endpoints() {
        let a = DVector::from_vec(vec![0.0, 2.0]);
        let b = DVector::from_vec(vec![2.0, 0.0]);
        let out = interpolate_private(&a, &b, &[1.0, 0.5, 0.0]).unwrap();
        assert_eq!(out[0], a);
        assert_eq!(out[1], DVector::from_vec(vec![1.0, 1.0]));
        assert_eq!(out[2], b);
        assert!(interpolate_global(&a, &b, &[1.5]).is_err());
        assert!(interpolate_global(&a, &b, &[-0.1]).is_err());
    }

    #[test]
    fn negative_zero_endpoint_is_bitwise() {
        let a = DVector::from_vec(vec![-0.0]);
        let b = DVector::from_vec(vec![0.0]);
        let out = interpolate_private(&a, &b, &[1.0]).unwrap();
        assert_eq!(out[0][0].to_bits(), (-0.0f64).to_bits());
    }
}
