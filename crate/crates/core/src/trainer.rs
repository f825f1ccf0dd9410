//! Outer coordinate-ascent loop alternating the linear layer's updates with
//! local (VAE / logistic) refreshes.
//!
//! Per outer iteration: `q(Z)`; then for each view in order `q(W)`, the
//! view's VAE epochs (trainable VAE views), the pseudo-observation refresh,
//! `q(α)` and `q(τ)` (views with learned noise). Frozen views only get the
//! `q(W)` / `q(α)` / `q(τ)` updates.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data_io::MultiViewData;
use crate::error::{FaError, Result};
use crate::linalg::mvn_sample;
use crate::model::{FaVae, LocalModel, PriorMode, View};
use crate::neural::{kl_to_fa_prior, reconstruction_gll, train_epoch};
use crate::rng::{derive_seed, stream};
use crate::views::{vae_view_pseudo_obs, PseudoObsMode, ViewKind};

// Stream labels under the training seed.
const STREAM_PRIOR: u64 = 10;
const STREAM_EPOCH: u64 = 11;
const STREAM_PSEUDO: u64 = 12;

/// Consecutive small changes needed to declare convergence.
pub const CONVERGENCE_WINDOW: usize = 3;

/// Overrides for one view.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewTrainSettings {
    pub frozen: Option<bool>,
    pub beta: Option<f64>,
    pub learning_rate: Option<f64>,
    pub prior_mode: Option<PriorMode>,
    pub pseudo_obs_mode: Option<PseudoObsMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Cap on the total number of outer iterations of the model.
    pub max_outer_iters: usize,
    pub inner_epochs: usize,
    pub batch_size: usize,
    pub rel_tol: f64,
    pub seed: u64,
    /// Rotate the latent space once per iteration to speed up ARD.
    pub rotate: bool,
    pub per_view: BTreeMap<String, ViewTrainSettings>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_outer_iters: 100,
            inner_epochs: 10,
            batch_size: 64,
            rel_tol: 1e-6,
            seed: 0,
            rotate: true,
            per_view: BTreeMap::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(FaError::invalid("batch_size must be positive"));
        }
        if !(self.rel_tol >= 0.0) {
            return Err(FaError::invalid("rel_tol must be non-negative"));
        }
        for (name, s) in &self.per_view {
            if let Some(lr) = s.learning_rate {
                if !(lr > 0.0 && lr.is_finite()) {
                    return Err(FaError::invalid(format!(
                        "per_view.{name}.learning_rate must be positive"
                    )));
                }
            }
            if let Some(b) = s.beta {
                if !(b >= 1.0 && b.is_finite()) {
                    return Err(FaError::invalid(format!(
                        "per_view.{name}.beta must be >= 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    UpdateZ,
    UpdateW,
    VaeEpochs,
    RefreshPseudoObs,
    UpdateAlpha,
    UpdateTau,
    Rotate,
    IterationEnd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepEvent {
    pub iteration: usize,
    pub step: Step,
    pub view: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub name: String,
    pub kind: ViewKind,
    /// Noise precision mean (views with learned noise).
    pub tau: Option<f64>,
    /// Stochastic VAE objective averaged over the last inner epoch.
    pub vae_elbo: Option<f64>,
    /// Mean-decoded reconstruction log-likelihood per observed sample.
    pub gll: Option<f64>,
    /// Mean KL of the encoder posterior to the current prior mean.
    pub kl: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub fa_elbo: f64,
    pub rel_change: Option<f64>,
    pub views: Vec<ViewRecord>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<IterationRecord>,
    pub converged: bool,
}

impl TrainTrace {
    /// One JSON object per line.
    pub fn to_json_lines(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialise") + "\n")
            .collect()
    }

    pub fn elbo_series(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.fa_elbo).collect()
    }

    /// The same trace with wall-clock times zeroed, for equality checks.
    pub fn without_timing(&self) -> Self {
        let mut t = self.clone();
        for r in &mut t.records {
            r.wall_time_s = 0.0;
        }
        t
    }
}

/// Applies per-view overrides to the model's stored VAE settings.
pub fn apply_view_settings(model: &mut FaVae, config: &TrainConfig) -> Result<()> {
    for (name, s) in &config.per_view {
        let v = model.view_or_err(name)?;
        let LocalModel::Vae(local) = &mut model.views[v].local else {
            if s.frozen.is_some() || s.beta.is_some() || s.learning_rate.is_some() {
                return Err(FaError::invalid(format!(
                    "per_view settings for `{name}` need a vae view"
                )));
            }
            continue;
        };
        if let Some(f) = s.frozen {
            local.settings.frozen = f;
        }
        if let Some(b) = s.beta {
            local.net.beta = b;
        }
        if let Some(lr) = s.learning_rate {
            local.settings.learning_rate = lr;
            local.adam.learning_rate = lr;
        }
        if let Some(p) = s.prior_mode {
            local.settings.prior_mode = p;
        }
        if let Some(p) = s.pseudo_obs_mode {
            local.settings.pseudo_obs_mode = p;
        }
    }
    Ok(())
}

/// Prior mean rows `Z Wᵀ` and precision handed to a VAE, either from
/// posterior means or one joint posterior draw.
pub fn fa_prior_for_view(
    model: &FaVae,
    v: usize,
    mode: PriorMode,
    seed: u64,
) -> Result<(DMatrix<f64>, f64)> {
    let view = &model.views[v];
    let tau_post = view
        .noise
        .as_ref()
        .ok_or_else(|| FaError::invalid(format!("view `{}` has no noise posterior", view.name)))?;
    match mode {
        PriorMode::Mean => Ok((&model.z.mean * view.w.mean.transpose(), tau_post.mean())),
        PriorMode::Sample => {
            let mut rng = stream(seed, &[]);
            let k = model.n_factors();
            let draw_rows = |mean: &DMatrix<f64>,
                             cov: &dyn Fn(usize) -> DMatrix<f64>,
                             rng: &mut rand_chacha::ChaCha8Rng|
             -> Result<DMatrix<f64>> {
                let mut out = DMatrix::zeros(mean.nrows(), k);
                for r in 0..mean.nrows() {
                    let eps = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let s = mvn_sample(&mean.row(r).transpose(), &cov(r), &eps)?;
                    out.set_row(r, &s.transpose());
                }
                Ok(out)
            };
            let z = draw_rows(&model.z.mean, &|r| model.z.cov(r).clone(), &mut rng)?;
            let w = draw_rows(&view.w.mean, &|r| view.w.row_cov(r).clone(), &mut rng)?;
            let gamma = Gamma::new(tau_post.a, 1.0 / tau_post.b)
                .map_err(|e| FaError::numerical("noise precision draw", e.to_string()))?;
            let tau = gamma.sample(&mut rng).max(1e-12);
            Ok((z * w.transpose(), tau))
        }
    }
}

fn observed_rows(view: &View) -> Vec<usize> {
    view.observed
        .iter()
        .enumerate()
        .filter(|(_, &o)| o)
        .map(|(i, _)| i)
        .collect()
}

/// Deterministic diagnostics of a VAE view: mean-decoded GLL and KL of the
/// encoder to the current mean prior.
fn vae_diagnostics(model: &FaVae, v: usize, x: &DMatrix<f64>) -> Result<(f64, f64)> {
    let view = &model.views[v];
    let local = view.vae().expect("vae view");
    let rows = observed_rows(view);
    if rows.is_empty() {
        return Ok((0.0, 0.0));
    }
    let xo = x.select_rows(&rows);
    let gll = reconstruction_gll(&local.net, &xo)?;
    let (mu, logvar) = local.net.encode_batch(&xo)?;
    let tau = view.noise.as_ref().map(|t| t.mean()).unwrap_or(1.0);
    let mut kl = 0.0;
    for (i, &r) in rows.iter().enumerate() {
        let m: Vec<f64> = (model.z.mean.row(r) * view.w.mean.transpose())
            .iter()
            .copied()
            .collect();
        let mu_i: Vec<f64> = mu.row(i).iter().copied().collect();
        let lv_i: Vec<f64> = logvar.row(i).iter().copied().collect();
        kl += kl_to_fa_prior(&mu_i, &lv_i, &m, tau)?;
    }
    Ok((gll, kl / rows.len() as f64))
}

/// Checks that every VAE / frozen-latent view has matching observations.
fn check_data(model: &FaVae, data: &MultiViewData) -> Result<()> {
    if data.n_samples != model.n_samples() {
        return Err(FaError::dim(
            "dataset samples",
            model.n_samples(),
            data.n_samples,
        ));
    }
    for view in &model.views {
        if let Some(local) = view.vae() {
            let obs = data
                .view(&view.name)
                .ok_or_else(|| FaError::invalid(format!("dataset has no view `{}`", view.name)))?;
            if obs.values.shape() != (model.n_samples(), local.net.input_dim()) {
                return Err(FaError::dim(
                    format!("observations of view `{}`", view.name),
                    format!("({}, {})", model.n_samples(), local.net.input_dim()),
                    format!("{:?}", obs.values.shape()),
                ));
            }
        }
    }
    Ok(())
}

pub fn train(model: &mut FaVae, data: &MultiViewData, config: &TrainConfig) -> Result<TrainTrace> {
    train_observed(model, data, config, &mut |_, _| Ok(()))
}

/// Runs outer iterations until `max_outer_iters` total iterations or
/// convergence. `observer` is called after every step. On error the model is
/// rolled back to the state at the start of the failing iteration.
pub fn train_observed(
    model: &mut FaVae,
    data: &MultiViewData,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&StepEvent, &FaVae) -> Result<()>,
) -> Result<TrainTrace> {
    config.validate()?;
    if model.views.is_empty() {
        return Err(FaError::invalid("model has no views"));
    }
    apply_view_settings(model, config)?;
    check_data(model, data)?;
    let mut trace = TrainTrace {
        records: Vec::new(),
        converged: model.progress.converged,
    };
    while !model.progress.converged && model.progress.iteration < config.max_outer_iters {
        let snapshot = model.clone();
        let started = Instant::now();
        let it = model.progress.iteration;
        match outer_iteration(model, data, config, observer, it) {
            Ok(views) => {
                let elbo = model.fa_elbo().map_err(|e| wrap(it, None, e))?;
                let p = &mut model.progress;
                let rel_change = p
                    .last_elbo
                    .map(|prev| (elbo - prev).abs() / elbo.abs().max(f64::MIN_POSITIVE));
                match rel_change {
                    Some(r) if r < config.rel_tol => p.stall += 1,
                    _ => p.stall = 0,
                }
                p.last_elbo = Some(elbo);
                p.iteration += 1;
                p.converged = p.stall >= CONVERGENCE_WINDOW;
                log::debug!("iteration {it}: fa_elbo {elbo:.6}");
                trace.records.push(IterationRecord {
                    iteration: it,
                    fa_elbo: elbo,
                    rel_change,
                    views,
                    wall_time_s: started.elapsed().as_secs_f64(),
                });
                observer(
                    &StepEvent {
                        iteration: it,
                        step: Step::IterationEnd,
                        view: None,
                    },
                    model,
                )?;
            }
            Err(e) => {
                *model = snapshot;
                return Err(e);
            }
        }
    }
    trace.converged = model.progress.converged;
    Ok(trace)
}

fn wrap(iteration: usize, view: Option<&str>, e: FaError) -> FaError {
    match e {
        FaError::Training { .. } => e,
        other => FaError::Training {
            iteration,
            view: view.map(str::to_string),
            source: Box::new(other),
        },
    }
}

fn outer_iteration(
    model: &mut FaVae,
    data: &MultiViewData,
    config: &TrainConfig,
    observer: &mut dyn FnMut(&StepEvent, &FaVae) -> Result<()>,
    it: usize,
) -> Result<Vec<ViewRecord>> {
    let event = |step, view: Option<&str>| StepEvent {
        iteration: it,
        step,
        view: view.map(str::to_string),
    };
    model.update_z().map_err(|e| wrap(it, None, e))?;
    observer(&event(Step::UpdateZ, None), model)?;
    let mut records = Vec::with_capacity(model.views.len());
    for v in 0..model.views.len() {
        let name = model.views[v].name.clone();
        let err = |e| wrap(it, Some(&name), e);
        model.update_w(v).map_err(err)?;
        observer(&event(Step::UpdateW, Some(&name)), model)?;

        let kind = model.views[v].kind();
        let mut vae_elbo = None;
        let frozen = match &model.views[v].local {
            LocalModel::Vae(l) => l.settings.frozen,
            LocalModel::FrozenLatent => true,
            _ => false,
        };
        if kind == ViewKind::Vae && !frozen {
            let x = &data.view(&name).expect("checked").values;
            let rows = observed_rows(&model.views[v]);
            let v64 = v as u64;
            let it64 = it as u64;
            let mode = model.views[v].vae().expect("vae").settings.prior_mode;
            let (prior_mean, tau) = fa_prior_for_view(
                model,
                v,
                mode,
                derive_seed(config.seed, &[STREAM_PRIOR, it64, v64]),
            )
            .map_err(err)?;
            let LocalModel::Vae(local) = &mut model.views[v].local else {
                unreachable!()
            };
            let mut last = None;
            for e in 0..config.inner_epochs {
                let seed = derive_seed(config.seed, &[STREAM_EPOCH, it64, v64, e as u64]);
                let stats = train_epoch(
                    &mut local.net,
                    &mut local.adam,
                    x,
                    &rows,
                    &prior_mean,
                    tau,
                    config.batch_size,
                    seed,
                )
                .map_err(err)?;
                last = Some(stats);
            }
            vae_elbo = last.map(|s| s.elbo);
            observer(&event(Step::VaeEpochs, Some(&name)), model)?;
            let local = model.views[v].vae().expect("vae");
            let pseudo = vae_view_pseudo_obs(
                &local.net,
                x,
                &model.views[v].observed,
                local.settings.pseudo_obs_mode,
                derive_seed(config.seed, &[STREAM_PSEUDO, it64, v64]),
            )
            .map_err(err)?;
            model.views[v].pseudo = pseudo;
            observer(&event(Step::RefreshPseudoObs, Some(&name)), model)?;
        } else if model.update_multilabel(v).map_err(err)? {
            observer(&event(Step::RefreshPseudoObs, Some(&name)), model)?;
        }

        model.update_alpha(v);
        observer(&event(Step::UpdateAlpha, Some(&name)), model)?;
        if model.update_tau(v).map_err(err)? {
            observer(&event(Step::UpdateTau, Some(&name)), model)?;
        }

        let (gll, kl) = if kind == ViewKind::Vae {
            let x = &data.view(&name).expect("checked").values;
            let (g, k) = vae_diagnostics(model, v, x).map_err(err)?;
            (Some(g), Some(k))
        } else {
            (None, None)
        };
        records.push(ViewRecord {
            name,
            kind,
            tau: model.views[v].noise.as_ref().map(|t| t.mean()),
            vae_elbo,
            gll,
            kl,
        });
    }
    if config.rotate && model.rotate().map_err(|e| wrap(it, None, e))? {
        observer(&event(Step::Rotate, None), model)?;
    }
    Ok(records)
}
