//! The assembled multi-view model.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{FaError, Result};
use crate::fa::{
    fa_elbo, factor_mask, relevance_abs, rotate_latent, rotate_projection, update_q_alpha,
    update_q_tau, update_q_w, update_q_z, ArdPosterior, ElboView, GlobalLatent, Hyperparams,
    NoisePosterior, ProjectionPosterior, RotationProblem, ViewData, ViewNoise,
};
use crate::neural::{AdamState, VaeNet};
use crate::rng::{derive_seed, stream};
use crate::views::{
    real_view_pseudo_obs, update_multilabel, vae_view_pseudo_obs, MultilabelState, PseudoObsMode,
    PseudoObservation,
};

pub use crate::views::ViewKind;

// Stream labels for initialisation draws.
const STREAM_Z_INIT: u64 = 1;
const STREAM_W_INIT: u64 = 2;
const STREAM_PSEUDO_INIT: u64 = 3;

/// How the factor-analysis prior handed to a VAE is realised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// Draw `Z`, `W` and `τ` from their posteriors once per outer iteration.
    #[default]
    Sample,
    /// Use posterior means.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeSettings {
    /// Frozen views keep their networks and pseudo-observations fixed.
    pub frozen: bool,
    pub learning_rate: f64,
    pub prior_mode: PriorMode,
    pub pseudo_obs_mode: PseudoObsMode,
}

impl Default for VaeSettings {
    fn default() -> Self {
        VaeSettings {
            frozen: false,
            learning_rate: 1e-3,
            prior_mode: PriorMode::Sample,
            pseudo_obs_mode: PseudoObsMode::Sample,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeLocal {
    pub net: VaeNet,
    pub adam: AdamState,
    pub settings: VaeSettings,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LocalModel {
    RealLinear,
    Multilabel(MultilabelState),
    Vae(Box<VaeLocal>),
    FrozenLatent,
}

/// Recipe for a new view.
#[derive(Debug, Clone)]
pub enum ViewSpec {
    RealLinear,
    Multilabel,
    Vae { net: VaeNet, settings: VaeSettings },
    FrozenLatent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub name: String,
    /// Samples where this view is observed.
    pub observed: Vec<bool>,
    pub pseudo: PseudoObservation,
    pub w: ProjectionPosterior,
    pub ard: ArdPosterior,
    /// Learned noise; absent for multilabel views, whose precisions come
    /// from the logistic bound.
    pub noise: Option<NoisePosterior>,
    pub local: LocalModel,
}

impl View {
    pub fn kind(&self) -> ViewKind {
        match &self.local {
            LocalModel::RealLinear => ViewKind::RealLinear,
            LocalModel::Multilabel(_) => ViewKind::Multilabel,
            LocalModel::Vae(_) => ViewKind::Vae,
            LocalModel::FrozenLatent => ViewKind::FrozenLatent,
        }
    }

    /// Width of the pseudo-observations (the VAE latent width for VAE views).
    pub fn dim(&self) -> usize {
        self.pseudo.values.ncols()
    }

    pub fn vae(&self) -> Option<&VaeLocal> {
        match &self.local {
            LocalModel::Vae(v) => Some(v),
            _ => None,
        }
    }

    pub fn fa_data(&self) -> ViewData<'_> {
        let noise = match (&self.local, &self.noise) {
            (LocalModel::Multilabel(s), _) => ViewNoise::Logistic {
                labels: &s.labels,
                xi: &s.xi,
                entry_mask: &s.entry_mask,
                precision: &s.precision,
            },
            (_, Some(tau)) => ViewNoise::Learned(tau),
            (_, None) => unreachable!(
                "non-multilabel view `{}` without a noise posterior",
                self.name
            ),
        };
        ViewData {
            name: &self.name,
            values: &self.pseudo.values,
            second_moment_diag: self.pseudo.second_moment_diag.as_ref(),
            observed: &self.observed,
            noise,
        }
    }
}

/// Bookkeeping for the outer loop, persisted so that resumed runs continue
/// exactly where they stopped.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub iteration: usize,
    pub last_elbo: Option<f64>,
    pub stall: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaVae {
    pub hyper: Hyperparams,
    pub z: GlobalLatent,
    pub views: Vec<View>,
    /// Root seed for initialisation draws.
    pub seed: u64,
    pub progress: Progress,
}

/// Turns a mask matrix (`N × 1` per sample or `N × D` per entry) into a
/// per-sample flag vector, plus the entry mask when it is genuinely partial.
fn resolve_mask(
    name: &str,
    kind: ViewKind,
    n: usize,
    d: usize,
    mask: Option<&DMatrix<f64>>,
) -> Result<(Vec<bool>, Option<DMatrix<f64>>)> {
    let Some(mask) = mask else {
        return Ok((vec![true; n], None));
    };
    if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(FaError::invalid(format!(
            "mask of view `{name}` must be binary"
        )));
    }
    if mask.nrows() != n || (mask.ncols() != 1 && mask.ncols() != d) {
        return Err(FaError::dim(
            format!("mask of view `{name}`"),
            format!("({n}, 1) or ({n}, {d})"),
            format!("{:?}", mask.shape()),
        ));
    }
    if mask.ncols() == 1 && d != 1 {
        let observed: Vec<bool> = mask.iter().map(|&v| v != 0.0).collect();
        let entries =
            (kind == ViewKind::Multilabel).then(|| DMatrix::from_fn(n, d, |i, _| mask[(i, 0)]));
        return Ok((observed, entries));
    }
    let observed: Vec<bool> = (0..n)
        .map(|i| mask.row(i).iter().any(|&v| v != 0.0))
        .collect();
    if kind != ViewKind::Multilabel {
        if let Some(i) = (0..n).find(|&i| {
            let r = mask.row(i);
            r.iter().any(|&v| v != r[0])
        }) {
            return Err(FaError::invalid(format!(
                "view `{name}`: partially observed rows (row {i}) are only supported for multilabel views"
            )));
        }
    }
    Ok((observed, Some(mask.clone())))
}

impl FaVae {
    /// Empty model: `q(Z)` initialised with small random means and identity
    /// covariance.
    pub fn new(hyper: Hyperparams, n_samples: usize, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let z = GlobalLatent::init(n_samples, hyper.k_c, &mut stream(seed, &[STREAM_Z_INIT]));
        Ok(FaVae {
            hyper,
            z,
            views: Vec::new(),
            seed,
            progress: Progress::default(),
        })
    }

    pub fn n_samples(&self) -> usize {
        self.z.n_samples()
    }

    pub fn n_factors(&self) -> usize {
        self.z.n_factors()
    }

    pub fn view_index(&self, name: &str) -> Option<usize> {
        self.views.iter().position(|v| v.name == name)
    }

    pub fn view(&self, name: &str) -> Option<&View> {
        self.views.iter().find(|v| v.name == name)
    }

    pub(crate) fn view_or_err(&self, name: &str) -> Result<usize> {
        self.view_index(name)
            .ok_or_else(|| FaError::invalid(format!("unknown view `{name}`")))
    }

    /// Adds a view initialised from the priors. Existing posteriors are not
    /// touched; `data` holds observations (labels for multilabel views,
    /// codes for frozen-latent views). `mask` is `N × 1` or `N × D`.
    pub fn attach_view(
        &mut self,
        name: &str,
        spec: ViewSpec,
        data: &DMatrix<f64>,
        mask: Option<&DMatrix<f64>>,
    ) -> Result<()> {
        if self.view_index(name).is_some() {
            return Err(FaError::invalid(format!(
                "a view named `{name}` already exists"
            )));
        }
        let n = self.n_samples();
        if data.nrows() != n {
            return Err(FaError::dim(
                format!("samples of view `{name}`"),
                n,
                data.nrows(),
            ));
        }
        if data.ncols() == 0 {
            return Err(FaError::invalid(format!("view `{name}` has no columns")));
        }
        let index = self.views.len() as u64;
        let kind = match &spec {
            ViewSpec::RealLinear => ViewKind::RealLinear,
            ViewSpec::Multilabel => ViewKind::Multilabel,
            ViewSpec::Vae { .. } => ViewKind::Vae,
            ViewSpec::FrozenLatent => ViewKind::FrozenLatent,
        };
        let (observed, entry_mask) = resolve_mask(name, kind, n, data.ncols(), mask)?;
        let k = self.n_factors();
        let (pseudo, local) = match spec {
            ViewSpec::RealLinear => (real_view_pseudo_obs(data)?, LocalModel::RealLinear),
            ViewSpec::FrozenLatent => (real_view_pseudo_obs(data)?, LocalModel::FrozenLatent),
            ViewSpec::Multilabel => {
                let state = MultilabelState::new(
                    data.clone(),
                    entry_mask.or_else(|| {
                        Some(DMatrix::from_fn(n, data.ncols(), |i, _| {
                            if observed[i] {
                                1.0
                            } else {
                                0.0
                            }
                        }))
                    }),
                )?;
                (state.pseudo_observation(), LocalModel::Multilabel(state))
            }
            ViewSpec::Vae { net, settings } => {
                net.validate()?;
                if net.input_dim() != data.ncols() {
                    return Err(FaError::dim(
                        format!("encoder input of view `{name}`"),
                        net.input_dim(),
                        data.ncols(),
                    ));
                }
                crate::views::ensure_finite(data, &format!("view `{name}`"))?;
                let pseudo = vae_view_pseudo_obs(
                    &net,
                    data,
                    &observed,
                    settings.pseudo_obs_mode,
                    derive_seed(self.seed, &[STREAM_PSEUDO_INIT, index]),
                )?;
                let adam = AdamState::new(net.n_params(), settings.learning_rate);
                (
                    pseudo,
                    LocalModel::Vae(Box::new(VaeLocal {
                        net,
                        adam,
                        settings,
                    })),
                )
            }
        };
        let d = pseudo.values.ncols();
        let w = ProjectionPosterior::init(d, k, &mut stream(self.seed, &[STREAM_W_INIT, index]));
        let noise = (kind != ViewKind::Multilabel).then(|| NoisePosterior::prior(&self.hyper));
        self.views.push(View {
            name: name.to_string(),
            observed,
            pseudo,
            w,
            ard: ArdPosterior::prior(k, &self.hyper),
            noise,
            local,
        });
        Ok(())
    }

    pub fn fa_elbo(&self) -> Result<f64> {
        let data: Vec<ViewData> = self.views.iter().map(View::fa_data).collect();
        let views: Vec<ElboView> = self
            .views
            .iter()
            .zip(&data)
            .map(|(v, d)| ElboView {
                data: d,
                w: &v.w,
                ard: &v.ard,
            })
            .collect();
        fa_elbo(&self.hyper, &self.z, &views)
    }

    pub fn update_z(&mut self) -> Result<()> {
        let data: Vec<ViewData> = self.views.iter().map(View::fa_data).collect();
        let pairs: Vec<(&ViewData, &ProjectionPosterior)> =
            data.iter().zip(self.views.iter().map(|v| &v.w)).collect();
        let z = update_q_z(self.n_samples(), self.n_factors(), &pairs)?;
        self.z = z;
        Ok(())
    }

    pub fn update_w(&mut self, v: usize) -> Result<()> {
        let w = update_q_w(
            &self.views[v].fa_data(),
            &self.z,
            &self.views[v].ard,
            self.hyper.gamma_mean,
        )?;
        self.views[v].w = w;
        Ok(())
    }

    pub fn update_alpha(&mut self, v: usize) {
        self.views[v].ard = update_q_alpha(&self.views[v].w, &self.hyper);
    }

    /// Rotates the latent space by the ascent direction of the rotation
    /// objective and refreshes every `q(α)`. The move is kept only if the
    /// bound does not drop; returns whether it was kept.
    pub fn rotate(&mut self) -> Result<bool> {
        let ws: Vec<&ProjectionPosterior> = self.views.iter().map(|v| &v.w).collect();
        let problem = RotationProblem::new(&self.z, &ws, &self.hyper);
        let Some((a, _)) = problem.solve() else {
            return Ok(false);
        };
        let Some(b) = a.clone().try_inverse() else {
            return Ok(false);
        };
        let before = self.fa_elbo()?;
        let mut rotated = self.clone();
        rotated.z = rotate_latent(&self.z, &a);
        for v in 0..rotated.views.len() {
            rotated.views[v].w = rotate_projection(&self.views[v].w, &b);
            rotated.update_alpha(v);
        }
        if rotated.fa_elbo()? >= before {
            *self = rotated;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    /// No-op for views without a learned noise precision.
    pub fn update_tau(&mut self, v: usize) -> Result<bool> {
        if self.views[v].noise.is_none() {
            return Ok(false);
        }
        let tau = update_q_tau(
            &self.views[v].fa_data(),
            &self.z,
            &self.views[v].w,
            &self.hyper,
        )?;
        self.views[v].noise = Some(tau);
        Ok(true)
    }

    /// `ξ` refresh of a multilabel view; no-op for other kinds.
    pub fn update_multilabel(&mut self, v: usize) -> Result<bool> {
        let view = &mut self.views[v];
        let LocalModel::Multilabel(state) = &mut view.local else {
            return Ok(false);
        };
        view.pseudo = update_multilabel(state, &self.z, &view.w, &view.observed)?;
        Ok(true)
    }

    /// Per-view abs-mean relevance of every factor.
    pub fn relevances(&self) -> Vec<nalgebra::DVector<f64>> {
        self.views.iter().map(|v| relevance_abs(&v.w)).collect()
    }

    /// Drops factors whose relevance is below `threshold` × the largest
    /// relevance in every view. Returns the keep-mask.
    pub fn prune_factors(&mut self, threshold: f64) -> Result<Vec<bool>> {
        if self.views.is_empty() {
            return Err(FaError::invalid("pruning needs at least one view"));
        }
        let keep = factor_mask(&self.relevances(), threshold)?;
        if keep.iter().all(|&k| k) {
            return Ok(keep);
        }
        self.z = self.z.select_factors(&keep);
        for view in &mut self.views {
            view.w = view.w.select_factors(&keep);
            view.ard = view.ard.select_factors(&keep);
        }
        self.hyper.k_c = self.z.n_factors();
        Ok(keep)
    }
}
