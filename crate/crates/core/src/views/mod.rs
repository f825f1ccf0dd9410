//! Per-view local models and the pseudo-observations they hand to the
//! linear layer.

mod multilabel;
mod vae_view;

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{FaError, Result};

pub use multilabel::{
    lambda_xi, log_sigmoid, multilabel_bound, update_multilabel, MultilabelState,
};
pub use vae_view::{pseudo_obs_from_moments, vae_view_pseudo_obs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    RealLinear,
    Multilabel,
    Vae,
    /// Pre-computed codes that never change (e.g. a frozen, pre-trained encoder).
    FrozenLatent,
}

impl ViewKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ViewKind::RealLinear => "real_linear",
            ViewKind::Multilabel => "multilabel",
            ViewKind::Vae => "vae",
            ViewKind::FrozenLatent => "frozen_latent",
        }
    }
}

impl fmt::Display for ViewKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ViewKind {
    type Err = FaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real_linear" => Ok(ViewKind::RealLinear),
            "multilabel" => Ok(ViewKind::Multilabel),
            "vae" => Ok(ViewKind::Vae),
            "frozen_latent" => Ok(ViewKind::FrozenLatent),
            other => Err(FaError::UnknownViewKind(other.to_string())),
        }
    }
}

/// How a VAE view turns its encoder output into pseudo-observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoObsMode {
    /// One reparameterised draw per sample.
    #[default]
    Sample,
    /// Encoder means, with the encoder variances kept as extra second moment.
    Mean,
}

/// The matrix `X^(m)` a view exposes to the linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoObservation {
    pub values: DMatrix<f64>,
    pub second_moment_diag: Option<DMatrix<f64>>,
}

impl PseudoObservation {
    pub fn new(values: DMatrix<f64>) -> Self {
        PseudoObservation {
            values,
            second_moment_diag: None,
        }
    }
}

pub(crate) fn ensure_finite(m: &DMatrix<f64>, context: &str) -> Result<()> {
    match m.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(FaError::invalid(format!(
            "{context}: non-finite value at row {}, column {}",
            i % m.nrows().max(1),
            i / m.nrows().max(1)
        ))),
    }
}

/// Real-valued views are their own pseudo-observations.
pub fn real_view_pseudo_obs(data: &DMatrix<f64>) -> Result<PseudoObservation> {
    ensure_finite(data, "real view data")?;
    Ok(PseudoObservation::new(data.clone()))
}
