//! Multi-view hierarchical variational autoencoders coupled through a
//! Bayesian factor-analysis latent space.
//!
//! Every view owns a local model (a closed-form real view, a Bernoulli
//! multilabel view, a small neural VAE, or a frozen set of pre-computed
//! codes). Each local model exposes a pseudo-observation matrix `X^(m)` that
//! is explained by a shared latent matrix `Z` through a view-specific
//! projection, `X^(m) = Z W^(m)ᵀ + noise`. The linear layer is fitted with
//! closed-form mean-field coordinate ascent with an ARD prior on the
//! projection columns; the neural views maximise their own ELBO against the
//! prior that the linear layer imposes on their latent codes.
//!
//! Module map:
//!
//! * [`fa`]: variational posteriors and coordinate-ascent updates of the
//!   linear-Gaussian layer, its ELBO and ARD pruning.
//! * [`views`]: per-view pseudo-observations, the logistic bound used by
//!   multilabel views, VAE encoder adapters.
//! * [`neural`]: feed-forward nets with hand-written reverse-mode
//!   gradients, the coupled VAE objective and Adam.
//! * [`model`] / [`trainer`]: the assembled model and the outer training
//!   loop.
//! * [`generation`]: conditioning, cross-view generation, interpolation and
//!   factor relevance.
//! * [`data_io`]: binary matrix files, dataset manifests, synthetic data
//!   and checkpoints.

pub mod data_io;
pub mod error;
pub mod fa;
pub mod generation;
pub(crate) mod linalg;
pub mod model;
pub mod neural;
pub mod rng;
pub mod trainer;
pub mod views;

pub use error::{ErrorClass, FaError, Result};
pub use model::{FaVae, LocalModel, View, ViewKind};
pub use nalgebra::{DMatrix, DVector};
