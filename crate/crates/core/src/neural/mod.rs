//! Small fully connected networks with hand-written reverse-mode gradients,
//! the VAE objective coupled to the factor-analysis prior, and Adam.

mod adam;
mod mlp;
mod vae;

pub use adam::{optimize_step, AdamState};
pub use mlp::{Activation, Dense, DenseGrad, Mlp};
pub use vae::{
    gaussian_log_lik, kl_to_fa_prior, reconstruct, reconstruction_gll, reparam_sample,
    standard_normal_matrix, train_epoch, train_standalone, vae_elbo_batch, ElboBatch, EpochStats,
    FaPrior, VaeArchitecture, VaeGradients, VaeNet, LOGVAR_CLAMP,
};
