use nalgebra::DMatrix;

use super::{PseudoObsMode, PseudoObservation};
use crate::error::{FaError, Result};
use crate::neural::{standard_normal_matrix, VaeNet};

/// Pseudo-observations from encoder moments.
///
/// `Sample` draws `μ + σ ε` (with `ε` from [`standard_normal_matrix`] at
/// `seed`); `Mean` returns `μ` and keeps `σ²` as second moment. Rows not in
/// `observed` are zero.
pub fn pseudo_obs_from_moments(
    mu: &DMatrix<f64>,
    var: &DMatrix<f64>,
    observed: &[bool],
    mode: PseudoObsMode,
    seed: u64,
) -> Result<PseudoObservation> {
    if mu.shape() != var.shape() || observed.len() != mu.nrows() {
        return Err(FaError::dim(
            "encoder moments",
            format!("{:?}", mu.shape()),
            format!("{:?} / mask {}", var.shape(), observed.len()),
        ));
    }
    let keep = |m: DMatrix<f64>| {
        DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
            if observed[i] {
                m[(i, j)]
            } else {
                0.0
            }
        })
    };
    match mode {
        PseudoObsMode::Mean => Ok(PseudoObservation {
            values: keep(mu.clone()),
            second_moment_diag: Some(keep(var.clone())),
        }),
        PseudoObsMode::Sample => {
            let eps = standard_normal_matrix(mu.nrows(), mu.ncols(), seed);
            let draw = DMatrix::from_fn(mu.nrows(), mu.ncols(), |i, j| {
                mu[(i, j)] + var[(i, j)].sqrt() * eps[(i, j)]
            });
            Ok(PseudoObservation::new(keep(draw)))
        }
    }
}

/// Encodes a view's observations into pseudo-observations.
pub fn vae_view_pseudo_obs(
    net: &VaeNet,
    data: &DMatrix<f64>,
    observed: &[bool],
    mode: PseudoObsMode,
    seed: u64,
) -> Result<PseudoObservation> {
    let (mu, logvar) = net.encode_batch(data)?;
    if let Some(i) = mu.iter().chain(logvar.iter()).position(|v| !v.is_finite()) {
        let layer = net.encoder.layers.len() - 1;
        return Err(FaError::numerical(
            format!("encoder output layer {layer}"),
            format!("non-finite value at flat index {i}"),
        ));
    }
    let var = logvar.map(f64::exp);
    pseudo_obs_from_moments(&mu, &var, observed, mode, seed)
}
