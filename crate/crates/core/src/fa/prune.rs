use nalgebra::DVector;

use super::ProjectionPosterior;
use crate::error::{FaError, Result};

/// `r_k = (1/D) Σ_d |⟨W_dk⟩|`.
pub fn relevance_abs(w: &ProjectionPosterior) -> DVector<f64> {
    let d = w.n_rows().max(1) as f64;
    DVector::from_fn(w.n_factors(), |k, _| {
        w.mean.column(k).iter().map(|v| v.abs()).sum::<f64>() / d
    })
}

/// `r_k = (1/D) Σ_d ⟨W_dk⟩`, the plain column mean.
pub fn relevance_signed(w: &ProjectionPosterior) -> DVector<f64> {
    let d = w.n_rows().max(1) as f64;
    DVector::from_fn(w.n_factors(), |k, _| w.mean.column(k).sum() / d)
}

/// Factor `k` survives if, for some view, its relevance is at least
/// `threshold` times that view's largest relevance. Views whose projection
/// is identically zero vote for nothing.
pub fn factor_mask(relevances: &[DVector<f64>], threshold: f64) -> Result<Vec<bool>> {
    let k = relevances
        .first()
        .map(|r| r.len())
        .ok_or_else(|| FaError::invalid("pruning needs at least one view"))?;
    if relevances.iter().any(|r| r.len() != k) {
        return Err(FaError::invalid(
            "relevance vectors disagree on the factor count",
        ));
    }
    if threshold == 0.0 {
        return Ok(vec![true; k]);
    }
    let mut keep = vec![false; k];
    for r in relevances {
        let max = r.iter().fold(0.0f64, |m, v| m.max(*v));
        if max <= 0.0 {
            continue;
        }
        for (j, keep_j) in keep.iter_mut().enumerate() {
            if r[j] >= threshold * max {
                *keep_j = true;
            }
        }
    }
    if !keep.iter().any(|&k| k) {
        return Err(FaError::invalid("pruning would remove every latent factor"));
    }
    Ok(keep)
}
