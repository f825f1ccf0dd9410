//! Bernoulli multilabel views through the quadratic variational bound on
//! the logistic function.
//!
//! `log σ(s z) ≥ log σ(ξ) + (s z − ξ)/2 − λ(ξ)(z² − ξ²)` with `s = 2y − 1`
//! and `λ(ξ) = tanh(ξ/2) / (4ξ)`. The bound is quadratic in `z`, so the view
//! behaves like a Gaussian view with pseudo-observation `(y − ½) / 2λ(ξ)` and
//! entry-wise precision `2λ(ξ)`.

use nalgebra::DMatrix;

use super::PseudoObservation;
use crate::error::{FaError, Result};
use crate::fa::{GlobalLatent, ProjectionPosterior};

/// `λ(ξ) = tanh(ξ/2) / (4ξ)`, with the limit `1/8` at zero.
pub fn lambda_xi(xi: f64) -> f64 {
    let x = xi.abs();
    if x < 1e-4 {
        // tanh(x/2)/(4x) = 1/8 − x²/96 + O(x⁴)
        0.125 - x * x / 96.0
    } else {
        (0.5 * x).tanh() / (4.0 * x)
    }
}

/// Numerically stable `log σ(x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Lower bound on `log p(y | z) = log σ((2y − 1) z)`.
pub fn multilabel_bound(z: f64, label: f64, xi: f64) -> Result<f64> {
    if !(xi >= 0.0) {
        return Err(FaError::invalid(format!(
            "logistic bound needs xi >= 0, got {xi}"
        )));
    }
    let s = 2.0 * label - 1.0;
    Ok(log_sigmoid(xi) + 0.5 * (s * z - xi) - lambda_xi(xi) * (z * z - xi * xi))
}

/// Local state of a multilabel view.
#[derive(Debug, Clone, PartialEq)]
pub struct MultilabelState {
    pub labels: DMatrix<f64>,
    pub xi: DMatrix<f64>,
    /// 1 where the label is observed, 0 where it is missing.
    pub entry_mask: DMatrix<f64>,
    /// `2λ(ξ)` on observed entries, 0 elsewhere.
    pub precision: DMatrix<f64>,
}

impl MultilabelState {
    /// Starts from `ξ = 0`, where the bound is tight at a zero predictor.
    pub fn new(labels: DMatrix<f64>, entry_mask: Option<DMatrix<f64>>) -> Result<Self> {
        if let Some((i, v)) = labels
            .iter()
            .enumerate()
            .find(|(_, &v)| v != 0.0 && v != 1.0)
        {
            return Err(FaError::invalid(format!(
                "multilabel entry {i} is {v}, expected 0 or 1"
            )));
        }
        let entry_mask = entry_mask
            .unwrap_or_else(|| DMatrix::from_element(labels.nrows(), labels.ncols(), 1.0));
        if entry_mask.shape() != labels.shape() {
            return Err(FaError::dim(
                "multilabel entry mask",
                format!("{:?}", labels.shape()),
                format!("{:?}", entry_mask.shape()),
            ));
        }
        let xi = DMatrix::zeros(labels.nrows(), labels.ncols());
        let precision = entry_mask.map(|m| if m != 0.0 { 2.0 * lambda_xi(0.0) } else { 0.0 });
        Ok(MultilabelState {
            labels,
            xi,
            entry_mask,
            precision,
        })
    }

    /// Samples with at least one observed label.
    pub fn observed_samples(&self) -> Vec<bool> {
        (0..self.labels.nrows())
            .map(|n| self.entry_mask.row(n).iter().any(|&m| m != 0.0))
            .collect()
    }

    /// Gaussianised pseudo-observations `(y − ½) / 2λ(ξ)`; 0 on missing entries.
    pub fn pseudo_observation(&self) -> PseudoObservation {
        let values = DMatrix::from_fn(self.labels.nrows(), self.labels.ncols(), |n, d| {
            if self.entry_mask[(n, d)] != 0.0 {
                (self.labels[(n, d)] - 0.5) / (2.0 * lambda_xi(self.xi[(n, d)]))
            } else {
                0.0
            }
        });
        PseudoObservation::new(values)
    }
}

/// `ξ_nd ← sqrt(⟨(Z_n W_dᵀ)²⟩)` on observed entries, then refreshes the
/// precisions and returns the new pseudo-observations.
pub fn update_multilabel(
    state: &mut MultilabelState,
    z: &GlobalLatent,
    w: &ProjectionPosterior,
    observed: &[bool],
) -> Result<PseudoObservation> {
    let (n, d_m) = state.labels.shape();
    if z.n_samples() != n || observed.len() != n {
        return Err(FaError::dim(
            "multilabel update sample count",
            n,
            z.n_samples(),
        ));
    }
    if w.n_rows() != d_m || w.n_factors() != z.n_factors() {
        return Err(FaError::dim(
            "multilabel update projection shape",
            format!("({d_m}, {})", z.n_factors()),
            format!("({}, {})", w.n_rows(), w.n_factors()),
        ));
    }
    let w_rows: Vec<_> = (0..d_m)
        .map(|d| (w.mean.row(d).transpose(), w.row_cov(d).clone()))
        .collect();
    for row in (0..n).filter(|&r| observed[r]) {
        let s_n = z.sample_second_moment(row);
        for (d, (mu_d, cov_d)) in w_rows.iter().enumerate() {
            if state.entry_mask[(row, d)] == 0.0 {
                continue;
            }
            let second = (mu_d.transpose() * &s_n * mu_d)[(0, 0)]
                + crate::linalg::trace_of_product(&s_n, cov_d);
            let xi = second.max(0.0).sqrt();
            state.xi[(row, d)] = xi;
            state.precision[(row, d)] = 2.0 * lambda_xi(xi);
        }
    }
    Ok(state.pseudo_observation())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_is_continuous_at_the_series_switch() {
        let a = lambda_xi(0.99999e-4);
        let b = lambda_xi(1.00001e-4);
        assert!((a - b).abs() < 1e-14);
        assert_eq!(lambda_xi(0.0), 0.125);
    }

    #[test]
    fn bound_at_zero_is_minus_log_two() {
        let v = multilabel_bound(0.0, 1.0, 0.0).unwrap();
        assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bound_tight_at_abs_z() {
        for &z in &[-4.2, -0.3, 0.0, 0.7, 3.9] {
            for &y in &[0.0, 1.0] {
                let exact = log_sigmoid((2.0 * y - 1.0) * z);
                let bound = multilabel_bound(z, y, f64::abs(z)).unwrap();
                assert!((exact - bound).abs() < 1e-12, "z={z} y={y}");
            }
        }
    }

    #[test]
    fn negative_xi_rejected() {
        assert!(multilabel_bound(0.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn zero_predictor_gives_scaled_labels() {
        let labels = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let mut state = MultilabelState::new(labels.clone(), None).unwrap();
        let z =
            crate::fa::GlobalLatent::with_shared_cov(DMatrix::zeros(2, 1), DMatrix::zeros(1, 1));
        let w = ProjectionPosterior::new(DMatrix::zeros(2, 1), DMatrix::zeros(1, 1));
        let pseudo = update_multilabel(&mut state, &z, &w, &[true, true]).unwrap();
        assert!(state.xi.iter().all(|&x| x == 0.0));
        assert_eq!(pseudo.values, labels.map(|y| 4.0 * (y - 0.5)));
    }

    #[test]
    fn all_missing_leaves_state_unchanged() {
        let labels = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let mut state = MultilabelState::new(labels, Some(DMatrix::zeros(2, 1))).unwrap();
        let before = state.clone();
        let z = crate::fa::GlobalLatent::with_shared_cov(
            DMatrix::from_element(2, 1, 1.0),
            DMatrix::identity(1, 1),
        );
        let w = ProjectionPosterior::new(DMatrix::from_element(1, 1, 2.0), DMatrix::identity(1, 1));
        let observed = state.observed_samples();
        update_multilabel(&mut state, &z, &w, &observed).unwrap();
        assert_eq!(state, before);
    }

    #[test]
    fn non_binary_labels_rejected() {
        assert!(MultilabelState::new(DMatrix::from_element(1, 1, 2.0), None).is_err());
    }
}
