use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use super::{
    ArdPosterior, GlobalLatent, Hyperparams, NoisePosterior, ProjectionPosterior, RowCovariance,
    ViewData, ViewNoise,
};
use crate::error::{FaError, Result};
use crate::linalg::spd_inverse;

fn check_view(data: &ViewData, w: &ProjectionPosterior, n: usize, k: usize) -> Result<()> {
    let ctx = |what: &str| format!("view `{}` {what}", data.name);
    if data.values.nrows() != n {
        return Err(FaError::dim(ctx("sample count"), n, data.values.nrows()));
    }
    if data.observed.len() != n {
        return Err(FaError::dim(
            ctx("observation mask length"),
            n,
            data.observed.len(),
        ));
    }
    if w.n_factors() != k {
        return Err(FaError::dim(
            ctx("projection factor count"),
            k,
            w.n_factors(),
        ));
    }
    if w.n_rows() != data.values.ncols() {
        return Err(FaError::dim(
            ctx("projection rows"),
            data.values.ncols(),
            w.n_rows(),
        ));
    }
    if let Some(s) = data.second_moment_diag {
        if s.shape() != data.values.shape() {
            return Err(FaError::dim(
                ctx("second-moment shape"),
                format!("{:?}", data.values.shape()),
                format!("{:?}", s.shape()),
            ));
        }
    }
    if let ViewNoise::Logistic { precision, .. } = data.noise {
        if precision.shape() != data.values.shape() {
            return Err(FaError::dim(
                ctx("precision shape"),
                format!("{:?}", data.values.shape()),
                format!("{:?}", precision.shape()),
            ));
        }
    }
    Ok(())
}

/// Coordinate update of `q(Z)`.
///
/// Per sample `n`:
/// `Σ_n⁻¹ = I + Σ_m ⟨τ_m⟩⟨W_mᵀW_m⟩` over the views observed at `n`, and
/// `μ_n = (Σ_m ⟨τ_m⟩ x_n^(m) ⟨W_m⟩) Σ_n`. Entry-wise precisions replace
/// `⟨τ⟩⟨WᵀW⟩` by `Σ_d Λ_nd ⟨W_d W_dᵀ⟩`. A sample without any observed view
/// falls back to the prior.
pub fn update_q_z(
    n: usize,
    k: usize,
    views: &[(&ViewData, &ProjectionPosterior)],
) -> Result<GlobalLatent> {
    for (data, w) in views {
        check_view(data, w, n, k)?;
    }

    let mut natural = DMatrix::<f64>::zeros(n, k);
    // τ⟨WᵀW⟩ for learned-noise views; ⟨W_d W_dᵀ⟩ rows for logistic ones.
    let mut shared_terms: Vec<Option<DMatrix<f64>>> = Vec::with_capacity(views.len());
    let mut row_terms: Vec<Option<Vec<DMatrix<f64>>>> = Vec::with_capacity(views.len());
    for (data, w) in views {
        match data.noise {
            ViewNoise::Learned(tau) => {
                let t = tau.mean();
                let xw = data.values * &w.mean;
                for row in (0..n).filter(|&r| data.observed[r]) {
                    for j in 0..k {
                        natural[(row, j)] += t * xw[(row, j)];
                    }
                }
                shared_terms.push(Some(w.second_moment() * t));
                row_terms.push(None);
            }
            ViewNoise::Logistic { precision, .. } => {
                let weighted = precision.component_mul(data.values);
                let xw = &weighted * &w.mean;
                for row in (0..n).filter(|&r| data.observed[r]) {
                    for j in 0..k {
                        natural[(row, j)] += xw[(row, j)];
                    }
                }
                shared_terms.push(None);
                row_terms.push(Some(
                    (0..w.n_rows()).map(|d| w.row_second_moment(d)).collect(),
                ));
            }
        }
    }

    let mut z = GlobalLatent {
        mean: DMatrix::zeros(n, k),
        covs: Vec::new(),
        cov_index: vec![0; n],
    };
    let mut by_pattern: HashMap<Vec<bool>, usize> = HashMap::new();
    for row in 0..n {
        let pattern: Vec<bool> = views.iter().map(|(d, _)| d.observed[row]).collect();
        let entry_wise = views
            .iter()
            .zip(&row_terms)
            .any(|((d, _), rt)| rt.is_some() && d.observed[row]);

        let cov_idx = match (entry_wise, by_pattern.get(&pattern)) {
            (false, Some(&idx)) => idx,
            _ => {
                let mut precision = DMatrix::<f64>::identity(k, k);
                for (v, (data, _)) in views.iter().enumerate() {
                    if !data.observed[row] {
                        continue;
                    }
                    if let Some(term) = &shared_terms[v] {
                        precision += term;
                    }
                    if let (Some(rows), ViewNoise::Logistic { precision: lam, .. }) =
                        (&row_terms[v], data.noise)
                    {
                        for (d, w2) in rows.iter().enumerate() {
                            let l = lam[(row, d)];
                            if l != 0.0 {
                                precision += w2 * l;
                            }
                        }
                    }
                }
                let observed_names: Vec<&str> = views
                    .iter()
                    .filter(|(d, _)| d.observed[row])
                    .map(|(d, _)| d.name)
                    .collect();
                let inv = spd_inverse(
                    &precision,
                    &format!("q(Z) precision for views {observed_names:?}"),
                )?;
                z.covs.push(inv);
                let idx = z.covs.len() - 1;
                if !entry_wise {
                    by_pattern.insert(pattern, idx);
                }
                idx
            }
        };
        z.cov_index[row] = cov_idx;
        let mu = natural.row(row) * &z.covs[cov_idx];
        z.mean.set_row(row, &mu);
    }
    if z.covs.is_empty() {
        z.covs.push(DMatrix::identity(k, k));
    }
    Ok(z)
}

/// Coordinate update of `q(W)` for one view.
///
/// `Σ_W⁻¹ = γ diag(⟨α⟩) + ⟨τ⟩⟨Z_OᵀZ_O⟩` and `μ_W = ⟨τ⟩ X_Oᵀ⟨Z_O⟩ Σ_W`, with
/// `O` the samples where the view is observed.
pub fn update_q_w(
    data: &ViewData,
    z: &GlobalLatent,
    ard: &ArdPosterior,
    gamma_mean: f64,
) -> Result<ProjectionPosterior> {
    let n = z.n_samples();
    let k = z.n_factors();
    let d_m = data.values.ncols();
    if ard.b.len() != k {
        return Err(FaError::dim(
            format!("view `{}` ARD factor count", data.name),
            k,
            ard.b.len(),
        ));
    }
    let probe = ProjectionPosterior::new(DMatrix::zeros(d_m, k), DMatrix::zeros(k, k));
    check_view(data, &probe, n, k)?;

    let prior_diag = ard.mean() * gamma_mean;
    match data.noise {
        ViewNoise::Learned(tau) => {
            let t = tau.mean();
            let zz = z.second_moment_masked(data.observed);
            let precision = DMatrix::from_diagonal(&prior_diag) + zz * t;
            let inv = spd_inverse(
                &precision,
                &format!("q(W) precision of view `{}`", data.name),
            )?;
            let mut xtz = DMatrix::<f64>::zeros(d_m, k);
            for row in (0..n).filter(|&r| data.observed[r]) {
                for d in 0..d_m {
                    let x = data.values[(row, d)];
                    for j in 0..k {
                        xtz[(d, j)] += x * z.mean[(row, j)];
                    }
                }
            }
            let mean = (xtz * t) * &inv;
            Ok(ProjectionPosterior {
                mean,
                cov: RowCovariance::Shared(inv),
            })
        }
        ViewNoise::Logistic { precision: lam, .. } => {
            let second: Vec<Option<DMatrix<f64>>> = (0..n)
                .map(|r| data.observed[r].then(|| z.sample_second_moment(r)))
                .collect();
            let mut mean = DMatrix::zeros(d_m, k);
            let mut covs = Vec::with_capacity(d_m);
            for d in 0..d_m {
                let mut precision = DMatrix::from_diagonal(&prior_diag);
                let mut natural = DVector::<f64>::zeros(k);
                for (row, s) in second.iter().enumerate() {
                    let (Some(s), l) = (s, lam[(row, d)]) else {
                        continue;
                    };
                    if l == 0.0 {
                        continue;
                    }
                    precision += s * l;
                    let lx = l * data.values[(row, d)];
                    for j in 0..k {
                        natural[j] += lx * z.mean[(row, j)];
                    }
                }
                let inv = spd_inverse(
                    &precision,
                    &format!("q(W) precision of view `{}` row {d}", data.name),
                )?;
                let mu = natural.transpose() * &inv;
                mean.set_row(d, &mu);
                covs.push(inv);
            }
            Ok(ProjectionPosterior {
                mean,
                cov: RowCovariance::PerRow(covs),
            })
        }
    }
}

/// Coordinate update of `q(α)`:
/// `a = D/2 + a_α`, `b_k = b_α + ½ Σ_d γ ⟨W_dk²⟩`.
pub fn update_q_alpha(w: &ProjectionPosterior, hyper: &Hyperparams) -> ArdPosterior {
    let norms = w.column_sq_norms();
    ArdPosterior {
        a: w.n_rows() as f64 / 2.0 + hyper.a_alpha,
        b: norms.map(|s| hyper.b_alpha + 0.5 * hyper.gamma_mean * s),
    }
}

/// The three pieces of `⟨‖X_O − Z_O Wᵀ‖²⟩`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualTerms {
    /// `Σ_n Σ_d ⟨X_nd²⟩`.
    pub sum_sq: f64,
    /// `Tr(⟨W⟩⟨Z_Oᵀ⟩X_O)`.
    pub cross: f64,
    /// `Tr(⟨WᵀW⟩⟨Z_OᵀZ_O⟩)`.
    pub quad: f64,
}

impl ResidualTerms {
    pub fn total(&self) -> f64 {
        self.sum_sq - 2.0 * self.cross + self.quad
    }
}

pub fn expected_sq_residual(
    data: &ViewData,
    z: &GlobalLatent,
    w: &ProjectionPosterior,
) -> Result<ResidualTerms> {
    check_view(data, w, z.n_samples(), z.n_factors())?;
    let n = z.n_samples();
    let k = z.n_factors();
    let d_m = data.values.ncols();
    let mut sum_sq = 0.0;
    let mut cross = 0.0;
    for row in (0..n).filter(|&r| data.observed[r]) {
        for d in 0..d_m {
            let x = data.values[(row, d)];
            sum_sq += x * x;
            if let Some(s) = data.second_moment_diag {
                sum_sq += s[(row, d)];
            }
            let mut pred = 0.0;
            for j in 0..k {
                pred += z.mean[(row, j)] * w.mean[(d, j)];
            }
            cross += x * pred;
        }
    }
    let zz = z.second_moment_masked(data.observed);
    let quad = crate::linalg::trace_of_product(&w.second_moment(), &zz);
    Ok(ResidualTerms {
        sum_sq,
        cross,
        quad,
    })
}

/// Coordinate update of `q(τ)` for a learned-noise view:
/// `a = D N_O / 2 + a_τ`, `b = b_τ + ½ ⟨‖X_O − Z_O Wᵀ‖²⟩`.
pub fn update_q_tau(
    data: &ViewData,
    z: &GlobalLatent,
    w: &ProjectionPosterior,
    hyper: &Hyperparams,
) -> Result<NoisePosterior> {
    let terms = expected_sq_residual(data, z, w)?;
    let a = (data.values.ncols() * data.n_observed()) as f64 / 2.0 + hyper.a_tau;
    let b = hyper.b_tau + 0.5 * terms.total();
    if !(b > 0.0) || !b.is_finite() {
        return Err(FaError::numerical(
            format!("q(tau) of view `{}`", data.name),
            format!(
                "rate {b} is not positive (sum_sq={}, cross={}, quad={})",
                terms.sum_sq, terms.cross, terms.quad
            ),
        ));
    }
    Ok(NoisePosterior { a, b })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    #[test]
    fn q_z_single_scalar_view() {
        let x = mat(1, 1, &[2.0]);
        let tau = NoisePosterior { a: 1.0, b: 1.0 };
        let w = ProjectionPosterior::new(mat(1, 1, &[1.0]), mat(1, 1, &[0.0]));
        let data = ViewData {
            name: "a",
            values: &x,
            second_moment_diag: None,
            observed: &[true],
            noise: ViewNoise::Learned(&tau),
        };
        let z = update_q_z(1, 1, &[(&data, &w)]).unwrap();
        assert!((z.cov(0)[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((z.mean[(0, 0)] - 1.0).abs() < 1e-15);
        assert!(z.shared_cov().is_some());
    }

    #[test]
    fn q_z_unobserved_sample_gets_prior() {
        let x = mat(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let tau = NoisePosterior { a: 2.0, b: 1.0 };
        let w = ProjectionPosterior::new(
            mat(2, 2, &[1.0, 0.5, -0.3, 2.0]),
            DMatrix::identity(2, 2) * 0.1,
        );
        let data = ViewData {
            name: "a",
            values: &x,
            second_moment_diag: None,
            observed: &[true, false],
            noise: ViewNoise::Learned(&tau),
        };
        let z = update_q_z(2, 2, &[(&data, &w)]).unwrap();
        assert_eq!(
            z.mean.row(1).iter().copied().collect::<Vec<_>>(),
            vec![0.0, 0.0]
        );
        assert_eq!(z.cov(1), &DMatrix::identity(2, 2));
        assert_eq!(z.covs.len(), 2);
    }

    #[test]
    fn q_z_rejects_shape_mismatch() {
        let x = mat(2, 1, &[1.0, 2.0]);
        let tau = NoisePosterior { a: 1.0, b: 1.0 };
        let w = ProjectionPosterior::new(mat(1, 2, &[1.0, 0.0]), DMatrix::identity(2, 2));
        let data = ViewData {
            name: "a",
            values: &x,
            second_moment_diag: None,
            observed: &[true, true],
            noise: ViewNoise::Learned(&tau),
        };
        assert!(matches!(
            update_q_z(3, 2, &[(&data, &w)]),
            Err(FaError::Dimension { .. })
        ));
        assert!(matches!(
            update_q_z(2, 3, &[(&data, &w)]),
            Err(FaError::Dimension { .. })
        ));
    }

    #[test]
    fn q_w_scalar_example() {
        let x = mat(2, 1, &[2.0, 2.0]);
        let tau = NoisePosterior { a: 1.0, b: 1.0 };
        let z = GlobalLatent::with_shared_cov(mat(2, 1, &[1.0, 1.0]), mat(1, 1, &[0.0]));
        let ard = ArdPosterior {
            a: 1.0,
            b: DVector::from_element(1, 1.0),
        };
        let data = ViewData {
            name: "a",
            values: &x,
            second_moment_diag: None,
            observed: &[true, true],
            noise: ViewNoise::Learned(&tau),
        };
        let w = update_q_w(&data, &z, &ard, 1.0).unwrap();
        assert!((w.row_cov(0)[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((w.mean[(0, 0)] - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn q_w_large_alpha_switches_factor_off() {
        let x = mat(3, 2, &[1.0, 0.5, -1.0, 2.0, 0.3, 0.1]);
        let tau = NoisePosterior { a: 1.0, b: 1.0 };
        let z = GlobalLatent::with_shared_cov(
            mat(3, 2, &[1.0, 0.2, -0.5, 1.0, 0.4, -0.7]),
            DMatrix::identity(2, 2) * 0.1,
        );
        let ard = ArdPosterior {
            a: 1.0,
            b: DVector::from_vec(vec![1.0, 1e-14]),
        };
        let data = ViewData {
            name: "a",
            values: &x,
            second_moment_diag: None,
            observed: &[true; 3],
            noise: ViewNoise::Learned(&tau),
        };
        let w = update_q_w(&data, &z, &ard, 1.0).unwrap();
        assert!(w.mean.column(1).amax() < 1e-12);
        assert!(w.mean.column(0).amax() > 1e-3);
    }

    #[test]
    fn q_alpha_examples() {
        let hyper = Hyperparams {
            k_c: 1,
            a_alpha: 2.0,
            b_alpha: 1.0,
            ..Default::default()
        };
        // Σ_d ⟨W_d²⟩ = 4 · (1 + 0.5) = 6
        let w = ProjectionPosterior::new(DMatrix::from_element(4, 1, 1.0), mat(1, 1, &[0.5]));
        let ard = update_q_alpha(&w, &hyper);
        assert_eq!(ard.a, 4.0);
        assert_eq!(ard.b[0], 4.0);
        assert_eq!(ard.mean()[0], 1.0);

        let zero = ProjectionPosterior::new(DMatrix::zeros(4, 1), mat(1, 1, &[0.0]));
        assert_eq!(update_q_alpha(&zero, &hyper).b[0], hyper.b_alpha);
    }

    #[test]
    fn q_tau_examples() {
        let hyper = Hyperparams {
            k_c: 1,
            a_tau: 1.0,
            b_tau: 1.0,
            ..Default::default()
        };
        let x = mat(2, 1, &[2.0, 2.0]);
        let tau = NoisePosterior { a: 1.0, b: 1.0 };
        let w = ProjectionPosterior::new(mat(1, 1, &[1.0]), mat(1, 1, &[0.0]));
        let z = GlobalLatent::with_shared_cov(mat(2, 1, &[1.0, 1.0]), mat(1, 1, &[0.0]));
        let data = ViewData {
            name: "a",
            values: &x,
            second_moment_diag: None,
            observed: &[true, true],
            noise: ViewNoise::Learned(&tau),
        };
        let q = update_q_tau(&data, &z, &w, &hyper).unwrap();
        assert_eq!((q.a, q.b, q.mean()), (2.0, 2.0, 1.0));

        // zero residual
        let x = mat(2, 1, &[1.0, 1.0]);
        let data = ViewData { values: &x, ..data };
        let q = update_q_tau(&data, &z, &w, &hyper).unwrap();
        assert_eq!(q.b, hyper.b_tau);
    }

    #[test]
    fn q_tau_rejects_negative_rate() {
        let hyper = Hyperparams {
            k_c: 1,
            b_tau: 1e-3,
            ..Default::default()
        };
        let x = mat(1, 1, &[1.0]);
        let tau = NoisePosterior { a: 1.0, b: 1.0 };
        // Inconsistent moments: ⟨W⟩ = 10 with negative covariance.
        let w = ProjectionPosterior::new(mat(1, 1, &[10.0]), mat(1, 1, &[-100.0]));
        let z = GlobalLatent::with_shared_cov(mat(1, 1, &[1.0]), mat(1, 1, &[0.0]));
        let data = ViewData {
            name: "bad",
            values: &x,
            second_moment_diag: None,
            observed: &[true],
            noise: ViewNoise::Learned(&tau),
        };
        let err = update_q_tau(&data, &z, &w, &hyper).unwrap_err();
        assert!(err.to_string().contains("cross="), "{err}");
    }
}
