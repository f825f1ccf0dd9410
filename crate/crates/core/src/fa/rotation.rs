//! Latent-space rotation that speeds up ARD.
//!
//! For any invertible `A`, replacing `q(Z)` by the law of `Z A` and every
//! `q(W_m)` by the law of `W_m A⁻ᵀ` leaves `⟨Z W_mᵀ⟩` and every expected
//! squared residual unchanged. Only the prior on `Z`, the entropies and,
//! after re-optimising `q(α)`, the ARD terms depend on `A`:
//!
//! `f(A) = −½ tr(Aᵀ⟨ZᵀZ⟩A) + (N − Σ_m D_m) log|A|
//!         − Σ_m a_m Σ_k log(b_α + ½γ (A⁻¹⟨W_mᵀW_m⟩A⁻ᵀ)_kk)`
//!
//! with `a_m = D_m/2 + a_α`. Plain coordinate ascent moves slowly along
//! these directions, so one ascent on `f` per outer iteration lets unused
//! columns die much sooner.

use nalgebra::DMatrix;

use super::{GlobalLatent, Hyperparams, ProjectionPosterior, RowCovariance};

const MAX_STEPS: usize = 50;
const MIN_STEP: f64 = 1e-12;
const GRAD_TOL: f64 = 1e-8;

/// Sufficient statistics of the rotation objective.
#[derive(Debug, Clone)]
pub struct RotationProblem {
    pub zz: DMatrix<f64>,
    pub n_samples: usize,
    /// `(⟨W_mᵀW_m⟩, D_m)` per view.
    pub views: Vec<(DMatrix<f64>, usize)>,
    pub b_alpha: f64,
    pub a_alpha: f64,
    pub gamma: f64,
}

impl RotationProblem {
    pub fn new(z: &GlobalLatent, ws: &[&ProjectionPosterior], hyper: &Hyperparams) -> Self {
        RotationProblem {
            zz: z.second_moment(),
            n_samples: z.n_samples(),
            views: ws.iter().map(|w| (w.second_moment(), w.n_rows())).collect(),
            b_alpha: hyper.b_alpha,
            a_alpha: hyper.a_alpha,
            gamma: hyper.gamma_mean,
        }
    }

    fn total_rows(&self) -> f64 {
        self.views.iter().map(|(_, d)| *d as f64).sum()
    }

    /// `f(A)`, or `None` where `A` is singular or flips orientation.
    pub fn objective(&self, a: &DMatrix<f64>) -> Option<f64> {
        let lu = a.clone().lu();
        let det = lu.determinant();
        if !(det > 0.0) || !det.is_finite() {
            return None;
        }
        let b = lu.try_inverse()?;
        let mut f = -0.5 * (a.transpose() * &self.zz * a).trace()
            + (self.n_samples as f64 - self.total_rows()) * det.ln();
        for (ww, d) in &self.views {
            let am = *d as f64 / 2.0 + self.a_alpha;
            let m = &b * ww * b.transpose();
            for k in 0..m.nrows() {
                f -= am * (self.b_alpha + 0.5 * self.gamma * m[(k, k)]).ln();
            }
        }
        f.is_finite().then_some(f)
    }

    pub fn gradient(&self, a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        let b = a.clone().try_inverse()?;
        let bt = b.transpose();
        let mut g = -(&self.zz * a) + &bt * (self.n_samples as f64 - self.total_rows());
        let mut gb = DMatrix::zeros(a.nrows(), a.ncols());
        for (ww, d) in &self.views {
            let am = *d as f64 / 2.0 + self.a_alpha;
            let bw = &b * ww;
            for k in 0..a.nrows() {
                let mkk: f64 = (0..a.ncols()).map(|j| bw[(k, j)] * b[(k, j)]).sum();
                let u = am * 0.5 * self.gamma / (self.b_alpha + 0.5 * self.gamma * mkk);
                for j in 0..a.ncols() {
                    gb[(k, j)] -= 2.0 * u * bw[(k, j)];
                }
            }
        }
        g -= &bt * gb * &bt;
        Some(g)
    }

    /// Gradient ascent with backtracking from the identity. Returns the
    /// rotation and the gain `f(A) − f(I)`, or `None` when no ascent step
    /// was found.
    pub fn solve(&self) -> Option<(DMatrix<f64>, f64)> {
        let k = self.zz.nrows();
        let mut a = DMatrix::identity(k, k);
        let f0 = self.objective(&a)?;
        let mut f = f0;
        let mut step = 1.0 / (self.n_samples.max(1) as f64);
        for _ in 0..MAX_STEPS {
            let g = self.gradient(&a)?;
            let gnorm2 = g.norm_squared();
            if gnorm2.sqrt() < GRAD_TOL * (1.0 + f.abs()) {
                break;
            }
            let mut accepted = false;
            while step > MIN_STEP {
                let cand = &a + &g * step;
                match self.objective(&cand) {
                    Some(fc) if fc >= f + 1e-4 * step * gnorm2 => {
                        a = cand;
                        f = fc;
                        step *= 2.0;
                        accepted = true;
                        break;
                    }
                    _ => step *= 0.5,
                }
            }
            if !accepted {
                break;
            }
        }
        (f > f0).then_some((a, f - f0))
    }
}

/// `q(Z A)`.
pub fn rotate_latent(z: &GlobalLatent, a: &DMatrix<f64>) -> GlobalLatent {
    GlobalLatent {
        mean: &z.mean * a,
        covs: z.covs.iter().map(|c| a.transpose() * c * a).collect(),
        cov_index: z.cov_index.clone(),
    }
}

/// `q(W A⁻ᵀ)` given `b = A⁻¹`.
pub fn rotate_projection(w: &ProjectionPosterior, b: &DMatrix<f64>) -> ProjectionPosterior {
    let bt = b.transpose();
    let map = |c: &DMatrix<f64>| b * c * &bt;
    ProjectionPosterior {
        mean: &w.mean * &bt,
        cov: match &w.cov {
            RowCovariance::Shared(c) => RowCovariance::Shared(map(c)),
            RowCovariance::PerRow(cs) => RowCovariance::PerRow(cs.iter().map(map).collect()),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem() -> RotationProblem {
        let zz = DMatrix::from_row_slice(2, 2, &[30.0, 4.0, 4.0, 12.0]);
        let ww = DMatrix::from_row_slice(2, 2, &[5.0, 1.5, 1.5, 2.0]);
        RotationProblem {
            zz,
            n_samples: 20,
            views: vec![(ww, 4)],
            b_alpha: 1e-3,
            a_alpha: 1e-3,
            gamma: 1.0,
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = problem();
        let a = DMatrix::from_row_slice(2, 2, &[1.1, 0.2, -0.1, 0.9]);
        let g = p.gradient(&a).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..2 {
                let mut ap = a.clone();
                ap[(i, j)] += h;
                let mut am = a.clone();
                am[(i, j)] -= h;
                let fd = (p.objective(&ap).unwrap() - p.objective(&am).unwrap()) / (2.0 * h);
                assert!(
                    (fd - g[(i, j)]).abs() < 1e-5 * (1.0 + fd.abs()),
                    "{fd} vs {}",
                    g[(i, j)]
                );
            }
        }
    }

    #[test]
    fn solve_never_decreases_the_objective() {
        let p = problem();
        let f0 = p.objective(&DMatrix::identity(2, 2)).unwrap();
        if let Some((a, gain)) = p.solve() {
            assert!(gain > 0.0);
            assert!((p.objective(&a).unwrap() - f0 - gain).abs() < 1e-9);
        }
    }

    #[test]
    fn rotation_keeps_the_product() {
        let z = GlobalLatent::with_shared_cov(
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -0.5, 0.3]),
            DMatrix::identity(2, 2) * 0.2,
        );
        let w = ProjectionPosterior::new(
            DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, -1.0, 2.0, 1.0]),
            DMatrix::identity(2, 2) * 0.1,
        );
        let a = DMatrix::from_row_slice(2, 2, &[1.2, 0.3, -0.4, 0.8]);
        let b = a.clone().try_inverse().unwrap();
        let z2 = rotate_latent(&z, &a);
        let w2 = rotate_projection(&w, &b);
        let before = &z.mean * w.mean.transpose();
        let after = &z2.mean * w2.mean.transpose();
        assert!((before - after).abs().max() < 1e-12);
        let tr = |z: &GlobalLatent, w: &ProjectionPosterior| {
            crate::linalg::trace_of_product(&w.second_moment(), &z.second_moment())
        };
        assert!((tr(&z, &w) - tr(&z2, &w2)).abs() < 1e-10);
    }
}
