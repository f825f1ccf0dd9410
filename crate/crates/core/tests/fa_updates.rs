mod common;

use common::*;
use favae::fa::{
    update_q_alpha, update_q_tau, update_q_w, update_q_z, ArdPosterior, GlobalLatent, Hyperparams,
    NoisePosterior, ProjectionPosterior, RotationProblem, ViewData, ViewNoise,
};
use favae::model::{FaVae, ViewSpec};
use favae::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

const FLOOR: f64 = 1e-6;

struct Case {
    n: usize,
    k: usize,
    x: DMatrix<f64>,
    observed: Vec<bool>,
    tau: NoisePosterior,
    w: ProjectionPosterior,
    z: GlobalLatent,
    ard: ArdPosterior,
    hyper: Hyperparams,
}

fn case(seed: u64) -> Case {
    let mut r = rng(seed);
    let n = r.random_range(1..=7);
    let k = r.random_range(1..=4);
    let d = r.random_range(1..=4);
    let mut observed: Vec<bool> = (0..n).map(|_| r.random_bool(0.8)).collect();
    observed[0] = true;
    Case {
        n,
        k,
        x: random_matrix(n, d, 1.0, &mut r),
        observed,
        tau: NoisePosterior {
            a: r.random_range(0.5..4.0),
            b: r.random_range(0.5..4.0),
        },
        w: ProjectionPosterior::new(random_matrix(d, k, 1.0, &mut r), random_spd(k, 0.4, &mut r)),
        z: GlobalLatent::with_shared_cov(
            random_matrix(n, k, 1.0, &mut r),
            random_spd(k, 0.4, &mut r),
        ),
        ard: ArdPosterior {
            a: r.random_range(0.5..3.0),
            b: DVector::from_fn(k, |_, _| r.random_range(0.5..3.0)),
        },
        hyper: Hyperparams {
            k_c: k,
            gamma_mean: r.random_range(0.5..2.0),
            ..Default::default()
        },
    }
}

impl Case {
    fn data(&self) -> ViewData<'_> {
        ViewData {
            name: "v",
            values: &self.x,
            second_moment_diag: None,
            observed: &self.observed,
            noise: ViewNoise::Learned(&self.tau),
        }
    }

    fn oracle(&self) -> OracleView {
        let t = self.tau.mean();
        OracleView {
            x: self.x.clone(),
            extra: None,
            lambda: DMatrix::from_fn(self.x.nrows(), self.x.ncols(), |r, _| {
                if self.observed[r] {
                    t
                } else {
                    0.0
                }
            }),
            w: self.w.clone(),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn q_z_matches_oracle(seed in any::<u64>()) {
        let c = case(seed);
        let data = c.data();
        let z = update_q_z(c.n, c.k, &[(&data, &c.w)]).unwrap();
        for (row, (mu, cov)) in oracle_q_z(c.n, c.k, &[c.oracle()]).iter().enumerate() {
            for j in 0..c.k {
                prop_assert!(rel_err(z.mean[(row, j)], mu[j], FLOOR) < 1e-10);
            }
            prop_assert!(max_rel_err(z.cov(row), cov, FLOOR) < 1e-10);
        }
    }

    #[test]
    fn q_w_matches_oracle(seed in any::<u64>()) {
        let c = case(seed);
        let w = update_q_w(&c.data(), &c.z, &c.ard, c.hyper.gamma_mean).unwrap();
        for (row, (mu, cov)) in oracle_q_w(&c.oracle(), &c.z, &c.ard.mean(), c.hyper.gamma_mean).iter().enumerate() {
            for j in 0..c.k {
                prop_assert!(rel_err(w.mean[(row, j)], mu[j], FLOOR) < 1e-10);
            }
            prop_assert!(max_rel_err(w.row_cov(row), cov, FLOOR) < 1e-10);
        }
    }

    #[test]
    fn q_alpha_and_q_tau_match_oracle(seed in any::<u64>()) {
        let c = case(seed);
        let a = update_q_alpha(&c.w, &c.hyper);
        let ea = oracle_q_alpha(&c.w, &c.hyper);
        prop_assert!(rel_err(a.a, ea.a, FLOOR) < 1e-12);
        prop_assert!(max_rel_err(&DMatrix::from_column_slice(c.k, 1, a.b.as_slice()), &DMatrix::from_column_slice(c.k, 1, ea.b.as_slice()), FLOOR) < 1e-12);
        let t = update_q_tau(&c.data(), &c.z, &c.w, &c.hyper).unwrap();
        let et = oracle_q_tau(&c.oracle(), &c.observed, &c.z, &c.hyper);
        prop_assert!(rel_err(t.a, et.a, FLOOR) < 1e-12);
        prop_assert!(rel_err(t.b, et.b, FLOOR) < 1e-10);
    }

    #[test]
    fn every_update_raises_the_bound(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let n = r.random_range(3..=20);
        let mut m = FaVae::new(Hyperparams::with_k(r.random_range(1..=4)), n, seed).unwrap();
        m.attach_view("a", ViewSpec::RealLinear, &random_matrix(n, 3, 1.0, &mut r), None).unwrap();
        let labels = DMatrix::from_fn(n, 2, |_, _| if r.random_bool(0.5) { 1.0 } else { 0.0 });
        m.attach_view("b", ViewSpec::Multilabel, &labels, None).unwrap();
        let mut prev = m.fa_elbo().unwrap();
        for _ in 0..5 {
            m.update_z().unwrap();
            let e = m.fa_elbo().unwrap();
            prop_assert!(e >= prev - 1e-8 * prev.abs().max(1.0), "update_z {prev} -> {e}");
            prev = e;
            for v in 0..2 {
                m.update_w(v).unwrap();
                m.update_multilabel(v).unwrap();
                m.update_alpha(v);
                m.update_tau(v).unwrap();
                let e = m.fa_elbo().unwrap();
                prop_assert!(e >= prev - 1e-8 * prev.abs().max(1.0), "view {v} {prev} -> {e}");
                prev = e;
            }
            m.rotate().unwrap();
            let e = m.fa_elbo().unwrap();
            prop_assert!(e >= prev, "rotate {prev} -> {e}");
            prev = e;
        }
    }
}

#[test]
fn rotation_gradient_matches_finite_differences_at_random_points() {
    let mut r = rng(5);
    for _ in 0..10 {
        let k = r.random_range(1..=4);
        let p = RotationProblem {
            zz: random_spd(k, 10.0, &mut r),
            n_samples: 30,
            views: vec![
                (random_spd(k, 3.0, &mut r), 5),
                (random_spd(k, 1.0, &mut r), 2),
            ],
            a_alpha: 1e-3,
            b_alpha: 1e-3,
            gamma: 1.0,
        };
        let a = DMatrix::identity(k, k) + random_matrix(k, k, 0.1, &mut r);
        let g = p.gradient(&a).unwrap();
        let h = 1e-6;
        for i in 0..k {
            for j in 0..k {
                let mut up = a.clone();
                up[(i, j)] += h;
                let mut down = a.clone();
                down[(i, j)] -= h;
                let fd = (p.objective(&up).unwrap() - p.objective(&down).unwrap()) / (2.0 * h);
                assert!(rel_err(g[(i, j)], fd, 1e-3) < 1e-5, "{} vs {fd}", g[(i, j)]);
            }
        }
    }
}

#[test]
fn pruning_drops_dead_columns_everywhere() {
    let mut m = FaVae::new(Hyperparams::with_k(3), 4, 0).unwrap();
    m.attach_view(
        "a",
        ViewSpec::RealLinear,
        &DMatrix::from_element(4, 2, 1.0),
        None,
    )
    .unwrap();
    m.views[0].w.mean = DMatrix::from_row_slice(2, 3, &[1.0, 1e-4, -2.0, 1.0, 0.0, 1.0]);
    let keep = m.prune_factors(0.1).unwrap();
    assert_eq!(keep, vec![true, false, true]);
    assert_eq!(m.n_factors(), 2);
    assert_eq!(m.hyper.k_c, 2);
    assert_eq!(m.views[0].w.mean.ncols(), 2);
    assert_eq!(m.views[0].ard.b.len(), 2);
    assert_eq!(m.z.cov(0).shape(), (2, 2));
}

#[test]
fn pruning_everything_is_refused() {
    let mut m = FaVae::new(Hyperparams::with_k(2), 3, 0).unwrap();
    m.attach_view(
        "a",
        ViewSpec::RealLinear,
        &DMatrix::from_element(3, 2, 1.0),
        None,
    )
    .unwrap();
    m.views[0].w.mean = DMatrix::zeros(2, 2);
    assert!(m.prune_factors(0.1).is_err());
    assert_eq!(m.n_factors(), 2);
}

#[test]
fn unobserved_rows_keep_the_prior() {
    let mut r = rng(9);
    let x = random_matrix(5, 3, 1.0, &mut r);
    let mask = DMatrix::from_column_slice(5, 1, &[1.0, 1.0, 0.0, 1.0, 0.0]);
    let mut m = FaVae::new(Hyperparams::with_k(2), 5, 1).unwrap();
    m.attach_view("a", ViewSpec::RealLinear, &x, Some(&mask))
        .unwrap();
    m.update_w(0).unwrap();
    m.update_z().unwrap();
    for row in [2, 4] {
        assert_eq!(
            m.z.mean.row(row).iter().copied().collect::<Vec<_>>(),
            vec![0.0, 0.0]
        );
        assert_eq!(m.z.cov(row), &DMatrix::identity(2, 2));
    }
}
