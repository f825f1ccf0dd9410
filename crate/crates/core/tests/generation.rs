mod common;

use std::collections::BTreeMap;

use common::*;
use favae::data_io::{generate_synthetic, SynthConfig, SynthView, SynthViewKind};
use favae::fa::Hyperparams;
use favae::generation::*;
use favae::model::{FaVae, VaeSettings, ViewSpec};
use favae::neural::{VaeArchitecture, VaeNet};
use favae::trainer::{train, TrainConfig};
use favae::{DMatrix, DVector, ViewKind};
use proptest::prelude::*;

fn trained() -> FaVae {
    let (data, _) = generate_synthetic(&SynthConfig {
        n: 60,
        k_true: 3,
        seed: 11,
        views: vec![
            SynthView::new("real", SynthViewKind::Real, 4, &[1, 2], &[3]),
            SynthView::new("img", SynthViewKind::ImageLike, 6, &[1, 2], &[]),
            SynthView::new("attr", SynthViewKind::Multilabel, 3, &[1], &[]),
        ],
    })
    .unwrap();
    let mut m = FaVae::new(Hyperparams::with_k(4), data.n_samples, 1).unwrap();
    for v in &data.views {
        let spec = match v.kind {
            ViewKind::Vae => ViewSpec::Vae {
                net: VaeNet::new(
                    &VaeArchitecture {
                        input_dim: 6,
                        latent_dim: 2,
                        encoder_hidden: vec![8],
                        decoder_hidden: vec![8],
                        ..Default::default()
                    },
                    &mut rng(2),
                )
                .unwrap(),
                settings: VaeSettings::default(),
            },
            ViewKind::Multilabel => ViewSpec::Multilabel,
            _ => ViewSpec::RealLinear,
        };
        m.attach_view(&v.name, spec, &v.values, None).unwrap();
    }
    train(
        &mut m,
        &data,
        &TrainConfig {
            max_outer_iters: 5,
            inner_epochs: 2,
            ..Default::default()
        },
    )
    .unwrap();
    m
}

#[test]
fn cross_generation_is_seeded() {
    let m = trained();
    let obs = random_matrix(3, 4, 1.0, &mut rng(5));
    let a = cross_generate(&m, "real", &obs, "img", 9).unwrap();
    let b = cross_generate(&m, "real", &obs, "img", 9).unwrap();
    let c = cross_generate(&m, "real", &obs, "img", 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.values, c.values);
    assert_eq!(a.values.shape(), (3, 6));
    assert!(cross_generate(&m, "real", &obs, "nope", 9).is_err());
    assert!(cross_generate(&m, "real", &random_matrix(3, 5, 1.0, &mut rng(5)), "img", 9).is_err());
}

#[test]
fn samples_are_grouped_by_latent_row() {
    let m = trained();
    let z = random_matrix(2, m.n_factors(), 1.0, &mut rng(1));
    let g = generate_from_z(&m, &z, "real", 3, 4).unwrap();
    assert_eq!(g.values.nrows(), 6);
    let mean = generate_mean_from_z(&m, &z, "real").unwrap();
    let labels = generate_from_z(&m, &z, "attr", 2, 4).unwrap();
    let p = labels.probabilities.unwrap();
    assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert!(labels.values.iter().all(|&v| v == 0.0 || v == 1.0));
    assert_eq!(mean.values.nrows(), 2);
}

#[test]
fn empty_evidence_gives_the_prior() {
    let m = trained();
    let post = posterior_z_given(&m, &BTreeMap::new()).unwrap();
    assert!(post.prior_only);
    assert_eq!(
        post.z.cov(0),
        &DMatrix::identity(m.n_factors(), m.n_factors())
    );
}

#[test]
fn label_evidence_moves_the_posterior() {
    let m = trained();
    let ones = BTreeMap::from([("attr".to_string(), DMatrix::from_element(1, 3, 1.0))]);
    let zeros = BTreeMap::from([("attr".to_string(), DMatrix::from_element(1, 3, 0.0))]);
    let a = posterior_z_given(&m, &ones).unwrap();
    let b = posterior_z_given(&m, &zeros).unwrap();
    assert!(!a.prior_only);
    let pa = generate_mean_from_z(&m, &a.z.mean, "attr")
        .unwrap()
        .probabilities
        .unwrap();
    let pb = generate_mean_from_z(&m, &b.z.mean, "attr")
        .unwrap()
        .probabilities
        .unwrap();
    assert!(pa.sum() > pb.sum());
    let bad = BTreeMap::from([("attr".to_string(), DMatrix::from_element(1, 3, 0.5))]);
    assert!(posterior_z_given(&m, &bad).is_err());
}

#[test]
fn relevance_report_shape() {
    let m = trained();
    let r = latent_relevance(&m, RelevanceMode::AbsMean, Some("img")).unwrap();
    assert_eq!(r.scores.len(), 3);
    assert_eq!(r.n_factors(), m.n_factors());
    let img = r.heat_map(5);
    assert_eq!((img.width(), img.height()), (5 * m.n_factors() as u32, 15));
    assert!(r.to_text().contains("abs_mean"));
    assert!(latent_relevance(&m, RelevanceMode::SignedMean, Some("zzz")).is_err());
    let signed = latent_relevance(&m, RelevanceMode::SignedMean, None).unwrap();
    for (s, a) in signed
        .scores
        .iter()
        .flatten()
        .zip(r.scores.iter().flatten())
    {
        assert!(s.abs() <= a + 1e-12);
    }
}

#[test]
fn two_steps_return_the_endpoints() {
    let a = DVector::from_vec(vec![1.0, -2.0]);
    let b = DVector::from_vec(vec![0.5, 3.0]);
    let path = interpolate_global(&a, &b, &lambda_grid(2).unwrap()).unwrap();
    assert_eq!(path, vec![a.clone(), b.clone()]);
    assert!(lambda_grid(1).is_err());
    assert!(interpolate_private(&a, &b, &[1.5]).is_err());
    assert!(interpolate_private(&a, &DVector::zeros(3), &[0.5]).is_err());
}

proptest! {
    #[test]
    fn lambda_grid_is_uniform(steps in 2usize..50) {
        let g = lambda_grid(steps).unwrap();
        prop_assert_eq!(g.len(), steps);
        prop_assert_eq!(g[0], 1.0);
        prop_assert_eq!(g[steps - 1], 0.0);
        let h = 1.0 / (steps - 1) as f64;
        for w in g.windows(2) {
            prop_assert!((w[0] - w[1] - h).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolation_is_convex(seed in any::<u64>(), l in 0.0f64..=1.0) {
        let mut r = rng(seed);
        let a = DVector::from_fn(3, |_, _| normal(&mut r));
        let b = DVector::from_fn(3, |_, _| normal(&mut r));
        let p = &interpolate_private(&a, &b, &[l]).unwrap()[0];
        for i in 0..3 {
            let lo = a[i].min(b[i]) - 1e-12;
            let hi = a[i].max(b[i]) + 1e-12;
            prop_assert!(p[i] >= lo && p[i] <= hi);
        }
    }
}
