mod common;

use std::fs;
use std::path::Path;

use common::*;
use favae::data_io::*;
use favae::fa::Hyperparams;
use favae::model::{FaVae, ViewSpec};
use favae::trainer::{train, TrainConfig};
use favae::{DMatrix, FaError};
use proptest::prelude::*;

proptest! {
    #[test]
    fn matrix_round_trip(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
        let m = random_matrix(rows, cols, 3.0, &mut rng(seed));
        let back = decode_matrix(&encode_matrix(&m), "test").unwrap();
        prop_assert_eq!(back, m);
    }

    #[test]
    fn truncated_matrix_is_rejected(cut in 1usize..40) {
        let m = random_matrix(3, 2, 1.0, &mut rng(1));
        let bytes = encode_matrix(&m);
        let cut = cut.min(bytes.len());
        prop_assert!(decode_matrix(&bytes[..bytes.len() - cut], "test").is_err());
    }
}

#[test]
fn bad_magic_is_a_format_error() {
    let mut bytes = encode_matrix(&DMatrix::from_element(1, 1, 1.0));
    bytes[0] = b'X';
    assert!(matches!(
        decode_matrix(&bytes, "x"),
        Err(FaError::Format { .. })
    ));
}

fn synth(seed: u64) -> SynthConfig {
    let mut labels = SynthView::new("labels", SynthViewKind::Multilabel, 3, &[1], &[]);
    labels.missing_fraction = 0.2;
    SynthConfig {
        n: 40,
        k_true: 3,
        seed,
        views: vec![
            SynthView::new("real", SynthViewKind::Real, 4, &[1, 2], &[3]),
            labels,
            SynthView::new("img", SynthViewKind::ImageLike, 9, &[1], &[2]),
        ],
    }
}

#[test]
fn synthetic_data_is_deterministic() {
    let (a, ta) = generate_synthetic(&synth(3)).unwrap();
    let (b, tb) = generate_synthetic(&synth(3)).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    let (c, _) = generate_synthetic(&synth(4)).unwrap();
    assert_ne!(a.content_hash(), c.content_hash());
}

#[test]
fn synthetic_views_only_load_their_factors() {
    let (_, truth) = generate_synthetic(&synth(5)).unwrap();
    let w = &truth.w[0];
    assert_eq!(w.shape(), (4, 3));
    let w = &truth.w[1];
    assert!(w.column(1).iter().all(|&v| v == 0.0) && w.column(2).iter().all(|&v| v == 0.0));
}

#[test]
fn synthetic_factor_out_of_range_names_the_key() {
    let mut cfg = synth(1);
    cfg.views[1].private_factors = vec![7];
    let err = generate_synthetic(&cfg).unwrap_err().to_string();
    assert!(err.contains("views[1].private_factors"), "{err}");
    assert!(err.contains("factor 7"), "{err}");
}

#[test]
fn real_view_noise_matches_tau() {
    let mut cfg = synth(8);
    cfg.n = 10_000;
    cfg.views[0].noise_tau = 25.0;
    let (data, truth) = generate_synthetic(&cfg).unwrap();
    let resid = &data.views[0].values - &truth.clean[0];
    let var = resid.iter().map(|v| v * v).sum::<f64>() / resid.len() as f64;
    assert!((var * 25.0 - 1.0).abs() < 0.05, "{var}");
}

#[test]
fn infinite_noise_precision_gives_exact_signal() {
    let mut cfg = synth(9);
    cfg.views[0].noise_tau = f64::INFINITY;
    let (data, truth) = generate_synthetic(&cfg).unwrap();
    let signal = &truth.z * truth.w[0].transpose();
    assert_eq!(data.views[0].values, signal);
}

#[test]
fn dataset_round_trips_through_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = generate_synthetic(&synth(2)).unwrap();
    let manifest = write_dataset(dir.path(), &data).unwrap();
    assert_eq!(manifest.hash().unwrap(), data.content_hash());
    let (m2, back) = load_manifest(&dir.path().join("manifest.toml")).unwrap();
    assert_eq!(m2, manifest);
    assert_eq!(back, data);
}

fn edit_manifest(dir: &Path, f: impl FnOnce(String) -> String) {
    let p = dir.join("manifest.toml");
    let text = fs::read_to_string(&p).unwrap();
    fs::write(&p, f(text)).unwrap();
}

#[test]
fn manifest_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = generate_synthetic(&synth(2)).unwrap();
    write_dataset(dir.path(), &data).unwrap();
    let path = dir.path().join("manifest.toml");

    edit_manifest(dir.path(), |t| {
        t.replacen("kind = \"real_linear\"", "kind = \"audio\"", 1)
    });
    assert!(matches!(load_manifest(&path), Err(FaError::UnknownViewKind(k)) if k == "audio"));

    write_dataset(dir.path(), &data).unwrap();
    edit_manifest(dir.path(), |t| t.replacen("dims = 4", "dims = 5", 1));
    let err = load_manifest(&path).unwrap_err();
    assert!(matches!(err, FaError::Dimension { .. }), "{err}");
    assert!(err.to_string().contains("real"), "{err}");

    write_dataset(dir.path(), &data).unwrap();
    let mut other = data.clone();
    other.views[0].values[(0, 0)] += 1.0;
    write_matrix(&dir.path().join("real.favm"), &other.views[0].values).unwrap();
    assert!(matches!(
        load_manifest(&path),
        Err(FaError::HashMismatch { .. })
    ));

    write_dataset(dir.path(), &data).unwrap();
    edit_manifest(dir.path(), |t| format!("{t}\nsurprise = 1\n"));
    assert!(matches!(load_manifest(&path), Err(FaError::Format { .. })));

    write_dataset(dir.path(), &data).unwrap();
    let bytes = fs::read(dir.path().join("img.favm")).unwrap();
    fs::write(dir.path().join("img.favm"), &bytes[..bytes.len() - 8]).unwrap();
    let err = load_manifest(&path).unwrap_err().to_string();
    assert!(err.contains("img"), "{err}");

    write_dataset(dir.path(), &data).unwrap();
    let mut mask = data.views[1].mask.clone().unwrap();
    mask[(0, 0)] = 2.0;
    write_matrix(&dir.path().join("labels_mask.favm"), &mask).unwrap();
    let err = load_manifest(&path).unwrap_err().to_string();
    assert!(err.contains("labels") && err.contains('2'), "{err}");

    write_dataset(dir.path(), &data).unwrap();
    fs::remove_file(dir.path().join("img.favm")).unwrap();
    assert!(matches!(
        load_manifest(&path),
        Err(FaError::Io { .. }) | Err(FaError::Format { .. })
    ));
}

fn trained() -> (FaVae, TrainConfig, MultiViewData) {
    let (data, _) = generate_synthetic(&synth(6)).unwrap();
    let mut m = FaVae::new(Hyperparams::with_k(3), data.n_samples, 6).unwrap();
    for v in &data.views {
        let spec = match v.kind {
            favae::ViewKind::Multilabel => ViewSpec::Multilabel,
            _ => ViewSpec::RealLinear,
        };
        m.attach_view(&v.name, spec, &v.values, v.mask.as_ref())
            .unwrap();
    }
    let cfg = TrainConfig {
        max_outer_iters: 3,
        ..Default::default()
    };
    train(&mut m, &data, &cfg).unwrap();
    (m, cfg, data)
}

#[test]
fn checkpoint_detects_corruption_and_versions() {
    let (m, cfg, data) = trained();
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck");
    save_checkpoint(&ck, &m, &cfg, data.content_hash(), &Default::default()).unwrap();
    let loaded = load_checkpoint(&ck).unwrap();
    assert_eq!(loaded.model, m);
    assert!(loaded.warnings.is_empty());

    let meta_path = ck.join("checkpoint.toml");
    let meta = fs::read_to_string(&meta_path).unwrap();
    fs::write(
        &meta_path,
        meta.replacen("format_minor = 0", "format_minor = 7", 1),
    )
    .unwrap();
    assert_eq!(load_checkpoint(&ck).unwrap().warnings.len(), 1);
    fs::write(
        &meta_path,
        meta.replacen("format_major = 1", "format_major = 2", 1),
    )
    .unwrap();
    assert!(matches!(load_checkpoint(&ck), Err(FaError::Version { .. })));
    fs::write(&meta_path, &meta).unwrap();

    let blob = ck.join("blobs/z_mean.favm");
    let mut bytes = fs::read(&blob).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    fs::write(&blob, bytes).unwrap();
    assert!(matches!(load_checkpoint(&ck), Err(FaError::Checksum(_))));
}

#[test]
fn saving_over_an_existing_checkpoint_replaces_it() {
    let (m, cfg, data) = trained();
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck");
    save_checkpoint(&ck, &m, &cfg, data.content_hash(), &Default::default()).unwrap();
    let mut m2 = m.clone();
    m2.progress.iteration += 1;
    save_checkpoint(&ck, &m2, &cfg, data.content_hash(), &Default::default()).unwrap();
    assert_eq!(
        load_checkpoint(&ck).unwrap().model.progress.iteration,
        m.progress.iteration + 1
    );
    let leftovers: Vec<_> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(leftovers.len(), 1, "{leftovers:?}");
}
