//! Checkpoint directories.
//!
//! A checkpoint is a directory holding `checkpoint.toml` (format version,
//! hyperparameters, progress, training configuration, per-view metadata and
//! a table of blobs with 64-bit checksums), the blobs themselves as matrix
//! files under `blobs/`, and the training trace as `trace.jsonl`. Directories
//! are written to a temporary sibling and renamed into place.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::checksum64;
use super::matrix::{decode_matrix, encode_matrix};
use crate::error::{FaError, Result};
use crate::fa::{
    ArdPosterior, GlobalLatent, Hyperparams, NoisePosterior, ProjectionPosterior, RowCovariance,
};
use crate::model::{FaVae, LocalModel, Progress, VaeLocal, VaeSettings, View};
use crate::neural::{Activation, AdamState, Dense, Mlp, VaeNet};
use crate::trainer::{IterationRecord, TrainConfig, TrainTrace};
use crate::views::{MultilabelState, PseudoObservation, ViewKind};

/// `(major, minor)` of the checkpoint layout written by this build.
pub const CHECKPOINT_VERSION: (u32, u32) = (1, 0);

const META_FILE: &str = "checkpoint.toml";
const TRACE_FILE: &str = "trace.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobRef {
    pub file: String,
    /// Hex-encoded 64-bit checksum of the file contents.
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerMeta {
    pub n_in: usize,
    pub n_out: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamMeta {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeMeta {
    pub encoder: Vec<LayerMeta>,
    pub decoder: Vec<LayerMeta>,
    pub latent_dim: usize,
    pub beta: f64,
    pub decoder_sigma: f64,
    pub settings: VaeSettings,
    pub adam: AdamMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewMeta {
    pub name: String,
    pub kind: ViewKind,
    /// Whether `q(W)` stores one covariance per row.
    pub per_row_cov: bool,
    pub ard_a: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoisePosterior>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vae: Option<VaeMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_major: u32,
    pub format_minor: u32,
    pub seed: u64,
    /// Hex content hash of the dataset the model was trained on.
    pub data_hash: String,
    pub hyper: Hyperparams,
    pub progress: Progress,
    pub train: TrainConfig,
    pub views: Vec<ViewMeta>,
    pub blobs: BTreeMap<String, BlobRef>,
}

/// Everything needed to continue or use a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: FaVae,
    pub train: TrainConfig,
    pub data_hash: u64,
    pub trace: TrainTrace,
    /// Non-fatal issues found while loading (e.g. a newer minor version).
    pub warnings: Vec<String>,
}

struct BlobWriter {
    blobs: BTreeMap<String, (BlobRef, Vec<u8>)>,
}

impl BlobWriter {
    fn put(&mut self, name: String, m: &DMatrix<f64>) {
        let bytes = encode_matrix(m);
        let r = BlobRef {
            file: format!("blobs/{name}.favm"),
            checksum: format!("{:016x}", checksum64(&bytes)),
        };
        self.blobs.insert(name, (r, bytes));
    }
}

fn column(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v)
}

fn stack(ms: &[DMatrix<f64>], k: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(ms.len() * k, k);
    for (i, m) in ms.iter().enumerate() {
        out.view_mut((i * k, 0), (k, k)).copy_from(m);
    }
    out
}

fn unstack(m: &DMatrix<f64>, k: usize, context: &str) -> Result<Vec<DMatrix<f64>>> {
    if k == 0 || m.ncols() != k || !m.nrows().is_multiple_of(k) {
        return Err(FaError::format(
            context,
            format!("cannot split {:?} into {k}×{k} blocks", m.shape()),
        ));
    }
    Ok((0..m.nrows() / k)
        .map(|i| m.view((i * k, 0), (k, k)).into_owned())
        .collect())
}

fn layer_meta(mlp: &Mlp) -> Vec<LayerMeta> {
    mlp.layers
        .iter()
        .map(|l| LayerMeta {
            n_in: l.n_in(),
            n_out: l.n_out(),
            activation: l.activation,
        })
        .collect()
}

fn mlp_from_meta(meta: &[LayerMeta]) -> Mlp {
    Mlp {
        layers: meta
            .iter()
            .map(|l| Dense {
                weight: DMatrix::zeros(l.n_in, l.n_out),
                bias: DVector::zeros(l.n_out),
                activation: l.activation,
            })
            .collect(),
    }
}

fn write_all(
    tmp: &Path,
    meta: &CheckpointMeta,
    blobs: &BTreeMap<String, (BlobRef, Vec<u8>)>,
    trace: &TrainTrace,
) -> Result<()> {
    let blob_dir = tmp.join("blobs");
    fs::create_dir_all(&blob_dir).map_err(|e| FaError::io(&blob_dir, e))?;
    for (r, bytes) in blobs.values() {
        let p = tmp.join(&r.file);
        fs::write(&p, bytes).map_err(|e| FaError::io(&p, e))?;
    }
    let text =
        toml::to_string(meta).map_err(|e| FaError::format("checkpoint metadata", e.to_string()))?;
    let p = tmp.join(META_FILE);
    fs::write(&p, text).map_err(|e| FaError::io(&p, e))?;
    let p = tmp.join(TRACE_FILE);
    fs::write(&p, trace.to_json_lines()).map_err(|e| FaError::io(&p, e))
}

/// Writes `model`, the training configuration and trace into `dir`,
/// replacing any previous checkpoint there.
pub fn save_checkpoint(
    dir: &Path,
    model: &FaVae,
    train: &TrainConfig,
    data_hash: u64,
    trace: &TrainTrace,
) -> Result<()> {
    let k = model.n_factors();
    let mut w = BlobWriter {
        blobs: BTreeMap::new(),
    };
    w.put("z_mean".into(), &model.z.mean);
    w.put("z_covs".into(), &stack(&model.z.covs, k));
    w.put(
        "z_cov_index".into(),
        &column(
            &model
                .z
                .cov_index
                .iter()
                .map(|&i| i as f64)
                .collect::<Vec<_>>(),
        ),
    );
    let mut views = Vec::with_capacity(model.views.len());
    for (i, v) in model.views.iter().enumerate() {
        let key = |s: &str| format!("view{i}_{s}");
        w.put(
            key("observed"),
            &column(
                &v.observed
                    .iter()
                    .map(|&o| if o { 1.0 } else { 0.0 })
                    .collect::<Vec<_>>(),
            ),
        );
        w.put(key("pseudo"), &v.pseudo.values);
        if let Some(s) = &v.pseudo.second_moment_diag {
            w.put(key("second_moment"), s);
        }
        w.put(key("w_mean"), &v.w.mean);
        let per_row_cov = match &v.w.cov {
            RowCovariance::Shared(c) => {
                w.put(key("w_cov"), c);
                false
            }
            RowCovariance::PerRow(cs) => {
                w.put(key("w_cov"), &stack(cs, k));
                true
            }
        };
        w.put(key("ard_b"), &column(v.ard.b.as_slice()));
        let mut vae = None;
        match &v.local {
            LocalModel::Multilabel(s) => {
                w.put(key("labels"), &s.labels);
                w.put(key("xi"), &s.xi);
                w.put(key("entry_mask"), &s.entry_mask);
                w.put(key("precision"), &s.precision);
            }
            LocalModel::Vae(local) => {
                w.put(key("params"), &column(&local.net.params_flat()));
                w.put(key("adam_m"), &column(&local.adam.m));
                w.put(key("adam_v"), &column(&local.adam.v));
                vae = Some(VaeMeta {
                    encoder: layer_meta(&local.net.encoder),
                    decoder: layer_meta(&local.net.decoder),
                    latent_dim: local.net.latent_dim,
                    beta: local.net.beta,
                    decoder_sigma: local.net.decoder_sigma,
                    settings: local.settings.clone(),
                    adam: AdamMeta {
                        learning_rate: local.adam.learning_rate,
                        beta1: local.adam.beta1,
                        beta2: local.adam.beta2,
                        epsilon: local.adam.epsilon,
                        t: local.adam.t,
                    },
                });
            }
            LocalModel::RealLinear | LocalModel::FrozenLatent => {}
        }
        views.push(ViewMeta {
            name: v.name.clone(),
            kind: v.kind(),
            per_row_cov,
            ard_a: v.ard.a,
            noise: v.noise,
            vae,
        });
    }
    let meta = CheckpointMeta {
        format_major: CHECKPOINT_VERSION.0,
        format_minor: CHECKPOINT_VERSION.1,
        seed: model.seed,
        data_hash: format!("{data_hash:016x}"),
        hyper: model.hyper.clone(),
        progress: model.progress.clone(),
        train: train.clone(),
        views,
        blobs: w
            .blobs
            .iter()
            .map(|(k, (r, _))| (k.clone(), r.clone()))
            .collect(),
    };

    let name = dir
        .file_name()
        .ok_or_else(|| {
            FaError::invalid(format!(
                "checkpoint path {} has no final component",
                dir.display()
            ))
        })?
        .to_string_lossy()
        .into_owned();
    let parent = dir
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let parent = if parent.as_os_str().is_empty() {
        PathBuf::from(".")
    } else {
        parent
    };
    fs::create_dir_all(&parent).map_err(|e| FaError::io(&parent, e))?;
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| FaError::io(&tmp, e))?;
    }
    if let Err(e) = write_all(&tmp, &meta, &w.blobs, trace) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    let old = parent.join(format!(".{name}.old-{}", std::process::id()));
    let had_old = dir.exists();
    if had_old {
        fs::rename(dir, &old).map_err(|e| FaError::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| FaError::io(dir, e))?;
    if had_old {
        fs::remove_dir_all(&old).map_err(|e| FaError::io(&old, e))?;
    }
    Ok(())
}

struct BlobReader<'a> {
    dir: &'a Path,
    blobs: &'a BTreeMap<String, BlobRef>,
}

impl BlobReader<'_> {
    fn get(&self, name: &str) -> Result<DMatrix<f64>> {
        let r = self
            .blobs
            .get(name)
            .ok_or_else(|| FaError::format("checkpoint", format!("missing blob `{name}`")))?;
        let path = self.dir.join(&r.file);
        let bytes = fs::read(&path).map_err(|e| FaError::io(&path, e))?;
        let found = format!("{:016x}", checksum64(&bytes));
        if found != r.checksum {
            return Err(FaError::Checksum(format!(
                "blob `{name}` ({}): expected {}, found {found}",
                path.display(),
                r.checksum
            )));
        }
        decode_matrix(&bytes, &path.display().to_string())
    }

    fn get_opt(&self, name: &str) -> Result<Option<DMatrix<f64>>> {
        if self.blobs.contains_key(name) {
            self.get(name).map(Some)
        } else {
            Ok(None)
        }
    }

    fn get_vec(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get(name)?.as_slice().to_vec())
    }
}

fn check_shape(m: &DMatrix<f64>, shape: (usize, usize), what: &str) -> Result<()> {
    if m.shape() != shape {
        return Err(FaError::dim(
            format!("checkpoint {what}"),
            format!("{shape:?}"),
            format!("{:?}", m.shape()),
        ));
    }
    Ok(())
}

/// Reads only the metadata of a checkpoint.
pub fn load_checkpoint_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| FaError::io(&path, e))?;
    let raw: toml::Value = toml::from_str(&text)
        .map_err(|e| FaError::format(path.display().to_string(), e.to_string()))?;
    let major = raw.get("format_major").and_then(toml::Value::as_integer);
    if major != Some(CHECKPOINT_VERSION.0 as i64) {
        return Err(FaError::Version {
            found: major.map_or_else(|| "missing".to_string(), |m| m.to_string()),
            supported: format!("{}.x", CHECKPOINT_VERSION.0),
        });
    }
    toml::from_str(&text).map_err(|e| FaError::format(path.display().to_string(), e.to_string()))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta = load_checkpoint_meta(dir)?;
    let mut warnings = Vec::new();
    if meta.format_minor > CHECKPOINT_VERSION.1 {
        let msg = format!(
            "checkpoint format {}.{} is newer than {}.{}; unknown additions are ignored",
            meta.format_major, meta.format_minor, CHECKPOINT_VERSION.0, CHECKPOINT_VERSION.1
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let blobs = BlobReader {
        dir,
        blobs: &meta.blobs,
    };
    let k = meta.hyper.k_c;
    let z_mean = blobs.get("z_mean")?;
    let n = z_mean.nrows();
    check_shape(&z_mean, (n, k), "z_mean")?;
    let covs = unstack(&blobs.get("z_covs")?, k, "z_covs")?;
    let cov_index: Vec<usize> = blobs
        .get_vec("z_cov_index")?
        .into_iter()
        .map(|v| v as usize)
        .collect();
    if cov_index.len() != n || cov_index.iter().any(|&i| i >= covs.len()) {
        return Err(FaError::format(
            "checkpoint z_cov_index",
            "inconsistent with z_covs",
        ));
    }
    let z = GlobalLatent {
        mean: z_mean,
        covs,
        cov_index,
    };
    let mut views = Vec::with_capacity(meta.views.len());
    for (i, vm) in meta.views.iter().enumerate() {
        let key = |s: &str| format!("view{i}_{s}");
        let observed: Vec<bool> = blobs
            .get_vec(&key("observed"))?
            .into_iter()
            .map(|v| v != 0.0)
            .collect();
        if observed.len() != n {
            return Err(FaError::dim(
                format!("checkpoint view `{}` mask", vm.name),
                n,
                observed.len(),
            ));
        }
        let pseudo = PseudoObservation {
            values: blobs.get(&key("pseudo"))?,
            second_moment_diag: blobs.get_opt(&key("second_moment"))?,
        };
        let d = pseudo.values.ncols();
        check_shape(
            &pseudo.values,
            (n, d),
            &format!("view `{}` pseudo-observations", vm.name),
        )?;
        let w_mean = blobs.get(&key("w_mean"))?;
        check_shape(&w_mean, (d, k), &format!("view `{}` W mean", vm.name))?;
        let w_cov = blobs.get(&key("w_cov"))?;
        let cov = if vm.per_row_cov {
            RowCovariance::PerRow(unstack(&w_cov, k, "W covariances")?)
        } else {
            check_shape(&w_cov, (k, k), &format!("view `{}` W covariance", vm.name))?;
            RowCovariance::Shared(w_cov)
        };
        let ard = ArdPosterior {
            a: vm.ard_a,
            b: DVector::from_vec(blobs.get_vec(&key("ard_b"))?),
        };
        let local = match vm.kind {
            ViewKind::RealLinear => LocalModel::RealLinear,
            ViewKind::FrozenLatent => LocalModel::FrozenLatent,
            ViewKind::Multilabel => LocalModel::Multilabel(MultilabelState {
                labels: blobs.get(&key("labels"))?,
                xi: blobs.get(&key("xi"))?,
                entry_mask: blobs.get(&key("entry_mask"))?,
                precision: blobs.get(&key("precision"))?,
            }),
            ViewKind::Vae => {
                let vae = vm.vae.as_ref().ok_or_else(|| {
                    FaError::format(
                        "checkpoint",
                        format!("view `{}` lacks network metadata", vm.name),
                    )
                })?;
                let mut net = VaeNet {
                    encoder: mlp_from_meta(&vae.encoder),
                    decoder: mlp_from_meta(&vae.decoder),
                    latent_dim: vae.latent_dim,
                    beta: vae.beta,
                    decoder_sigma: vae.decoder_sigma,
                };
                net.validate()?;
                let params = blobs.get_vec(&key("params"))?;
                if params.len() != net.n_params() {
                    return Err(FaError::dim(
                        format!("checkpoint view `{}` parameters", vm.name),
                        net.n_params(),
                        params.len(),
                    ));
                }
                net.set_params_flat(&params);
                let adam = AdamState {
                    learning_rate: vae.adam.learning_rate,
                    beta1: vae.adam.beta1,
                    beta2: vae.adam.beta2,
                    epsilon: vae.adam.epsilon,
                    t: vae.adam.t,
                    m: blobs.get_vec(&key("adam_m"))?,
                    v: blobs.get_vec(&key("adam_v"))?,
                };
                LocalModel::Vae(Box::new(VaeLocal {
                    net,
                    adam,
                    settings: vae.settings.clone(),
                }))
            }
        };
        if (vm.kind == ViewKind::Multilabel) != vm.noise.is_none() {
            return Err(FaError::format(
                "checkpoint",
                format!("view `{}` has inconsistent noise metadata", vm.name),
            ));
        }
        views.push(View {
            name: vm.name.clone(),
            observed,
            pseudo,
            w: ProjectionPosterior { mean: w_mean, cov },
            ard,
            noise: vm.noise,
            local,
        });
    }
    let trace_path = dir.join(TRACE_FILE);
    let trace_text = fs::read_to_string(&trace_path).map_err(|e| FaError::io(&trace_path, e))?;
    let records = trace_text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str::<IterationRecord>(l)
                .map_err(|e| FaError::format(trace_path.display().to_string(), e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let data_hash = u64::from_str_radix(&meta.data_hash, 16).map_err(|_| {
        FaError::format(
            "checkpoint data_hash",
            format!("`{}` is not a hex u64", meta.data_hash),
        )
    })?;
    meta.hyper.validate()?;
    Ok(Checkpoint {
        model: FaVae {
            hyper: meta.hyper.clone(),
            z,
            views,
            seed: meta.seed,
            progress: meta.progress.clone(),
        },
        train: meta.train.clone(),
        data_hash,
        trace: TrainTrace {
            records,
            converged: meta.progress.converged,
        },
        warnings,
    })
}
