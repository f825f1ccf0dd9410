//! Dataset manifests: a TOML file listing the views of a dataset and the
//! matrix files that hold them.
//!
//! ```toml
//! n_samples = 200
//! content_hash = "9f1c0a7e5b3d2c41"
//!
//! [[views]]
//! name = "image"
//! kind = "vae"
//! dims = 64
//! path = "image.favm"
//! mask_path = "image_mask.favm"   # optional
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::matrix::{read_matrix, write_matrix};
use super::{MultiViewData, ViewObservations};
use crate::error::{FaError, Result};
use crate::views::ViewKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewEntry {
    pub name: String,
    pub kind: String,
    pub dims: usize,
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub n_samples: usize,
    /// Hex-encoded 64-bit content hash.
    pub content_hash: String,
    pub views: Vec<ViewEntry>,
}

impl Manifest {
    pub fn hash(&self) -> Result<u64> {
        u64::from_str_radix(&self.content_hash, 16).map_err(|_| {
            FaError::format(
                "manifest content_hash",
                format!("`{}` is not a hex u64", self.content_hash),
            )
        })
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads the manifest at `path` and every matrix it references, validating
/// shapes, masks and the content hash.
pub fn load_manifest(path: &Path) -> Result<(Manifest, MultiViewData)> {
    let text = fs::read_to_string(path).map_err(|e| FaError::io(path, e))?;
    let manifest: Manifest = toml::from_str(&text)
        .map_err(|e| FaError::format(path.display().to_string(), e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let n = manifest.n_samples;
    let mut views: Vec<ViewObservations> = Vec::with_capacity(manifest.views.len());
    for entry in &manifest.views {
        let kind: ViewKind = entry.kind.parse()?;
        if views.iter().any(|v| v.name == entry.name) {
            return Err(FaError::invalid(format!(
                "duplicate view name `{}` in manifest",
                entry.name
            )));
        }
        let ctx = |what: &str| format!("view `{}` {what}", entry.name);
        let values = read_matrix(&resolve(base, &entry.path)).map_err(|e| match e {
            FaError::Dimension {
                context,
                expected,
                found,
            } => FaError::Dimension {
                context: format!("view `{}`: {context}", entry.name),
                expected,
                found,
            },
            other => other,
        })?;
        if values.shape() != (n, entry.dims) {
            return Err(FaError::dim(
                ctx("matrix shape"),
                format!("({n}, {})", entry.dims),
                format!("{:?}", values.shape()),
            ));
        }
        let mask = match &entry.mask_path {
            None => None,
            Some(p) => {
                let m = read_matrix(&resolve(base, p))?;
                if m.nrows() != n || (m.ncols() != 1 && m.ncols() != entry.dims) {
                    return Err(FaError::dim(
                        ctx("mask shape"),
                        format!("({n}, 1) or ({n}, {})", entry.dims),
                        format!("{:?}", m.shape()),
                    ));
                }
                if let Some(v) = m.iter().find(|&&v| v != 0.0 && v != 1.0) {
                    return Err(FaError::invalid(format!(
                        "mask of view `{}` contains {v}; masks must be 0/1",
                        entry.name
                    )));
                }
                Some(m)
            }
        };
        views.push(ViewObservations {
            name: entry.name.clone(),
            kind,
            values,
            mask,
        });
    }
    let data = MultiViewData {
        n_samples: n,
        views,
    };
    let expected = manifest.hash()?;
    let found = data.content_hash();
    if expected != found {
        return Err(FaError::HashMismatch { expected, found });
    }
    Ok((manifest, data))
}

/// Writes every view (and mask) of `data` into `dir` plus `manifest.toml`.
pub fn write_dataset(dir: &Path, data: &MultiViewData) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| FaError::io(dir, e))?;
    let mut entries = Vec::with_capacity(data.views.len());
    for v in &data.views {
        let file = PathBuf::from(format!("{}.favm", v.name));
        write_matrix(&dir.join(&file), &v.values)?;
        let mask_path = match &v.mask {
            Some(m) => {
                let f = PathBuf::from(format!("{}_mask.favm", v.name));
                write_matrix(&dir.join(&f), m)?;
                Some(f)
            }
            None => None,
        };
        entries.push(ViewEntry {
            name: v.name.clone(),
            kind: v.kind.as_str().to_string(),
            dims: v.values.ncols(),
            path: file,
            mask_path,
        });
    }
    let manifest = Manifest {
        n_samples: data.n_samples,
        content_hash: format!("{:016x}", data.content_hash()),
        views: entries,
    };
    let text =
        toml::to_string(&manifest).map_err(|e| FaError::format("manifest", e.to_string()))?;
    let path = dir.join("manifest.toml");
    fs::write(&path, text).map_err(|e| FaError::io(&path, e))?;
    Ok(manifest)
}
