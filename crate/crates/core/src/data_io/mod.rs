//! On-disk formats: matrices, dataset manifests, synthetic data and
//! checkpoints.

mod checkpoint;
mod manifest;
mod matrix;
mod synth;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::views::ViewKind;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_meta, save_checkpoint, Checkpoint, CheckpointMeta,
    CHECKPOINT_VERSION,
};
pub use manifest::{load_manifest, write_dataset, Manifest, ViewEntry};
pub use matrix::{
    decode_matrix, encode_matrix, read_matrix, write_matrix, MATRIX_MAGIC, MATRIX_VERSION,
};
pub use synth::{generate_synthetic, GroundTruth, SynthConfig, SynthView, SynthViewKind};

/// Observations of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewObservations {
    pub name: String,
    pub kind: ViewKind,
    pub values: DMatrix<f64>,
    /// `N × 1` per-sample or `N × D` per-entry presence (1 observed, 0 missing).
    pub mask: Option<DMatrix<f64>>,
}

/// A multi-view dataset aligned on samples.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewData {
    pub n_samples: usize,
    pub views: Vec<ViewObservations>,
}

impl MultiViewData {
    pub fn view(&self, name: &str) -> Option<&ViewObservations> {
        self.views.iter().find(|v| v.name == name)
    }

    /// 64-bit digest of names, kinds, values and masks.
    pub fn content_hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update((self.n_samples as u64).to_le_bytes());
        for v in &self.views {
            h.update((v.name.len() as u64).to_le_bytes());
            h.update(v.name.as_bytes());
            h.update(v.kind.as_str().as_bytes());
            h.update(encode_matrix(&v.values));
            match &v.mask {
                Some(m) => {
                    h.update([1u8]);
                    h.update(encode_matrix(m));
                }
                None => h.update([0u8]),
            }
        }
        digest64(h)
    }
}

pub(crate) fn digest64(h: Sha256) -> u64 {
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("digest is 32 bytes"))
}

/// 64-bit checksum of a byte buffer.
pub fn checksum64(bytes: &[u8]) -> u64 {
    let mut h = Sha256::new();
    h.update(bytes);
    digest64(h)
}
