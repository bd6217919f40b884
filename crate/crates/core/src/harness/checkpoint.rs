//! JSON model checkpoints.
//!
//! A checkpoint stores every trained quantity but not the observations; it
//! records where the training data came from and a SHA-256 digest of the
//! output matrix so that a model is only ever restored against the data it
//! was trained on.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bound::{DataBlock, DataTerm, VariationalState, VgpdsModel};
use crate::error::{Result, VgpdsError};
use crate::kernels::{ArdParams, TemporalKernel};
use crate::linalg;

pub const FORMAT: &str = "vgpds-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    /// Path of the training CSV as given at training time.
    pub path: String,
    /// See [`data_checksum`].
    pub sha256: String,
    pub rows: usize,
    pub cols: usize,
    /// Feature column names.
    pub columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub temporal_kernel: TemporalKernel,
    pub ard: ArdParams,
    pub beta: f64,
    /// Row-major N×Q.
    pub mu_bar: Vec<Vec<f64>>,
    /// Row-major N×Q.
    pub lambda: Vec<Vec<f64>>,
    /// Row-major M×Q.
    pub inducing: Vec<Vec<f64>>,
    pub times: Vec<f64>,
    /// Dense sequence index per row.
    pub groups: Vec<usize>,
    /// Original sequence id of each group.
    pub sequence_ids: Vec<i64>,
    pub dataset: DatasetRef,
}

/// SHA-256 over the row and column counts (u64 little-endian) followed by
/// the entries in row-major order (f64 little-endian), as lowercase hex.
pub fn data_checksum(y: &DMatrix<f64>) -> String {
    let mut h = Sha256::new();
    h.update((y.nrows() as u64).to_le_bytes());
    h.update((y.ncols() as u64).to_le_bytes());
    for i in 0..y.nrows() {
        for j in 0..y.ncols() {
            h.update(y[(i, j)].to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

impl Checkpoint {
    pub fn from_model(model: &VgpdsModel, data_path: &str, columns: Vec<String>, sequence_ids: Vec<i64>) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            temporal_kernel: model.temporal().clone(),
            ard: model.ard.clone(),
            beta: model.beta,
            mu_bar: linalg::matrix_to_rows(&model.state.mu_bar),
            lambda: linalg::matrix_to_rows(&model.state.lambda),
            inducing: linalg::matrix_to_rows(&model.state.inducing),
            times: model.times().to_vec(),
            groups: model.groups().to_vec(),
            sequence_ids,
            dataset: DatasetRef {
                path: data_path.into(),
                sha256: data_checksum(&model.outputs),
                rows: model.outputs.nrows(),
                cols: model.outputs.ncols(),
                columns,
            },
        }
    }

    /// Rebuilds the model against the training outputs `y`, which must match the stored checksum.
    pub fn into_model(&self, y: &DMatrix<f64>) -> Result<VgpdsModel> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(VgpdsError::Validation(format!(
                "unsupported checkpoint format {} v{}",
                self.format, self.version
            )));
        }
        let sum = data_checksum(y);
        if sum != self.dataset.sha256 {
            return Err(VgpdsError::Validation(format!(
                "training data checksum {sum} does not match the checkpoint ({})",
                self.dataset.sha256
            )));
        }
        let q = self.ard.latent_dim();
        let state = VariationalState {
            mu_bar: linalg::rows_to_matrix(&self.mu_bar, q)?,
            lambda: linalg::rows_to_matrix(&self.lambda, q)?,
            inducing: linalg::rows_to_matrix(&self.inducing, q)?,
        };
        let blocks = vec![DataBlock { rows: (0..y.nrows()).collect(), data: DataTerm::outer(y)? }];
        VgpdsModel::new(
            self.temporal_kernel.clone(),
            &self.times,
            &self.groups,
            self.ard.clone(),
            self.beta,
            state,
            blocks,
            y.clone(),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
