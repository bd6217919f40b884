//! Reconstruction error metrics.
//!
//! All metrics are computed over the reconstructed (missing) entries only, so
//! `recon` and `truth` are both N*×|missing|.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Result, VgpdsError};

/// Column metadata for the optional metric variants.
#[derive(Debug, Clone, Default)]
pub struct MetricSpec {
    /// Columns holding angles; enables the angle-space RMS.
    pub angle_columns: Vec<usize>,
    /// Per-column scale weights for the scaled-space error (default 1).
    pub weights: Option<Vec<f64>>,
    /// Joint label per column for the cumulative error (default: one joint per column).
    pub joints: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    /// Mean squared error per missing entry.
    pub mse: f64,
    /// RMS over angle columns, when any are marked.
    pub angle_rms: Option<f64>,
    /// `(joint, Σ_frames ‖w ∘ (recon − truth)‖₂ over the joint's columns)`, by joint label.
    pub scaled_cumulative: Vec<(usize, f64)>,
    /// Mean squared error of each row.
    pub per_frame: Vec<f64>,
    pub method: String,
    pub k: Option<usize>,
}

pub fn evaluate(recon: &DMatrix<f64>, truth: &DMatrix<f64>, spec: &MetricSpec) -> Result<MetricReport> {
    if recon.shape() != truth.shape() {
        return Err(VgpdsError::Shape(format!("reconstruction is {:?} but truth is {:?}", recon.shape(), truth.shape())));
    }
    let (n, d) = recon.shape();
    if spec.angle_columns.iter().any(|&j| j >= d)
        || spec.weights.as_ref().is_some_and(|w| w.len() != d)
        || spec.joints.as_ref().is_some_and(|g| g.len() != d)
    {
        return Err(VgpdsError::Shape("metric column metadata does not match the number of columns".into()));
    }
    let diff = recon - truth;
    let sq = diff.map(|v| v * v);
    let mse = if n * d == 0 { 0.0 } else { sq.sum() / (n * d) as f64 };
    let per_frame = sq.row_iter().map(|r| if d == 0 { 0.0 } else { r.sum() / d as f64 }).collect();

    let angle_rms = (!spec.angle_columns.is_empty() && n > 0).then(|| {
        let total: f64 = spec.angle_columns.iter().map(|&j| sq.column(j).sum()).sum();
        (total / (n * spec.angle_columns.len()) as f64).sqrt()
    });

    let joints: Vec<usize> = spec.joints.clone().unwrap_or_else(|| (0..d).collect());
    let mut labels = joints.clone();
    labels.sort_unstable();
    labels.dedup();
    let scaled_cumulative = labels
        .into_iter()
        .map(|g| {
            let cols: Vec<usize> = (0..d).filter(|&j| joints[j] == g).collect();
            let total = (0..n)
                .map(|i| {
                    cols.iter()
                        .map(|&j| {
                            let w = spec.weights.as_ref().map_or(1.0, |w| w[j]);
                            (w * diff[(i, j)]).powi(2)
                        })
                        .sum::<f64>()
                        .sqrt()
                })
                .sum();
            (g, total)
        })
        .collect();

    Ok(MetricReport { mse, angle_rms, scaled_cumulative, per_frame, method: String::new(), k: None })
}
