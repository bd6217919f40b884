//! k-nearest-neighbour reconstruction baseline.

use nalgebra::DMatrix;

use crate::error::{Result, VgpdsError};

/// Indices of the `k` rows of `train` closest to `query` in Euclidean distance.
///
/// Ties go to the lower row index.
pub fn nearest_rows(train: &DMatrix<f64>, query: &[f64], k: usize) -> Result<Vec<usize>> {
    if train.nrows() == 0 {
        return Err(VgpdsError::Validation("training set is empty".into()));
    }
    if k == 0 || k > train.nrows() {
        return Err(VgpdsError::Validation(format!("k must be in 1..={}, got {k}", train.nrows())));
    }
    if query.len() != train.ncols() {
        return Err(VgpdsError::Shape(format!("query has {} entries, expected {}", query.len(), train.ncols())));
    }
    let mut dist: Vec<(f64, usize)> = train
        .row_iter()
        .enumerate()
        .map(|(i, row)| (row.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum(), i))
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(dist.into_iter().take(k).map(|(_, i)| i).collect())
}

/// Predicts the columns of `train_y` not listed in `observed` by averaging the
/// `k` training rows nearest in the observed columns.
///
/// `test_obs` is N*×|observed|; the result is N*×(D−|observed|) with the
/// missing columns in increasing order.
pub fn nn_baseline(train_y: &DMatrix<f64>, test_obs: &DMatrix<f64>, observed: &[usize], k: usize) -> Result<DMatrix<f64>> {
    let d = train_y.ncols();
    if observed.iter().any(|&j| j >= d) {
        return Err(VgpdsError::Validation(format!("observed column index out of range for D={d}")));
    }
    if test_obs.ncols() != observed.len() {
        return Err(VgpdsError::Shape("test observations do not match the observed column list".into()));
    }
    let missing: Vec<usize> = (0..d).filter(|j| !observed.contains(j)).collect();
    let train_obs = crate::linalg::select_cols(train_y, observed);
    let mut out = DMatrix::zeros(test_obs.nrows(), missing.len());
    for i in 0..test_obs.nrows() {
        let query: Vec<f64> = test_obs.row(i).iter().copied().collect();
        let nn = nearest_rows(&train_obs, &query, k)?;
        for (c, &j) in missing.iter().enumerate() {
            out[(i, c)] = nn.iter().map(|&r| train_y[(r, j)]).sum::<f64>() / k as f64;
        }
    }
    Ok(out)
}
