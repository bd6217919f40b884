//! Forecasting and missing-dimension reconstruction.
//!
//! Latent forecasts take the GP-regression form `μ* = K_{*N} μ̄`,
//! `var* = k** − K_{*N} B̂ K_{N*}`. Output moments use the Ψ statistics of
//! q(X*): `E(F*) = Bᵀ Ψ₁*` with `B = β P⁻¹ Ψ₁ᵀ Y`, `P = K_MM + βΨ₂`.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bound::{DataBlock, DataTerm, VariationalState, VgpdsModel, WhitenedSystem};
use crate::error::{Result, VgpdsError};
use crate::harness::baseline::nearest_rows;
use crate::kernels::ArdParams;
use crate::linalg;
use crate::optimizer::{self, ParamGroup, TrainConfig, TrainStatus};
use crate::psi::{self, MomentSet};

/// Where test time stamps sit relative to the training sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// A new sequence, independent of every training sequence under the prior.
    #[default]
    NewSequence,
    /// Continues the training sequence with this index.
    Continue(usize),
}

/// Moments of q(X*), N*×Q each.
#[derive(Debug, Clone)]
pub struct LatentForecast {
    pub mean: DMatrix<f64>,
    pub var: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct PredictiveMoments {
    pub latent: LatentForecast,
    /// `E(Y*) = E(F*)`, N*×D'.
    pub mean: DMatrix<f64>,
    /// Marginal variances of `Y*`, N*×D'; `β⁻¹` included.
    pub var: DMatrix<f64>,
    /// `β⁻¹`.
    pub noise: f64,
    /// Full D'×D' `Cov(Y*)` per test point, when requested.
    pub cov: Option<Vec<DMatrix<f64>>>,
}

impl PredictiveMoments {
    fn empty(latent: LatentForecast, noise: f64, n_star: usize) -> Self {
        PredictiveMoments {
            latent,
            mean: DMatrix::zeros(n_star, 0),
            var: DMatrix::zeros(n_star, 0),
            noise,
            cov: None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.mean.ncols() == 0
    }
}

fn test_groups(model: &VgpdsModel, n_star: usize, placement: Placement) -> Result<Vec<usize>> {
    let groups = model.groups();
    let g = match placement {
        Placement::NewSequence => groups.iter().max().map_or(0, |g| g + 1),
        Placement::Continue(s) => {
            if !groups.contains(&s) {
                return Err(VgpdsError::Validation(format!("no training sequence with index {s}")));
            }
            s
        }
    };
    Ok(vec![g; n_star])
}

/// Latent forecast at test time stamps.
pub fn forecast_latent(model: &VgpdsModel, t_star: &[f64], placement: Placement) -> Result<LatentForecast> {
    if let Some(t) = t_star.iter().find(|t| !t.is_finite()) {
        return Err(VgpdsError::Validation(format!("test time stamp {t} is not finite")));
    }
    let n_star = t_star.len();
    let prior = model.prior();
    let k_sn = prior.cross_cov(t_star, &test_groups(model, n_star, placement)?)?;
    let k_ss = model.temporal().diagonal_value();
    let posts = model.posteriors()?;
    let qdim = model.latent_dim();
    let mut mean = DMatrix::zeros(n_star, qdim);
    let mut var = DMatrix::zeros(n_star, qdim);
    for (q, post) in posts.iter().enumerate() {
        mean.set_column(q, &(&k_sn * model.state.mu_bar.column(q)));
        let kb = &k_sn * &post.bhat;
        for i in 0..n_star {
            let reduction = kb.row(i).dot(&k_sn.row(i));
            var[(i, q)] = (k_ss - reduction).max(0.0);
        }
    }
    Ok(LatentForecast { mean, var })
}

/// Smallest latent variance handed to the Ψ statistics.
const MIN_LATENT_VAR: f64 = 1e-12;

/// Output moments for test latents, given training moments and the outputs they explain.
fn output_moments(
    ard: &ArdParams,
    inducing: &DMatrix<f64>,
    beta: f64,
    train: &MomentSet,
    y: &DMatrix<f64>,
    latent: LatentForecast,
    full_cov: bool,
) -> Result<PredictiveMoments> {
    let n_star = latent.mean.nrows();
    let noise = 1.0 / beta;
    let d = y.ncols();
    if d == 0 {
        return Ok(PredictiveMoments::empty(latent, noise, n_star));
    }
    let kmm = ard.gram(inducing, inducing)?;
    let kchol = linalg::cholesky_jittered(&kmm, ard.variance, "K_MM")?;
    let bundle = psi::psi_bundle(ard, train, inducing)?;
    let ws = WhitenedSystem::new(&kchol, &bundle.psi2, beta)?;
    // B = β P⁻¹ Ψ₁ᵀ Y, M×D
    let b = beta * (ws.sandwich(&ws.b_inv) * (bundle.psi1.transpose() * y));
    let kp = ws.sandwich(&(DMatrix::identity(kmm.nrows(), kmm.nrows()) - &ws.b_inv));

    let test = MomentSet::new(latent.mean.clone(), latent.var.map(|v| v.max(MIN_LATENT_VAR)))?;
    let star = psi::psi_star(ard, &test, inducing)?;
    let mean = star.psi1.transpose() * &b;

    let mut var = DMatrix::zeros(n_star, d);
    let mut covs = full_cov.then(Vec::new);
    for i in 0..n_star {
        let psi1_i = star.psi1.column(i);
        let mut a = psi::psi2_single(ard, &test, inducing, i)?;
        let shared = ard.variance - linalg::trace_prod(&kp, &a);
        a -= psi1_i * psi1_i.transpose();
        let ab = &a * &b;
        for j in 0..d {
            let fv = b.column(j).dot(&ab.column(j)) + shared;
            var[(i, j)] = fv.max(0.0) + noise;
        }
        if let Some(c) = covs.as_mut() {
            let mut cov = b.transpose() * &ab;
            linalg::symmetrize(&mut cov);
            for j in 0..d {
                cov[(j, j)] = var[(i, j)];
            }
            c.push(cov);
        }
    }
    Ok(PredictiveMoments { latent, mean, var, noise, cov: covs })
}

/// Predictive output moments at test time stamps.
pub fn forecast_outputs(model: &VgpdsModel, t_star: &[f64], placement: Placement, full_cov: bool) -> Result<PredictiveMoments> {
    let latent = forecast_latent(model, t_star, placement)?;
    predict_outputs(model, latent, full_cov)
}

/// Output moments for an arbitrary factorized Gaussian over test latents.
pub fn predict_outputs(model: &VgpdsModel, latent: LatentForecast, full_cov: bool) -> Result<PredictiveMoments> {
    let q = model.latent_dim();
    if latent.mean.ncols() != q || latent.var.shape() != latent.mean.shape() {
        return Err(VgpdsError::Shape(format!("test latents must be N*×{q} means and variances")));
    }
    if latent.mean.iter().chain(latent.var.iter()).any(|v| !v.is_finite()) || latent.var.iter().any(|v| *v < 0.0) {
        return Err(VgpdsError::ParameterDomain("test latent moments must be finite with non-negative variances".into()));
    }
    output_moments(&model.ard, &model.state.inducing, model.beta, &model.moments()?, &model.outputs, latent, full_cov)
}

/// Options for [`reconstruct_missing`].
#[derive(Debug, Clone)]
pub struct ReconstructConfig {
    /// Optimizer iterations over the coupled variational parameters; 0 skips optimization.
    pub iters: usize,
    pub tol: f64,
    pub max_line_search: usize,
    pub placement: Placement,
    pub full_cov: bool,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        ReconstructConfig { iters: 100, tol: 1e-6, max_line_search: 50, placement: Placement::NewSequence, full_cov: false }
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// Output moments over the missing columns, in `missing` order.
    pub moments: PredictiveMoments,
    pub missing: Vec<usize>,
    pub status: TrainStatus,
    /// Coupled bound before and after optimization (equal when nothing was optimized).
    pub bound_before: f64,
    pub bound_after: f64,
}

/// Reconstructs the unobserved output columns of a partially observed test sequence.
///
/// `y_obs` holds the observed columns (N*×|observed|) in the order of `observed`.
/// The latent paths of training and test rows are re-fitted jointly under the
/// coupled bound while the kernels, β and the inducing inputs stay fixed.
pub fn reconstruct_missing(
    model: &VgpdsModel,
    t_star: &[f64],
    y_obs: &DMatrix<f64>,
    observed: &[usize],
    config: &ReconstructConfig,
) -> Result<Reconstruction> {
    let n = model.num_points();
    let d = model.outputs.ncols();
    let n_star = t_star.len();
    let obs_set: BTreeSet<usize> = observed.iter().copied().collect();
    if obs_set.len() != observed.len() || observed.iter().any(|&j| j >= d) {
        return Err(VgpdsError::Validation(format!("observed columns must be distinct indices below {d}")));
    }
    if observed.is_empty() {
        return Err(VgpdsError::Validation("at least one observed column is required".into()));
    }
    if y_obs.shape() != (n_star, observed.len()) {
        return Err(VgpdsError::Shape(format!(
            "observed test outputs are {:?}, expected {:?}",
            y_obs.shape(),
            (n_star, observed.len())
        )));
    }
    if y_obs.iter().any(|v| !v.is_finite()) {
        return Err(VgpdsError::Validation("observed test outputs must be finite".into()));
    }
    let missing: Vec<usize> = (0..d).filter(|j| !obs_set.contains(j)).collect();
    let y_missing = linalg::select_cols(&model.outputs, &missing);

    let latent = forecast_latent(model, t_star, config.placement)?;
    if missing.is_empty() {
        return Ok(Reconstruction {
            moments: PredictiveMoments::empty(latent, 1.0 / model.beta, n_star),
            missing,
            status: TrainStatus::Converged,
            bound_before: f64::NAN,
            bound_after: f64::NAN,
        });
    }
    if config.iters == 0 {
        let moments = output_moments(
            &model.ard,
            &model.state.inducing,
            model.beta,
            &model.moments()?,
            &y_missing,
            latent,
            config.full_cov,
        )?;
        return Ok(Reconstruction { moments, missing, status: TrainStatus::MaxIterations, bound_before: f64::NAN, bound_after: f64::NAN });
    }

    let joint = coupled_model(model, t_star, y_obs, observed, &y_missing, config.placement)?;
    let bound_before = joint.evaluate_bound()?.bound;
    let frozen: BTreeSet<ParamGroup> = ParamGroup::ALL
        .into_iter()
        .filter(|g| !matches!(g, ParamGroup::MuBar | ParamGroup::Lambda))
        .collect();
    let train_cfg = TrainConfig {
        warmup_iters: 0,
        iters: vec![config.iters],
        tol: config.tol,
        max_line_search: config.max_line_search,
        frozen,
        ..Default::default()
    };
    let outcome = optimizer::train(&joint, &train_cfg)?;
    if outcome.status == TrainStatus::LineSearchFailed {
        log::warn!("reconstruction optimizer stopped early; returning the best parameters found");
    }
    let fitted = outcome.model;
    let bound_after = outcome.trace.last().map_or(bound_before, |r| r.bound);

    let all = fitted.moments()?;
    let train_rows: Vec<usize> = (0..n).collect();
    let test_rows: Vec<usize> = (n..n + n_star).collect();
    let test = all.rows(&test_rows);
    let latent = LatentForecast { mean: test.mean, var: test.var };
    let moments = output_moments(
        &fitted.ard,
        &fitted.state.inducing,
        fitted.beta,
        &all.rows(&train_rows),
        &y_missing,
        latent,
        config.full_cov,
    )?;
    Ok(Reconstruction { moments, missing, status: outcome.status, bound_before, bound_after })
}

/// The joint model over `[training rows; test rows]` with two data blocks:
/// the missing columns over the training rows and the observed columns over all rows.
fn coupled_model(
    model: &VgpdsModel,
    t_star: &[f64],
    y_obs: &DMatrix<f64>,
    observed: &[usize],
    y_missing: &DMatrix<f64>,
    placement: Placement,
) -> Result<VgpdsModel> {
    let n = model.num_points();
    let n_star = t_star.len();
    let qdim = model.latent_dim();
    let mut times = model.times().to_vec();
    times.extend_from_slice(t_star);
    let mut groups = model.groups().to_vec();
    groups.extend(test_groups(model, n_star, placement)?);

    // test latents start at the latent position of the nearest training row in the observed columns
    let y_train_obs = linalg::select_cols(&model.outputs, observed);
    let moments = model.moments()?;
    let mut mu = DMatrix::zeros(n + n_star, qdim);
    let mut lambda = DMatrix::zeros(n + n_star, qdim);
    mu.rows_mut(0, n).copy_from(&moments.mean);
    lambda.rows_mut(0, n).copy_from(&model.state.lambda);
    for i in 0..n_star {
        let query: Vec<f64> = y_obs.row(i).iter().copied().collect();
        let src = nearest_rows(&y_train_obs, &query, 1)?[0];
        mu.row_mut(n + i).copy_from(&moments.mean.row(src));
        lambda.row_mut(n + i).copy_from(&model.state.lambda.row(src));
    }

    let mut y_joint_obs = DMatrix::zeros(n + n_star, observed.len());
    y_joint_obs.rows_mut(0, n).copy_from(&y_train_obs);
    y_joint_obs.rows_mut(n, n_star).copy_from(y_obs);
    let blocks = vec![
        DataBlock { rows: (0..n).collect(), data: DataTerm::outer(y_missing)? },
        DataBlock { rows: (0..n + n_star).collect(), data: DataTerm::outer(&y_joint_obs)? },
    ];
    let mut outputs = DMatrix::from_element(n + n_star, model.outputs.ncols(), f64::NAN);
    outputs.rows_mut(0, n).copy_from(&model.outputs);
    for (k, &j) in observed.iter().enumerate() {
        outputs.column_mut(j).rows_mut(n, n_star).copy_from(&y_obs.column(k));
    }

    let mut joint = VgpdsModel::new(
        model.temporal().clone(),
        &times,
        &groups,
        model.ard.clone(),
        model.beta,
        VariationalState { mu_bar: DMatrix::zeros(n + n_star, qdim), lambda, inducing: model.state.inducing.clone() },
        blocks,
        outputs,
    )?;
    joint.state.mu_bar = joint.prior().solve(&mu);
    Ok(joint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::TemporalKernel;

    fn small_model() -> VgpdsModel {
        let n = 6;
        let y = DMatrix::from_fn(n, 3, |i, j| ((i + 2 * j) as f64 * 0.7).sin());
        let t: Vec<f64> = (1..=n).map(|i| i as f64).collect();
        let cfg = crate::bound::InitConfig { latent_dim: 2, num_inducing: Some(4), ..Default::default() };
        VgpdsModel::initialize(&y, &t, &crate::SequenceLayout::single(n), TemporalKernel::rbf(1.0, 2.0), &cfg).unwrap()
    }

    #[test]
    fn zero_reparametrized_means_forecast_zero() {
        let mut m = small_model();
        m.state.mu_bar.fill(0.0);
        let f = forecast_latent(&m, &[1.5, 3.0, 9.0], Placement::Continue(0)).unwrap();
        assert!(f.mean.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_outputs_give_zero_mean() {
        let mut m = small_model();
        m.outputs.fill(0.0);
        let p = forecast_outputs(&m, &[2.5, 7.0], Placement::Continue(0), true).unwrap();
        assert!(p.mean.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn output_variance_has_noise_floor() {
        let m = small_model();
        let p = forecast_outputs(&m, &[0.5, 2.5, 7.0, 20.0], Placement::Continue(0), true).unwrap();
        assert!(p.var.iter().all(|v| *v >= p.noise));
        for c in p.cov.unwrap() {
            for j in 0..c.nrows() {
                assert!(c[(j, j)] >= p.noise);
            }
        }
    }

    #[test]
    fn new_sequence_forecast_is_the_prior() {
        let m = small_model();
        let f = forecast_latent(&m, &[1.0, 2.0], Placement::NewSequence).unwrap();
        assert!(f.mean.iter().all(|v| *v == 0.0));
        assert!(f.var.iter().all(|v| (*v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn unknown_sequence_is_rejected() {
        let m = small_model();
        assert!(matches!(forecast_latent(&m, &[1.0], Placement::Continue(3)), Err(VgpdsError::Validation(_))));
        assert!(matches!(forecast_latent(&m, &[f64::NAN], Placement::NewSequence), Err(VgpdsError::Validation(_))));
    }

    #[test]
    fn nothing_missing_is_vacuous() {
        let m = small_model();
        let y_obs = DMatrix::from_element(2, 3, 0.1);
        let r = reconstruct_missing(&m, &[1.0, 2.0], &y_obs, &[0, 1, 2], &ReconstructConfig::default()).unwrap();
        assert!(r.moments.is_empty());
        assert!(r.missing.is_empty());
    }

    #[test]
    fn zero_iterations_match_the_forecast() {
        let m = small_model();
        let y_obs = DMatrix::from_fn(3, 1, |i, _| i as f64 * 0.2);
        let cfg = ReconstructConfig { iters: 0, placement: Placement::Continue(0), ..Default::default() };
        let r = reconstruct_missing(&m, &[6.5, 7.0, 7.5], &y_obs, &[1], &cfg).unwrap();
        let f = forecast_outputs(&m, &[6.5, 7.0, 7.5], Placement::Continue(0), false).unwrap();
        assert_eq!(r.missing, vec![0, 2]);
        assert_eq!(r.moments.mean, linalg::select_cols(&f.mean, &[0, 2]));
        assert_eq!(r.moments.var, linalg::select_cols(&f.var, &[0, 2]));
    }
}
