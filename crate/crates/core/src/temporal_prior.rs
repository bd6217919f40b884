//! The temporal GP prior over latent trajectories.
//!
//! Independent sequences give a block-diagonal `K_t`; entries between rows of
//! different sequences are exactly zero. The variational posterior over each
//! latent dimension is parametrized by `(μ̄_q, λ_q)` with
//! `μ_q = K_t μ̄_q` and `S_q = (K_t⁻¹ + diag(λ_q))⁻¹`; all quantities are
//! computed through `B̃_q = I + Λ_q^½ K_t Λ_q^½`, whose eigenvalues are ≥ 1.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VgpdsError};
use crate::kernels::TemporalKernel;
use crate::linalg::{self, JitteredCholesky};

/// Contiguous row ranges, one per independent sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    /// Half-open `[start, end)` ranges.
    pub boundaries: Vec<(usize, usize)>,
}

impl SequenceLayout {
    pub fn new(boundaries: Vec<(usize, usize)>) -> Result<Self> {
        let layout = SequenceLayout { boundaries };
        layout.validate()?;
        Ok(layout)
    }

    pub fn single(n: usize) -> Self {
        SequenceLayout { boundaries: vec![(0, n)] }
    }

    /// Builds a layout from per-row sequence ids; rows of a sequence must be contiguous.
    pub fn from_ids<T: PartialEq + Copy + std::fmt::Debug>(ids: &[T]) -> Result<Self> {
        let mut boundaries = Vec::new();
        let mut seen: Vec<T> = Vec::new();
        let mut start = 0;
        for i in 1..=ids.len() {
            if i == ids.len() || ids[i] != ids[start] {
                if seen.contains(&ids[start]) {
                    return Err(VgpdsError::Validation(format!(
                        "rows of sequence {:?} are not contiguous",
                        ids[start]
                    )));
                }
                seen.push(ids[start]);
                boundaries.push((start, i));
                start = i;
            }
        }
        Self::new(boundaries)
    }

    pub fn validate(&self) -> Result<()> {
        let mut expected = 0;
        for &(s, e) in &self.boundaries {
            if s != expected || e <= s {
                return Err(VgpdsError::Validation(format!(
                    "sequence ranges must be ordered, contiguous and non-empty (got [{s},{e}) after {expected})"
                )));
            }
            expected = e;
        }
        if self.boundaries.is_empty() {
            return Err(VgpdsError::Validation("layout has no sequences".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.boundaries.last().map_or(0, |b| b.1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_sequences(&self) -> usize {
        self.boundaries.len()
    }

    /// Sequence index of every row.
    pub fn groups(&self) -> Vec<usize> {
        let mut g = vec![0; self.len()];
        for (s, &(a, b)) in self.boundaries.iter().enumerate() {
            g[a..b].iter_mut().for_each(|x| *x = s);
        }
        g
    }
}

/// Per-dimension quantities implied by `(μ̄_q, λ_q)`.
#[derive(Debug, Clone)]
pub struct QPosterior {
    pub mean: DVector<f64>,
    /// Full N×N covariance `S_q`.
    pub cov: DMatrix<f64>,
    /// `B̂_q = Λ^½ B̃⁻¹ Λ^½ = (K_t + Λ⁻¹)⁻¹`.
    pub bhat: DMatrix<f64>,
    pub logdet_btilde: f64,
}

impl QPosterior {
    pub fn variances(&self) -> DVector<f64> {
        self.cov.diagonal()
    }
}

/// `K_t` for a set of time stamps grouped into independent sequences.
#[derive(Debug, Clone)]
pub struct TemporalPrior {
    kernel: TemporalKernel,
    times: Vec<f64>,
    groups: Vec<usize>,
    cov: DMatrix<f64>,
    factor: JitteredCholesky,
}

/// Builds the block-diagonal prior covariance for a contiguous layout.
pub fn build_prior(kernel: &TemporalKernel, times: &[f64], layout: &SequenceLayout) -> Result<TemporalPrior> {
    layout.validate()?;
    if layout.len() != times.len() {
        return Err(VgpdsError::Shape(format!(
            "layout covers {} rows but {} time stamps were given",
            layout.len(),
            times.len()
        )));
    }
    TemporalPrior::with_groups(kernel, times, &layout.groups())
}

/// Masks out entries whose rows belong to different groups.
fn mask_groups(m: &mut DMatrix<f64>, g_a: &[usize], g_b: &[usize]) {
    for j in 0..g_b.len() {
        for i in 0..g_a.len() {
            if g_a[i] != g_b[j] {
                m[(i, j)] = 0.0;
            }
        }
    }
}

impl TemporalPrior {
    /// Builds the prior from arbitrary (not necessarily contiguous) group labels.
    pub fn with_groups(kernel: &TemporalKernel, times: &[f64], groups: &[usize]) -> Result<Self> {
        kernel.validate()?;
        if groups.len() != times.len() {
            return Err(VgpdsError::Shape("one group label per time stamp is required".into()));
        }
        if let Some(t) = times.iter().find(|t| !t.is_finite()) {
            return Err(VgpdsError::NonFinite(format!("time stamp {t}")));
        }
        let mut cov = kernel.gram_sym(times)?;
        mask_groups(&mut cov, groups, groups);
        let factor = linalg::cholesky_jittered(&cov, kernel.diagonal_value(), "temporal prior K_t")?;
        for i in 0..cov.nrows() {
            cov[(i, i)] += factor.added;
        }
        Ok(TemporalPrior { kernel: kernel.clone(), times: times.to_vec(), groups: groups.to_vec(), cov, factor })
    }

    pub fn kernel(&self) -> &TemporalKernel {
        &self.kernel
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `K_t` including the diagonal jitter used for its factorization.
    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn rel_jitter(&self) -> f64 {
        self.factor.rel_jitter
    }

    pub fn log_det(&self) -> f64 {
        self.factor.log_det()
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor.solve(b)
    }

    /// ∂K_t/∂θ for temporal hyperparameter `index`, including the jitter term
    /// (the jitter scales with the summed component variances).
    pub fn cov_grad(&self, index: usize) -> Result<DMatrix<f64>> {
        let mut g = self.kernel.gram_sym_grad(&self.times, index)?;
        mask_groups(&mut g, &self.groups, &self.groups);
        if self.kernel.hyperparams()[index].kind == crate::kernels::HyperKind::Variance {
            for i in 0..g.nrows() {
                g[(i, i)] += self.factor.rel_jitter;
            }
        }
        Ok(g)
    }

    /// Cross-covariance `K_{*N}` between new time stamps (with group labels) and the prior's rows.
    pub fn cross_cov(&self, t_star: &[f64], groups_star: &[usize]) -> Result<DMatrix<f64>> {
        let mut k = self.kernel.gram(t_star, &self.times)?;
        mask_groups(&mut k, groups_star, &self.groups);
        Ok(k)
    }

    /// Implied posterior moments for one latent dimension.
    pub fn posterior(&self, mu_bar: &DVector<f64>, lambda: &DVector<f64>) -> Result<QPosterior> {
        let n = self.len();
        if mu_bar.len() != n || lambda.len() != n {
            return Err(VgpdsError::Shape(format!("variational vectors must have length {n}")));
        }
        if lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(VgpdsError::ParameterDomain("λ must be non-negative and finite".into()));
        }
        let k = &self.cov;
        let sqrt_l: DVector<f64> = lambda.map(f64::sqrt);
        let mut btilde = DMatrix::from_fn(n, n, |i, j| sqrt_l[i] * k[(i, j)] * sqrt_l[j]);
        for i in 0..n {
            btilde[(i, i)] += 1.0;
        }
        let chol = linalg::cholesky(&btilde, "B̃ = I + Λ½ K Λ½")?;
        let logdet_btilde = linalg::log_det(&chol);
        let mut bhat = chol.inverse();
        for j in 0..n {
            for i in 0..n {
                bhat[(i, j)] *= sqrt_l[i] * sqrt_l[j];
            }
        }
        let kb = k * &bhat;
        let mut cov = k - &kb * k;
        linalg::symmetrize(&mut cov);
        Ok(QPosterior { mean: k * mu_bar, cov, bhat, logdet_btilde })
    }

    /// KL(N(μ_q,S_q) ‖ N(0,K_t)) for one dimension, from its implied posterior.
    pub fn kl_dim(&self, mu_bar: &DVector<f64>, post: &QPosterior) -> f64 {
        let tr_bk = linalg::trace_prod(&post.bhat, &self.cov);
        let quad = mu_bar.dot(&(&self.cov * mu_bar));
        0.5 * (-tr_bk + quad + post.logdet_btilde)
    }

    /// Σ_q KL(q(x_q) ‖ p(x_q|t)). Columns of `mu_bar`/`lambda` are latent dimensions.
    pub fn kl(&self, mu_bar: &DMatrix<f64>, lambda: &DMatrix<f64>) -> Result<f64> {
        check_state(self.len(), mu_bar, lambda)?;
        let mut total = 0.0;
        for q in 0..mu_bar.ncols() {
            let mb = mu_bar.column(q).into_owned();
            let post = self.posterior(&mb, &lambda.column(q).into_owned())?;
            total += self.kl_dim(&mb, &post);
        }
        Ok(total)
    }

    /// KL with its gradients w.r.t. `μ̄` and `λ`.
    pub fn kl_with_gradients(&self, mu_bar: &DMatrix<f64>, lambda: &DMatrix<f64>) -> Result<(f64, DMatrix<f64>, DMatrix<f64>)> {
        check_state(self.len(), mu_bar, lambda)?;
        let (n, qdim) = mu_bar.shape();
        let mut total = 0.0;
        let mut g_mu = DMatrix::zeros(n, qdim);
        let mut g_lambda = DMatrix::zeros(n, qdim);
        for q in 0..qdim {
            let mb = mu_bar.column(q).into_owned();
            let lam = lambda.column(q).into_owned();
            let post = self.posterior(&mb, &lam)?;
            total += self.kl_dim(&mb, &post);
            g_mu.set_column(q, &(&self.cov * &mb));
            let s2 = post.cov.map(|v| v * v);
            g_lambda.set_column(q, &(0.5 * (s2 * lam)));
        }
        Ok((total, g_mu, g_lambda))
    }
}

fn check_state(n: usize, mu_bar: &DMatrix<f64>, lambda: &DMatrix<f64>) -> Result<()> {
    if mu_bar.nrows() != n || lambda.shape() != mu_bar.shape() {
        return Err(VgpdsError::Shape(format!(
            "variational parameters must be {n}×Q (got {:?} and {:?})",
            mu_bar.shape(),
            lambda.shape()
        )));
    }
    Ok(())
}
