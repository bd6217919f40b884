//! The variational lower bound `F_v = F̂_v − KL(q(X) ‖ p(X|t))` and its gradients.
//!
//! The data term is the collapsed sparse-GP bound of Titsias and Lawrence,
//! evaluated with the Ψ statistics of q(X):
//!
//! ```text
//! F̂ = -nD/2 log 2π + nD/2 log β + D/2 log|K_MM| - D/2 log|K_MM + βΨ₂|
//!     - β/2 tr(YYᵀ) + β²/2 tr((K_MM + βΨ₂)⁻¹ Ψ₁ᵀ YYᵀ Ψ₁)
//!     - Dβ/2 Ψ₀ + Dβ/2 tr(K_MM⁻¹ Ψ₂)
//! ```
//!
//! The observations only enter through `YYᵀ`, which is precomputed once.
//! A model may carry several data blocks over different subsets of latent
//! rows (used by missing-dimension reconstruction); their `F̂` terms add up.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Result, VgpdsError};
use crate::kernels::{ArdParams, TemporalKernel};
use crate::linalg::{self, JitteredCholesky};
use crate::psi::{self, MomentSet};
use crate::temporal_prior::{QPosterior, SequenceLayout, TemporalPrior};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Observations reduced to what the bound consumes.
#[derive(Debug, Clone)]
pub struct PrecomputedData {
    /// `YYᵀ`, n×n.
    pub outer: DMatrix<f64>,
    /// Number of output dimensions D.
    pub dim: usize,
    /// `tr(YYᵀ) = Σ y²`.
    pub trace: f64,
    /// `R` with `RRᵀ = YYᵀ`, n×n; present when n < D.
    pub factor: Option<DMatrix<f64>>,
}

/// Precomputes `YYᵀ` (and a symmetric square-root factor when N < D).
pub fn precompute_data_term(y: &DMatrix<f64>) -> Result<PrecomputedData> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(VgpdsError::NonFinite("observation matrix".into()));
    }
    let mut outer = y * y.transpose();
    linalg::symmetrize(&mut outer);
    let trace = y.iter().map(|v| v * v).sum();
    let factor = (y.nrows() < y.ncols()).then(|| {
        let eig = SymmetricEigen::new(outer.clone());
        let mut r = eig.eigenvectors.clone();
        for (j, ev) in eig.eigenvalues.iter().enumerate() {
            let s = ev.max(0.0).sqrt();
            r.column_mut(j).scale_mut(s);
        }
        r
    });
    Ok(PrecomputedData { outer, dim: y.ncols(), trace, factor })
}

/// How a block's observations are presented to the bound.
#[derive(Debug, Clone)]
pub enum DataTerm {
    /// Through `YYᵀ` only.
    Outer(PrecomputedData),
    /// Through the raw n×D columns.
    Columns(DMatrix<f64>),
}

impl DataTerm {
    pub fn outer(y: &DMatrix<f64>) -> Result<Self> {
        Ok(DataTerm::Outer(precompute_data_term(y)?))
    }

    pub fn rows(&self) -> usize {
        match self {
            DataTerm::Outer(p) => p.outer.nrows(),
            DataTerm::Columns(y) => y.nrows(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DataTerm::Outer(p) => p.dim,
            DataTerm::Columns(y) => y.ncols(),
        }
    }

    fn trace(&self) -> f64 {
        match self {
            DataTerm::Outer(p) => p.trace,
            DataTerm::Columns(y) => y.iter().map(|v| v * v).sum(),
        }
    }

    /// `YYᵀ X`.
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            DataTerm::Outer(p) => &p.outer * x,
            DataTerm::Columns(y) => y * (y.transpose() * x),
        }
    }
}

/// One group of observed dimensions attached to a subset of latent rows.
#[derive(Debug, Clone)]
pub struct DataBlock {
    pub rows: Vec<usize>,
    pub data: DataTerm,
}

/// Reparametrized variational parameters; columns index latent dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    /// N×Q, `μ_q = K_t μ̄_q`.
    pub mu_bar: DMatrix<f64>,
    /// N×Q, diagonal of `Λ_q`.
    pub lambda: DMatrix<f64>,
    /// M×Q inducing inputs.
    pub inducing: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundTerms {
    /// `nD/2 log β - nD/2 log 2π` summed over blocks.
    pub constant: f64,
    /// `D/2 (log|K_MM| - log|K_MM + βΨ₂|)` summed over blocks.
    pub log_det: f64,
    /// `-β/2 tr(YYᵀ) + β²/2 tr(P⁻¹ Ψ₁ᵀYYᵀΨ₁)`.
    pub data_fit: f64,
    /// `-Dβ/2 Ψ₀ + Dβ/2 tr(K_MM⁻¹ Ψ₂)`.
    pub trace: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub bound: f64,
    pub fhat: f64,
    pub kl: f64,
    pub terms: BoundTerms,
}

/// Gradients of `F_v`, all in raw (not log) parameter space.
#[derive(Debug, Clone)]
pub struct GradientRecord {
    pub mu_bar: DMatrix<f64>,
    pub lambda: DMatrix<f64>,
    pub inducing: DMatrix<f64>,
    pub ard_variance: f64,
    pub ard_weights: Vec<f64>,
    /// One entry per temporal hyperparameter.
    pub temporal: Vec<f64>,
    pub beta: f64,
    /// `∂F̂/∂μ_q`, N×Q.
    pub dfhat_dmu: DMatrix<f64>,
    /// `∂F̂/∂s_q` with `s_q = diag(S_q)`, N×Q.
    pub dfhat_ds: DMatrix<f64>,
}

/// GP-LVM with a temporal prior, trained through the variational bound.
#[derive(Debug, Clone)]
pub struct VgpdsModel {
    temporal: TemporalKernel,
    prior: TemporalPrior,
    pub ard: ArdParams,
    pub beta: f64,
    pub state: VariationalState,
    pub blocks: Vec<DataBlock>,
    /// Training outputs (N×D) used by the predictive equations.
    pub outputs: DMatrix<f64>,
}

/// Options for [`VgpdsModel::initialize`].
#[derive(Debug, Clone)]
pub struct InitConfig {
    pub latent_dim: usize,
    /// Defaults to `min(N, 50)`.
    pub num_inducing: Option<usize>,
    pub lambda_init: f64,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig { latent_dim: 2, num_inducing: None, lambda_init: 0.5, seed: 0 }
    }
}

struct BlockEval {
    value: f64,
    terms: BoundTerms,
    grads: Option<BlockGrads>,
}

struct BlockGrads {
    g_mean: DMatrix<f64>,
    g_var: DMatrix<f64>,
    ard_variance: f64,
    ard_weights: Vec<f64>,
    inducing: DMatrix<f64>,
    g_kmm: DMatrix<f64>,
    beta: f64,
}

impl VgpdsModel {
    pub fn new(
        temporal: TemporalKernel,
        times: &[f64],
        groups: &[usize],
        ard: ArdParams,
        beta: f64,
        state: VariationalState,
        blocks: Vec<DataBlock>,
        outputs: DMatrix<f64>,
    ) -> Result<Self> {
        let prior = TemporalPrior::with_groups(&temporal, times, groups)?;
        let model = VgpdsModel { temporal, prior, ard, beta, state, blocks, outputs };
        model.validate()?;
        Ok(model)
    }

    /// Builds a training model from data with the PCA-based initialization.
    pub fn initialize(
        y: &DMatrix<f64>,
        times: &[f64],
        layout: &SequenceLayout,
        temporal: TemporalKernel,
        config: &InitConfig,
    ) -> Result<Self> {
        let (n, d) = y.shape();
        let q = config.latent_dim;
        if n < 3 {
            return Err(VgpdsError::Config(format!("need at least 3 time points, got {n}")));
        }
        if q == 0 || d < q || n < q {
            return Err(VgpdsError::Config(format!("latent dimension {q} must not exceed D={d} or N={n}")));
        }
        if layout.len() != n || times.len() != n {
            return Err(VgpdsError::Shape("layout/time stamps do not match the number of rows".into()));
        }
        if !(config.lambda_init.is_finite() && config.lambda_init > 0.0) {
            return Err(VgpdsError::Config("initial λ must be positive".into()));
        }
        let m = config.num_inducing.unwrap_or(n.min(50));
        if m == 0 || m > n {
            return Err(VgpdsError::Config(format!("number of inducing points must be in 1..={n}, got {m}")));
        }

        let (mu, sing) = pca_init(y, q)?;
        let weights: Vec<f64> = sing.iter().map(|s| n as f64 / (s * s).max(1e-12)).collect();
        let ard = ArdParams::new(1.0, weights)?;

        let total_var = column_variance_mean(y);
        if !(total_var > 0.0) {
            return Err(VgpdsError::Config("data has zero variance".into()));
        }
        let beta = 1.0 / (0.01 * total_var);

        let prior = TemporalPrior::with_groups(&temporal, times, &layout.groups())?;
        let mu_bar = prior.solve(&mu);
        let lambda = DMatrix::from_element(n, q, config.lambda_init);

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut idx = rand::seq::index::sample(&mut rng, n, m).into_vec();
        idx.sort_unstable();
        let inducing = linalg::select_rows(&mu, &idx);

        let blocks = vec![DataBlock { rows: (0..n).collect(), data: DataTerm::outer(y)? }];
        let model = VgpdsModel {
            temporal,
            prior,
            ard,
            beta,
            state: VariationalState { mu_bar, lambda, inducing },
            blocks,
            outputs: y.clone(),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.prior.len();
        let q = self.ard.latent_dim();
        self.ard.validate()?;
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(VgpdsError::ParameterDomain(format!("β must be positive, got {}", self.beta)));
        }
        let s = &self.state;
        if s.mu_bar.shape() != (n, q) || s.lambda.shape() != (n, q) || s.inducing.ncols() != q {
            return Err(VgpdsError::Shape(format!(
                "variational state shapes {:?}/{:?}/{:?} do not match N={n}, Q={q}",
                s.mu_bar.shape(),
                s.lambda.shape(),
                s.inducing.shape()
            )));
        }
        if s.lambda.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(VgpdsError::ParameterDomain("λ must be non-negative".into()));
        }
        if s.inducing.nrows() == 0 {
            return Err(VgpdsError::Shape("at least one inducing point is required".into()));
        }
        for b in &self.blocks {
            if b.rows.len() != b.data.rows() || b.rows.iter().any(|r| *r >= n) {
                return Err(VgpdsError::Shape("data block rows do not match its observations".into()));
            }
        }
        Ok(())
    }

    pub fn temporal(&self) -> &TemporalKernel {
        &self.temporal
    }

    pub fn prior(&self) -> &TemporalPrior {
        &self.prior
    }

    pub fn times(&self) -> &[f64] {
        self.prior.times()
    }

    pub fn groups(&self) -> &[usize] {
        self.prior.groups()
    }

    pub fn num_points(&self) -> usize {
        self.prior.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.ard.latent_dim()
    }

    pub fn num_inducing(&self) -> usize {
        self.state.inducing.nrows()
    }

    /// Replaces the temporal kernel and rebuilds `K_t`.
    pub fn set_temporal(&mut self, kernel: TemporalKernel) -> Result<()> {
        let prior = TemporalPrior::with_groups(&kernel, self.prior.times(), self.prior.groups())?;
        self.temporal = kernel;
        self.prior = prior;
        Ok(())
    }

    /// Implied posteriors for every latent dimension.
    pub fn posteriors(&self) -> Result<Vec<QPosterior>> {
        (0..self.latent_dim())
            .into_par_iter()
            .map(|q| {
                self.prior
                    .posterior(&self.state.mu_bar.column(q).into_owned(), &self.state.lambda.column(q).into_owned())
            })
            .collect()
    }

    /// Marginal moments of q(X).
    pub fn moments(&self) -> Result<MomentSet> {
        moments_from(&self.posteriors()?)
    }

    pub fn kl(&self) -> Result<f64> {
        self.prior.kl(&self.state.mu_bar, &self.state.lambda)
    }

    fn kmm(&self) -> Result<(DMatrix<f64>, JitteredCholesky)> {
        let z = &self.state.inducing;
        let mut k = self.ard.gram(z, z)?;
        let chol = linalg::cholesky_jittered(&k, self.ard.variance, "K_MM")?;
        for i in 0..k.nrows() {
            k[(i, i)] += chol.added;
        }
        Ok((k, chol))
    }

    pub fn evaluate_bound(&self) -> Result<BoundReport> {
        Ok(self.evaluate_impl(false)?.0)
    }

    pub fn bound_gradients(&self) -> Result<GradientRecord> {
        Ok(self.evaluate_impl(true)?.1.expect("gradients requested"))
    }

    pub fn evaluate_with_gradients(&self) -> Result<(BoundReport, GradientRecord)> {
        let (r, g) = self.evaluate_impl(true)?;
        Ok((r, g.expect("gradients requested")))
    }

    fn evaluate_impl(&self, want_grads: bool) -> Result<(BoundReport, Option<GradientRecord>)> {
        self.validate()?;
        let n = self.num_points();
        let qdim = self.latent_dim();
        let m = self.num_inducing();
        let posts = self.posteriors()?;
        let moments = moments_from(&posts)?;
        let kl: f64 = (0..qdim)
            .map(|q| self.prior.kl_dim(&self.state.mu_bar.column(q).into_owned(), &posts[q]))
            .sum();

        let (kmm, kchol) = self.kmm()?;

        let mut fhat = 0.0;
        let mut terms = BoundTerms { constant: 0.0, log_det: 0.0, data_fit: 0.0, trace: 0.0 };
        let mut g_mean = DMatrix::zeros(n, qdim);
        let mut g_var = DMatrix::zeros(n, qdim);
        let mut ard_variance = 0.0;
        let mut ard_weights = vec![0.0; qdim];
        let mut g_inducing = DMatrix::zeros(m, qdim);
        let mut g_kmm = DMatrix::zeros(m, m);
        let mut g_beta = 0.0;

        for block in &self.blocks {
            let sub = moments.rows(&block.rows);
            let ev = collapsed_block(&self.ard, &sub, &self.state.inducing, &kchol, self.beta, &block.data, want_grads)?;
            fhat += ev.value;
            terms.constant += ev.terms.constant;
            terms.log_det += ev.terms.log_det;
            terms.data_fit += ev.terms.data_fit;
            terms.trace += ev.terms.trace;
            if let Some(g) = ev.grads {
                for (i, &r) in block.rows.iter().enumerate() {
                    for q in 0..qdim {
                        g_mean[(r, q)] += g.g_mean[(i, q)];
                        g_var[(r, q)] += g.g_var[(i, q)];
                    }
                }
                ard_variance += g.ard_variance;
                for q in 0..qdim {
                    ard_weights[q] += g.ard_weights[q];
                }
                g_inducing += g.inducing;
                g_kmm += g.g_kmm;
                g_beta += g.beta;
            }
        }

        let bound = fhat - kl;
        if !bound.is_finite() {
            return Err(VgpdsError::NonFinite(format!("bound evaluated to {bound} (F̂={fhat}, KL={kl})")));
        }
        let report = BoundReport { bound, fhat, kl, terms };
        if !want_grads {
            return Ok((report, None));
        }

        // K_MM = σ²(K̂ + εI): every entry, jitter included, is linear in σ²
        ard_variance += linalg::frobenius_dot(&g_kmm, &kmm) / self.ard.variance;
        let z = &self.state.inducing;
        for a in 0..m {
            for b in 0..m {
                let c = g_kmm[(a, b)];
                if c == 0.0 || a == b {
                    continue;
                }
                let k = kmm[(a, b)];
                for q in 0..qdim {
                    let d = z[(a, q)] - z[(b, q)];
                    ard_weights[q] += c * (-0.5 * d * d * k);
                    let dz = -self.ard.weights[q] * d * k;
                    g_inducing[(a, q)] += c * dz;
                    g_inducing[(b, q)] -= c * dz;
                }
            }
        }

        let kt = self.prior.cov();
        let per_q: Vec<(DVector<f64>, DVector<f64>, DMatrix<f64>)> = (0..qdim)
            .into_par_iter()
            .map(|q| {
                let post = &posts[q];
                let mb = self.state.mu_bar.column(q).into_owned();
                let lam = self.state.lambda.column(q).into_owned();
                let gm = g_mean.column(q).into_owned();
                let gv = g_var.column(q).into_owned();
                let d_mu_bar = kt * (&gm - &mb);
                let s2 = post.cov.map(|v| v * v);
                let d_lambda = -(s2 * (&gv + 0.5 * &lam));
                // coefficient matrix of dK_t in dF_v
                let bk = &post.bhat * kt;
                let a = DMatrix::identity(n, n) - &bk;
                let mut a_scaled = a.clone();
                for j in 0..n {
                    a_scaled.column_mut(j).scale_mut(gv[j]);
                }
                let mut coef = &a_scaled * a.transpose();
                coef -= 0.5 * (&bk * &post.bhat + &mb * mb.transpose());
                coef += &gm * mb.transpose();
                (d_mu_bar, d_lambda, coef)
            })
            .collect();

        let mut d_mu_bar = DMatrix::zeros(n, qdim);
        let mut d_lambda = DMatrix::zeros(n, qdim);
        let mut coef = DMatrix::zeros(n, n);
        for (q, (dm, dl, c)) in per_q.into_iter().enumerate() {
            d_mu_bar.set_column(q, &dm);
            d_lambda.set_column(q, &dl);
            coef += c;
        }
        linalg::symmetrize(&mut coef);
        let temporal = (0..self.temporal.num_hyperparams())
            .map(|i| Ok(linalg::frobenius_dot(&coef, &self.prior.cov_grad(i)?)))
            .collect::<Result<Vec<f64>>>()?;

        let grads = GradientRecord {
            mu_bar: d_mu_bar,
            lambda: d_lambda,
            inducing: g_inducing,
            ard_variance,
            ard_weights,
            temporal,
            beta: g_beta,
            dfhat_dmu: g_mean,
            dfhat_ds: g_var,
        };
        Ok((report, Some(grads)))
    }
}

fn moments_from(posts: &[QPosterior]) -> Result<MomentSet> {
    let n = posts.first().map_or(0, |p| p.mean.len());
    let q = posts.len();
    let mean = DMatrix::from_fn(n, q, |i, j| posts[j].mean[i]);
    let var = DMatrix::from_fn(n, q, |i, j| posts[j].cov[(i, i)]);
    if var.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(VgpdsError::NonFinite("implied posterior variance is not positive".into()));
    }
    MomentSet::new(mean, var)
}

/// `P = K_MM + βΨ₂` expressed in the basis whitened by `K_MM = LLᵀ`:
/// `A = L⁻¹Ψ₂L⁻ᵀ` and `B = I + βA`, so that `P = L B Lᵀ`. Only `B`, whose
/// eigenvalues are at least 1, is ever inverted.
pub(crate) struct WhitenedSystem {
    l: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b_inv: DMatrix<f64>,
    pub logdet_b: f64,
}

impl WhitenedSystem {
    pub fn new(kchol: &JitteredCholesky, psi2: &DMatrix<f64>, beta: f64) -> Result<Self> {
        let l = kchol.chol.l();
        let lp = l.solve_lower_triangular(psi2).ok_or_else(|| VgpdsError::NotPositiveDefinite("K_MM".into()))?;
        let mut a = l
            .solve_lower_triangular(&lp.transpose())
            .ok_or_else(|| VgpdsError::NotPositiveDefinite("K_MM".into()))?;
        linalg::symmetrize(&mut a);
        let mut b = beta * &a;
        for i in 0..b.nrows() {
            b[(i, i)] += 1.0;
        }
        let bchol = linalg::cholesky(&b, "I + β L⁻¹Ψ₂L⁻ᵀ")?;
        let logdet_b = linalg::log_det(&bchol);
        let mut b_inv = bchol.inverse();
        linalg::symmetrize(&mut b_inv);
        Ok(WhitenedSystem { l, a, b_inv, logdet_b })
    }

    /// `L⁻¹ X`.
    pub fn whiten(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.l.solve_lower_triangular(x).expect("triangular factor has a positive diagonal")
    }

    /// `L⁻ᵀ X L⁻¹` for symmetric `X`.
    pub fn sandwich(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let lt = self.l.transpose();
        let left = lt.solve_upper_triangular(x).expect("triangular factor has a positive diagonal");
        let mut out = lt
            .solve_upper_triangular(&left.transpose())
            .expect("triangular factor has a positive diagonal")
            .transpose();
        linalg::symmetrize(&mut out);
        out
    }
}

/// F̂ for one block and the sensitivities of F̂ to everything it touches.
fn collapsed_block(
    ard: &ArdParams,
    moments: &MomentSet,
    z: &DMatrix<f64>,
    kchol: &JitteredCholesky,
    beta: f64,
    data: &DataTerm,
    want_grads: bool,
) -> Result<BlockEval> {
    let n = moments.len() as f64;
    let d = data.dim() as f64;
    let bundle = psi::psi_bundle(ard, moments, z)?;
    let ws = WhitenedSystem::new(kchol, &bundle.psi2, beta)?;
    // G = L⁻¹ Ψ₁ᵀ YYᵀ Ψ₁ L⁻ᵀ
    let c = ws.whiten(&bundle.psi1.transpose());
    let mut g = &c * data.apply(&c.transpose());
    linalg::symmetrize(&mut g);
    let tr_yy = data.trace();
    let tr_pe = linalg::trace_prod(&ws.b_inv, &g);
    let tr_a = ws.a.trace();

    let terms = BoundTerms {
        constant: 0.5 * n * d * (beta.ln() - LN_2PI),
        log_det: -0.5 * d * ws.logdet_b,
        data_fit: -0.5 * beta * tr_yy + 0.5 * beta * beta * tr_pe,
        trace: -0.5 * d * beta * bundle.psi0 + 0.5 * d * beta * tr_a,
    };
    let value = terms.constant + terms.log_det + terms.data_fit + terms.trace;
    if !want_grads {
        return Ok(BlockEval { value, terms, grads: None });
    }

    let m = ws.a.nrows();
    let bgb = &ws.b_inv * &g * &ws.b_inv;
    let i_minus = DMatrix::identity(m, m) - &ws.b_inv;
    let pinv = ws.sandwich(&ws.b_inv);
    let g1 = beta * beta * (data.apply(&bundle.psi1) * &pinv);
    let g2 = ws.sandwich(&(0.5 * d * beta * &i_minus - 0.5 * beta.powi(3) * &bgb));
    let g0 = -0.5 * d * beta;
    let g_kmm = ws.sandwich(&(0.5 * d * &i_minus - 0.5 * beta * beta * &bgb - 0.5 * d * beta * &ws.a));
    let ba = &ws.b_inv * &ws.a;
    let g_beta = 0.5 * n * d / beta - 0.5 * d * ba.trace() - 0.5 * tr_yy + beta * tr_pe
        - 0.5 * beta * beta * linalg::trace_prod(&ba, &(&ws.b_inv * &g))
        - 0.5 * d * bundle.psi0
        + 0.5 * d * tr_a;

    let pg = psi::psi_grads(ard, moments, z, g0, &g1, &g2)?;
    Ok(BlockEval {
        value,
        terms,
        grads: Some(BlockGrads {
            g_mean: pg.mean,
            g_var: pg.var,
            ard_variance: pg.variance,
            ard_weights: pg.weights,
            inducing: pg.inducing,
            g_kmm,
            beta: g_beta,
        }),
    })
}

fn column_variance_mean(y: &DMatrix<f64>) -> f64 {
    let n = y.nrows() as f64;
    let mut total = 0.0;
    for col in y.column_iter() {
        let mean = col.sum() / n;
        total += col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    }
    total / y.ncols() as f64
}

/// Top-Q principal components of the centred data, each scaled to unit
/// variance, with the matching singular values.
pub fn pca_init(y: &DMatrix<f64>, q: usize) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = y.nrows();
    let mut centred = y.clone();
    for mut col in centred.column_iter_mut() {
        let mean = col.sum() / n as f64;
        col.add_scalar_mut(-mean);
    }
    let svd = centred.svd(true, false);
    let u = svd.u.ok_or_else(|| VgpdsError::NonFinite("SVD failed".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|a, b| svd.singular_values[*b].total_cmp(&svd.singular_values[*a]));
    if order.len() < q {
        return Err(VgpdsError::Config(format!("data rank supports at most {} latent dimensions", order.len())));
    }
    let mut mu = DMatrix::zeros(n, q);
    let mut sing = Vec::with_capacity(q);
    for (j, &k) in order.iter().take(q).enumerate() {
        let col = u.column(k);
        let mean = col.sum() / n as f64;
        let sd = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
        let sd = if sd > 0.0 { sd } else { 1.0 };
        for i in 0..n {
            mu[(i, j)] = (col[i] - mean) / sd;
        }
        sing.push(svd.singular_values[k]);
    }
    Ok((mu, sing))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_data_term() {
        let p = precompute_data_term(&DMatrix::identity(4, 4)).unwrap();
        assert_eq!(p.outer, DMatrix::identity(4, 4));
        assert_eq!(p.trace, 4.0);
        assert!(p.factor.is_none());
    }

    #[test]
    fn factor_reproduces_outer_product() {
        let y = DMatrix::from_fn(3, 7, |i, j| ((i * 7 + j) as f64).sin());
        let p = precompute_data_term(&y).unwrap();
        let r = p.factor.unwrap();
        assert!(linalg::max_abs(&(&r * r.transpose() - &p.outer)) < 1e-12);
        assert!((p.trace - p.outer.trace()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_shapes_are_configuration_errors() {
        let y = DMatrix::from_fn(10, 2, |i, j| (i + j) as f64);
        let t: Vec<f64> = (1..=10).map(f64::from).collect();
        let cfg = InitConfig { latent_dim: 3, ..Default::default() };
        let err = VgpdsModel::initialize(&y, &t, &SequenceLayout::single(10), TemporalKernel::rbf(1.0, 2.0), &cfg);
        assert!(matches!(err, Err(VgpdsError::Config(_))));
        let y = DMatrix::from_fn(2, 4, |i, j| (i + j) as f64);
        let cfg = InitConfig { latent_dim: 1, ..Default::default() };
        let err = VgpdsModel::initialize(&y, &[1.0, 2.0], &SequenceLayout::single(2), TemporalKernel::rbf(1.0, 2.0), &cfg);
        assert!(matches!(err, Err(VgpdsError::Config(_))));
    }

    #[test]
    fn pca_init_has_unit_variance() {
        let y = DMatrix::from_fn(20, 5, |i, j| ((i as f64) * 0.3 + j as f64).cos() * (j + 1) as f64);
        let (mu, sing) = pca_init(&y, 2).unwrap();
        assert!(sing[0] >= sing[1]);
        for col in mu.column_iter() {
            let var = col.iter().map(|v| v * v).sum::<f64>() / 20.0;
            assert!((var - 1.0).abs() < 1e-10);
        }
    }
}
