//! Covariance functions.
//!
//! Two kinds of kernels live here:
//!
//! * [`TemporalKernel`]: scalar-time covariances for the latent trajectories
//!   (RBF, Matérn 3/2, periodic, white, bias and sums of those).
//! * [`ArdParams`]: the squared-exponential mapping kernel with one
//!   relevance weight per latent dimension.
//!
//! All kernels are stationary. Hyperparameters are stored in raw space; the
//! optimizer works with their logarithms through [`TemporalKernel::log_params`]
//! and friends.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VgpdsError};

/// Covariance function over scalar time stamps.
///
/// Serializes as `{"family":"rbf","variance":1.0,"lengthscale":2.0}`; sums as
/// `{"family":"sum","components":[...]}`. The periodic family additionally
/// carries `"period"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum TemporalKernel {
    Rbf { variance: f64, lengthscale: f64 },
    Matern32 { variance: f64, lengthscale: f64 },
    /// `σ² exp(-½ sin²(2π(t-t')/T) / l)`. The lengthscale divides the squared
    /// sine directly (not its square).
    Periodic { variance: f64, lengthscale: f64, period: f64 },
    /// Independent noise; contributes only on the diagonal of a symmetric Gram.
    White { variance: f64 },
    Bias { variance: f64 },
    Sum { components: Vec<TemporalKernel> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HyperKind {
    Variance,
    Lengthscale,
    Period,
}

/// Address of one temporal hyperparameter: the leaf component and which of its
/// parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HyperParam {
    pub component: usize,
    pub kind: HyperKind,
    /// True when the component is a white-noise term.
    pub white: bool,
}

/// Whether a Gram matrix is evaluated on one point set against itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pairing {
    Cross,
    Symmetric,
}

impl TemporalKernel {
    pub fn rbf(variance: f64, lengthscale: f64) -> Self {
        TemporalKernel::Rbf { variance, lengthscale }
    }

    pub fn matern32(variance: f64, lengthscale: f64) -> Self {
        TemporalKernel::Matern32 { variance, lengthscale }
    }

    pub fn periodic(variance: f64, lengthscale: f64, period: f64) -> Self {
        TemporalKernel::Periodic { variance, lengthscale, period }
    }

    pub fn white(variance: f64) -> Self {
        TemporalKernel::White { variance }
    }

    pub fn bias(variance: f64) -> Self {
        TemporalKernel::Bias { variance }
    }

    pub fn sum(components: Vec<TemporalKernel>) -> Self {
        TemporalKernel::Sum { components }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let k: TemporalKernel = serde_json::from_str(s)?;
        k.validate()?;
        Ok(k)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("kernel serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(VgpdsError::ParameterDomain(format!("{name} must be positive and finite, got {v}")))
            }
        };
        match self {
            TemporalKernel::Rbf { variance, lengthscale } | TemporalKernel::Matern32 { variance, lengthscale } => {
                positive("variance", *variance)?;
                positive("lengthscale", *lengthscale)
            }
            TemporalKernel::Periodic { variance, lengthscale, period } => {
                positive("variance", *variance)?;
                positive("lengthscale", *lengthscale)?;
                positive("period", *period)
            }
            TemporalKernel::White { variance } | TemporalKernel::Bias { variance } => positive("variance", *variance),
            TemporalKernel::Sum { components } => {
                if components.is_empty() {
                    return Err(VgpdsError::ParameterDomain("sum kernel needs at least one component".into()));
                }
                for c in components {
                    if matches!(c, TemporalKernel::Sum { .. }) {
                        return Err(VgpdsError::ParameterDomain("sum kernels cannot be nested".into()));
                    }
                    c.validate()?;
                }
                Ok(())
            }
        }
    }

    /// The non-sum components (the kernel itself unless it is a sum).
    pub fn leaves(&self) -> &[TemporalKernel] {
        match self {
            TemporalKernel::Sum { components } => components,
            other => std::slice::from_ref(other),
        }
    }

    fn leaves_mut(&mut self) -> &mut [TemporalKernel] {
        match self {
            TemporalKernel::Sum { components } => components,
            other => std::slice::from_mut(other),
        }
    }

    /// k(t, t) for every stationary family: the sum of component variances.
    pub fn diagonal_value(&self) -> f64 {
        self.leaves().iter().map(leaf_variance).sum()
    }

    pub fn has_white(&self) -> bool {
        self.leaves().iter().any(|l| matches!(l, TemporalKernel::White { .. }))
    }

    /// Cross-covariance between two time sets. White components contribute
    /// nothing here, since distinct evaluation points never share noise.
    pub fn gram(&self, t_a: &[f64], t_b: &[f64]) -> Result<DMatrix<f64>> {
        self.validate()?;
        Ok(self.fill(t_a, t_b, Pairing::Cross, leaf_value))
    }

    /// Covariance of a time set with itself, including white-noise terms.
    pub fn gram_sym(&self, t: &[f64]) -> Result<DMatrix<f64>> {
        self.validate()?;
        Ok(self.fill(t, t, Pairing::Symmetric, leaf_value))
    }

    /// Enumerates all hyperparameters in a fixed order.
    pub fn hyperparams(&self) -> Vec<HyperParam> {
        let mut out = Vec::new();
        for (component, leaf) in self.leaves().iter().enumerate() {
            let white = matches!(leaf, TemporalKernel::White { .. });
            for kind in leaf_kinds(leaf) {
                out.push(HyperParam { component, kind: *kind, white });
            }
        }
        out
    }

    pub fn num_hyperparams(&self) -> usize {
        self.leaves().iter().map(|l| leaf_kinds(l).len()).sum()
    }

    pub fn param(&self, index: usize) -> Result<f64> {
        let hp = self.lookup(index)?;
        Ok(leaf_param(&self.leaves()[hp.component], hp.kind))
    }

    pub fn set_param(&mut self, index: usize, value: f64) -> Result<()> {
        let hp = self.lookup(index)?;
        if !(value.is_finite() && value > 0.0) {
            return Err(VgpdsError::ParameterDomain(format!("hyperparameter {index} must be positive, got {value}")));
        }
        set_leaf_param(&mut self.leaves_mut()[hp.component], hp.kind, value);
        Ok(())
    }

    /// Raw hyperparameter values in [`hyperparams`](Self::hyperparams) order.
    pub fn params(&self) -> Vec<f64> {
        self.hyperparams()
            .iter()
            .map(|hp| leaf_param(&self.leaves()[hp.component], hp.kind))
            .collect()
    }

    pub fn log_params(&self) -> Vec<f64> {
        self.params().iter().map(|v| v.ln()).collect()
    }

    pub fn set_log_params(&mut self, log_values: &[f64]) -> Result<()> {
        if log_values.len() != self.num_hyperparams() {
            return Err(VgpdsError::Shape(format!(
                "expected {} temporal hyperparameters, got {}",
                self.num_hyperparams(),
                log_values.len()
            )));
        }
        for (i, lv) in log_values.iter().enumerate() {
            self.set_param(i, lv.exp())?;
        }
        Ok(())
    }

    fn lookup(&self, index: usize) -> Result<HyperParam> {
        let all = self.hyperparams();
        all.get(index)
            .copied()
            .ok_or(VgpdsError::UnknownHyperparameter { index, count: all.len() })
    }

    /// ∂K/∂θ for a cross Gram.
    pub fn gram_grad(&self, t_a: &[f64], t_b: &[f64], index: usize) -> Result<DMatrix<f64>> {
        self.grad_impl(t_a, t_b, Pairing::Cross, index)
    }

    /// ∂K/∂θ for a symmetric Gram (white terms included).
    pub fn gram_sym_grad(&self, t: &[f64], index: usize) -> Result<DMatrix<f64>> {
        self.grad_impl(t, t, Pairing::Symmetric, index)
    }

    fn grad_impl(&self, t_a: &[f64], t_b: &[f64], pairing: Pairing, index: usize) -> Result<DMatrix<f64>> {
        self.validate()?;
        let hp = self.lookup(index)?;
        let leaf = &self.leaves()[hp.component];
        let mut out = DMatrix::zeros(t_a.len(), t_b.len());
        fill_leaf(&mut out, leaf, t_a, t_b, pairing, |l, r, same| leaf_grad(l, r, same, hp.kind));
        Ok(out)
    }

    fn fill<F>(&self, t_a: &[f64], t_b: &[f64], pairing: Pairing, f: F) -> DMatrix<f64>
    where
        F: Fn(&TemporalKernel, f64, bool) -> f64,
    {
        let mut out = DMatrix::zeros(t_a.len(), t_b.len());
        for leaf in self.leaves() {
            fill_leaf(&mut out, leaf, t_a, t_b, pairing, &f);
        }
        out
    }
}

fn fill_leaf<F>(out: &mut DMatrix<f64>, leaf: &TemporalKernel, t_a: &[f64], t_b: &[f64], pairing: Pairing, f: F)
where
    F: Fn(&TemporalKernel, f64, bool) -> f64,
{
    for j in 0..t_b.len() {
        for i in 0..t_a.len() {
            let same = pairing == Pairing::Symmetric && i == j;
            out[(i, j)] += f(leaf, t_a[i] - t_b[j], same);
        }
    }
}

fn leaf_kinds(leaf: &TemporalKernel) -> &'static [HyperKind] {
    match leaf {
        TemporalKernel::Rbf { .. } | TemporalKernel::Matern32 { .. } => &[HyperKind::Variance, HyperKind::Lengthscale],
        TemporalKernel::Periodic { .. } => &[HyperKind::Variance, HyperKind::Lengthscale, HyperKind::Period],
        TemporalKernel::White { .. } | TemporalKernel::Bias { .. } => &[HyperKind::Variance],
        TemporalKernel::Sum { .. } => &[],
    }
}

fn leaf_variance(leaf: &TemporalKernel) -> f64 {
    match leaf {
        TemporalKernel::Rbf { variance, .. }
        | TemporalKernel::Matern32 { variance, .. }
        | TemporalKernel::Periodic { variance, .. }
        | TemporalKernel::White { variance }
        | TemporalKernel::Bias { variance } => *variance,
        TemporalKernel::Sum { components } => components.iter().map(leaf_variance).sum(),
    }
}

fn leaf_param(leaf: &TemporalKernel, kind: HyperKind) -> f64 {
    match (leaf, kind) {
        (_, HyperKind::Variance) => leaf_variance(leaf),
        (TemporalKernel::Rbf { lengthscale, .. }, HyperKind::Lengthscale)
        | (TemporalKernel::Matern32 { lengthscale, .. }, HyperKind::Lengthscale)
        | (TemporalKernel::Periodic { lengthscale, .. }, HyperKind::Lengthscale) => *lengthscale,
        (TemporalKernel::Periodic { period, .. }, HyperKind::Period) => *period,
        _ => unreachable!("hyperparameter kind not present on this family"),
    }
}

fn set_leaf_param(leaf: &mut TemporalKernel, kind: HyperKind, value: f64) {
    match (leaf, kind) {
        (TemporalKernel::Rbf { variance, .. }, HyperKind::Variance)
        | (TemporalKernel::Matern32 { variance, .. }, HyperKind::Variance)
        | (TemporalKernel::Periodic { variance, .. }, HyperKind::Variance)
        | (TemporalKernel::White { variance }, HyperKind::Variance)
        | (TemporalKernel::Bias { variance }, HyperKind::Variance) => *variance = value,
        (TemporalKernel::Rbf { lengthscale, .. }, HyperKind::Lengthscale)
        | (TemporalKernel::Matern32 { lengthscale, .. }, HyperKind::Lengthscale)
        | (TemporalKernel::Periodic { lengthscale, .. }, HyperKind::Lengthscale) => *lengthscale = value,
        (TemporalKernel::Periodic { period, .. }, HyperKind::Period) => *period = value,
        _ => unreachable!("hyperparameter kind not present on this family"),
    }
}

const SQRT3: f64 = 1.732_050_807_568_877_2;

fn leaf_value(leaf: &TemporalKernel, r: f64, same: bool) -> f64 {
    match *leaf {
        TemporalKernel::Rbf { variance, lengthscale } => variance * (-r * r / (2.0 * lengthscale * lengthscale)).exp(),
        TemporalKernel::Matern32 { variance, lengthscale } => {
            let a = SQRT3 * r.abs() / lengthscale;
            variance * (1.0 + a) * (-a).exp()
        }
        TemporalKernel::Periodic { variance, lengthscale, period } => {
            let s = (2.0 * std::f64::consts::PI * r / period).sin();
            variance * (-0.5 * s * s / lengthscale).exp()
        }
        TemporalKernel::White { variance } => {
            if same {
                variance
            } else {
                0.0
            }
        }
        TemporalKernel::Bias { variance } => variance,
        TemporalKernel::Sum { .. } => unreachable!("sums are expanded into leaves"),
    }
}

fn leaf_grad(leaf: &TemporalKernel, r: f64, same: bool, kind: HyperKind) -> f64 {
    match (leaf, kind) {
        (TemporalKernel::Rbf { lengthscale, .. }, HyperKind::Variance) => {
            (-r * r / (2.0 * lengthscale * lengthscale)).exp()
        }
        (TemporalKernel::Rbf { variance, lengthscale }, HyperKind::Lengthscale) => {
            let k = variance * (-r * r / (2.0 * lengthscale * lengthscale)).exp();
            k * r * r / lengthscale.powi(3)
        }
        (TemporalKernel::Matern32 { lengthscale, .. }, HyperKind::Variance) => {
            let a = SQRT3 * r.abs() / lengthscale;
            (1.0 + a) * (-a).exp()
        }
        (TemporalKernel::Matern32 { variance, lengthscale }, HyperKind::Lengthscale) => {
            let a = SQRT3 * r.abs() / lengthscale;
            variance * a * a * (-a).exp() / lengthscale
        }
        (TemporalKernel::Periodic { lengthscale, period, .. }, HyperKind::Variance) => {
            let s = (2.0 * std::f64::consts::PI * r / period).sin();
            (-0.5 * s * s / lengthscale).exp()
        }
        (TemporalKernel::Periodic { variance, lengthscale, period }, HyperKind::Lengthscale) => {
            let s = (2.0 * std::f64::consts::PI * r / period).sin();
            let k = variance * (-0.5 * s * s / lengthscale).exp();
            k * 0.5 * s * s / (lengthscale * lengthscale)
        }
        (TemporalKernel::Periodic { variance, lengthscale, period }, HyperKind::Period) => {
            let arg = 2.0 * std::f64::consts::PI * r / period;
            let (s, c) = arg.sin_cos();
            let k = variance * (-0.5 * s * s / lengthscale).exp();
            k * s * c * arg / (period * lengthscale)
        }
        (TemporalKernel::White { .. }, HyperKind::Variance) => {
            if same {
                1.0
            } else {
                0.0
            }
        }
        (TemporalKernel::Bias { .. }, HyperKind::Variance) => 1.0,
        _ => unreachable!("hyperparameter kind not present on this family"),
    }
}

/// Parameters of the ARD squared-exponential mapping kernel
/// `σ² exp(-½ Σ_q w_q (x_q - x'_q)²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArdParams {
    pub variance: f64,
    pub weights: Vec<f64>,
}

impl ArdParams {
    pub fn new(variance: f64, weights: Vec<f64>) -> Result<Self> {
        let p = ArdParams { variance, weights };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.variance.is_finite() && self.variance > 0.0) {
            return Err(VgpdsError::ParameterDomain(format!("ARD variance must be positive, got {}", self.variance)));
        }
        if let Some(w) = self.weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(VgpdsError::ParameterDomain(format!("ARD weights must be non-negative, got {w}")));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.weights.len()
    }

    fn check_cols(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.weights.len() {
            return Err(VgpdsError::Shape(format!(
                "points have {} columns but the kernel has {} weights",
                x.ncols(),
                self.weights.len()
            )));
        }
        Ok(())
    }

    /// Row-wise point sets: `x_a` is n_a×Q, `x_b` is n_b×Q.
    pub fn gram(&self, x_a: &DMatrix<f64>, x_b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.validate()?;
        self.check_cols(x_a)?;
        self.check_cols(x_b)?;
        Ok(DMatrix::from_fn(x_a.nrows(), x_b.nrows(), |i, j| {
            let mut d2 = 0.0;
            for (q, w) in self.weights.iter().enumerate() {
                let d = x_a[(i, q)] - x_b[(j, q)];
                d2 += w * d * d;
            }
            self.variance * (-0.5 * d2).exp()
        }))
    }

    /// ∂K/∂σ².
    pub fn gram_grad_variance(&self, x_a: &DMatrix<f64>, x_b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.gram(x_a, x_b)? / self.variance)
    }

    /// ∂K/∂w_q.
    pub fn gram_grad_weight(&self, x_a: &DMatrix<f64>, x_b: &DMatrix<f64>, q: usize) -> Result<DMatrix<f64>> {
        if q >= self.weights.len() {
            return Err(VgpdsError::UnknownHyperparameter { index: q, count: self.weights.len() });
        }
        let k = self.gram(x_a, x_b)?;
        Ok(DMatrix::from_fn(k.nrows(), k.ncols(), |i, j| {
            let d = x_a[(i, q)] - x_b[(j, q)];
            -0.5 * d * d * k[(i, j)]
        }))
    }

    pub fn log_params(&self) -> Vec<f64> {
        std::iter::once(self.variance.ln()).chain(self.weights.iter().map(|w| w.ln())).collect()
    }

    pub fn set_log_params(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.weights.len() + 1 {
            return Err(VgpdsError::Shape("ARD log-parameter length".into()));
        }
        self.variance = v[0].exp();
        for (w, lv) in self.weights.iter_mut().zip(&v[1..]) {
            *w = lv.exp();
        }
        self.validate()
    }
}
