//! Expectations of the ARD kernel under a factorized Gaussian q(X).
//!
//! With marginal moments `m_nq`, `v_nq` and inducing inputs `z_m`:
//!
//! ```text
//! Ψ₀ = N σ²
//! Ψ₁[n,m]  = σ² Π_q (w_q v_nq + 1)^-½ exp(-½ Σ_q w_q (m_nq - z_mq)² / (w_q v_nq + 1))
//! Ψ₂[m,m'] = Σ_n σ⁴ Π_q (2 w_q v_nq + 1)^-½
//!            exp(-¼ Σ_q w_q (z_mq - z_m'q)² - Σ_q w_q (m_nq - z̄_q)² / (2 w_q v_nq + 1))
//! ```
//!
//! where `z̄ = (z_m + z_m') / 2`. Gradients are returned as vector-Jacobian
//! products: the caller supplies the sensitivities of its objective to Ψ₀, Ψ₁
//! and Ψ₂, and gets back the sensitivities to the moments, kernel
//! parameters and inducing inputs.

use nalgebra::DMatrix;

use crate::error::{Result, VgpdsError};
use crate::kernels::ArdParams;

/// Marginal means and variances of q(X), both N×Q.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSet {
    pub mean: DMatrix<f64>,
    pub var: DMatrix<f64>,
}

impl MomentSet {
    pub fn new(mean: DMatrix<f64>, var: DMatrix<f64>) -> Result<Self> {
        if mean.shape() != var.shape() {
            return Err(VgpdsError::Shape("moment means and variances differ in shape".into()));
        }
        if var.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(VgpdsError::ParameterDomain("moment variances must be strictly positive".into()));
        }
        Ok(MomentSet { mean, var })
    }

    pub fn len(&self) -> usize {
        self.mean.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.nrows() == 0
    }

    pub fn latent_dim(&self) -> usize {
        self.mean.ncols()
    }

    pub fn rows(&self, idx: &[usize]) -> MomentSet {
        MomentSet {
            mean: crate::linalg::select_rows(&self.mean, idx),
            var: crate::linalg::select_rows(&self.var, idx),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PsiBundle {
    pub psi0: f64,
    /// N×M.
    pub psi1: DMatrix<f64>,
    /// M×M.
    pub psi2: DMatrix<f64>,
}

/// Test-time statistics. `psi1` is M×N*, the transpose orientation of the
/// training Ψ₁, so that `E(F*) = Bᵀ Ψ₁*`.
#[derive(Debug, Clone)]
pub struct PsiStar {
    pub psi0: f64,
    pub psi1: DMatrix<f64>,
    pub psi2: DMatrix<f64>,
}

/// Gradients of `g0·Ψ₀ + ⟨G1,Ψ₁⟩ + ⟨G2,Ψ₂⟩`.
#[derive(Debug, Clone)]
pub struct PsiGrads {
    pub mean: DMatrix<f64>,
    pub var: DMatrix<f64>,
    pub variance: f64,
    pub weights: Vec<f64>,
    pub inducing: DMatrix<f64>,
}

fn check(params: &ArdParams, moments: &MomentSet, z: &DMatrix<f64>) -> Result<()> {
    params.validate()?;
    let q = params.latent_dim();
    if moments.latent_dim() != q || z.ncols() != q {
        return Err(VgpdsError::Shape(format!(
            "latent dimension mismatch: kernel {q}, moments {}, inducing {}",
            moments.latent_dim(),
            z.ncols()
        )));
    }
    Ok(())
}

pub fn psi0(params: &ArdParams, moments: &MomentSet) -> f64 {
    moments.len() as f64 * params.variance
}

pub fn psi1(params: &ArdParams, moments: &MomentSet, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check(params, moments, z)?;
    let (n, qdim) = moments.mean.shape();
    let m = z.nrows();
    let w = &params.weights;
    let mut out = DMatrix::zeros(n, m);
    for i in 0..n {
        let mut log_pref = 0.0;
        for q in 0..qdim {
            log_pref -= 0.5 * (w[q] * moments.var[(i, q)] + 1.0).ln();
        }
        for j in 0..m {
            let mut e = log_pref;
            for q in 0..qdim {
                let a = w[q] * moments.var[(i, q)] + 1.0;
                let d = moments.mean[(i, q)] - z[(j, q)];
                e -= 0.5 * w[q] * d * d / a;
            }
            out[(i, j)] = params.variance * e.exp();
        }
    }
    Ok(out)
}

/// Contribution of one latent point to Ψ₂, summed over the given rows.
fn psi2_rows(params: &ArdParams, moments: &MomentSet, z: &DMatrix<f64>, rows: impl Iterator<Item = usize>) -> DMatrix<f64> {
    let qdim = moments.latent_dim();
    let m = z.nrows();
    let w = &params.weights;
    let s4 = params.variance * params.variance;
    let mut out = DMatrix::zeros(m, m);
    // exp(-¼ Σ w Δ²) does not depend on n
    let base = DMatrix::from_fn(m, m, |a, b| {
        let mut e = 0.0;
        for q in 0..qdim {
            let d = z[(a, q)] - z[(b, q)];
            e -= 0.25 * w[q] * d * d;
        }
        e
    });
    for i in rows {
        let mut log_pref = 0.0;
        for q in 0..qdim {
            log_pref -= 0.5 * (2.0 * w[q] * moments.var[(i, q)] + 1.0).ln();
        }
        for a in 0..m {
            for b in a..m {
                let mut e = base[(a, b)] + log_pref;
                for q in 0..qdim {
                    let bq = 2.0 * w[q] * moments.var[(i, q)] + 1.0;
                    let c = moments.mean[(i, q)] - 0.5 * (z[(a, q)] + z[(b, q)]);
                    e -= w[q] * c * c / bq;
                }
                let v = s4 * e.exp();
                out[(a, b)] += v;
                if a != b {
                    out[(b, a)] += v;
                }
            }
        }
    }
    out
}

pub fn psi2(params: &ArdParams, moments: &MomentSet, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check(params, moments, z)?;
    Ok(psi2_rows(params, moments, z, 0..moments.len()))
}

/// Ψ₂ for a single row (used for per-point predictive covariances).
pub fn psi2_single(params: &ArdParams, moments: &MomentSet, z: &DMatrix<f64>, row: usize) -> Result<DMatrix<f64>> {
    check(params, moments, z)?;
    Ok(psi2_rows(params, moments, z, std::iter::once(row)))
}

pub fn psi_bundle(params: &ArdParams, moments: &MomentSet, z: &DMatrix<f64>) -> Result<PsiBundle> {
    Ok(PsiBundle { psi0: psi0(params, moments), psi1: psi1(params, moments, z)?, psi2: psi2(params, moments, z)? })
}

pub fn psi_star(params: &ArdParams, test_moments: &MomentSet, z: &DMatrix<f64>) -> Result<PsiStar> {
    Ok(PsiStar {
        psi0: psi0(params, test_moments),
        psi1: psi1(params, test_moments, z)?.transpose(),
        psi2: psi2(params, test_moments, z)?,
    })
}

/// Vector-Jacobian product of the three statistics.
pub fn psi_grads(
    params: &ArdParams,
    moments: &MomentSet,
    z: &DMatrix<f64>,
    g0: f64,
    g1: &DMatrix<f64>,
    g2: &DMatrix<f64>,
) -> Result<PsiGrads> {
    check(params, moments, z)?;
    let (n, qdim) = moments.mean.shape();
    let m = z.nrows();
    if g1.shape() != (n, m) || g2.shape() != (m, m) {
        return Err(VgpdsError::Shape("sensitivity matrices do not match Ψ₁/Ψ₂".into()));
    }
    let w = &params.weights;
    let s2 = params.variance;
    let mut out = PsiGrads {
        mean: DMatrix::zeros(n, qdim),
        var: DMatrix::zeros(n, qdim),
        variance: g0 * n as f64,
        weights: vec![0.0; qdim],
        inducing: DMatrix::zeros(m, qdim),
    };

    // Ψ₁
    let p1 = psi1(params, moments, z)?;
    for i in 0..n {
        for j in 0..m {
            let c = g1[(i, j)] * p1[(i, j)];
            if c == 0.0 {
                continue;
            }
            out.variance += c / s2;
            for q in 0..qdim {
                let a = w[q] * moments.var[(i, q)] + 1.0;
                let d = moments.mean[(i, q)] - z[(j, q)];
                let dm = -w[q] * d / a;
                out.mean[(i, q)] += c * dm;
                out.inducing[(j, q)] -= c * dm;
                out.var[(i, q)] += c * (-0.5 * w[q] / a + 0.5 * w[q] * w[q] * d * d / (a * a));
                out.weights[q] += c * (-0.5 * moments.var[(i, q)] / a - 0.5 * d * d / (a * a));
            }
        }
    }

    // Ψ₂: symmetric contraction, so pair (a,b) and (b,a) together
    let s4 = s2 * s2;
    let gs = DMatrix::from_fn(m, m, |a, b| if a == b { g2[(a, a)] } else { g2[(a, b)] + g2[(b, a)] });
    if gs.iter().any(|v| *v != 0.0) {
        for i in 0..n {
            let mut log_pref = 0.0;
            for q in 0..qdim {
                log_pref -= 0.5 * (2.0 * w[q] * moments.var[(i, q)] + 1.0).ln();
            }
            for a in 0..m {
                for b in a..m {
                    let g = gs[(a, b)];
                    if g == 0.0 {
                        continue;
                    }
                    let mut e = log_pref;
                    for q in 0..qdim {
                        let bq = 2.0 * w[q] * moments.var[(i, q)] + 1.0;
                        let dz = z[(a, q)] - z[(b, q)];
                        let c = moments.mean[(i, q)] - 0.5 * (z[(a, q)] + z[(b, q)]);
                        e -= 0.25 * w[q] * dz * dz + w[q] * c * c / bq;
                    }
                    let c = g * s4 * e.exp();
                    out.variance += 2.0 * c / s2;
                    for q in 0..qdim {
                        let v = moments.var[(i, q)];
                        let bq = 2.0 * w[q] * v + 1.0;
                        let dz = z[(a, q)] - z[(b, q)];
                        let e_q = moments.mean[(i, q)] - 0.5 * (z[(a, q)] + z[(b, q)]);
                        out.mean[(i, q)] += c * (-2.0 * w[q] * e_q / bq);
                        out.var[(i, q)] += c * (-w[q] / bq + 2.0 * w[q] * w[q] * e_q * e_q / (bq * bq));
                        out.weights[q] += c * (-v / bq - 0.25 * dz * dz - e_q * e_q / (bq * bq));
                        out.inducing[(a, q)] += c * (-0.5 * w[q] * dz + w[q] * e_q / bq);
                        out.inducing[(b, q)] += c * (0.5 * w[q] * dz + w[q] * e_q / bq);
                    }
                }
            }
        }
    }
    Ok(out)
}
