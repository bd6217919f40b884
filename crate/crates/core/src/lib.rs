//! Variational Gaussian process dynamical systems.
//!
//! A GP-LVM whose latent points follow a temporal Gaussian process, trained by
//! maximizing an analytic variational lower bound with the latent space
//! marginalized out. The crate covers:
//!
//! * [`kernels`]: temporal covariances and the ARD mapping kernel,
//! * [`temporal_prior`]: block-diagonal `K_t` and the KL term,
//! * [`psi`]: kernel expectations under q(X),
//! * [`bound`]: the lower bound and its gradients,
//! * [`optimizer`]: L-BFGS and scaled-conjugate-gradient training,
//! * [`predictor`]: forecasting and missing-dimension reconstruction,
//! * [`harness`]: datasets, synthetic data, baselines, metrics and checkpoints.

pub mod bound;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod linalg;
pub mod optimizer;
pub mod predictor;
pub mod psi;
pub mod temporal_prior;

pub use bound::{BoundReport, DataBlock, DataTerm, GradientRecord, InitConfig, VariationalState, VgpdsModel};
pub use error::{Result, VgpdsError};
pub use kernels::{ArdParams, TemporalKernel};
pub use temporal_prior::{SequenceLayout, TemporalPrior};
