//! Ancestral sampling from the generative model, for tests and demos.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, VgpdsError};
use crate::harness::dataset::TimeSeriesDataset;
use crate::kernels::{ArdParams, TemporalKernel};
use crate::linalg;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub seed: u64,
    /// Length of each independent sequence; N is their sum.
    pub seq_lengths: Vec<usize>,
    /// Output dimension D.
    pub dim: usize,
    /// Temporal kernel of every latent dimension; Q comes from `mapping`.
    pub temporal: TemporalKernel,
    pub mapping: ArdParams,
    /// Noise precision; `f64::INFINITY` gives noiseless outputs.
    pub beta: f64,
    /// Spacing of the time grid within a sequence (stamps are `step, 2·step, …`).
    pub time_step: f64,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub dataset: TimeSeriesDataset,
    /// Sampled latent points, N×Q.
    pub latents: DMatrix<f64>,
    /// Noiseless outputs F, N×D.
    pub noiseless: DMatrix<f64>,
}

fn normals(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

/// Draws latents from the temporal prior, outputs from the mapping GP given the
/// latents, then adds Gaussian noise of precision β.
pub fn synth_generate(config: &SynthConfig) -> Result<SynthData> {
    config.temporal.validate()?;
    config.mapping.validate()?;
    if config.seq_lengths.is_empty() || config.seq_lengths.contains(&0) || config.dim == 0 {
        return Err(VgpdsError::Config("sequence lengths and output dimension must be positive".into()));
    }
    if !(config.beta > 0.0) || !(config.time_step.is_finite() && config.time_step > 0.0) {
        return Err(VgpdsError::Config("β and the time step must be positive".into()));
    }
    let q = config.mapping.latent_dim();
    let n: usize = config.seq_lengths.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut latents = DMatrix::zeros(n, q);
    let mut times = Vec::with_capacity(n);
    let mut seq = Vec::with_capacity(n);
    let mut start = 0;
    for (s, &len) in config.seq_lengths.iter().enumerate() {
        let t: Vec<f64> = (1..=len).map(|i| i as f64 * config.time_step).collect();
        let k = config.temporal.gram_sym(&t)?;
        let chol = linalg::cholesky_jittered(&k, config.temporal.diagonal_value(), "temporal covariance")?;
        let x = chol.chol.l() * normals(&mut rng, len, q);
        latents.rows_mut(start, len).copy_from(&x);
        times.extend(t);
        seq.extend(std::iter::repeat_n(s as i64, len));
        start += len;
    }

    let kf = config.mapping.gram(&latents, &latents)?;
    let chol = linalg::cholesky_jittered(&kf, config.mapping.variance, "mapping covariance")?;
    let noiseless = chol.chol.l() * normals(&mut rng, n, config.dim);
    let y = if config.beta.is_infinite() {
        noiseless.clone()
    } else {
        &noiseless + normals(&mut rng, n, config.dim) / config.beta.sqrt()
    };
    let dataset = TimeSeriesDataset::new(y, Some(times), Some(seq), None)?;
    Ok(SynthData { dataset, latents, noiseless })
}
