//! Monte-Carlo estimation of the Gaussian-smoothed embedding
//! g(x) = E[h(x + z)], z ~ N(0, σ²I), and the concentration radius of the
//! estimate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{CompensatedSum, EmbeddingVector, InputVector, NormBound};
use crate::error::{Error, Result};
use crate::models::{embed_checked, EmbeddingModel};
use crate::rng::GaussianStream;

pub const DEFAULT_BATCH_SIZE: usize = 1024;

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

/// Parameters of one smoothing run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub sigma: f64,
    pub n: u64,
    pub alpha: f64,
    pub seed: u64,
    /// Perturbations evaluated per streamed batch.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

impl SmoothingConfig {
    pub fn new(sigma: f64, n: u64, alpha: f64, seed: u64) -> Result<Self> {
        let cfg = Self {
            sigma,
            n,
            alpha,
            seed,
            batch_size: DEFAULT_BATCH_SIZE,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Result<Self> {
        self.batch_size = batch_size;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        check_sigma(self.sigma)?;
        check_n(self.n)?;
        check_alpha(self.alpha)?;
        if self.batch_size == 0 {
            return Err(Error::param("batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

pub(crate) fn check_sigma(sigma: f64) -> Result<()> {
    if sigma.is_finite() && sigma > 0.0 {
        Ok(())
    } else {
        Err(Error::param(
            "sigma",
            format!("must be positive and finite, got {sigma}"),
        ))
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::param(
            "alpha",
            format!("must lie in (0, 1), got {alpha}"),
        ))
    }
}

pub(crate) fn check_n(n: u64) -> Result<()> {
    if n >= 1 {
        Ok(())
    } else {
        Err(Error::param(
            "n",
            "Monte-Carlo sample count must be at least 1",
        ))
    }
}

/// Monte-Carlo estimate ĝ(x) with its high-probability L2 error.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedEstimate {
    pub g_hat: EmbeddingVector,
    pub n_used: u64,
    /// With probability at least 1 − α, ‖g(x) − ĝ(x)‖₂ ≤ epsilon.
    pub epsilon: f64,
}

/// √(8F² ln((k+1)/α) / (3n)): the L2 radius that contains g(x) − ĝ(x) with
/// probability at least 1 − α when ĝ averages n outputs of norm ≤ F in R^k.
pub fn chernoff_epsilon(bound: NormBound, k: usize, n: u64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    check_n(n)?;
    if k == 0 {
        return Err(Error::param("k", "embedding dimension must be at least 1"));
    }
    let f = bound.get();
    let log_term = ((k as f64 + 1.0) / alpha).ln();
    Ok((8.0 * f * f * log_term / (3.0 * n as f64)).sqrt())
}

/// `count` i.i.d. draws from N(0, σ²I_d), determined by `(seed, stream_id)`.
pub fn sample_gaussian(
    d: usize,
    sigma: f64,
    count: usize,
    seed: u64,
    stream_id: &str,
) -> Result<Vec<InputVector>> {
    if count == 0 {
        return Err(Error::param("count", "must be at least 1"));
    }
    let stream = GaussianStream::new(seed, stream_id, d, sigma)?;
    let mut flat = vec![0.0; d * count];
    stream.fill(0, &mut flat);
    flat.chunks_exact(d)
        .map(|row| InputVector::new(row.to_vec()))
        .collect()
}

fn batch_sum<M: EmbeddingModel + ?Sized>(
    model: &M,
    x: &[f64],
    stream: &GaussianStream,
    start: u64,
    len: usize,
) -> Result<Vec<CompensatedSum>> {
    let d = x.len();
    let k = model.output_dim();
    let mut noise = vec![0.0; len * d];
    stream.fill(start, &mut noise);
    let mut out = vec![0.0; k];
    let mut sums = vec![CompensatedSum::new(); k];
    for z in noise.chunks_exact_mut(d) {
        for (zi, xi) in z.iter_mut().zip(x) {
            *zi += xi;
        }
        embed_checked(model, z, &mut out)?;
        for (s, v) in sums.iter_mut().zip(&out) {
            s.add(*v);
        }
    }
    Ok(sums)
}

/// ĝ(x) = (1/n) Σ h(x + zᵢ).
///
/// Perturbations are generated and embedded in batches of `cfg.batch_size`;
/// batches may run on any worker, and their partial sums are folded in
/// ascending batch order so the result depends only on `(cfg, stream_id)`.
pub fn smooth_embed_mc<M: EmbeddingModel + ?Sized>(
    model: &M,
    x: &InputVector,
    cfg: &SmoothingConfig,
    stream_id: &str,
) -> Result<SmoothedEstimate> {
    cfg.validate()?;
    let d = model.input_dim();
    if x.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: x.dim(),
        });
    }
    let k = model.output_dim();
    let stream = GaussianStream::new(cfg.seed, stream_id, d, cfg.sigma)?;
    let batch = cfg.batch_size as u64;
    let batches = cfg.n.div_ceil(batch);

    let partials: Vec<Vec<CompensatedSum>> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let start = b * batch;
            let len = batch.min(cfg.n - start) as usize;
            batch_sum(model, x.as_slice(), &stream, start, len)
        })
        .collect::<Result<_>>()?;

    let mut totals = vec![CompensatedSum::new(); k];
    for part in &partials {
        for (t, p) in totals.iter_mut().zip(part) {
            t.merge(p);
        }
    }
    let n = cfg.n as f64;
    let mean: Vec<f64> = totals.iter().map(|t| t.value() / n).collect();
    let g_hat = crate::embedding::validate_norm(EmbeddingVector::new(mean)?, model.bound())?;
    let epsilon = chernoff_epsilon(model.bound(), k, cfg.n, cfg.alpha)?;
    Ok(SmoothedEstimate {
        g_hat,
        n_used: cfg.n,
        epsilon,
    })
}
