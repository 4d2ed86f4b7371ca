//! Counter-addressed Gaussian perturbations.
//!
//! Every perturbation is a pure function of `(seed, stream_id, index)`: the
//! pair `(seed, stream_id)` is hashed into a ChaCha12 key, and perturbation
//! `index` of a `d`-dimensional stream occupies the `d` 64-bit words starting
//! at word `index * d`. Batches can therefore be generated in any order, on
//! any thread, and still reproduce the same draws.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::normal;

const KEY_DOMAIN: &[u8] = b"nncert/gaussian-stream/v1";

/// Maps a raw 64-bit word to the open interval (0, 1).
#[inline]
pub fn unit_open(word: u64) -> f64 {
    // 52 random bits, offset by half a step so 0 and 1 are unreachable.
    ((word >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64)
}

/// Derives a 256-bit generator key from a seed and a stream label.
pub fn stream_key(seed: u64, stream_id: &str) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(KEY_DOMAIN);
    hasher.update(seed.to_le_bytes());
    hasher.update((stream_id.len() as u64).to_le_bytes());
    hasher.update(stream_id.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    key
}

/// Independent N(0, σ²I_d) draws addressed by sample index.
#[derive(Debug, Clone)]
pub struct GaussianStream {
    key: [u8; 32],
    dim: usize,
    sigma: f64,
}

impl GaussianStream {
    pub fn new(seed: u64, stream_id: &str, dim: usize, sigma: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::param("d", "dimension must be at least 1"));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::param(
                "sigma",
                format!("must be positive, got {sigma}"),
            ));
        }
        Ok(Self {
            key: stream_key(seed, stream_id),
            dim,
            sigma,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Writes perturbations `start .. start + count` into `out`, row-major
    /// with `dim` columns. `out.len()` must equal `count * dim`.
    pub fn fill(&self, start: u64, out: &mut [f64]) {
        debug_assert_eq!(out.len() % self.dim, 0);
        let mut rng = ChaCha12Rng::from_seed(self.key);
        // Each 64-bit draw consumes two 32-bit words of the keystream.
        rng.set_word_pos(2 * u128::from(start) * self.dim as u128);
        for v in out.iter_mut() {
            *v = self.sigma * normal::inv_cdf_unchecked(unit_open(rng.next_u64()));
        }
    }

    /// Perturbation number `index` as a fresh vector.
    pub fn draw(&self, index: u64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.fill(index, &mut out);
        out
    }
}
