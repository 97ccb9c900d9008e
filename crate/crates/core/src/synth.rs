//! Deterministic synthetic head-state generators.
//!
//! Real key caches concentrate large magnitudes in a handful of fixed
//! channels; the planted-outlier generator reproduces that structure so the
//! suppression pipeline can be exercised without model activations.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matrix::HeadMatrix;

/// Base sample distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tail {
    Gauss,
    Laplace,
}

impl std::str::FromStr for Tail {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss" => Ok(Tail::Gauss),
            "laplace" => Ok(Tail::Laplace),
            other => Err(Error::InvalidConfig(format!(
                "unknown tail '{other}' (expected gauss or laplace)"
            ))),
        }
    }
}

/// Parameters for the planted-outlier generator.
#[derive(Debug, Clone)]
pub struct GenSpec {
    pub n_tokens: usize,
    pub head_dim: usize,
    /// Leading channels `0..outlier_channels` are scaled by `outlier_scale`.
    pub outlier_channels: usize,
    pub outlier_scale: f32,
    pub tail: Tail,
    pub seed: u64,
}

impl GenSpec {
    pub fn new(n_tokens: usize, head_dim: usize, seed: u64) -> Self {
        Self {
            n_tokens,
            head_dim,
            outlier_channels: 0,
            outlier_scale: 1.0,
            tail: Tail::Gauss,
            seed,
        }
    }

    pub fn with_outliers(mut self, channels: usize, scale: f32) -> Self {
        self.outlier_channels = channels;
        self.outlier_scale = scale;
        self
    }

    pub fn with_tail(mut self, tail: Tail) -> Self {
        self.tail = tail;
        self
    }
}

fn draw(rng: &mut ChaCha8Rng, tail: Tail) -> f32 {
    match tail {
        Tail::Gauss => rng.sample::<f32, _>(StandardNormal),
        Tail::Laplace => {
            // Inverse-CDF sampling, unit scale.
            let u: f64 = rng.gen_range(-0.5..0.5);
            let x = -u.signum() * (1.0 - 2.0 * u.abs()).ln();
            x as f32
        }
    }
}

/// Generates token states: i.i.d. tail samples with the designated leading
/// channels amplified. Byte-deterministic for a fixed spec.
pub fn generate(spec: &GenSpec) -> Result<HeadMatrix> {
    if spec.n_tokens == 0 || spec.head_dim == 0 {
        return Err(Error::InvalidConfig(
            "generator needs n_tokens >= 1 and head_dim >= 1".into(),
        ));
    }
    if spec.outlier_channels > spec.head_dim {
        return Err(Error::InvalidConfig(format!(
            "outlier_channels {} exceeds head_dim {}",
            spec.outlier_channels, spec.head_dim
        )));
    }
    if !spec.outlier_scale.is_finite() {
        return Err(Error::InvalidConfig("outlier_scale must be finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = Vec::with_capacity(spec.n_tokens * spec.head_dim);
    for _ in 0..spec.n_tokens {
        for c in 0..spec.head_dim {
            let mut v = draw(&mut rng, spec.tail);
            if c < spec.outlier_channels {
                v *= spec.outlier_scale;
            }
            data.push(v);
        }
    }
    HeadMatrix::from_vec(spec.n_tokens, spec.head_dim, data)
}

/// Plain i.i.d. standard-normal matrix.
pub fn gaussian_matrix(n_tokens: usize, head_dim: usize, seed: u64) -> HeadMatrix {
    generate(&GenSpec::new(n_tokens, head_dim, seed)).expect("nonzero dims")
}
