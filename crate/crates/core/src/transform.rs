//! Smoothing calibration and the Walsh-Hadamard rotation.
//!
//! Keys are divided channel-wise by a calibrated factor and rotated by an
//! orthonormal Hadamard matrix; queries receive the inverse scaling and the
//! same rotation, so query-key scores are unchanged in exact arithmetic.

use crate::error::{Error, Result};
use crate::matrix::HeadMatrix;

pub const DEFAULT_EPSILON_FLOOR: f32 = 1e-6;

/// Tokens pooled by default during smoothing calibration (256 samples of
/// 512 tokens each).
pub const DEFAULT_CALIBRATION_TOKEN_BUDGET: usize = 256 * 512;

const MAX_HADAMARD_LOG2: u32 = 16;

/// Parameters for calibration and the rotation.
#[derive(Debug, Clone)]
pub struct TransformConfig {
    pub head_dim: usize,
    pub epsilon_floor: f32,
    pub calibration_token_budget: usize,
}

impl TransformConfig {
    pub fn new(head_dim: usize) -> Self {
        Self {
            head_dim,
            epsilon_floor: DEFAULT_EPSILON_FLOOR,
            calibration_token_budget: DEFAULT_CALIBRATION_TOKEN_BUDGET,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.head_dim.is_power_of_two() {
            return Err(Error::NotPowerOfTwo(self.head_dim));
        }
        if !(self.epsilon_floor > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon_floor must be positive, got {}",
                self.epsilon_floor
            )));
        }
        Ok(())
    }
}

/// Per-channel positive scale factors applied to queries and (inverted) keys.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingFactors {
    lambda: Vec<f32>,
    epsilon_floor: f32,
}

impl SmoothingFactors {
    /// Wraps precomputed factors, enforcing positivity and finiteness.
    pub fn from_lambda(lambda: Vec<f32>, epsilon_floor: f32) -> Result<Self> {
        if !(epsilon_floor > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon_floor must be positive, got {epsilon_floor}"
            )));
        }
        for (i, &v) in lambda.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { row: 0, col: i });
            }
            if v < epsilon_floor {
                return Err(Error::InvalidConfig(format!(
                    "lambda[{i}] = {v} is below the floor {epsilon_floor}"
                )));
            }
        }
        Ok(Self {
            lambda,
            epsilon_floor,
        })
    }

    /// All-ones factors: smoothing becomes the identity.
    pub fn identity(head_dim: usize) -> Self {
        Self {
            lambda: vec![1.0; head_dim],
            epsilon_floor: DEFAULT_EPSILON_FLOOR,
        }
    }

    pub fn lambda(&self) -> &[f32] {
        &self.lambda
    }

    pub fn epsilon_floor(&self) -> f32 {
        self.epsilon_floor
    }

    pub fn head_dim(&self) -> usize {
        self.lambda.len()
    }
}

/// The orthonormal Hadamard matrix of size `2^k`, built by the recursive
/// doubling construction with a `1/sqrt(2)` factor per level.
pub fn walsh_hadamard_matrix(k: u32) -> Result<HeadMatrix> {
    if k > MAX_HADAMARD_LOG2 {
        return Err(Error::HadamardTooLarge(k));
    }
    let n = 1usize << k;
    let mut data = vec![0.0f32; n * n];
    data[0] = 1.0;
    let mut size = 1;
    while size < n {
        let scale = std::f32::consts::FRAC_1_SQRT_2;
        for r in 0..size {
            for c in 0..size {
                let v = data[r * n + c] * scale;
                data[r * n + c] = v;
                data[r * n + c + size] = v;
                data[(r + size) * n + c] = v;
                data[(r + size) * n + c + size] = -v;
            }
        }
        size *= 2;
    }
    Ok(HeadMatrix::from_vec_unchecked(n, n, data))
}

/// In-place fast Walsh-Hadamard transform of one row, orthonormal scaling.
pub(crate) fn fwht_row(row: &mut [f32]) {
    let n = row.len();
    debug_assert!(n.is_power_of_two());
    let mut h = 1;
    while h < n {
        for start in (0..n).step_by(h * 2) {
            for i in start..start + h {
                let a = row[i];
                let b = row[i + h];
                row[i] = a + b;
                row[i + h] = a - b;
            }
        }
        h *= 2;
    }
    let scale = 1.0 / (n as f32).sqrt();
    for v in row.iter_mut() {
        *v *= scale;
    }
}

/// Applies the orthonormal Hadamard rotation to every row of `x` via the
/// butterfly transform, `O(N D log D)`.
pub fn hadamard_apply(x: &HeadMatrix) -> Result<HeadMatrix> {
    let d = x.cols();
    if !d.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(d));
    }
    if (d.trailing_zeros()) > MAX_HADAMARD_LOG2 {
        return Err(Error::HadamardTooLarge(d.trailing_zeros()));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        fwht_row(out.row_mut(r));
    }
    Ok(out)
}

/// Per-channel scale factors from pooled calibration tokens:
/// `lambda[i] = sqrt(max_t |samples[t, i]|)`, floored for degenerate channels.
///
/// At most `cfg.calibration_token_budget` leading rows are pooled.
pub fn calibrate_smoothing(
    samples: &HeadMatrix,
    cfg: &TransformConfig,
) -> Result<SmoothingFactors> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    if samples.cols() != cfg.head_dim {
        return Err(Error::ShapeMismatch(format!(
            "calibration samples have {} columns, config head_dim is {}",
            samples.cols(),
            cfg.head_dim
        )));
    }
    let budget = if cfg.calibration_token_budget == 0 {
        samples.rows()
    } else {
        cfg.calibration_token_budget.min(samples.rows())
    };
    let d = samples.cols();
    let mut channel_max = vec![0.0f32; d];
    for row in samples.iter_rows().take(budget) {
        for (m, &v) in channel_max.iter_mut().zip(row) {
            let a = v.abs();
            if a > *m {
                *m = a;
            }
        }
    }
    let lambda = channel_max
        .into_iter()
        .map(|m| m.sqrt().max(cfg.epsilon_floor))
        .collect();
    SmoothingFactors::from_lambda(lambda, cfg.epsilon_floor)
}

fn check_transform_shape(x: &HeadMatrix, s: &SmoothingFactors) -> Result<()> {
    if x.cols() != s.head_dim() {
        return Err(Error::ShapeMismatch(format!(
            "matrix has {} columns, smoothing factors have {}",
            x.cols(),
            s.head_dim()
        )));
    }
    if !x.cols().is_power_of_two() {
        return Err(Error::NotPowerOfTwo(x.cols()));
    }
    Ok(())
}

/// Channel-wise rescale without the rotation; `invert` divides.
pub(crate) fn scale_columns(x: &HeadMatrix, lambda: &[f32], invert: bool) -> HeadMatrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (v, &l) in out.row_mut(r).iter_mut().zip(lambda) {
            if invert {
                *v /= l;
            } else {
                *v *= l;
            }
        }
    }
    out
}

/// Key-side transform: divide each channel by its factor, then rotate.
pub fn transform_keys(k: &HeadMatrix, s: &SmoothingFactors) -> Result<HeadMatrix> {
    check_transform_shape(k, s)?;
    let mut out = k.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        for (v, &l) in row.iter_mut().zip(s.lambda()) {
            *v /= l;
        }
        fwht_row(row);
    }
    Ok(out)
}

/// Query-side transform: multiply each channel by its factor, then rotate.
pub fn transform_query(q: &HeadMatrix, s: &SmoothingFactors) -> Result<HeadMatrix> {
    check_transform_shape(q, s)?;
    let mut out = q.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        for (v, &l) in row.iter_mut().zip(s.lambda()) {
            *v *= l;
        }
        fwht_row(row);
    }
    Ok(out)
}
