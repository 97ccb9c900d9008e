//! Distribution diagnostics: outlier metrics, kurtosis, the per-row
//! mean-square identity under the rotation, and the transform ablation.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::HeadMatrix;
use crate::transform::{
    calibrate_smoothing, hadamard_apply, scale_columns, transform_keys, transform_query,
    TransformConfig,
};
use crate::vq::{decode, encode, kmeans_train, quantization_mse, subvectors_of, VQConfig};

/// Channel and tail statistics of a head-state matrix.
#[derive(Debug, Clone, Serialize)]
pub struct DistributionReport {
    /// Per-channel max of absolute values.
    pub per_channel_max: Vec<f32>,
    /// Per-channel 99th percentile of absolute values (nearest rank).
    pub per_channel_p99: Vec<f32>,
    /// Global max-abs divided by global RMS.
    pub global_outlier_ratio: f64,
    /// Population excess kurtosis over all entries.
    pub excess_kurtosis: f64,
    /// Max over rows of the relative gap between the rotated row's mean
    /// square and the raw row's squared norm over D. Near zero because the
    /// rotation is orthonormal.
    pub row_ms_error: f64,
}

fn excess_kurtosis(data: &[f32]) -> Result<f64> {
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let mut m2 = 0.0f64;
    let mut m4 = 0.0f64;
    for &v in data {
        let d = f64::from(v) - mean;
        let d2 = d * d;
        m2 += d2;
        m4 += d2 * d2;
    }
    m2 /= n;
    m4 /= n;
    if m2 == 0.0 {
        return Err(Error::DegenerateInput(
            "constant input: kurtosis undefined".into(),
        ));
    }
    Ok(m4 / (m2 * m2) - 3.0)
}

fn outlier_ratio(data: &[f32]) -> Result<f64> {
    let n = data.len() as f64;
    let max_abs = data.iter().fold(0.0f64, |a, &v| a.max(f64::from(v.abs())));
    let rms = (data.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / n).sqrt();
    if rms == 0.0 {
        return Err(Error::DegenerateInput(
            "all-zero input: outlier ratio undefined".into(),
        ));
    }
    Ok(max_abs / rms)
}

/// Computes all fields of [`DistributionReport`]. Needs at least two rows
/// and a power-of-two column count (for the rotation identity).
pub fn distribution_report(k: &HeadMatrix) -> Result<DistributionReport> {
    if k.rows() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "distribution report needs N >= 2 rows, got {}",
            k.rows()
        )));
    }
    let d = k.cols();
    let n = k.rows();

    let mut per_channel_max = vec![0.0f32; d];
    let mut columns_abs: Vec<Vec<f32>> = vec![Vec::with_capacity(n); d];
    for row in k.iter_rows() {
        for (c, &v) in row.iter().enumerate() {
            let a = v.abs();
            if a > per_channel_max[c] {
                per_channel_max[c] = a;
            }
            columns_abs[c].push(a);
        }
    }
    let p99_idx = ((0.99 * n as f64).ceil() as usize).max(1) - 1;
    let per_channel_p99 = columns_abs
        .into_iter()
        .map(|mut col| {
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            col[p99_idx]
        })
        .collect();

    let rotated = hadamard_apply(k)?;
    let mut row_ms_error = 0.0f64;
    for r in 0..n {
        let target: f64 = k.row(r).iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / d as f64;
        let ms: f64 =
            rotated.row(r).iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / d as f64;
        let err = if target > 0.0 {
            (ms - target).abs() / target
        } else {
            ms
        };
        if err > row_ms_error {
            row_ms_error = err;
        }
    }

    Ok(DistributionReport {
        per_channel_max,
        per_channel_p99,
        global_outlier_ratio: outlier_ratio(k.data())?,
        excess_kurtosis: excess_kurtosis(k.data())?,
        row_ms_error,
    })
}

/// Tail statistics before and after the rotation. For heavy-tailed inputs
/// (excess kurtosis above 1) both measures are expected to drop; the numbers
/// are reported rather than enforced so real-data deviations stay visible.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RotationStats {
    pub kurtosis_before: f64,
    pub kurtosis_after: f64,
    pub outlier_ratio_before: f64,
    pub outlier_ratio_after: f64,
}

pub fn lemma1_check(k: &HeadMatrix) -> Result<RotationStats> {
    let rotated = hadamard_apply(k)?;
    Ok(RotationStats {
        kurtosis_before: excess_kurtosis(k.data())?,
        kurtosis_after: excess_kurtosis(rotated.data())?,
        outlier_ratio_before: outlier_ratio(k.data())?,
        outlier_ratio_after: outlier_ratio(rotated.data())?,
    })
}

/// Transform composition applied before codebook training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformMode {
    None,
    Smooth,
    Hadamard,
    HadamardThenSmooth,
    SmoothThenHadamard,
}

impl TransformMode {
    pub const ALL: [TransformMode; 5] = [
        TransformMode::None,
        TransformMode::Smooth,
        TransformMode::Hadamard,
        TransformMode::HadamardThenSmooth,
        TransformMode::SmoothThenHadamard,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            TransformMode::None => "none",
            TransformMode::Smooth => "s",
            TransformMode::Hadamard => "h",
            TransformMode::HadamardThenSmooth => "hs",
            TransformMode::SmoothThenHadamard => "sh",
        }
    }
}

/// Key quantization MSE and relative score error for one transform mode.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AblationOutcome {
    pub mse: f64,
    /// Frobenius-relative error of approximate vs exact scores.
    pub score_error: f64,
}

/// Keys and queries mapped into the same space under `mode`, so that
/// `q_t · k_t^T == q · k^T` in exact arithmetic.
pub(crate) fn paired_transform(
    keys: &HeadMatrix,
    queries: &HeadMatrix,
    mode: TransformMode,
) -> Result<(HeadMatrix, HeadMatrix)> {
    let cfg = TransformConfig::new(keys.cols());
    match mode {
        TransformMode::None => Ok((keys.clone(), queries.clone())),
        TransformMode::Smooth => {
            let s = calibrate_smoothing(keys, &cfg)?;
            Ok((
                scale_columns(keys, s.lambda(), true),
                scale_columns(queries, s.lambda(), false),
            ))
        }
        TransformMode::Hadamard => Ok((hadamard_apply(keys)?, hadamard_apply(queries)?)),
        TransformMode::SmoothThenHadamard => {
            let s = calibrate_smoothing(keys, &cfg)?;
            Ok((transform_keys(keys, &s)?, transform_query(queries, &s)?))
        }
        TransformMode::HadamardThenSmooth => {
            let rotated_k = hadamard_apply(keys)?;
            let rotated_q = hadamard_apply(queries)?;
            let s = calibrate_smoothing(&rotated_k, &cfg)?;
            Ok((
                scale_columns(&rotated_k, s.lambda(), true),
                scale_columns(&rotated_q, s.lambda(), false),
            ))
        }
    }
}

/// Trains a key codebook on the transformed keys (fixed seed), then measures
/// the key reconstruction MSE and the error of approximate attention scores
/// against the exact full-precision scores.
pub fn transform_ablation(
    keys: &HeadMatrix,
    queries: &HeadMatrix,
    cfg: VQConfig,
    mode: TransformMode,
    seed: u64,
) -> Result<AblationOutcome> {
    if keys.cols() != cfg.head_dim || queries.cols() != cfg.head_dim {
        return Err(Error::ShapeMismatch(format!(
            "keys {}x{}, queries {}x{}, config head_dim {}",
            keys.rows(),
            keys.cols(),
            queries.rows(),
            queries.cols(),
            cfg.head_dim
        )));
    }
    let (k_t, q_t) = paired_transform(keys, queries, mode)?;
    let book = kmeans_train(&subvectors_of(&k_t, cfg.sub_dim)?, cfg, 30, seed)?;
    let mse = quantization_mse(&k_t, &book)?;

    let decoded = decode(&encode(&k_t, &book)?, &book)?;
    let approx = q_t.matmul_transpose(&decoded)?;
    let exact = queries.matmul_transpose(keys)?;
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (a, e) in approx.data().iter().zip(exact.data()) {
        let diff = f64::from(*a) - f64::from(*e);
        num += diff * diff;
        den += f64::from(*e) * f64::from(*e);
    }
    let score_error = if den > 0.0 {
        (num / den).sqrt()
    } else {
        num.sqrt()
    };
    Ok(AblationOutcome { mse, score_error })
}
