//! Image quality figures: SNR, MSE and the summation-ratio formula.

use nalgebra::{Matrix3, Vector3};

use crate::correlation::{CovarianceBlocks, ObjectImage, N_REFERENCE};
use crate::error::{Error, Result};

/// Reported SNR never exceeds this.
pub const SNR_CAP: f64 = 1e6;

const TRANSPARENT: f64 = 1.0 - 1e-12;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// SNR of an estimate of a (typically binary) object.
///
/// The estimate is fitted as `e = alpha t + beta` by least squares and mapped
/// back to truth units, `s = (e - beta) / alpha`. The signal is the mean of `s`
/// over fully transparent pixels of the truth, the noise the RMS of `s - t`
/// over all pixels. A constant estimate carries no information beyond the
/// truth's own contrast and scores `mean(t) / rms(t - mean(t))`.
pub fn snr(estimate: &[f64], truth: &ObjectImage) -> Result<f64> {
    let t = truth.values();
    if estimate.len() != t.len() {
        return Err(Error::mismatch("estimate", t.len(), estimate.len()));
    }
    if !estimate.iter().all(|v| v.is_finite()) {
        return Err(Error::Metric("estimate has non-finite pixels".into()));
    }
    let transparent: Vec<usize> = (0..t.len()).filter(|&i| t[i] >= TRANSPARENT).collect();
    if transparent.is_empty() {
        return Err(Error::Metric("truth has no transparent pixels".into()));
    }
    let mt = mean(t);
    let me = mean(estimate);
    let var_t: f64 = t.iter().map(|x| (x - mt).powi(2)).sum();
    let var_e: f64 = estimate.iter().map(|x| (x - me).powi(2)).sum();
    let scaled: Vec<f64> = if var_e == 0.0 {
        vec![mt; t.len()]
    } else if var_t == 0.0 {
        estimate.iter().map(|e| e - me + mt).collect()
    } else {
        let cov: f64 = t.iter().zip(estimate).map(|(a, b)| (a - mt) * (b - me)).sum();
        let alpha = cov / var_t;
        if alpha == 0.0 {
            vec![mt; t.len()]
        } else {
            let beta = me - alpha * mt;
            estimate.iter().map(|e| (e - beta) / alpha).collect()
        }
    };
    let signal = transparent.iter().map(|&i| scaled[i]).sum::<f64>() / transparent.len() as f64;
    let noise = (scaled.iter().zip(t).map(|(s, x)| (s - x).powi(2)).sum::<f64>() / t.len() as f64).sqrt();
    if noise == 0.0 {
        return Ok(SNR_CAP);
    }
    Ok((signal / noise).min(SNR_CAP))
}

/// Mean squared pixel difference.
pub fn mse(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::mismatch("estimate", truth.len(), estimate.len()));
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    Ok(mean(
        &estimate
            .iter()
            .zip(truth)
            .map(|(a, b)| (a - b).powi(2))
            .collect::<Vec<_>>(),
    ))
}

/// `(sum c)^2 / (1^T C 1) * C_jj / c_j^2`, the squared SNR of the unweighted
/// image sum relative to image `j`.
pub fn summation_snr_ratio(c: [f64; N_REFERENCE], cov: &Matrix3<f64>, j_star: usize) -> Result<f64> {
    if j_star >= N_REFERENCE {
        return Err(Error::invalid("j_star", "must index one of the three images"));
    }
    if c[j_star] == 0.0 {
        return Err(Error::Metric("reference image has zero coefficient".into()));
    }
    let ones = Vector3::repeat(1.0);
    let total = ones.dot(&(cov * ones));
    if !(total > 0.0) {
        return Err(Error::Metric("variance of the image sum is not positive".into()));
    }
    let sum: f64 = c.iter().sum();
    Ok(sum * sum / total * cov[(j_star, j_star)] / (c[j_star] * c[j_star]))
}

/// The image with the largest single-pixel `c_j^2 / C_jj`.
pub fn best_image(c: [f64; N_REFERENCE], cov: &Matrix3<f64>) -> usize {
    let score = |j: usize| {
        let v = cov[(j, j)];
        if v > 0.0 {
            c[j] * c[j] / v
        } else if c[j] != 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    };
    (0..N_REFERENCE)
        .max_by(|&a, &b| score(a).total_cmp(&score(b)))
        .unwrap_or(0)
}

/// `C_ij = tr(Sigma_ij) / N`, the per-pixel covariance between images.
pub fn image_covariance(cov: &CovarianceBlocks) -> Matrix3<f64> {
    match cov {
        CovarianceBlocks::Structured(s) => s.mean_pixel_covariance(),
        CovarianceBlocks::Dense { .. } => Matrix3::from_fn(|i, j| {
            let b = cov.block(i, j);
            let k = b.nrows().min(b.ncols());
            if k == 0 {
                0.0
            } else {
                (0..k).map(|d| b[(d, d)]).sum::<f64>() / k as f64
            }
        }),
    }
}

/// `C` rescaled to unit diagonal.
pub fn correlation_matrix(cov: &Matrix3<f64>) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| {
        let s = (cov[(i, i)] * cov[(j, j)]).sqrt();
        if s > 0.0 {
            cov[(i, j)] / s
        } else {
            0.0
        }
    })
}

fn ratio(a: f64, b: f64) -> Option<f64> {
    (b != 0.0 && (a / b).is_finite()).then(|| a / b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnrReport {
    pub c_coeffs: [f64; N_REFERENCE],
    pub image_cov: Matrix3<f64>,
    pub snr_per_arm: [f64; N_REFERENCE],
    pub snr_sum: f64,
    pub snr_reduced: f64,
    /// Index (0..3) of the arm with the highest measured SNR.
    pub best_arm: usize,
    pub reduced_over_best: Option<f64>,
    pub reduced_over_sum: Option<f64>,
    pub sum_over_best: Option<f64>,
    /// Summation-ratio formula at the best arm.
    pub theoretical_sum_ratio: Option<f64>,
}

impl SnrReport {
    pub fn new(
        c_coeffs: [f64; N_REFERENCE],
        image_cov: Matrix3<f64>,
        snr_per_arm: [f64; N_REFERENCE],
        snr_sum: f64,
        snr_reduced: f64,
    ) -> Self {
        let best_arm = (0..N_REFERENCE)
            .max_by(|&a, &b| snr_per_arm[a].total_cmp(&snr_per_arm[b]))
            .unwrap_or(0);
        let best = snr_per_arm[best_arm];
        SnrReport {
            c_coeffs,
            image_cov,
            snr_per_arm,
            snr_sum,
            snr_reduced,
            best_arm,
            reduced_over_best: ratio(snr_reduced, best),
            reduced_over_sum: ratio(snr_reduced, snr_sum),
            sum_over_best: ratio(snr_sum, best),
            theoretical_sum_ratio: summation_snr_ratio(c_coeffs, &image_cov, best_arm).ok(),
        }
    }
}
