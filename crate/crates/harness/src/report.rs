//! The run report, as `key = value` text and JSON.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub residual: f64,
    pub change: Option<f64>,
    pub kappa: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDoc {
    pub grid: String,
    pub seed: u64,
    pub n_frames: u64,
    pub noise: bool,
    pub fingerprint: String,
    /// Ghost-image coefficients of arms 2, 3, 4.
    pub c_coeffs: [f64; 3],
    /// Per-pixel covariance between the three ghost images.
    pub image_cov: [[f64; 3]; 3],
    pub image_corr: [[f64; 3]; 3],
    pub snr_arm: [Option<f64>; 3],
    pub snr_sum: Option<f64>,
    pub snr_reduced: Option<f64>,
    /// Arm number (2..=4) with the highest measured SNR.
    pub best_arm: Option<u8>,
    pub reduced_over_best: Option<f64>,
    pub reduced_over_sum: Option<f64>,
    pub sum_over_best: Option<f64>,
    pub theoretical_sum_ratio: Option<f64>,
    pub mse_reduced: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trajectory: Vec<IterationRecord>,
}

fn num(v: f64) -> String {
    format!("{v:.6e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_else(|| "n/a".into())
}

fn row(m: &[[f64; 3]; 3]) -> String {
    m.iter()
        .map(|r| r.iter().map(|&v| num(v)).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join(" ; ")
}

impl ReportDoc {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("grid", self.grid.clone());
        put("seed", self.seed.to_string());
        put("n_frames", self.n_frames.to_string());
        put("noise", self.noise.to_string());
        put("fingerprint", self.fingerprint.clone());
        for (k, c) in self.c_coeffs.iter().enumerate() {
            put(&format!("c{}", k + 2), num(*c));
        }
        put("image_cov", row(&self.image_cov));
        put("image_corr", row(&self.image_corr));
        for (k, v) in self.snr_arm.iter().enumerate() {
            put(&format!("snr_arm{}", k + 2), opt(*v));
        }
        put("snr_sum", opt(self.snr_sum));
        put("snr_reduced", opt(self.snr_reduced));
        put(
            "best_arm",
            self.best_arm.map(|a| a.to_string()).unwrap_or_else(|| "n/a".into()),
        );
        put("reduced_over_best", opt(self.reduced_over_best));
        put("reduced_over_sum", opt(self.reduced_over_sum));
        put("sum_over_best", opt(self.sum_over_best));
        put("theoretical_sum_ratio", opt(self.theoretical_sum_ratio));
        put("mse_reduced", num(self.mse_reduced));
        put("iterations", self.iterations.to_string());
        put("converged", self.converged.to_string());
        s
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }
}
