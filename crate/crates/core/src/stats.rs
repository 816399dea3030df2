//! Sample statistics and log-log slope fits.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Mean and standard error of the mean.
pub fn mean_stderr(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Root-sum-square of two standard errors.
pub fn combined_stderr(a: f64, b: f64) -> f64 {
    (a * a + b * b).sqrt()
}

/// Mean and standard error of the pairwise difference `a_i - b_i`.
pub fn paired(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    mean_stderr(&d)
}

/// Pass/fail record of one numerical check.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub estimate: f64,
    pub stderr: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Verdict {
    /// `|estimate| <= tolerance`.
    pub fn within(name: impl Into<String>, estimate: f64, stderr: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            estimate,
            stderr,
            tolerance,
            pass: estimate.abs() <= tolerance,
        }
    }
}

/// Least-squares fit of `log v = c + s log eps`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub stderr: f64,
    pub ci95: (f64, f64),
    pub points_used: usize,
    pub excluded: usize,
}

pub fn fit_loglog_slope(eps: &[f64], values: &[f64]) -> Result<SlopeFit> {
    if eps.len() != values.len() {
        return Err(Error::Fit("abscissae and values differ in length".into()));
    }
    let pts: Vec<(f64, f64)> = eps
        .iter()
        .zip(values)
        .filter(|(e, v)| **e > 0.0 && **v > 0.0 && e.is_finite() && v.is_finite())
        .map(|(e, v)| (e.ln(), v.ln()))
        .collect();
    let excluded = eps.len() - pts.len();
    if excluded > 0 {
        log::warn!("log-log fit: {excluded} non-positive point(s) excluded");
    }
    let k = pts.len();
    if k < 3 {
        return Err(Error::Fit(format!("need at least 3 positive points, have {k}")));
    }
    let kf = k as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / kf;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / kf;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::Fit("abscissae are all equal".into()));
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let dof = kf - 2.0;
    let stderr = if dof > 0.0 { (rss / dof / sxx).sqrt() } else { 0.0 };
    let tq = StudentsT::new(0.0, 1.0, dof.max(1.0))
        .map(|t| t.inverse_cdf(0.975))
        .unwrap_or(1.96);
    Ok(SlopeFit {
        slope,
        intercept,
        stderr,
        ci95: (slope - tq * stderr, slope + tq * stderr),
        points_used: k,
        excluded,
    })
}
