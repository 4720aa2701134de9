//! Per-datapoint residuals of the latent systems and z-score outlier flags.
//!
//! A datapoint whose latent system leaves a large residual is fitted poorly
//! by the layer; the raw norms are exposed so callers can build their own
//! scoring on top.

use std::io::Write;

use crate::activation::Activation;
use crate::error::Result;
use crate::layer::Layer;
use crate::linalg::Matrix;

/// Default z-score threshold for [`flag_outliers`].
pub const DEFAULT_Z: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualReport {
    level: usize,
    norms: Vec<f64>,
    equations: usize,
}

impl ResidualReport {
    /// `equations` is the number of equations in each datapoint's system.
    pub fn new(level: usize, norms: Vec<f64>, equations: usize) -> Self {
        debug_assert!(norms.iter().all(|&r| r >= 0.0));
        Self {
            level,
            norms,
            equations,
        }
    }

    pub fn with_level(mut self, level: usize) -> Self {
        self.level = level;
        self
    }

    /// Level of the layer's outputs (2 = first weight layer above the code).
    pub fn level(&self) -> usize {
        self.level
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn equations(&self) -> usize {
        self.equations
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    pub fn total_squared(&self) -> f64 {
        self.norms.iter().map(|r| r * r).sum()
    }

    /// CSV with header `index,residual_norm,flagged`.
    pub fn write_csv<W: Write>(&self, flagged: &[usize], mut out: W) -> Result<()> {
        let mut marks = vec![false; self.norms.len()];
        for &i in flagged {
            if let Some(m) = marks.get_mut(i) {
                *m = true;
            }
        }
        writeln!(out, "index,residual_norm,flagged")?;
        for (i, (r, f)) in self.norms.iter().zip(marks).enumerate() {
            writeln!(out, "{i},{r:e},{}", f as u8)?;
        }
        Ok(())
    }
}

/// `‖layer_linear(h_n) − a⁻¹(t_n)‖` for every datapoint.
pub fn residual_report(
    layer: &Layer,
    level: usize,
    act: &Activation,
    latents: &Matrix,
    targets: &Matrix,
) -> Result<ResidualReport> {
    let norms = layer.linear_residuals(act, latents, targets)?;
    Ok(ResidualReport::new(level, norms, layer.out_len()))
}

/// Indices whose norm exceeds `mean + z·stddev` (population deviation).
pub fn flag_outliers(report: &ResidualReport, z: f64) -> Vec<usize> {
    let n = report.norms.len();
    if n < 2 {
        return Vec::new();
    }
    // A rounded mean of equal values can sit just below them.
    let first = report.norms[0];
    if report.norms.iter().all(|&r| r == first) {
        return Vec::new();
    }
    let mean = report.norms.iter().sum::<f64>() / n as f64;
    let var = report.norms.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
    let threshold = mean + z * var.sqrt();
    report
        .norms
        .iter()
        .enumerate()
        .filter(|(_, &r)| r > threshold)
        .map(|(i, _)| i)
        .collect()
}
