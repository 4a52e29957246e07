use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-field z-score statistics plus the amplitude scale applied to flux
/// sequences, all computed on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub flux_scale: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl NormStats {
    /// Population mean/std of every column of `rows`; `flux_scale` is the
    /// std of `flux_amplitudes`. A constant field gets std 1 so that it
    /// maps to zero instead of dividing by zero.
    pub fn fit(rows: &[Vec<f64>], flux_amplitudes: &[f64]) -> Result<Self> {
        if rows.is_empty() || flux_amplitudes.is_empty() {
            return Err(Error::Dataset("normalization needs at least one sample".into()));
        }
        let width = rows[0].len();
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Dataset("feature rows differ in length".into()));
        }
        let guard = |s: f64| if s > 0.0 && s.is_finite() { s } else { 1.0 };
        let (mut mean, mut std) = (Vec::with_capacity(width), Vec::with_capacity(width));
        for c in 0..width {
            let (m, s) = mean_std(rows.iter().map(|r| r[c]));
            mean.push(m);
            std.push(guard(s));
        }
        let (_, s) = mean_std(flux_amplitudes.iter().copied());
        Ok(Self {
            mean,
            std,
            flux_scale: guard(s),
        })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    pub fn scale_flux(&self, b: &[f64]) -> Vec<f64> {
        b.iter().map(|v| v / self.flux_scale).collect()
    }
}
