//! Empirical core-loss models and the spectral-entropy switch between them.
//!
//! Near-sinusoidal waveforms (entropy at or below the threshold) use the
//! Steinmetz power law `k f^a Bm^b`; everything else uses the iGSE time
//! integral with the coefficient `ki` derived from `(k, a, b)`.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::signal::{db_dt, delta_b, power_spectrum, spectral_entropy, FluxWaveform};

/// Default entropy threshold between the Steinmetz and iGSE branches.
pub const DEFAULT_H_TH: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteinmetzParams {
    k: f64,
    a: f64,
    b: f64,
    ki: f64,
}

impl SteinmetzParams {
    pub fn new(k: f64, a: f64, b: f64) -> Result<Self> {
        let ki = igse_coefficient(k, a, b)?;
        Ok(Self { k, a, b, ki })
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn ki(&self) -> f64 {
        self.ki
    }

    /// Recomputes `ki` from `(k, a, b)` and checks it against the stored value.
    pub fn verify(&self) -> Result<()> {
        let fresh = igse_coefficient(self.k, self.a, self.b)?;
        if (fresh - self.ki).abs() > 1e-12 * fresh.abs() {
            return Err(Error::Domain(format!(
                "stored ki {} disagrees with recomputed {}",
                self.ki, fresh
            )));
        }
        Ok(())
    }
}

/// `∫₀^{2π} |cos θ|^a dθ = 2√π Γ((a+1)/2) / Γ(a/2 + 1)`.
fn abs_cos_power_integral(a: f64) -> f64 {
    2.0 * PI.sqrt() * (ln_gamma((a + 1.0) / 2.0) - ln_gamma(a / 2.0 + 1.0)).exp()
}

/// iGSE coefficient making the time integral agree with the power law on
/// pure sinusoids: `ki = k / ((2π)^(a-1) ∫|cos θ|^a dθ 2^(b-a))`.
pub fn igse_coefficient(k: f64, a: f64, b: f64) -> Result<f64> {
    if !(k.is_finite() && k > 0.0) {
        return Err(Error::Domain(format!("k must be positive, got {k}")));
    }
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::Domain("exponents must be finite".into()));
    }
    if a <= -1.0 {
        return Err(Error::Domain(format!(
            "frequency exponent must exceed -1, got {a}"
        )));
    }
    let denom = (2.0 * PI).powf(a - 1.0) * abs_cos_power_integral(a) * 2f64.powf(b - a);
    let ki = k / denom;
    if !(ki.is_finite() && ki > 0.0) {
        return Err(Error::Domain(format!("ki is not representable for a={a}, b={b}")));
    }
    Ok(ki)
}

pub fn steinmetz_loss(p: &SteinmetzParams, freq: f64, bm: f64) -> Result<f64> {
    if !(freq > 0.0) || !(bm > 0.0) {
        return Err(Error::Domain(format!(
            "frequency and flux amplitude must be positive, got f={freq}, Bm={bm}"
        )));
    }
    Ok(p.k * freq.powf(p.a) * bm.powf(p.b))
}

/// Time-averaged iGSE loss over one period, trapezoidal rule with periodic
/// closure (which reduces to the sample mean of the integrand).
pub fn igse_loss(p: &SteinmetzParams, w: &FluxWaveform) -> Result<f64> {
    let swing = delta_b(w);
    if !(swing > 0.0) {
        return Err(Error::Domain("iGSE needs a non-zero flux swing".into()));
    }
    let swing_term = swing.powf(p.b - p.a);
    let slopes = db_dt(w);
    let n = slopes.len() as f64;
    let mean = slopes.iter().map(|d| d.abs().powf(p.a)).sum::<f64>() / n;
    Ok(p.ki * mean * swing_term)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Branch {
    Steinmetz,
    Igse,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Branch::Steinmetz => f.write_str("STEINMETZ"),
            Branch::Igse => f.write_str("IGSE"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelChoice {
    pub branch: Branch,
    pub entropy: f64,
    pub threshold: f64,
}

impl ModelChoice {
    /// Ties go to the Steinmetz branch.
    pub fn from_entropy(entropy: f64, threshold: f64) -> Self {
        let branch = if entropy <= threshold {
            Branch::Steinmetz
        } else {
            Branch::Igse
        };
        Self {
            branch,
            entropy,
            threshold,
        }
    }
}

fn check_threshold(h_th: f64) -> Result<()> {
    if h_th > 0.0 && h_th < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "entropy threshold must lie in (0, 1), got {h_th}"
        )))
    }
}

pub fn classify_waveform(w: &FluxWaveform, h_th: f64) -> Result<ModelChoice> {
    check_threshold(h_th)?;
    let h = spectral_entropy(&power_spectrum(w)?)?;
    Ok(ModelChoice::from_entropy(h, h_th))
}

/// Empirical prior for one waveform. The Steinmetz branch takes `Bm` as
/// half the peak-to-peak swing.
pub fn empirical_predict(
    p: &SteinmetzParams,
    w: &FluxWaveform,
    h_th: f64,
) -> Result<(f64, ModelChoice)> {
    let choice = classify_waveform(w, h_th)?;
    let loss = match choice.branch {
        Branch::Steinmetz => steinmetz_loss(p, w.freq(), delta_b(w) / 2.0)?,
        Branch::Igse => igse_loss(p, w)?,
    };
    Ok((loss, choice))
}

/// One measured operating point for coefficient fitting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint {
    pub freq: f64,
    pub bm: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteinmetzFit {
    pub params: SteinmetzParams,
    /// Root-mean-square residual of the log-linear regression.
    pub log_rms_residual: f64,
}

/// Ordinary least squares on `ln P = ln k + a ln f + b ln Bm`.
pub fn fit_steinmetz(samples: &[LossPoint]) -> Result<SteinmetzFit> {
    if samples.len() < 3 {
        return Err(Error::Fit(format!(
            "need at least 3 samples to fit 3 coefficients, got {}",
            samples.len()
        )));
    }
    for (i, s) in samples.iter().enumerate() {
        if !(s.freq > 0.0 && s.bm > 0.0 && s.loss > 0.0)
            || !(s.freq.is_finite() && s.bm.is_finite() && s.loss.is_finite())
        {
            return Err(Error::Domain(format!(
                "sample {i}: frequency, flux amplitude and loss must be positive and finite"
            )));
        }
    }
    let n = samples.len() as f64;
    let xs: Vec<(f64, f64, f64)> = samples
        .iter()
        .map(|s| (s.freq.ln(), s.bm.ln(), s.loss.ln()))
        .collect();
    let (m1, m2, my) = xs.iter().fold((0.0, 0.0, 0.0), |acc, x| {
        (acc.0 + x.0 / n, acc.1 + x.1 / n, acc.2 + x.2 / n)
    });
    let (mut s11, mut s12, mut s22, mut s1y, mut s2y) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(x1, x2, y) in &xs {
        let (d1, d2, dy) = (x1 - m1, x2 - m2, y - my);
        s11 += d1 * d1;
        s12 += d1 * d2;
        s22 += d2 * d2;
        s1y += d1 * dy;
        s2y += d2 * dy;
    }
    let tiny = 1e-12 * n;
    if s11 <= tiny {
        return Err(Error::Fit(
            "rank-deficient design: frequency does not vary".into(),
        ));
    }
    if s22 <= tiny {
        return Err(Error::Fit(
            "rank-deficient design: flux amplitude does not vary".into(),
        ));
    }
    let det = s11 * s22 - s12 * s12;
    if det <= 1e-10 * s11 * s22 {
        return Err(Error::Fit(
            "rank-deficient design: ln(frequency) and ln(flux amplitude) are collinear".into(),
        ));
    }
    let a = (s22 * s1y - s12 * s2y) / det;
    let b = (s11 * s2y - s12 * s1y) / det;
    let ln_k = my - a * m1 - b * m2;
    let params = SteinmetzParams::new(ln_k.exp(), a, b)?;
    let sse: f64 = xs
        .iter()
        .map(|&(x1, x2, y)| {
            let r = y - (ln_k + a * x1 + b * x2);
            r * r
        })
        .sum();
    Ok(SteinmetzFit {
        params,
        log_rms_residual: (sse / n).sqrt(),
    })
}

/// On-disk form of fitted coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteinmetzRecord {
    pub material: String,
    pub k: f64,
    pub a: f64,
    pub b: f64,
    pub ki: f64,
    pub fit_residual: Option<f64>,
}

impl SteinmetzRecord {
    pub fn new(material: &str, params: &SteinmetzParams, fit_residual: Option<f64>) -> Self {
        Self {
            material: material.to_string(),
            k: params.k,
            a: params.a,
            b: params.b,
            ki: params.ki,
            fit_residual,
        }
    }

    /// Rebuilds the parameters, rejecting a `ki` inconsistent with `(k, a, b)`.
    pub fn params(&self) -> Result<SteinmetzParams> {
        let p = SteinmetzParams {
            k: self.k,
            a: self.a,
            b: self.b,
            ki: self.ki,
        };
        p.verify()?;
        Ok(p)
    }

    pub fn to_text(&self) -> String {
        let body = toml::to_string(self).expect("plain record always serializes");
        format!("# Steinmetz / iGSE coefficients (SI units)\n{body}")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
