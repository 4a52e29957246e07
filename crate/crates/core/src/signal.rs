//! Frequency-domain and time-domain statistics of flux-density waveforms.
//!
//! Every waveform is one excitation period sampled at [`WAVEFORM_LEN`]
//! points. The spectrum keeps the one-sided bins `1..=N/2` (DC dropped,
//! rectangular window) and spectral entropy is normalized by `ln(n_bins)`
//! so that it lives in `[0, 1]`.

use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};

/// Samples per excitation period.
pub const WAVEFORM_LEN: usize = 1024;

/// One excitation sample: a single period of B(t) plus operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxWaveform {
    b: Vec<f64>,
    freq: f64,
    temp: f64,
    loss: Option<f64>,
}

impl FluxWaveform {
    /// Validates and wraps an already 1024-point waveform.
    pub fn new(b: Vec<f64>, freq: f64, temp: f64, loss: Option<f64>) -> Result<Self> {
        if b.len() != WAVEFORM_LEN {
            return Err(Error::InvalidWaveform(format!(
                "expected {WAVEFORM_LEN} samples, got {}",
                b.len()
            )));
        }
        if let Some(i) = b.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidWaveform(format!("sample {i} is not finite")));
        }
        if !(freq.is_finite() && freq > 0.0) {
            return Err(Error::InvalidWaveform(format!(
                "frequency must be finite and positive, got {freq}"
            )));
        }
        if !temp.is_finite() {
            return Err(Error::InvalidWaveform("temperature is not finite".into()));
        }
        if let Some(l) = loss {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::InvalidWaveform(format!(
                    "measured loss must be finite and positive, got {l}"
                )));
            }
        }
        Ok(Self { b, freq, temp, loss })
    }

    /// Builds a waveform from a period recorded at any sample count,
    /// linearly resampling it to 1024 points.
    pub fn resampled(raw: &[f64], freq: f64, temp: f64, loss: Option<f64>) -> Result<Self> {
        Self::new(resample_periodic(raw, WAVEFORM_LEN)?, freq, temp, loss)
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn freq(&self) -> f64 {
        self.freq
    }

    pub fn temp(&self) -> f64 {
        self.temp
    }

    pub fn loss(&self) -> Option<f64> {
        self.loss
    }

    /// Same operating point with the flux samples replaced.
    pub fn with_b(&self, b: Vec<f64>) -> Result<Self> {
        Self::new(b, self.freq, self.temp, self.loss)
    }

    pub fn with_loss(&self, loss: Option<f64>) -> Result<Self> {
        Self::new(self.b.clone(), self.freq, self.temp, loss)
    }
}

/// Linear interpolation of one period onto `target` equally spaced points.
///
/// The period wraps around: the segment after the last input sample
/// interpolates back towards the first one.
pub fn resample_periodic(raw: &[f64], target: usize) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::InvalidWaveform("empty waveform".into()));
    }
    if raw.len() == target {
        return Ok(raw.to_vec());
    }
    let m = raw.len();
    let ratio = m as f64 / target as f64;
    Ok((0..target)
        .map(|n| {
            let x = n as f64 * ratio;
            let i = x.floor() as usize;
            let frac = x - i as f64;
            let lo = raw[i % m];
            let hi = raw[(i + 1) % m];
            lo + frac * (hi - lo)
        })
        .collect())
}

/// One-sided power spectrum `P(f_k) = |S[k]|^2`, bins `k = 1..=N/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    power: Vec<f64>,
}

impl Spectrum {
    pub fn new(power: Vec<f64>) -> Result<Self> {
        if power.is_empty() {
            return Err(Error::Degenerate("spectrum has no bins".into()));
        }
        if let Some(p) = power.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::Domain(format!(
                "power values must be finite and non-negative, got {p}"
            )));
        }
        Ok(Self { power })
    }

    pub fn power(&self) -> &[f64] {
        &self.power
    }

    pub fn n_bins(&self) -> usize {
        self.power.len()
    }
}

/// Squared DFT magnitudes over all `N` bins (DC and negative frequencies
/// included).
pub fn two_sided_power(samples: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidWaveform(format!("sample {i} is not finite")));
    }
    let mut buf: Vec<Complex<f64>> = samples.iter().map(|&s| Complex::new(s, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(buf.len()).process(&mut buf);
    Ok(buf.iter().map(|c| c.norm_sqr()).collect())
}

pub fn power_spectrum(w: &FluxWaveform) -> Result<Spectrum> {
    power_spectrum_of(w.b())
}

/// One-sided, DC-free power spectrum of an arbitrary real sequence.
pub fn power_spectrum_of(samples: &[f64]) -> Result<Spectrum> {
    if samples.len() < 2 {
        return Err(Error::InvalidWaveform(
            "need at least two samples for a spectrum".into(),
        ));
    }
    let full = two_sided_power(samples)?;
    let half = samples.len() / 2;
    Spectrum::new(full[1..=half].to_vec())
}

/// Normalized spectral entropy `H / ln(n_bins)` in `[0, 1]`.
pub fn spectral_entropy(s: &Spectrum) -> Result<f64> {
    let raw = raw_spectral_entropy(s)?;
    if s.n_bins() == 1 {
        return Ok(0.0);
    }
    Ok((raw / (s.n_bins() as f64).ln()).clamp(0.0, 1.0))
}

/// Shannon entropy (natural log) of the normalized power distribution.
pub fn raw_spectral_entropy(s: &Spectrum) -> Result<f64> {
    let total: f64 = s.power().iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate(
            "spectral entropy undefined for an all-zero spectrum".into(),
        ));
    }
    let h = s
        .power()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| {
            let q = p / total;
            -q * q.ln()
        })
        .sum::<f64>();
    Ok(h.max(0.0))
}

/// Peak-to-peak flux swing `max(b) - min(b)`.
pub fn delta_b(w: &FluxWaveform) -> f64 {
    let (lo, hi) = w
        .b()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    hi - lo
}

/// dB/dt in T/s by second-order central differences on the periodic
/// extension, `dt = 1 / (freq * N)`.
pub fn db_dt(w: &FluxWaveform) -> Vec<f64> {
    let b = w.b();
    let n = b.len();
    let inv_two_dt = w.freq() * n as f64 / 2.0;
    (0..n)
        .map(|i| (b[(i + 1) % n] - b[(i + n - 1) % n]) * inv_two_dt)
        .collect()
}
