use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Dataset;
use crate::empirical::{igse_loss, SteinmetzParams};
use crate::error::{Error, Result};
use crate::signal::{FluxWaveform, WAVEFORM_LEN};

pub const FREQ_RANGE: (f64, f64) = (20e3, 500e3);
pub const BM_RANGE: (f64, f64) = (0.010, 0.300);
pub const TEMP_RANGE: (f64, f64) = (25.0, 90.0);
pub const DUTY_RANGE: (f64, f64) = (0.2, 0.8);

/// Smallest multiplicative noise factor; keeps labels positive.
const MIN_NOISE_FACTOR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WaveShape {
    Sinusoid,
    Triangle,
    /// `duty` is the fraction of the period spent ramping (split evenly
    /// between the rising and falling edge); the rest is spent flat at ±Bm.
    Trapezoid { duty: f64 },
}

impl WaveShape {
    /// Value at phase `u ∈ [0, 1)` for unit amplitude.
    fn at(self, u: f64) -> f64 {
        match self {
            WaveShape::Sinusoid => (2.0 * std::f64::consts::PI * u).sin(),
            WaveShape::Triangle => {
                if u < 0.5 {
                    -1.0 + 4.0 * u
                } else {
                    3.0 - 4.0 * u
                }
            }
            WaveShape::Trapezoid { duty } => {
                let ramp = duty / 2.0;
                let flat = (1.0 - duty) / 2.0;
                if u < ramp {
                    -1.0 + 2.0 * u / ramp
                } else if u < ramp + flat {
                    1.0
                } else if u < 2.0 * ramp + flat {
                    1.0 - 2.0 * (u - ramp - flat) / ramp
                } else {
                    -1.0
                }
            }
        }
    }
}

/// One period of `shape` with amplitude `bm`, advanced by `phase` samples.
pub fn synth_waveform(shape: WaveShape, bm: f64, phase: usize) -> Vec<f64> {
    (0..WAVEFORM_LEN)
        .map(|n| bm * shape.at(((n + phase) % WAVEFORM_LEN) as f64 / WAVEFORM_LEN as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub shape: WaveShape,
    pub bm: f64,
    pub waveform: FluxWaveform,
}

fn log_uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    rng.gen_range(lo.ln()..hi.ln()).exp()
}

/// Draws `n` labeled samples. Frequency and amplitude are log-uniform,
/// temperature uniform, the shape family uniform over
/// sinusoid/triangle/trapezoid with a random whole-sample phase. Labels are
/// `igse_loss · max(1 + ε, 0.01)` with `ε ~ N(0, noise_rel)`.
pub fn synth_samples(n: usize, params: &SteinmetzParams, noise_rel: f64, seed: u64) -> Result<Vec<SynthSample>> {
    if n == 0 {
        return Err(Error::Config("synthetic dataset needs n >= 1".into()));
    }
    if !(noise_rel.is_finite() && noise_rel >= 0.0) {
        return Err(Error::Config(format!(
            "noise level must be finite and non-negative, got {noise_rel}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_rel).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let freq = log_uniform(&mut rng, FREQ_RANGE);
        let bm = log_uniform(&mut rng, BM_RANGE);
        let temp = rng.gen_range(TEMP_RANGE.0..TEMP_RANGE.1);
        let shape = match rng.gen_range(0..3) {
            0 => WaveShape::Sinusoid,
            1 => WaveShape::Triangle,
            _ => WaveShape::Trapezoid {
                duty: rng.gen_range(DUTY_RANGE.0..DUTY_RANGE.1),
            },
        };
        let phase = rng.gen_range(0..WAVEFORM_LEN);
        let eps: f64 = noise.sample(&mut rng);
        let unlabeled = FluxWaveform::new(synth_waveform(shape, bm, phase), freq, temp, None)?;
        let clean = igse_loss(params, &unlabeled)?;
        let waveform = unlabeled.with_loss(Some(clean * (1.0 + eps).max(MIN_NOISE_FACTOR)))?;
        out.push(SynthSample { shape, bm, waveform });
    }
    Ok(out)
}

pub fn synth_generate(n: usize, params: &SteinmetzParams, noise_rel: f64, seed: u64) -> Result<Dataset> {
    let samples = synth_samples(n, params, noise_rel, seed)?;
    Ok(Dataset::new(
        "synthetic",
        samples.into_iter().map(|s| s.waveform).collect(),
    ))
}
