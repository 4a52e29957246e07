//! Labeled waveform datasets: MagNet-style CSV directories, seeded
//! splitting, z-score statistics and a synthetic generator with iGSE labels.

mod magnet;
mod norm;
mod synth;

pub use magnet::{load_magnet_dir, write_magnet_dir, B_FIELD_FILE, FREQUENCY_FILE, LOSS_FILE, TEMPERATURE_FILE};
pub use norm::NormStats;
pub use synth::{synth_generate, synth_samples, synth_waveform, SynthSample, WaveShape};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::signal::FluxWaveform;

/// Samples of one material, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    material: String,
    samples: Vec<FluxWaveform>,
}

impl Dataset {
    pub fn new(material: impl Into<String>, samples: Vec<FluxWaveform>) -> Self {
        Self {
            material: material.into(),
            samples,
        }
    }

    pub fn material(&self) -> &str {
        &self.material
    }

    pub fn samples(&self) -> &[FluxWaveform] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Measured losses; fails on the first unlabeled sample.
    pub fn labels(&self) -> Result<Vec<f64>> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.loss()
                    .ok_or_else(|| Error::Dataset(format!("sample {i} has no loss label")))
            })
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            material: self.material.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

/// Default train/validation/test fractions.
pub const DEFAULT_SPLIT: [f64; 3] = [0.8, 0.1, 0.1];

/// Index assignment of [`split`]: seeded shuffle, then contiguous blocks of
/// `round(f_train·n)` and `round(f_val·n)` samples, the rest for test.
pub fn split_indices(n: usize, fractions: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    if fractions.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
        return Err(Error::Config(format!(
            "split fractions must be positive, got {fractions:?}"
        )));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must sum to 1, got {total}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    let parts = [order, val, test];
    for (name, part) in ["train", "validation", "test"].iter().zip(&parts) {
        if part.is_empty() {
            return Err(Error::Dataset(format!(
                "{name} split of {n} samples with fractions {fractions:?} is empty"
            )));
        }
    }
    Ok(parts)
}

/// Disjoint, exhaustive `(train, val, test)` partition.
pub fn split(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let [a, b, c] = split_indices(ds.len(), fractions, seed)?;
    Ok((ds.subset(&a), ds.subset(&b), ds.subset(&c)))
}
