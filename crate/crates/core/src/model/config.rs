use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::CnnConfig;
use crate::signal::WAVEFORM_LEN;

/// Architecture, prior switch and training hyperparameters. Every field
/// has a default, so a partial TOML file only needs the overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of the autoencoder latent map and of the attention stack.
    pub latent_dim: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub cnn: CnnConfig,
    /// LSTM hidden size per direction.
    pub lstm_hidden: usize,
    pub mlp_hidden: [usize; 2],
    /// Strided-mean factor applied to the latent map along time.
    pub downsample: usize,
    /// Spectral-entropy threshold of the empirical switch.
    pub h_th: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Head output is `ln P` (exponentiated) when true, softplus otherwise.
    pub log_output: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 48,
            heads: 4,
            ffn_hidden: 96,
            cnn: CnnConfig::default(),
            lstm_hidden: 32,
            mlp_hidden: [64, 32],
            downsample: 8,
            h_th: crate::empirical::DEFAULT_H_TH,
            lambda1: 1.0,
            lambda2: 0.1,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 16,
            epochs: 30,
            seed: 42,
            log_output: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("latent_dim", self.latent_dim),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("lstm_hidden", self.lstm_hidden),
            ("mlp_hidden[0]", self.mlp_hidden[0]),
            ("mlp_hidden[1]", self.mlp_hidden[1]),
            ("downsample", self.downsample),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.latent_dim % self.heads != 0 {
            return bad(format!(
                "heads ({}) must divide latent_dim ({})",
                self.heads, self.latent_dim
            ));
        }
        if WAVEFORM_LEN % self.downsample != 0 {
            return bad(format!(
                "downsample ({}) must divide the waveform length {WAVEFORM_LEN}",
                self.downsample
            ));
        }
        self.cnn.output_len(self.sequence_len())?;
        if !(self.h_th > 0.0 && self.h_th < 1.0) {
            return bad(format!("h_th must lie in (0, 1), got {}", self.h_th));
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.lambda1 + self.lambda2 <= 0.0 {
            return bad("lambda1 and lambda2 must not both be zero".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        Ok(())
    }

    /// Time steps seen by attention and both branches.
    pub fn sequence_len(&self) -> usize {
        WAVEFORM_LEN / self.downsample.max(1)
    }

    /// True when parameters trained under `other` fit this layout.
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        self.latent_dim == other.latent_dim
            && self.heads == other.heads
            && self.ffn_hidden == other.ffn_hidden
            && self.cnn == other.cnn
            && self.lstm_hidden == other.lstm_hidden
            && self.mlp_hidden == other.mlp_hidden
            && self.downsample == other.downsample
            && self.log_output == other.log_output
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn digest(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ModelConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(cfg.sequence_len(), 128);
        assert_eq!(cfg.digest().len(), 64);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = ModelConfig::from_toml("lambda2 = 0.3\nepochs = 5\n[cnn]\nchannels = [4, 4, 4]\nkernels = [3, 3, 3]\nstride = 1\npadding = 0\npool_width = 2\npool_stride = 2\nbias = true\n").unwrap();
        assert_eq!((cfg.lambda2, cfg.epochs, cfg.heads), (0.3, 5, 4));
        assert_eq!(cfg.cnn.channels, vec![4, 4, 4]);
        assert!(ModelConfig::from_toml("lamda2 = 0.3").is_err());
    }

    #[test]
    fn rejects_invalid_values() {
        let cases: Vec<Box<dyn Fn(&mut ModelConfig)>> = vec![
            Box::new(|c| c.lambda1 = 0.0 * c.lambda2),
            Box::new(|c| c.lambda1 = -1.0),
            Box::new(|c| c.h_th = 1.0),
            Box::new(|c| c.h_th = 0.0),
            Box::new(|c| c.heads = 5),
            Box::new(|c| c.downsample = 3),
            Box::new(|c| c.batch_size = 0),
            Box::new(|c| c.downsample = 256),
            Box::new(|c| c.beta2 = 1.0),
        ];
        for (i, mutate) in cases.iter().enumerate() {
            let mut cfg = ModelConfig::default();
            if i == 0 {
                cfg.lambda2 = 0.0;
            }
            mutate(&mut cfg);
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "case {i}: {cfg:?}");
        }
    }
}
