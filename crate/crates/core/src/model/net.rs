use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::data::{Dataset, NormStats};
use crate::empirical::{empirical_predict, fit_steinmetz, LossPoint, ModelChoice, SteinmetzFit, SteinmetzParams, SteinmetzRecord};
use crate::error::{Error, Result};
use crate::nn::{
    downsample_time, positional_table, standardize, AffGate, Autoencoder, BiLstm, CnnBranch, FeedForward, MlpHead,
    MultiHeadAttention,
};
use crate::signal::{delta_b, FluxWaveform};
use crate::tensor::{BoundParams, Graph, ParamStore, Tensor, Var};

/// Order of the scalar stream fed next to the temporal features.
pub const SCALAR_FEATURES: [&str; 5] = ["freq", "temp", "delta_b", "entropy", "ln_p_emp"];

const CONFIG_FILE: &str = "config.toml";
const PRIOR_FILE: &str = "prior.toml";
const NORM_FILE: &str = "norm.toml";
const PARAMS_FILE: &str = "params.bin";

/// Samples evaluated per graph when no gradient is needed.
const EVAL_CHUNK: usize = 32;

const STANDARDIZE_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct Layers {
    autoencoder: Autoencoder,
    attention: MultiHeadAttention,
    ffn: FeedForward,
    cnn: CnnBranch,
    lstm: BiLstm,
    aff: AffGate,
    head: MlpHead,
}

/// Per-sample inputs that do not depend on the network weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    /// Flux sequence divided by the training flux scale, `[1024]`.
    pub flux: Tensor,
    /// Normalized scalar features in [`SCALAR_FEATURES`] order, `[5]`.
    pub scalars: Tensor,
    pub p_emp: f64,
    pub choice: ModelChoice,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub p_pred: f64,
    pub p_emp: f64,
    pub choice: ModelChoice,
}

/// Raw scalar features of one waveform given its prior value.
fn scalar_row(w: &FluxWaveform, entropy: f64, p_emp: f64) -> Vec<f64> {
    vec![w.freq(), w.temp(), delta_b(w), entropy, p_emp.ln()]
}

/// Fits the Steinmetz coefficients on every training sample, using half
/// the peak-to-peak swing as the amplitude.
pub fn fit_prior(train: &Dataset) -> Result<SteinmetzFit> {
    let points = train
        .samples()
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let loss = w
                .loss()
                .ok_or_else(|| Error::Dataset("training sample has no loss label".into()).at_sample(i))?;
            Ok(LossPoint {
                freq: w.freq(),
                bm: delta_b(w) / 2.0,
                loss,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    fit_steinmetz(&points)
}

#[derive(Debug, Clone)]
pub struct SepiTfpNet {
    config: ModelConfig,
    material: String,
    prior: SteinmetzParams,
    norm: NormStats,
    store: ParamStore,
    layers: Layers,
    pe_table: Tensor,
    bypass_head: bool,
}

impl SepiTfpNet {
    /// Builds a freshly initialized network around a fitted prior and
    /// normalization statistics. Initialization is seeded by `config.seed`.
    pub fn new(config: ModelConfig, material: &str, prior: SteinmetzParams, norm: NormStats) -> Result<Self> {
        config.validate()?;
        prior.verify()?;
        if norm.width() != SCALAR_FEATURES.len() {
            return Err(Error::Config(format!(
                "normalization covers {} features, the network expects {}",
                norm.width(),
                SCALAR_FEATURES.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.latent_dim;
        let t = config.sequence_len();
        let autoencoder = Autoencoder::new(&mut store, "autoencoder", d, &mut rng);
        let attention = MultiHeadAttention::new(&mut store, "attention", d, config.heads, &mut rng)?;
        let ffn = FeedForward::new(&mut store, "ffn", d, config.ffn_hidden, &mut rng);
        let cnn = CnnBranch::new(&mut store, "cnn", &config.cnn, t, d, &mut rng)?;
        let lstm = BiLstm::new(&mut store, "lstm", d, config.lstm_hidden, &mut rng);
        let aff = AffGate::new(&mut store, "aff");
        let fused = AffGate::output_size(cnn.output_size() + lstm.output_size(), SCALAR_FEATURES.len());
        let head = MlpHead::new(&mut store, "head", fused, config.mlp_hidden, &mut rng);
        Ok(Self {
            pe_table: positional_table(t, d),
            config,
            material: material.to_string(),
            prior,
            norm,
            store,
            layers: Layers {
                autoencoder,
                attention,
                ffn,
                cnn,
                lstm,
                aff,
                head,
            },
            bypass_head: false,
        })
    }

    /// Fits the prior and the normalization on `train` and builds the
    /// network with [`SepiTfpNet::init_head_on_prior`] applied.
    pub fn for_training(config: ModelConfig, train: &Dataset) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Dataset("training split is empty".into()));
        }
        let prior = fit_prior(train)?.params;
        let mut rows = Vec::with_capacity(train.len());
        let mut flux = Vec::with_capacity(train.len() * crate::signal::WAVEFORM_LEN);
        for (i, w) in train.samples().iter().enumerate() {
            let (p_emp, choice) = empirical_predict(&prior, w, config.h_th).map_err(|e| e.at_sample(i))?;
            rows.push(scalar_row(w, choice.entropy, p_emp));
            flux.extend_from_slice(w.b());
        }
        let norm = NormStats::fit(&rows, &flux)?;
        let mut net = Self::new(config, train.material(), prior, norm)?;
        net.init_head_on_prior(&train.labels()?);
        Ok(net)
    }

    /// Starts the head at the prior. With log output, hidden unit 0 of both
    /// head layers carries only the normalized `ln p_emp` feature and the
    /// output layer reads only that unit, scaled so that the initial output
    /// is `ln p_emp` (the fusion gate starts at one half). The remaining
    /// units keep their random weights and enter with zero output weight.
    /// With softplus output the output bias is set to the mean label.
    pub fn init_head_on_prior(&mut self, labels: &[f64]) {
        let [l0, l1, l2] = self.layers.head.layers.clone();
        if !self.config.log_output {
            let mean = labels.iter().sum::<f64>() / labels.len().max(1) as f64;
            self.store.get_mut(l2.b).data_mut()[0] = mean;
            return;
        }
        const OFFSET: f64 = 4.0;
        let feature = l0.in_dim - SCALAR_FEATURES.len() + 4;
        let (mu, sigma) = (self.norm.mean[4], self.norm.std[4]);
        let w0 = self.store.get_mut(l0.w).data_mut();
        for r in 0..l0.in_dim {
            w0[r * l0.out_dim] = if r == feature { 1.0 } else { 0.0 };
        }
        self.store.get_mut(l0.b).data_mut()[0] = OFFSET;
        let w1 = self.store.get_mut(l1.w).data_mut();
        for r in 0..l1.in_dim {
            w1[r * l1.out_dim] = if r == 0 { 1.0 } else { 0.0 };
        }
        self.store.get_mut(l1.b).data_mut()[0] = 0.0;
        // fused feature = z / 2, hidden value = z / 2 + OFFSET
        let scale = 2.0 * sigma;
        let w2 = self.store.get_mut(l2.w).data_mut();
        w2.fill(0.0);
        w2[0] = scale;
        self.store.get_mut(l2.b).data_mut()[0] = mu - scale * OFFSET;
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn material(&self) -> &str {
        &self.material
    }

    pub fn prior(&self) -> &SteinmetzParams {
        &self.prior
    }

    pub fn norm(&self) -> &NormStats {
        &self.norm
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Training hyperparameters may change between runs; the layout may not.
    pub fn set_training_config(&mut self, config: &ModelConfig) -> Result<()> {
        config.validate()?;
        if !self.config.same_architecture(config) || self.config.h_th != config.h_th {
            return Err(Error::Config(
                "training config describes a different architecture or threshold than the network".into(),
            ));
        }
        self.config = config.clone();
        Ok(())
    }

    /// Sets every head weight and bias to zero.
    pub fn zero_head(&mut self) {
        self.layers.head.zero(&mut self.store);
    }

    /// When set, predictions skip the network and return the prior value.
    pub fn set_head_bypass(&mut self, bypass: bool) {
        self.bypass_head = bypass;
    }

    pub fn head_bypassed(&self) -> bool {
        self.bypass_head
    }

    pub fn prepare(&self, w: &FluxWaveform) -> Result<Prepared> {
        let (p_emp, choice) = empirical_predict(&self.prior, w, self.config.h_th)?;
        let scalars = self.norm.normalize(&scalar_row(w, choice.entropy, p_emp));
        Ok(Prepared {
            flux: Tensor::vector(self.norm.scale_flux(w.b())),
            scalars: Tensor::vector(scalars),
            p_emp,
            choice,
        })
    }

    pub fn prepare_all(&self, samples: &[FluxWaveform]) -> Result<Vec<Prepared>> {
        samples
            .iter()
            .enumerate()
            .map(|(i, w)| self.prepare(w).map_err(|e| e.at_sample(i)))
            .collect()
    }

    /// Temporal feature vector `F_t` (CNN and Bi-LSTM outputs, concatenated).
    pub fn temporal_features(&self, g: &Graph, p: &BoundParams, prep: &Prepared) -> Result<Var> {
        let l = &self.layers;
        let seq = g.input(prep.flux.clone())?;
        let z = l.autoencoder.encode(g, p, seq)?;
        let z = downsample_time(g, z, self.config.downsample)?;
        let x = g.add(z, g.input(self.pe_table.clone())?)?;
        let x = l.attention.forward(g, p, x)?;
        let x = l.ffn.forward(g, p, x)?;
        let map = standardize(g, x, STANDARDIZE_EPS)?;
        let f_cnn = l.cnn.forward(g, p, map)?;
        let f_lstm = l.lstm.forward(g, p, map)?;
        g.concat(&[f_cnn, f_lstm], 0)
    }

    /// Raw head output `[1]` before the output nonlinearity.
    pub fn head_output(&self, g: &Graph, p: &BoundParams, prep: &Prepared) -> Result<Var> {
        let f_t = self.temporal_features(g, p, prep)?;
        let f_s = g.input(prep.scalars.clone())?;
        let fused = self.layers.aff.fuse(g, p, f_t, f_s)?;
        self.layers.head.forward(g, p, fused.fused)
    }

    /// Predicted loss node `[1]`. With the head bypassed, a constant equal
    /// to the prior value.
    pub fn forward_graph(&self, g: &Graph, p: &BoundParams, prep: &Prepared) -> Result<Var> {
        if self.bypass_head {
            return g.input(Tensor::vector(vec![prep.p_emp]));
        }
        let y = self.head_output(g, p, prep)?;
        if self.config.log_output {
            g.exp(y)
        } else {
            g.map(y, softplus, sigmoid)
        }
    }

    pub fn predict_prepared(&self, prepared: &[Prepared]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(prepared.len());
        for (c, chunk) in prepared.chunks(EVAL_CHUNK).enumerate() {
            let g = Graph::new();
            let p = self.store.bind(&g, false)?;
            for (j, prep) in chunk.iter().enumerate() {
                let v = self
                    .forward_graph(&g, &p, prep)
                    .and_then(|v| g.item(v))
                    .map_err(|e| e.at_sample(c * EVAL_CHUNK + j))?;
                out.push(v);
            }
        }
        Ok(out)
    }

    pub fn forward(&self, w: &FluxWaveform) -> Result<Prediction> {
        let prep = self.prepare(w)?;
        let p_pred = self.predict_prepared(std::slice::from_ref(&prep)).map_err(unwrap_sample)?[0];
        Ok(Prediction {
            p_pred,
            p_emp: prep.p_emp,
            choice: prep.choice,
        })
    }

    /// Predictions for every sample; failures name the sample index.
    pub fn predict(&self, samples: &[FluxWaveform]) -> Result<Vec<Prediction>> {
        let prepared = self.prepare_all(samples)?;
        let values = self.predict_prepared(&prepared)?;
        Ok(prepared
            .iter()
            .zip(values)
            .map(|(prep, p_pred)| Prediction {
                p_pred,
                p_emp: prep.p_emp,
                choice: prep.choice,
            })
            .collect())
    }

    /// Writes config, prior, normalization and weights into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(path, e))
        };
        write(CONFIG_FILE, self.config.to_toml())?;
        SteinmetzRecord::new(&self.material, &self.prior, None).save(&dir.join(PRIOR_FILE))?;
        write(
            NORM_FILE,
            toml::to_string(&self.norm).map_err(|e| Error::Parse(e.to_string()))?,
        )?;
        self.store.save(&dir.join(PARAMS_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| {
            let path = dir.join(name);
            std::fs::read_to_string(&path).map_err(|e| Error::io(path, e))
        };
        let config = ModelConfig::from_toml(&read(CONFIG_FILE)?)?;
        let record = SteinmetzRecord::load(&dir.join(PRIOR_FILE))?;
        let norm: NormStats = toml::from_str(&read(NORM_FILE)?).map_err(|e| Error::Parse(e.to_string()))?;
        let mut net = Self::new(config, &record.material, record.params()?, norm)?;
        net.store.copy_values_from(&ParamStore::load(&dir.join(PARAMS_FILE))?)?;
        Ok(net)
    }
}

fn unwrap_sample(e: Error) -> Error {
    match e {
        Error::Sample { source, .. } => *source,
        other => other,
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
