use rand::Rng;
use serde::{Deserialize, Serialize};

use super::uniform_bound;
use crate::error::{Error, Result};
use crate::tensor::{BoundParams, Graph, ParamId, ParamStore, Tensor, Var};

/// Convolution stack layout. Each convolution is followed by relu; every
/// convolution but the last is then max-pooled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnConfig {
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub stride: usize,
    pub padding: usize,
    pub pool_width: usize,
    pub pool_stride: usize,
    pub bias: bool,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 32],
            kernels: vec![5, 5, 3],
            stride: 1,
            padding: 0,
            pool_width: 2,
            pool_stride: 2,
            bias: true,
        }
    }
}

impl CnnConfig {
    /// Sequence length after the whole stack, or a configuration error
    /// naming the first stage whose output would be empty.
    pub fn output_len(&self, t_in: usize) -> Result<usize> {
        if self.channels.is_empty() || self.channels.len() != self.kernels.len() {
            return Err(Error::Config(format!(
                "cnn needs one kernel width per layer, got {} channels and {} kernels",
                self.channels.len(),
                self.kernels.len()
            )));
        }
        if self.stride == 0 || self.pool_width == 0 || self.pool_stride == 0 {
            return Err(Error::Config("cnn strides and pool width must be positive".into()));
        }
        if self.channels.contains(&0) || self.kernels.contains(&0) {
            return Err(Error::Config("cnn channels and kernel widths must be positive".into()));
        }
        let mut t = t_in;
        let last = self.kernels.len() - 1;
        for (i, &k) in self.kernels.iter().enumerate() {
            if t + 2 * self.padding < k {
                return Err(Error::Config(format!(
                    "cnn layer {i}: kernel width {k} exceeds input length {t}"
                )));
            }
            t = (t + 2 * self.padding - k) / self.stride + 1;
            if i < last {
                if t < self.pool_width {
                    return Err(Error::Config(format!(
                        "cnn layer {i}: pool width {} exceeds length {t}",
                        self.pool_width
                    )));
                }
                t = (t - self.pool_width) / self.pool_stride + 1;
            }
        }
        Ok(t)
    }

    pub fn output_size(&self, t_in: usize) -> Result<usize> {
        Ok(self.output_len(t_in)? * self.channels.last().copied().unwrap_or(0))
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    kernel: ParamId,
    bias: Option<ParamId>,
}

/// Local-pattern branch: `[T, C_in]` to a flat feature vector.
#[derive(Debug, Clone)]
pub struct CnnBranch {
    config: CnnConfig,
    layers: Vec<ConvLayer>,
    t_in: usize,
    out_size: usize,
}

impl CnnBranch {
    /// Fails at build time when the stack does not fit `t_in` steps.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: &CnnConfig,
        t_in: usize,
        c_in: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let out_size = config.output_size(t_in)?;
        let mut layers = Vec::with_capacity(config.channels.len());
        let mut c_prev = c_in;
        for (i, (&c, &k)) in config.channels.iter().zip(&config.kernels).enumerate() {
            let bound = uniform_bound(k * c_prev, k * c);
            let kernel = store.add(format!("{name}.{i}.w"), Tensor::uniform(&[k, c_prev, c], bound, rng));
            let bias = config
                .bias
                .then(|| store.add(format!("{name}.{i}.b"), Tensor::zeros(&[c])));
            layers.push(ConvLayer { kernel, bias });
            c_prev = c;
        }
        Ok(Self {
            config: config.clone(),
            layers,
            t_in,
            out_size,
        })
    }

    pub fn output_size(&self) -> usize {
        self.out_size
    }

    /// `[T, C_in] → [out_size]`.
    pub fn forward(&self, g: &Graph, p: &BoundParams, x: Var) -> Result<Var> {
        if g.shape(x)[0] != self.t_in {
            return Err(Error::shape(
                "cnn",
                format!("built for {} steps, got {:?}", self.t_in, g.shape(x)),
            ));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let bias = layer.bias.map(|b| p[b]);
            h = g.relu(g.conv_1d(h, p[layer.kernel], bias, self.config.stride, self.config.padding)?)?;
            if i < last {
                h = g.max_pool_1d(h, self.config.pool_width, self.config.pool_stride)?;
            }
        }
        g.reshape(h, &[self.out_size])
    }
}
