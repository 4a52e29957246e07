//! Network layers. Every layer registers its tensors in a [`ParamStore`]
//! at construction and reads them back from [`BoundParams`] during a
//! forward pass, so one store can be bound to many graphs.
//!
//! Sequences are laid out time-major: `[T, channels]`.

mod aff;
mod attention;
mod autoencoder;
mod cnn;
mod dense;
mod lstm;

pub use aff::{AffGate, FusedStreams};
pub use attention::MultiHeadAttention;
pub use autoencoder::Autoencoder;
pub use cnn::{CnnBranch, CnnConfig};
pub use dense::{Dense, FeedForward, MlpHead};
pub use lstm::{BiLstm, LstmCell};

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// Glorot-style uniform bound `sqrt(6 / (fan_in + fan_out))`.
pub fn uniform_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Sinusoidal position table: `P[t, 2j] = sin(t / 10000^(2j/d))`,
/// `P[t, 2j+1] = cos(t / 10000^(2j/d))`.
pub fn positional_table(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for t in 0..len {
        for j in 0..dim.div_ceil(2) {
            let angle = t as f64 / 10000f64.powf(2.0 * j as f64 / dim as f64);
            data[t * dim + 2 * j] = angle.sin();
            if 2 * j + 1 < dim {
                data[t * dim + 2 * j + 1] = angle.cos();
            }
        }
    }
    Tensor::new(vec![len, dim], data).expect("positive dimensions")
}

/// `x + P` for a `[T, d]` input. Parameter-free.
pub fn positional_encoding(g: &Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x);
    let table = positional_table(shape[0], shape.get(1).copied().unwrap_or(1));
    let p = g.input(table.reshape(shape)?)?;
    g.add(x, p)
}

/// Zero-mean, unit-variance rescaling of the whole tensor.
pub fn standardize(g: &Graph, x: Var, eps: f64) -> Result<Var> {
    let mu = g.mean(x, None)?;
    let centered = g.sub(x, mu)?;
    let var = g.mean(g.mul(centered, centered)?, None)?;
    let std = g.sqrt(g.add_scalar(var, eps)?)?;
    g.div(centered, std)
}

/// Mean over non-overlapping windows of `factor` time steps: `[T, C] → [T/factor, C]`.
pub fn downsample_time(g: &Graph, x: Var, factor: usize) -> Result<Var> {
    if factor <= 1 {
        return Ok(x);
    }
    let shape = g.shape(x);
    let (t, c) = (shape[0], shape[1]);
    if t % factor != 0 {
        return Err(crate::Error::Config(format!(
            "downsample factor {factor} does not divide sequence length {t}"
        )));
    }
    let grouped = g.reshape(x, &[t / factor, factor, c])?;
    g.mean(grouped, Some(1))
}

#[cfg(test)]
pub(crate) mod testing {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::tensor::{grad_check, GradCheckReport, Graph, ParamStore, Tensor, Var};

    pub fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Gradient check of every parameter of `store` plus the `extra`
    /// input tensors, through `f` reduced by a fixed random projection so
    /// that every output element contributes with a distinct weight.
    pub fn check_layer<F>(store: &ParamStore, extra: &[Tensor], seed: u64, f: F) -> GradCheckReport
    where
        F: Fn(&Graph, &[Var], &[Var]) -> crate::Result<Var>,
    {
        let n_params = store.len();
        let mut inputs: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
        inputs.extend_from_slice(extra);
        let probe_seed = seed;
        grad_check(
            |g, vars| {
                let out = f(g, &vars[..n_params], &vars[n_params..])?;
                let shape = g.shape(out);
                let weights = Tensor::uniform(&shape, 1.0, &mut rng(probe_seed));
                let w = g.input(weights)?;
                g.sum(g.mul(out, w)?, None)
            },
            &inputs,
            1e-4,
            1e-4,
        )
    }
}
