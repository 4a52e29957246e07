use rand::Rng;

use super::uniform_bound;
use crate::error::{Error, Result};
use crate::tensor::{BoundParams, Graph, ParamId, ParamStore, Tensor, Var};

/// Scaled dot-product self-attention with `heads` heads of width
/// `dim / heads`. Projections carry no bias.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub dim: usize,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} attention heads do not divide model dimension {dim}"
            )));
        }
        let bound = uniform_bound(dim, dim);
        let mut proj = |suffix: &str| {
            store.add(format!("{name}.{suffix}"), Tensor::uniform(&[dim, dim], bound, rng))
        };
        Ok(Self {
            wq: proj("wq"),
            wk: proj("wk"),
            wv: proj("wv"),
            wo: proj("wo"),
            dim,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `[T, dim] → [T, dim]`.
    pub fn forward(&self, g: &Graph, p: &BoundParams, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, p, x)?.0)
    }

    /// Also returns the `[T, T]` attention matrix of every head.
    pub fn forward_with_weights(&self, g: &Graph, p: &BoundParams, x: Var) -> Result<(Var, Vec<Var>)> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::shape(
                "attention",
                format!("expected [T, {}], got {shape:?}", self.dim),
            ));
        }
        let q = g.matmul(x, p[self.wq])?;
        let k = g.matmul(x, p[self.wk])?;
        let v = g.matmul(x, p[self.wv])?;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outputs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * dh, dh)?;
            let kh = g.slice(k, 1, h * dh, dh)?;
            let vh = g.slice(v, 1, h * dh, dh)?;
            let scores = g.scale(g.matmul(qh, g.transpose(kh)?)?, scale)?;
            let attn = g.softmax(scores, 1)?;
            outputs.push(g.matmul(attn, vh)?);
            weights.push(attn);
        }
        let merged = if outputs.len() == 1 {
            outputs[0]
        } else {
            g.concat(&outputs, 1)?
        };
        Ok((g.matmul(merged, p[self.wo])?, weights))
    }
}
