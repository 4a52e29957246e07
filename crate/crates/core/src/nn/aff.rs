use crate::error::{Error, Result};
use crate::tensor::{BoundParams, Graph, ParamId, ParamStore, Tensor, Var};

/// Attention-style feature fusion of a temporal and a scalar feature
/// stream. Each stream is summarised by its mean, scored by its own affine
/// map, and the two scores share one softmax:
///
/// `α = softmax([w_t·mean(f_t) + b_t, w_s·mean(f_s) + b_s])`,
/// output `[α_t·f_t, α_s·f_s]`.
#[derive(Debug, Clone)]
pub struct AffGate {
    pub w_t: ParamId,
    pub b_t: ParamId,
    pub w_s: ParamId,
    pub b_s: ParamId,
}

/// Result of [`AffGate::fuse`].
#[derive(Debug, Clone, Copy)]
pub struct FusedStreams {
    pub fused: Var,
    /// `[2]`: weights of the temporal and scalar streams.
    pub alpha: Var,
}

impl AffGate {
    /// All gate parameters start at zero, so both streams begin with
    /// weight one half.
    pub fn new(store: &mut ParamStore, name: &str) -> Self {
        let mut scalar = |s: &str| store.add(format!("{name}.{s}"), Tensor::zeros(&[1]));
        Self {
            w_t: scalar("w_t"),
            b_t: scalar("b_t"),
            w_s: scalar("w_s"),
            b_s: scalar("b_s"),
        }
    }

    pub fn fuse(&self, g: &Graph, p: &BoundParams, f_t: Var, f_s: Var) -> Result<FusedStreams> {
        for v in [f_t, f_s] {
            if g.shape(v).len() != 1 {
                return Err(Error::shape(
                    "aff",
                    format!("feature streams must be vectors, got {:?}", g.shape(v)),
                ));
            }
        }
        let score = |f: Var, w: ParamId, b: ParamId| -> Result<Var> {
            g.add(g.mul(g.mean(f, None)?, p[w])?, p[b])
        };
        let z = g.concat(&[score(f_t, self.w_t, self.b_t)?, score(f_s, self.w_s, self.b_s)?], 0)?;
        let alpha = g.softmax(z, 0)?;
        let a_t = g.slice(alpha, 0, 0, 1)?;
        let a_s = g.slice(alpha, 0, 1, 1)?;
        let fused = g.concat(&[g.mul(f_t, a_t)?, g.mul(f_s, a_s)?], 0)?;
        Ok(FusedStreams { fused, alpha })
    }

    pub fn output_size(t_size: usize, s_size: usize) -> usize {
        t_size + s_size
    }
}
