use rand::Rng;

use super::Dense;
use crate::error::{Error, Result};
use crate::tensor::{BoundParams, Graph, ParamStore, Var};

/// Lifts each scalar flux sample into a `dim`-wide latent vector,
/// `z_t = tanh(W_e b_t + c_e)`. The decoder maps latents back to one value
/// per step.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub encoder: Dense,
    pub decoder: Dense,
}

impl Autoencoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            encoder: Dense::new(store, &format!("{name}.enc"), 1, dim, rng),
            decoder: Dense::new(store, &format!("{name}.dec"), dim, 1, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.encoder.out_dim
    }

    /// `[T] → [T, dim]`.
    pub fn encode(&self, g: &Graph, p: &BoundParams, seq: Var) -> Result<Var> {
        let shape = g.shape(seq);
        if shape.len() != 1 {
            return Err(Error::shape(
                "autoencoder",
                format!("expected a [T] sequence, got {shape:?}"),
            ));
        }
        let col = g.reshape(seq, &[shape[0], 1])?;
        g.tanh(self.encoder.forward(g, p, col)?)
    }

    /// `[T, dim] → [T]`.
    pub fn decode(&self, g: &Graph, p: &BoundParams, latent: Var) -> Result<Var> {
        let t = g.shape(latent)[0];
        let y = self.decoder.forward(g, p, latent)?;
        g.reshape(y, &[t])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testing::{check_layer, rng};
    use crate::tensor::Tensor;

    #[test]
    fn zero_encoder_gives_zero_latents() {
        let mut store = ParamStore::new();
        let ae = Autoencoder::new(&mut store, "ae", 48, &mut rng(1));
        store.get_mut(ae.encoder.w).data_mut().fill(0.0);
        let g = Graph::new();
        let p = store.bind(&g, false).unwrap();
        let b = g.input(Tensor::uniform(&[1024], 2.0, &mut rng(2))).unwrap();
        let z = ae.encode(&g, &p, b).unwrap();
        assert_eq!(g.shape(z), vec![1024, 48]);
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_channel_follows_tanh_of_input() {
        let mut store = ParamStore::new();
        let ae = Autoencoder::new(&mut store, "ae", 48, &mut rng(7));
        let w = store.get_mut(ae.encoder.w).data_mut();
        w.fill(0.0);
        w[0] = 1.0;
        let x = Tensor::uniform(&[32], 3.0, &mut rng(8));
        let g = Graph::new();
        let p = store.bind(&g, false).unwrap();
        let z = g.value(ae.encode(&g, &p, g.input(x.clone()).unwrap()).unwrap());
        for (t, b) in x.data().iter().enumerate() {
            assert_eq!(z.data()[t * 48], b.tanh());
            assert!(z.data()[t * 48 + 1..(t + 1) * 48].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn latents_are_bounded_and_odd_without_bias() {
        let mut store = ParamStore::new();
        let ae = Autoencoder::new(&mut store, "ae", 8, &mut rng(3));
        let g = Graph::new();
        let p = store.bind(&g, false).unwrap();
        let x = Tensor::uniform(&[16], 50.0, &mut rng(4));
        let neg = Tensor::vector(x.data().iter().map(|v| -v).collect());
        let zp = g.value(ae.encode(&g, &p, g.input(x).unwrap()).unwrap());
        let zn = g.value(ae.encode(&g, &p, g.input(neg).unwrap()).unwrap());
        for (a, b) in zp.data().iter().zip(zn.data()) {
            assert!(a.abs() <= 1.0);
            assert_eq!(*a, -b);
        }
    }

    #[test]
    fn gradients() {
        let mut store = ParamStore::new();
        let ae = Autoencoder::new(&mut store, "ae", 4, &mut rng(5));
        let x = Tensor::uniform(&[6], 1.0, &mut rng(6));
        let report = check_layer(&store, &[x], 11, |g, params, extra| {
            let p = BoundParams::from_vars(params.to_vec());
            let z = ae.encode(g, &p, extra[0])?;
            ae.decode(g, &p, z)
        });
        assert!(report.passed, "{report:?}");
    }
}
