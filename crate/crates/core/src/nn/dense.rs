use rand::Rng;

use super::uniform_bound;
use crate::error::{Error, Result};
use crate::tensor::{BoundParams, Graph, ParamId, ParamStore, Tensor, Var};

/// Fully connected layer `x W + b`, `W: [in, out]`, `b: [out]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = uniform_bound(in_dim, out_dim);
        let w = store.add(format!("{name}.w"), Tensor::uniform(&[in_dim, out_dim], bound, rng));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_dim]));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    /// `[T, in] → [T, out]`, or `[in] → [out]`.
    pub fn forward(&self, g: &Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        match shape.as_slice() {
            [_, d] if *d == self.in_dim => g.add(g.matmul(x, p[self.w])?, p[self.b]),
            [d] if *d == self.in_dim => {
                let row = g.reshape(x, &[1, self.in_dim])?;
                let y = g.add(g.matmul(row, p[self.w])?, p[self.b])?;
                g.reshape(y, &[self.out_dim])
            }
            _ => Err(Error::shape(
                "dense",
                format!("input {shape:?} does not end in {} features", self.in_dim),
            )),
        }
    }
}

/// Two-layer position-wise network `relu(x W1 + b1) W2 + b2` that maps the
/// attention output back onto the model dimension.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub hidden: Dense,
    pub out: Dense,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Dense::new(store, &format!("{name}.hidden"), dim, hidden, rng),
            out: Dense::new(store, &format!("{name}.out"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, g: &Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let h = g.relu(self.hidden.forward(g, p, x)?)?;
        self.out.forward(g, p, h)
    }
}

/// Regression head: Dense → relu → Dense → relu → Dense(→1).
#[derive(Debug, Clone)]
pub struct MlpHead {
    pub layers: [Dense; 3],
}

impl MlpHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: [usize; 2],
        rng: &mut R,
    ) -> Self {
        Self {
            layers: [
                Dense::new(store, &format!("{name}.0"), in_dim, hidden[0], rng),
                Dense::new(store, &format!("{name}.1"), hidden[0], hidden[1], rng),
                Dense::new(store, &format!("{name}.2"), hidden[1], 1, rng),
            ],
        }
    }

    /// `[in] → [1]`.
    pub fn forward(&self, g: &Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let h = g.relu(self.layers[0].forward(g, p, x)?)?;
        let h = g.relu(self.layers[1].forward(g, p, h)?)?;
        self.layers[2].forward(g, p, h)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        for l in &self.layers {
            store.get_mut(l.w).data_mut().fill(0.0);
            store.get_mut(l.b).data_mut().fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testing::{check_layer, rng};

    #[test]
    fn feed_forward_zero_and_identity() {
        let mut store = ParamStore::new();
        let ffn = FeedForward::new(&mut store, "ffn", 48, 48, &mut rng(1));
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let x = Tensor::uniform(&[6, 48], 1.0, &mut rng(2));
        let g = Graph::new();
        let p = store.bind(&g, false).unwrap();
        let xv = g.input(x.clone()).unwrap();
        let y = ffn.forward(&g, &p, xv).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));

        for l in [&ffn.hidden, &ffn.out] {
            let w = store.get_mut(l.w).data_mut();
            for i in 0..48 {
                w[i * 48 + i] = 1.0;
            }
        }
        let g = Graph::new();
        let p = store.bind(&g, false).unwrap();
        let xv = g.input(x.clone()).unwrap();
        let y = g.value(ffn.forward(&g, &p, xv).unwrap());
        let expected: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
        assert_eq!(y.data(), &expected[..]);
    }

    #[test]
    fn feed_forward_gradients() {
        let mut store = ParamStore::new();
        let ffn = FeedForward::new(&mut store, "ffn", 6, 5, &mut rng(3));
        let x = Tensor::uniform(&[4, 6], 1.0, &mut rng(4));
        let report = check_layer(&store, &[x], 9, |g, params, extra| {
            let p = BoundParams::from_vars(params.to_vec());
            ffn.forward(g, &p, extra[0])
        });
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn mlp_head_zero_and_affine() {
        let mut store = ParamStore::new();
        let head = MlpHead::new(&mut store, "head", 3, [2, 2], &mut rng(5));
        head.zero(&mut store);
        let g = Graph::new();
        let p = store.bind(&g, false).unwrap();
        let x = g.input(Tensor::vector(vec![0.3, -1.0, 2.0])).unwrap();
        assert_eq!(g.item(head.forward(&g, &p, x).unwrap()).unwrap(), 0.0);

        // single active unit per layer: out = 2 * (x·u + 5) - 1 while x·u + 5 > 0
        let [l0, l1, l2] = &head.layers;
        store.get_mut(l0.w).data_mut().copy_from_slice(&[1.0, 0.0, -2.0, 0.0, 0.5, 0.0]);
        store.get_mut(l0.b).data_mut().copy_from_slice(&[5.0, 0.0]);
        store.get_mut(l1.w).data_mut().copy_from_slice(&[2.0, 0.0, 0.0, 0.0]);
        store.get_mut(l2.w).data_mut().copy_from_slice(&[1.0, 0.0]);
        store.get_mut(l2.b).data_mut().copy_from_slice(&[-1.0]);
        for xs in [[0.3, -1.0, 2.0], [1.0, 1.0, 1.0], [-2.0, 0.5, 0.0]] {
            let g = Graph::new();
            let p = store.bind(&g, false).unwrap();
            let x = g.input(Tensor::vector(xs.to_vec())).unwrap();
            let out = g.item(head.forward(&g, &p, x).unwrap()).unwrap();
            let lin = xs[0] - 2.0 * xs[1] + 0.5 * xs[2] + 5.0;
            assert!((out - (2.0 * lin - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_head_gradients() {
        let mut store = ParamStore::new();
        let head = MlpHead::new(&mut store, "head", 7, [5, 4], &mut rng(6));
        let x = Tensor::uniform(&[7], 1.0, &mut rng(7));
        let report = check_layer(&store, &[x], 10, |g, params, extra| {
            let p = BoundParams::from_vars(params.to_vec());
            head.forward(g, &p, extra[0])
        });
        assert!(report.passed, "{report:?}");
    }
}
