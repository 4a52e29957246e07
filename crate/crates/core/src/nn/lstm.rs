use rand::Rng;

use super::uniform_bound;
use crate::error::{Error, Result};
use crate::tensor::{BoundParams, Graph, ParamId, ParamStore, Tensor, Var};

/// One LSTM direction. Gates are packed `[i, f, g, o]` along the last
/// axis; the forget-gate bias starts at +1.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let w_ih = store.add(
            format!("{name}.w_ih"),
            Tensor::uniform(&[input, 4 * hidden], uniform_bound(input, 4 * hidden), rng),
        );
        let w_hh = store.add(
            format!("{name}.w_hh"),
            Tensor::uniform(&[hidden, 4 * hidden], uniform_bound(hidden, 4 * hidden), rng),
        );
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].fill(1.0);
        let b = store.add(format!("{name}.b"), Tensor::vector(bias));
        Self {
            w_ih,
            w_hh,
            b,
            input,
            hidden,
        }
    }

    /// Runs over `[T, input]` (backwards in time when `reverse`) from zero
    /// state and returns the final hidden state `[1, hidden]`.
    pub fn run(&self, g: &Graph, p: &BoundParams, xs: Var, reverse: bool) -> Result<Var> {
        let shape = g.shape(xs);
        if shape.len() != 2 || shape[1] != self.input || shape[0] == 0 {
            return Err(Error::shape(
                "lstm",
                format!("expected [T, {}], got {shape:?}", self.input),
            ));
        }
        // input contributions for all steps at once
        let pre = g.add(g.matmul(xs, p[self.w_ih])?, p[self.b])?;
        g.lstm_sequence(pre, p[self.w_hh], reverse)
    }
}

/// Forward and backward LSTMs over the same sequence; the output is the
/// concatenation of both final hidden states, `[2 * hidden]`.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

impl BiLstm {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            forward: LstmCell::new(store, &format!("{name}.fwd"), input, hidden, rng),
            backward: LstmCell::new(store, &format!("{name}.bwd"), input, hidden, rng),
        }
    }

    pub fn output_size(&self) -> usize {
        2 * self.forward.hidden
    }

    pub fn forward(&self, g: &Graph, p: &BoundParams, xs: Var) -> Result<Var> {
        let hf = self.forward.run(g, p, xs, false)?;
        let hb = self.backward.run(g, p, xs, true)?;
        let both = g.concat(&[hf, hb], 1)?;
        g.reshape(both, &[self.output_size()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testing::{check_layer, rng};

    /// Plain-loop LSTM step used as a reference.
    fn reference(store: &ParamStore, cell: &LstmCell, xs: &[Vec<f64>]) -> Vec<f64> {
        let n = cell.hidden;
        let (wi, wh, b) = (store.get(cell.w_ih).data(), store.get(cell.w_hh).data(), store.get(cell.b).data());
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (mut h, mut c) = (vec![0.0; n], vec![0.0; n]);
        for x in xs {
            let mut z = b.to_vec();
            for (j, zj) in z.iter_mut().enumerate() {
                for (k, xk) in x.iter().enumerate() {
                    *zj += xk * wi[k * 4 * n + j];
                }
                for (k, hk) in h.iter().enumerate() {
                    *zj += hk * wh[k * 4 * n + j];
                }
            }
            for j in 0..n {
                let (i, f, gg, o) = (sig(z[j]), sig(z[n + j]), z[2 * n + j].tanh(), sig(z[3 * n + j]));
                c[j] = f * c[j] + i * gg;
                h[j] = o * c[j].tanh();
            }
        }
        h
    }

    #[test]
    fn matches_reference_recurrence() {
        let mut store = ParamStore::new();
        let lstm = BiLstm::new(&mut store, "lstm", 3, 4, &mut rng(1));
        let x = Tensor::uniform(&[6, 3], 1.5, &mut rng(2));
        let rows: Vec<Vec<f64>> = x.data().chunks(3).map(<[f64]>::to_vec).collect();
        let rev: Vec<Vec<f64>> = rows.iter().rev().cloned().collect();
        let mut expected = reference(&store, &lstm.forward, &rows);
        expected.extend(reference(&store, &lstm.backward, &rev));

        let g = Graph::new();
        let p = store.bind(&g, false).unwrap();
        let out = g.value(lstm.forward(&g, &p, g.input(x).unwrap()).unwrap());
        for (a, e) in out.data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn zero_parameters_keep_state_at_zero() {
        let mut store = ParamStore::new();
        let lstm = BiLstm::new(&mut store, "lstm", 3, 4, &mut rng(7));
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let g = Graph::new();
        let p = store.bind(&g, false).unwrap();
        let x = g.input(Tensor::uniform(&[5, 3], 2.0, &mut rng(8))).unwrap();
        assert!(g.value(lstm.forward(&g, &p, x).unwrap()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_differs_only_through_parameters() {
        let mut store = ParamStore::new();
        let lstm = BiLstm::new(&mut store, "lstm", 2, 3, &mut rng(9));
        let x = Tensor::uniform(&[1, 2], 1.0, &mut rng(10));
        let g = Graph::new();
        let p = store.bind(&g, false).unwrap();
        let xv = g.input(x.clone()).unwrap();
        let out = g.value(lstm.forward(&g, &p, xv).unwrap());
        let rows = vec![x.data().to_vec()];
        for (a, e) in out.data()[..3].iter().zip(reference(&store, &lstm.forward, &rows)) {
            assert!((a - e).abs() < 1e-15);
        }
        assert_ne!(&out.data()[..3], &out.data()[3..]);

        let v = store.get(lstm.forward.w_ih).clone();
        *store.get_mut(lstm.backward.w_ih) = v;
        let v = store.get(lstm.forward.w_hh).clone();
        *store.get_mut(lstm.backward.w_hh) = v;
        let g = Graph::new();
        let p = store.bind(&g, false).unwrap();
        let out = g.value(lstm.forward(&g, &p, g.input(x).unwrap()).unwrap());
        assert_eq!(&out.data()[..3], &out.data()[3..]);
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut store = ParamStore::new();
        let cell = LstmCell::new(&mut store, "c", 2, 3, &mut rng(0));
        assert_eq!(store.get(cell.b).data(), &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn tied_directions_agree_on_palindromes() {
        let mut store = ParamStore::new();
        let lstm = BiLstm::new(&mut store, "lstm", 2, 5, &mut rng(3));
        for (src, dst) in [
            (lstm.forward.w_ih, lstm.backward.w_ih),
            (lstm.forward.w_hh, lstm.backward.w_hh),
            (lstm.forward.b, lstm.backward.b),
        ] {
            let v = store.get(src).clone();
            *store.get_mut(dst) = v;
        }
        let half = Tensor::uniform(&[4, 2], 1.0, &mut rng(4));
        let mut data = half.data().to_vec();
        for row in half.data().chunks(2).rev() {
            data.extend_from_slice(row);
        }
        let g = Graph::new();
        let p = store.bind(&g, false).unwrap();
        let x = g.input(Tensor::new(vec![8, 2], data).unwrap()).unwrap();
        let out = g.value(lstm.forward(&g, &p, x).unwrap());
        let (a, b) = out.data().split_at(5);
        assert_eq!(a, b);
    }

    #[test]
    fn gradients() {
        let mut store = ParamStore::new();
        let lstm = BiLstm::new(&mut store, "lstm", 2, 2, &mut rng(5));
        let x = Tensor::uniform(&[3, 2], 1.0, &mut rng(6));
        let report = check_layer(&store, &[x], 14, |g, params, extra| {
            let p = BoundParams::from_vars(params.to_vec());
            lstm.forward(g, &p, extra[0])
        });
        assert!(report.passed, "{report:?}");
    }
}
