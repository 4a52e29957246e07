use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Denominator floor for per-element relative deviation, so elements whose
/// true gradient is essentially zero are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|numeric|, GRAD_CHECK_FLOOR)`.
    pub max_rel_deviation: f64,
    /// `(input, element)` where the maximum occurred.
    pub worst: (usize, usize),
    pub passed: bool,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    /// Set when `f` itself failed; the check is then reported as failed.
    pub error: Option<String>,
}

fn evaluate<F>(f: &F, inputs: &[Tensor], want_grad: bool) -> Result<(f64, Vec<Tensor>)>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), want_grad))
        .collect::<Result<Vec<_>>>()?;
    let root = f(&g, &vars)?;
    let value = g.item(root)?;
    if !want_grad {
        return Ok((value, Vec::new()));
    }
    g.backward(root)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, grads))
}

/// Compares reverse-mode gradients of scalar `f` with central differences
/// of step `step` in every input element. Never fails; problems show up in
/// the report.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64, tolerance: f64) -> GradCheckReport
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let failed = |msg: String| GradCheckReport {
        max_rel_deviation: f64::INFINITY,
        worst: (0, 0),
        passed: false,
        analytic: Vec::new(),
        numeric: Vec::new(),
        error: Some(msg),
    };
    let analytic = match evaluate(&f, inputs, true) {
        Ok((_, g)) => g,
        Err(e) => return failed(e.to_string()),
    };
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut worst = (0, 0);
    let mut max_dev: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut num = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + step;
            let plus = evaluate(&f, &probe, false);
            probe[i].data_mut()[j] = orig - step;
            let minus = evaluate(&f, &probe, false);
            probe[i].data_mut()[j] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p.0, m.0),
                (Err(e), _) | (_, Err(e)) => return failed(e.to_string()),
            };
            let n = (plus - minus) / (2.0 * step);
            num.data_mut()[j] = n;
            let a = analytic[i].data()[j];
            let dev = (a - n).abs() / n.abs().max(GRAD_CHECK_FLOOR);
            if dev > max_dev || dev.is_nan() {
                max_dev = if dev.is_nan() { f64::INFINITY } else { dev };
                worst = (i, j);
            }
        }
        numeric.push(num);
    }
    GradCheckReport {
        max_rel_deviation: max_dev,
        worst,
        passed: max_dev < tolerance,
        analytic,
        numeric,
        error: None,
    }
}
