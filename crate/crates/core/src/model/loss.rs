use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

fn check_inputs(n: usize, p_act: &[f64], p_emp: &[f64], lambda1: f64, lambda2: f64) -> Result<()> {
    if n == 0 {
        return Err(Error::Dataset("loss needs a non-empty batch".into()));
    }
    if p_act.len() != n || p_emp.len() != n {
        return Err(Error::shape(
            "custom_loss",
            format!(
                "{n} predictions but {} measurements and {} prior values",
                p_act.len(),
                p_emp.len()
            ),
        ));
    }
    for (name, xs) in [("measured loss", p_act), ("prior loss", p_emp)] {
        if let Some(i) = xs.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Domain(format!(
                "{name} at batch position {i} must be positive, got {}",
                xs[i]
            )));
        }
    }
    if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
        return Err(Error::Config("loss weights must be non-negative".into()));
    }
    Ok(())
}

/// Dual relative-error objective on a `[N]` prediction node:
/// `λ1·mean(|p − p_act| / p_act) + λ2·mean(|p − p_emp| / p_emp)`.
/// A term with zero weight is left out of the graph.
pub fn custom_loss(g: &Graph, p_pred: Var, p_act: &[f64], p_emp: &[f64], lambda1: f64, lambda2: f64) -> Result<Var> {
    let shape = g.shape(p_pred);
    if shape.len() != 1 {
        return Err(Error::shape("custom_loss", format!("predictions must be [N], got {shape:?}")));
    }
    check_inputs(shape[0], p_act, p_emp, lambda1, lambda2)?;
    let term = |reference: &[f64]| -> Result<Var> {
        let r = g.input(Tensor::vector(reference.to_vec()))?;
        g.mean(g.abs(g.div(g.sub(p_pred, r)?, r)?)?, None)
    };
    let mut total: Option<Var> = None;
    for (weight, reference) in [(lambda1, p_act), (lambda2, p_emp)] {
        if weight > 0.0 {
            let t = g.scale(term(reference)?, weight)?;
            total = Some(match total {
                Some(acc) => g.add(acc, t)?,
                None => t,
            });
        }
    }
    total.ok_or_else(|| Error::Config("lambda1 and lambda2 must not both be zero".into()))
}

/// Plain-number value of [`custom_loss`].
pub fn custom_loss_value(p_pred: &[f64], p_act: &[f64], p_emp: &[f64], lambda1: f64, lambda2: f64) -> Result<f64> {
    check_inputs(p_pred.len(), p_act, p_emp, lambda1, lambda2)?;
    let term = |reference: &[f64]| {
        p_pred
            .iter()
            .zip(reference)
            .map(|(p, r)| ((p - r) / r).abs())
            .sum::<f64>()
            / p_pred.len() as f64
    };
    let mut total: Option<f64> = None;
    for (weight, reference) in [(lambda1, p_act), (lambda2, p_emp)] {
        if weight > 0.0 {
            let t = term(reference) * weight;
            total = Some(total.map_or(t, |acc| acc + t));
        }
    }
    total.ok_or_else(|| Error::Config("lambda1 and lambda2 must not both be zero".into()))
}
