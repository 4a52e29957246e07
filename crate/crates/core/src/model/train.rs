use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{custom_loss, custom_loss_value, Adam, ModelConfig, Prepared, SepiTfpNet};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::harness::abs95;
use crate::tensor::Graph;

/// RNG stream for batch shuffling, kept apart from weight initialization.
const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean of the batch losses seen during the epoch.
    pub train_loss: f64,
    pub val_loss: f64,
    /// 95th-percentile relative validation error, in percent.
    pub val_abs95: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

struct Split {
    prepared: Vec<Prepared>,
    labels: Vec<f64>,
    p_emp: Vec<f64>,
}

fn prepare_split(net: &SepiTfpNet, ds: &Dataset, what: &str) -> Result<Split> {
    if ds.is_empty() {
        return Err(Error::Dataset(format!("{what} split is empty")));
    }
    let labels = ds.labels()?;
    let prepared = net.prepare_all(ds.samples())?;
    let p_emp = prepared.iter().map(|p| p.p_emp).collect();
    Ok(Split {
        prepared,
        labels,
        p_emp,
    })
}

/// Validation loss and Abs.95 of the current weights.
fn validate(net: &SepiTfpNet, val: &Split, cfg: &ModelConfig) -> Result<(f64, f64)> {
    let preds = net.predict_prepared(&val.prepared)?;
    let loss = custom_loss_value(&preds, &val.labels, &val.p_emp, cfg.lambda1, cfg.lambda2)?;
    let rel: Vec<f64> = preds
        .iter()
        .zip(&val.labels)
        .map(|(p, a)| (p - a).abs() / a)
        .collect();
    Ok((loss, abs95(&rel)?))
}

/// Mini-batch Adam on the dual relative-error objective. `config` supplies
/// the loss weights and optimizer settings and must describe the same
/// architecture as `net`. The prior inside `net` must already be fitted.
pub fn train(net: &mut SepiTfpNet, train: &Dataset, val: &Dataset, config: &ModelConfig) -> Result<TrainHistory> {
    net.set_training_config(config)?;
    let cfg = net.config().clone();
    let tr = prepare_split(net, train, "training")?;
    let va = prepare_split(net, val, "validation")?;
    let mut adam = Adam::new(net.store(), cfg.learning_rate, cfg.beta1, cfg.beta2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..tr.prepared.len()).collect();
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let non_finite = |e: Error| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss { epoch, batch },
                other => other,
            };
            let g = Graph::new();
            let p = net.store().bind(&g, true)?;
            let preds = idx
                .iter()
                .map(|&i| net.forward_graph(&g, &p, &tr.prepared[i]))
                .collect::<Result<Vec<_>>>()
                .map_err(non_finite)?;
            let pred = g.concat(&preds, 0).map_err(non_finite)?;
            let act: Vec<f64> = idx.iter().map(|&i| tr.labels[i]).collect();
            let emp: Vec<f64> = idx.iter().map(|&i| tr.p_emp[i]).collect();
            let loss = custom_loss(&g, pred, &act, &emp, cfg.lambda1, cfg.lambda2).map_err(non_finite)?;
            let value = g.item(loss)?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            g.backward(loss).map_err(non_finite)?;
            let grads = net.store().grads(&g, &p);
            if grads.iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            adam.step(net.store_mut(), &grads)?;
            loss_sum += value * idx.len() as f64;
        }
        let (val_loss, val_abs95) = validate(net, &va, &cfg)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_loss,
            val_abs95,
        });
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Validation Abs.95 after training, absent when the cell failed.
    pub val_abs95: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GridSearchResult {
    pub cells: Vec<GridCell>,
    pub best_index: usize,
    /// Network trained with the winning pair.
    pub best: SepiTfpNet,
}

impl GridSearchResult {
    pub fn best_lambdas(&self) -> (f64, f64) {
        let c = &self.cells[self.best_index];
        (c.lambda1, c.lambda2)
    }
}

/// Trains one fresh network per `(λ1, λ2)` pair and keeps the one with the
/// lowest validation Abs.95. Ties prefer the smaller λ2, then the smaller
/// λ1, then the earlier cell. A failing cell is recorded and skipped.
pub fn grid_search_lambdas(
    train_ds: &Dataset,
    val_ds: &Dataset,
    grid: &[(f64, f64)],
    base: &ModelConfig,
) -> Result<GridSearchResult> {
    if grid.is_empty() {
        return Err(Error::Config("lambda grid is empty".into()));
    }
    let mut cells = Vec::with_capacity(grid.len());
    let mut best: Option<(usize, SepiTfpNet)> = None;
    for (i, &(lambda1, lambda2)) in grid.iter().enumerate() {
        let cfg = ModelConfig {
            lambda1,
            lambda2,
            ..base.clone()
        };
        let outcome = SepiTfpNet::for_training(cfg.clone(), train_ds).and_then(|mut net| {
            let h = train(&mut net, train_ds, val_ds, &cfg)?;
            let score = h.last().map(|r| r.val_abs95).unwrap_or(f64::INFINITY);
            Ok((net, score))
        });
        match outcome {
            Ok((net, score)) => {
                cells.push(GridCell {
                    lambda1,
                    lambda2,
                    val_abs95: Some(score),
                    error: None,
                });
                let better = match &best {
                    None => true,
                    Some((b, _)) => {
                        let c: &GridCell = &cells[*b];
                        let key = (score, lambda2, lambda1);
                        let cur = (c.val_abs95.unwrap(), c.lambda2, c.lambda1);
                        key.partial_cmp(&cur) == Some(std::cmp::Ordering::Less)
                    }
                };
                if better {
                    best = Some((i, net));
                }
            }
            Err(e) => cells.push(GridCell {
                lambda1,
                lambda2,
                val_abs95: None,
                error: Some(e.to_string()),
            }),
        }
    }
    match best {
        Some((best_index, best)) => Ok(GridSearchResult {
            cells,
            best_index,
            best,
        }),
        None => Err(Error::Config(format!(
            "every lambda pair failed; first error: {}",
            cells[0].error.as_deref().unwrap_or("unknown")
        ))),
    }
}

/// Prior-only baseline of a labeled split: `(p_emp, p_act)` per sample.
pub fn prior_predictions(net: &SepiTfpNet, ds: &Dataset) -> Result<Vec<(f64, f64)>> {
    let labels = ds.labels()?;
    let prepared = net.prepare_all(ds.samples())?;
    Ok(prepared.iter().zip(labels).map(|(p, a)| (p.p_emp, a)).collect())
}
