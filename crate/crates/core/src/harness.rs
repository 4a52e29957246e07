//! Relative-error statistics and evaluation reports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::empirical::Branch;
use crate::error::{Error, Result};
use crate::model::SepiTfpNet;

pub const PERCENTILE_RULE: &str = "linear interpolation between closest ranks, rank = q*(n-1), zero-indexed";

/// `q`-quantile of ascending `sorted` by the closest-ranks rule.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn sorted_errors(errors: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(Error::Dataset("no errors to summarize".into()));
    }
    if let Some(v) = errors.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Domain(format!("relative errors must be finite and non-negative, got {v}")));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted)
}

/// 95th percentile of relative errors, in percent.
pub fn abs95(errors: &[f64]) -> Result<f64> {
    Ok(100.0 * quantile(&sorted_errors(errors)?, 0.95))
}

/// Summary of a relative-error distribution, all in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub median: f64,
    pub abs95: f64,
    pub max: f64,
}

impl ErrorStats {
    pub fn of(errors: &[f64]) -> Result<Self> {
        let sorted = sorted_errors(errors)?;
        Ok(Self {
            mean: 100.0 * sorted.iter().sum::<f64>() / sorted.len() as f64,
            median: 100.0 * quantile(&sorted, 0.5),
            abs95: 100.0 * quantile(&sorted, 0.95),
            max: 100.0 * sorted[sorted.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub branch: Branch,
    pub entropy: f64,
    pub p_act: f64,
    pub p_pred: f64,
    pub p_emp: f64,
    pub rel_err: f64,
    pub prior_rel_err: f64,
}

impl SampleRecord {
    pub fn new(index: usize, branch: Branch, entropy: f64, p_act: f64, p_pred: f64, p_emp: f64) -> Self {
        Self {
            index,
            branch,
            entropy,
            p_act,
            p_pred,
            p_emp,
            rel_err: (p_pred - p_act).abs() / p_act,
            prior_rel_err: (p_emp - p_act).abs() / p_act,
        }
    }
}

/// Descriptive fields printed in the report header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub material: String,
    pub config_digest: String,
    pub split_seed: Option<u64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub h_th: f64,
}

impl ReportMeta {
    pub fn for_net(net: &SepiTfpNet) -> Self {
        let cfg = net.config();
        Self {
            material: net.material().to_string(),
            config_digest: cfg.digest(),
            split_seed: None,
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
            h_th: cfg.h_th,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub samples: Vec<SampleRecord>,
    pub network: ErrorStats,
    /// Same statistics for the empirical prior alone.
    pub prior_only: ErrorStats,
    pub steinmetz_count: usize,
    pub igse_count: usize,
}

impl EvalReport {
    pub fn from_records(meta: ReportMeta, samples: Vec<SampleRecord>) -> Result<Self> {
        let net_err: Vec<f64> = samples.iter().map(|s| s.rel_err).collect();
        let prior_err: Vec<f64> = samples.iter().map(|s| s.prior_rel_err).collect();
        let steinmetz_count = samples.iter().filter(|s| s.branch == Branch::Steinmetz).count();
        Ok(Self {
            network: ErrorStats::of(&net_err)?,
            prior_only: ErrorStats::of(&prior_err)?,
            igse_count: samples.len() - steinmetz_count,
            steinmetz_count,
            meta,
            samples,
        })
    }

    pub fn rel_errors(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.rel_err).collect()
    }

    pub fn to_text(&self) -> String {
        let m = &self.meta;
        let mut s = String::new();
        let _ = writeln!(s, "# core-loss evaluation report");
        let _ = writeln!(s, "material        {}", m.material);
        let _ = writeln!(s, "config_digest   {}", m.config_digest);
        let seed = m.split_seed.map_or_else(|| "-".to_string(), |v| v.to_string());
        let _ = writeln!(s, "split_seed      {seed}");
        let _ = writeln!(s, "lambda1         {}", m.lambda1);
        let _ = writeln!(s, "lambda2         {}", m.lambda2);
        let _ = writeln!(s, "h_th            {}", m.h_th);
        let _ = writeln!(s, "samples         {}", self.samples.len());
        let _ = writeln!(s, "percentile      {PERCENTILE_RULE}");
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<14}{:>14}{:>14}", "metric (%)", "network", "prior_only");
        for (name, a, b) in [
            ("mean", self.network.mean, self.prior_only.mean),
            ("median", self.network.median, self.prior_only.median),
            ("abs95", self.network.abs95, self.prior_only.abs95),
            ("max", self.network.max, self.prior_only.max),
        ] {
            let _ = writeln!(s, "{name:<14}{a:>14.4}{b:>14.4}");
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<14}{:>14}", "branch", "count");
        let _ = writeln!(s, "{:<14}{:>14}", Branch::Steinmetz, self.steinmetz_count);
        let _ = writeln!(s, "{:<14}{:>14}", Branch::Igse, self.igse_count);
        s
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.samples {
            w.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

/// Reads back a per-sample file written by [`EvalReport::write_csv`].
pub fn read_sample_csv(path: &Path) -> Result<Vec<SampleRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .enumerate()
        .map(|(i, rec)| {
            rec.map_err(|e| Error::Data {
                file: path.display().to_string(),
                row: i + 2,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Runs the network on every sample of a labeled dataset and also scores
/// the prior on its own.
pub fn evaluate(net: &SepiTfpNet, ds: &Dataset) -> Result<EvalReport> {
    let labels = ds.labels()?;
    let preds = net.predict(ds.samples())?;
    let records = preds
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (p, act))| {
            if !(p.p_pred.is_finite() && p.p_pred >= 0.0) {
                return Err(Error::NonFinite { op: "prediction" }.at_sample(i));
            }
            Ok(SampleRecord::new(i, p.choice.branch, p.choice.entropy, act, p.p_pred, p.p_emp))
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_records(ReportMeta::for_net(net), records)
}
