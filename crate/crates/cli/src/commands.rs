use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use coreloss::data::{load_magnet_dir, split, synth_generate, write_magnet_dir, Dataset, DEFAULT_SPLIT};
use coreloss::empirical::{classify_waveform, empirical_predict, SteinmetzParams, SteinmetzRecord, DEFAULT_H_TH};
use coreloss::harness::{evaluate, EvalReport};
use coreloss::model::{fit_prior, grid_search_lambdas, train, GridCell, ModelConfig, SepiTfpNet, TrainHistory};

use crate::manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "coreloss", version, about = "Hybrid empirical and deep-learning core-loss prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit Steinmetz coefficients to a labeled material directory.
    FitEmpirical(FitArgs),
    /// Print the empirical branch and spectral entropy of every waveform.
    Classify(ClassifyArgs),
    /// Predict losses with the empirical prior alone.
    PredictEmpirical(PredictArgs),
    /// Write a synthetic labeled dataset in the material-directory layout.
    Synth(SynthArgs),
    /// Train the hybrid network and evaluate it on the held-out split.
    Train(TrainArgs),
    /// Evaluate a saved network on a labeled material directory.
    Evaluate(EvaluateArgs),
    /// Train one network per (lambda1, lambda2) pair and keep the best.
    GridSearch(GridArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Material directory (B_Field.csv, Frequency.csv, Temperature.csv, Volumetric_Loss.csv).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "h-th", default_value_t = DEFAULT_H_TH)]
    h_th: f64,
    /// Also write classify.csv and a manifest here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    /// Coefficient file written by fit-empirical.
    #[arg(long)]
    params: PathBuf,
    #[arg(long = "h-th", default_value_t = DEFAULT_H_TH)]
    h_th: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Relative standard deviation of the multiplicative label noise.
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 3.0)]
    k: f64,
    #[arg(long, default_value_t = 1.4)]
    a: f64,
    #[arg(long, default_value_t = 2.5)]
    b: f64,
}

/// Model settings: a TOML config file plus flag overrides. Flags win.
#[derive(Debug, Args)]
pub struct Hyper {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds the split, weight initialization and batch order.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "h-th")]
    h_th: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

impl Hyper {
    fn resolve(&self) -> Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let parsed: ModelConfig =
                    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
                parsed
            }
            None => ModelConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.h_th {
            cfg.h_th = v;
        }
        if let Some(v) = self.lambda1 {
            cfg.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            cfg.lambda2 = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: Hyper,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model directory written by train or grid-search.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated lambda1 values.
    #[arg(long = "lambda1-grid", value_delimiter = ',', default_values_t = vec![1.0])]
    lambda1_grid: Vec<f64>,
    /// Comma-separated lambda2 values.
    #[arg(long = "lambda2-grid", value_delimiter = ',', default_values_t = vec![0.0, 0.1, 0.3])]
    lambda2_grid: Vec<f64>,
    #[command(flatten)]
    hyper: Hyper,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::FitEmpirical(a) => fit_empirical(a),
        Command::Classify(a) => classify(a),
        Command::PredictEmpirical(a) => predict_empirical(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::GridSearch(a) => grid_search(a),
    }
}

fn load(dir: &Path) -> Result<Dataset> {
    load_magnet_dir(dir).with_context(|| format!("loading {}", dir.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn fit_empirical(a: FitArgs) -> Result<()> {
    let ds = load(&a.data)?;
    let fit = fit_prior(&ds)?;
    create_dir(&a.out)?;
    let path = a.out.join("steinmetz.toml");
    SteinmetzRecord::new(ds.material(), &fit.params, Some(fit.log_rms_residual)).save(&path)?;
    let p = fit.params;
    println!("k={:e} a={} b={} ki={:e}", p.k(), p.a(), p.b(), p.ki());
    let mut m = RunManifest::new("fit-empirical");
    m.input("data", &a.data).output(&path);
    m.write(&a.out)?;
    Ok(())
}

fn classify(a: ClassifyArgs) -> Result<()> {
    let ds = load(&a.data)?;
    let mut csv = String::from("index,branch,entropy\n");
    for (i, w) in ds.samples().iter().enumerate() {
        let c = classify_waveform(w, a.h_th).with_context(|| format!("sample {i}"))?;
        println!("{} H={:.6}", c.branch, c.entropy);
        writeln!(csv, "{i},{},{:?}", c.branch, c.entropy)?;
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        let path = out.join("classify.csv");
        write_file(&path, &csv)?;
        let mut m = RunManifest::new("classify");
        m.input("data", &a.data).output(&path);
        m.write(out)?;
    }
    Ok(())
}

fn predict_empirical(a: PredictArgs) -> Result<()> {
    let ds = load(&a.data)?;
    let params = SteinmetzRecord::load(&a.params)
        .and_then(|r| r.params())
        .with_context(|| format!("reading {}", a.params.display()))?;
    let mut csv = String::from("index,branch,entropy,p_emp\n");
    for (i, w) in ds.samples().iter().enumerate() {
        let (p, c) = empirical_predict(&params, w, a.h_th).with_context(|| format!("sample {i}"))?;
        println!("{} H={:.6} P={p:.6e}", c.branch, c.entropy);
        writeln!(csv, "{i},{},{:?},{p:?}", c.branch, c.entropy)?;
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        let path = out.join("predictions.csv");
        write_file(&path, &csv)?;
        let mut m = RunManifest::new("predict-empirical");
        m.input("data", &a.data).input("params", &a.params).output(&path);
        m.write(out)?;
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let params = SteinmetzParams::new(a.k, a.a, a.b)?;
    let ds = synth_generate(a.n, &params, a.noise, a.seed)?;
    write_magnet_dir(&ds, &a.out)?;
    let mut m = RunManifest::new("synth");
    m.seed = Some(a.seed);
    m.output(&a.out);
    m.write(&a.out)?;
    println!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(())
}

fn history_csv(h: &TrainHistory) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,val_abs95\n");
    for r in &h.epochs {
        let _ = writeln!(s, "{},{:?},{:?},{:?}", r.epoch, r.train_loss, r.val_loss, r.val_abs95);
    }
    s
}

fn grid_csv(cells: &[GridCell]) -> String {
    let mut s = String::from("lambda1,lambda2,val_abs95,error\n");
    for c in cells {
        let score = c.val_abs95.map_or(String::new(), |v| format!("{v:?}"));
        let err = c.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
        let _ = writeln!(s, "{:?},{:?},{score},{err}", c.lambda1, c.lambda2);
    }
    s
}

/// Writes `report.txt` and `errors.csv` into `out` and prints the summary.
fn write_report(report: &EvalReport, out: &Path, m: &mut RunManifest) -> Result<()> {
    let text = out.join("report.txt");
    let csv = out.join("errors.csv");
    report.write_text(&text)?;
    report.write_csv(&csv)?;
    m.output(&text).output(&csv);
    print!("{}", report.to_text());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = a.hyper.resolve()?;
    let ds = load(&a.data)?;
    let (tr, va, te) = split(&ds, DEFAULT_SPLIT, cfg.seed)?;
    let mut net = SepiTfpNet::for_training(cfg.clone(), &tr)?;
    let history = train(&mut net, &tr, &va, &cfg)?;
    create_dir(&a.out)?;
    let mut m = RunManifest::new("train");
    m.seed = Some(cfg.seed);
    m.config = Some(cfg.clone());
    m.input("data", &a.data);
    let model_dir = a.out.join("model");
    net.save(&model_dir)?;
    let hist = a.out.join("history.csv");
    write_file(&hist, &history_csv(&history))?;
    m.output(&model_dir).output(&hist);
    let mut report = evaluate(&net, &te)?;
    report.meta.split_seed = Some(cfg.seed);
    write_report(&report, &a.out, &mut m)?;
    m.write(&a.out)?;
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let net = SepiTfpNet::load(&a.model).with_context(|| format!("loading model {}", a.model.display()))?;
    let ds = load(&a.data)?;
    let report = evaluate(&net, &ds)?;
    create_dir(&a.out)?;
    let mut m = RunManifest::new("evaluate");
    m.config = Some(net.config().clone());
    m.input("data", &a.data).input("model", &a.model);
    write_report(&report, &a.out, &mut m)?;
    m.write(&a.out)?;
    Ok(())
}

fn grid_search(a: GridArgs) -> Result<()> {
    let cfg = a.hyper.resolve()?;
    if a.lambda1_grid.is_empty() || a.lambda2_grid.is_empty() {
        bail!("lambda grids must not be empty");
    }
    let grid: Vec<(f64, f64)> = a
        .lambda1_grid
        .iter()
        .flat_map(|&l1| a.lambda2_grid.iter().map(move |&l2| (l1, l2)))
        .collect();
    let ds = load(&a.data)?;
    let (tr, va, te) = split(&ds, DEFAULT_SPLIT, cfg.seed)?;
    let result = grid_search_lambdas(&tr, &va, &grid, &cfg)?;
    create_dir(&a.out)?;
    let mut m = RunManifest::new("grid-search");
    m.seed = Some(cfg.seed);
    m.config = Some(result.best.config().clone());
    m.input("data", &a.data);
    let table = a.out.join("grid.csv");
    write_file(&table, &grid_csv(&result.cells))?;
    let model_dir = a.out.join("model");
    result.best.save(&model_dir)?;
    m.output(&table).output(&model_dir);
    print!("{}", grid_csv(&result.cells));
    let (l1, l2) = result.best_lambdas();
    println!("best lambda1={l1} lambda2={l2}");
    let mut report = evaluate(&result.best, &te)?;
    report.meta.split_seed = Some(cfg.seed);
    write_report(&report, &a.out, &mut m)?;
    m.write(&a.out)?;
    Ok(())
}
