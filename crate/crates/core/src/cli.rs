//! Command-line front end: `search`, `evaluate`, `estimate-bias`, `gen-data`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::augment::DEFAULT_OPS;
use crate::bilevel::{accuracy, mean_loss, run_search_with, train_classifier, SearchConfig, TrainConfig};
use crate::data::{load_dataset, reduce_and_split, synth_rotor, write_dataset_dir, Dataset};
use crate::error::{Error, Result};
use crate::estimators::{bias_table, BiasRow, EstimatorKind, ToyProblem};
use crate::plot::{bar_chart, line_chart};
use crate::policy::{FixedPolicy, PairingMode, PolicyFile};

#[derive(Parser, Debug)]
#[command(name = "augsearch", version, about = "Differentiable augmentation policy search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Search an augmentation policy on a dataset.
    Search(SearchArgs),
    /// Train a fresh classifier with a fixed policy and report test error.
    Evaluate(EvaluateArgs),
    /// Compare gradient estimators against exact gradients on a toy problem.
    EstimateBias(BiasArgs),
    /// Write the synthetic grating dataset as IDX files.
    GenData(GenDataArgs),
}

#[derive(Args, Debug, Default, Clone)]
pub struct CommonArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (train-*.idx, optional test-*.idx) or CSV file.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Classifier architecture: mlp or smallcnn.
    #[arg(long)]
    pub model: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct SearchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_parser = ["relax", "gumbel_st", "score"])]
    pub estimator: Option<String>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Comma-separated op names.
    #[arg(long, value_delimiter = ',')]
    pub ops: Option<Vec<String>>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_parser = ["unordered", "ordered"])]
    pub pairing: Option<String>,
    #[arg(long)]
    pub top_n: Option<usize>,
    /// Size of the reduced set split into search train/validation halves.
    #[arg(long)]
    pub n_reduced: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Policy file produced by `search`.
    #[arg(long)]
    pub policy: PathBuf,
    /// Separate test data (defaults to the dataset's test split).
    #[arg(long)]
    pub test_dataset: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct BiasArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "bernoulli", value_parser = ["bernoulli", "table"])]
    pub toy: String,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    /// Apply probability of the Bernoulli toy.
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    /// Op names for the loss-table toy.
    #[arg(long, value_delimiter = ',')]
    pub ops: Option<Vec<String>>,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    #[arg(long, default_value = "unordered", value_parser = ["unordered", "ordered"])]
    pub pairing: String,
}

#[derive(Args, Debug, Clone)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4000)]
    pub n: usize,
    #[arg(long, default_value_t = 2000)]
    pub n_test: usize,
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Fully resolved settings echoed to `resolved-config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub test_dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub n_reduced: Option<usize>,
    pub policy: Option<PathBuf>,
    pub search: SearchConfig,
    pub evaluate: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            test_dataset: None,
            out: PathBuf::from("runs/latest"),
            n_reduced: None,
            policy: None,
            search: SearchConfig::default(),
            evaluate: TrainConfig::default(),
        }
    }
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let s = std::fs::read_to_string(path).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&s).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

fn apply_common(cfg: &mut RunConfig, c: &CommonArgs) {
    if let Some(d) = &c.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    if let Some(e) = c.epochs {
        cfg.search.epochs = e;
        cfg.evaluate.epochs = e;
    }
    if let Some(b) = c.batch_size {
        cfg.search.batch_size = b;
        cfg.evaluate.batch_size = b;
    }
    if let Some(s) = c.seed {
        cfg.search.seed = s;
        cfg.evaluate.seed = s;
    }
    if let Some(m) = &c.model {
        cfg.search.model = m.clone();
        cfg.evaluate.model = m.clone();
    }
}

pub fn resolve_search(a: &SearchArgs) -> Result<RunConfig> {
    let mut cfg = read_config(a.common.config.as_deref())?;
    apply_common(&mut cfg, &a.common);
    if let Some(e) = &a.estimator {
        cfg.search.estimator = e.parse()?;
    }
    if let Some(t) = a.tau {
        cfg.search.tau = t;
        cfg.search.lambda = t;
    }
    if let Some(ops) = &a.ops {
        cfg.search.ops = ops.clone();
    }
    if let Some(k) = a.k {
        cfg.search.k = k;
    }
    if let Some(p) = &a.pairing {
        cfg.search.pairing = p.parse()?;
    }
    if let Some(n) = a.top_n {
        cfg.search.top_n = n;
    }
    if let Some(n) = a.n_reduced {
        cfg.n_reduced = Some(n);
    }
    cfg.search.validate()?;
    Ok(cfg)
}

pub fn resolve_evaluate(a: &EvaluateArgs) -> Result<RunConfig> {
    let mut cfg = read_config(a.common.config.as_deref())?;
    apply_common(&mut cfg, &a.common);
    cfg.policy = Some(a.policy.clone());
    if let Some(t) = &a.test_dataset {
        cfg.test_dataset = Some(t.clone());
    }
    cfg.evaluate.model.parse::<crate::models::Architecture>()?;
    Ok(cfg)
}

fn require_dataset(cfg: &RunConfig) -> Result<PathBuf> {
    let p = cfg
        .dataset
        .clone()
        .ok_or_else(|| Error::InvalidConfig("missing dataset path: pass --dataset or set it in --config".into()))?;
    if !p.exists() {
        return Err(Error::InvalidConfig(format!("dataset path {} does not exist", p.display())));
    }
    Ok(p)
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("plots")).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v)?;
    std::fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::InvalidDataset(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidDataset(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, s: &str) -> Result<()> {
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn cmd_search(cfg: &RunConfig) -> Result<PolicyFile> {
    let path = require_dataset(cfg)?;
    let bundle = load_dataset(&path)?;
    let n = cfg.n_reduced.unwrap_or(bundle.train.len());
    let (train, val) = reduce_and_split(&bundle.train, n, cfg.search.seed)?;
    prepare_out(&cfg.out)?;
    write_json(&cfg.out.join("resolved-config.json"), cfg)?;
    eprintln!(
        "search: {} train / {} val images, N={} sub-policies, estimator {}",
        train.len(),
        val.len(),
        cfg.search.space()?.len(),
        cfg.search.estimator
    );
    let result = run_search_with(&cfg.search, &train, &val, |r| {
        eprintln!(
            "epoch {:>3}  train {:.4}  val {:.4}  H(pi) {:.4}  beta {:.3}  m {:.3}  skipped {}",
            r.epoch, r.train_loss, r.val_loss, r.pi_entropy, r.mean_beta, r.mean_m, r.skipped_steps
        );
    })?;
    write_csv(&cfg.out.join("metrics.csv"), &result.metrics)?;
    write_text(&cfg.out.join("policy.json"), &(result.policy.to_json()? + "\n"))?;
    let x: Vec<f64> = result.metrics.iter().map(|r| r.epoch as f64).collect();
    let train_l = result.metrics.iter().map(|r| r.train_loss).collect();
    let val_l = result.metrics.iter().map(|r| r.val_loss).collect();
    let ent = result.metrics.iter().map(|r| r.pi_entropy).collect();
    write_text(
        &cfg.out.join("plots/loss.svg"),
        &line_chart("Search loss", "epoch", "cross-entropy", &x, &[("train", train_l), ("val", val_l)]),
    )?;
    write_text(
        &cfg.out.join("plots/pi_entropy.svg"),
        &line_chart("Sub-policy entropy", "epoch", "H(pi)", &x, &[("H(pi)", ent)]),
    )?;
    Ok(result.policy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResults {
    pub test_accuracy: f64,
    pub test_error: f64,
    pub test_loss: f64,
    pub train_images: usize,
    pub test_images: usize,
    pub policy: PolicyFile,
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvalResults> {
    let policy_path = cfg.policy.clone().ok_or_else(|| Error::InvalidConfig("missing --policy".into()))?;
    let text = std::fs::read_to_string(&policy_path)
        .map_err(|e| Error::InvalidPolicy(format!("{}: {e}", policy_path.display())))?;
    let policy = PolicyFile::from_json(&text)?;
    let fixed = FixedPolicy::from_file(&policy)?;
    let path = require_dataset(cfg)?;
    let bundle = load_dataset(&path)?;
    let test: Dataset = match &cfg.test_dataset {
        Some(t) => {
            let b = load_dataset(t)?;
            b.test.unwrap_or(b.train)
        }
        None => bundle
            .test
            .clone()
            .ok_or_else(|| Error::InvalidConfig("dataset has no test split; pass --test-dataset".into()))?,
    };
    prepare_out(&cfg.out)?;
    write_json(&cfg.out.join("resolved-config.json"), cfg)?;
    for sp in &policy.subpolicies {
        let ops: Vec<String> = sp
            .ops
            .iter()
            .map(|o| format!("{}(p={:.4}, m={:.4})", o.name, o.prob, o.magnitude))
            .collect();
        eprintln!("policy #{:<3} pi={:.4}  {}", sp.rank, sp.pi, ops.join(" -> "));
    }
    let (model, log) = train_classifier(&bundle.train, &fixed, &cfg.evaluate)?;
    write_csv(&cfg.out.join("metrics.csv"), &log)?;
    let acc = accuracy(&model, &test)?;
    let res = EvalResults {
        test_accuracy: acc,
        test_error: 1.0 - acc,
        test_loss: mean_loss(&model, &test, 512)?,
        train_images: bundle.train.len(),
        test_images: test.len(),
        policy,
    };
    write_json(&cfg.out.join("results.json"), &res)?;
    let x: Vec<f64> = log.iter().map(|r| r.epoch as f64).collect();
    write_text(
        &cfg.out.join("plots/loss.svg"),
        &line_chart("Training loss", "epoch", "cross-entropy", &x, &[("train", log.iter().map(|r| r.train_loss).collect())]),
    )?;
    println!("test error: {:.4} (accuracy {:.4})", res.test_error, res.test_accuracy);
    Ok(res)
}

pub fn cmd_estimate_bias(a: &BiasArgs) -> Result<Vec<BiasRow>> {
    let toy = match a.toy.as_str() {
        "bernoulli" => ToyProblem::bernoulli(a.beta)?,
        _ => {
            let ops: Vec<String> = a
                .ops
                .clone()
                .unwrap_or_else(|| DEFAULT_OPS[..3].iter().map(|o| o.name().to_string()).collect());
            let kinds = ops.iter().map(|s| s.parse()).collect::<Result<Vec<_>>>()?;
            let pairing: PairingMode = a.pairing.parse()?;
            ToyProblem::random_table(&kinds, a.k, pairing, a.seed)?
        }
    };
    let rows = bias_table(
        &toy,
        &[EstimatorKind::Score, EstimatorKind::Relax, EstimatorKind::GumbelSt],
        crate::policy::Relaxation::uniform(a.tau),
        a.samples,
        a.seed,
    )?;
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("runs/estimate-bias"));
    prepare_out(&out)?;
    write_json(
        &out.join("resolved-config.json"),
        &serde_json::json!({
            "toy": a.toy, "samples": a.samples, "seed": a.seed, "tau": a.tau, "lambda": a.tau,
            "beta": a.beta, "ops": a.ops, "k": a.k, "pairing": a.pairing,
        }),
    )?;
    write_csv(&out.join("bias.csv"), &rows)?;
    let bars: Vec<(String, f64)> = rows
        .iter()
        .map(|r| (format!("{} {}", r.estimator, r.parameter), r.bias_sigma))
        .collect();
    write_text(&out.join("plots/bias.svg"), &bar_chart("Bias in standard errors", "bias / SE", &bars))?;
    for r in &rows {
        println!(
            "{:<10} {:<12} mc_mean {:>11.6}  exact {:>11.6}  se {:.2e}  bias {:>7.2} sigma",
            r.estimator, r.parameter, r.mc_mean, r.exact, r.std_err, r.bias_sigma
        );
    }
    Ok(rows)
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<Vec<PathBuf>> {
    let train = synth_rotor(a.n, a.size, a.seed)?;
    let test = if a.n_test > 0 {
        Some(synth_rotor(a.n_test, a.size, a.seed.wrapping_add(TEST_SEED_OFFSET))?)
    } else {
        None
    };
    let files = write_dataset_dir(&a.out, &train, test.as_ref())?;
    for f in &files {
        println!("{}", f.display());
    }
    Ok(files)
}

/// Seed offset separating the generated test split from the training split.
pub const TEST_SEED_OFFSET: u64 = 1_000_003;

/// Maps an error to the process exit code: 2 for usage or configuration
/// problems, 1 for runtime failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_)
        | Error::InvalidPolicy(_)
        | Error::UnknownOp(_)
        | Error::InvalidSpace(_)
        | Error::SpaceTooLarge { .. } => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Search(a) => cmd_search(&resolve_search(&a)?).map(drop),
        Command::Evaluate(a) => cmd_evaluate(&resolve_evaluate(&a)?).map(drop),
        Command::EstimateBias(a) => cmd_estimate_bias(&a).map(drop),
        Command::GenData(a) => cmd_gen_data(&a).map(drop),
    }
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if exit_code(&e) == 2 {
                eprintln!("run `augsearch --help` for usage");
            }
            exit_code(&e)
        }
    }
}
