//! `cib gen | train | eval | ablate`.
//!
//! Options resolve as flags over the `--config` JSON file over defaults, and
//! every command writes the merged result to `config.json` in `--out`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{load_realizations, load_with_sidecar, synthesize_benchmark, write_csv, SplitIndices, Standardizer, SyntheticSpec};
use crate::error::{CibError, Result};
use crate::eval::{ablation_run, evaluate, train_pipeline, write_curve_csv, EvalReport, ExperimentConfig, Metric, TrainedRun};
use crate::nets::{config_hash, Checkpoint, CibModel};
use crate::trainer::write_log;

#[derive(Debug, Parser)]
#[command(name = "cib", version, about = "Causal information bottleneck: train and evaluate ITE estimators")]
pub struct Cli {
    /// JSON file with options for the command; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Worker threads for repeated runs.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic benchmark dataset.
    Gen(GenArgs),
    /// Train a model on a dataset CSV.
    Train(TrainArgs),
    /// Evaluate a trained model.
    Eval(EvalArgs),
    /// Train and evaluate the four ablation variants over several seeds.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub dx: Option<usize>,
    /// Selection-bias strength.
    #[arg(long)]
    pub bias: Option<f64>,
    #[arg(long)]
    pub noise_sd: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct ModelFlags {
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda_m: Option<f64>,
    #[arg(long)]
    pub lambda_v: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub cpvr_samples: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub d_z: Option<usize>,
    /// Hidden widths, e.g. `64,64`.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Train/valid/test ratios, e.g. `0.63,0.27,0.1`.
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<f64>>,
    #[arg(long)]
    pub deterministic_encoder: bool,
    #[arg(long)]
    pub propensity: bool,
    #[arg(long)]
    pub no_standardize: bool,
    /// Encoder draws per row at evaluation; 0 uses the mean.
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Schema sidecar; defaults to `schema.json` beside the data.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Rejection fractions, e.g. `0,0.1,0.2`.
    #[arg(long, value_delimiter = ',')]
    pub reject_ks: Option<Vec<f64>>,
    /// Metrics that must be computable: pehe, ate, policy, auc.
    #[arg(long, value_delimiter = ',')]
    pub metrics: Option<Vec<String>>,
    /// Row sets to evaluate: `in` (train + valid), `out` (test), `all`.
    /// Defaults to `in,out` on the training data and `all` otherwise.
    #[arg(long, value_delimiter = ',')]
    pub split: Option<Vec<String>>,
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Dataset CSV.
    #[arg(long, conflicts_with = "realizations")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Directory of realization CSVs sharing a `schema.json`.
    #[arg(long)]
    pub realizations: Option<PathBuf>,
    /// Seeds per dataset, counting up from `--seed`.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[command(flatten)]
    pub model: ModelFlags,
}

/// Merges `patch` into `base`, recursing into objects.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// `defaults` overlaid with the JSON object in `file`.
pub fn resolve_config<T: Serialize + DeserializeOwned>(defaults: &T, file: Option<&Path>) -> Result<T> {
    let mut value = serde_json::to_value(defaults)?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| CibError::io(path, e))?;
        merge(&mut value, serde_json::from_str(&text)?);
    }
    Ok(serde_json::from_value(value)?)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| CibError::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CibError::io(dir, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct GenConfig {
    #[serde(flatten)]
    spec: SyntheticSpec,
}

fn cmd_gen(cli: &Cli, args: &GenArgs) -> Result<()> {
    let defaults = GenConfig {
        spec: SyntheticSpec {
            n: 1000,
            d_x: 25,
            bias_strength: 2.0,
            noise_sd: 1.0,
            seed: 0,
        },
    };
    let mut cfg = resolve_config(&defaults, cli.config.as_deref())?;
    let s = &mut cfg.spec;
    s.n = args.n.unwrap_or(s.n);
    s.d_x = args.dx.unwrap_or(s.d_x);
    s.bias_strength = args.bias.unwrap_or(s.bias_strength);
    s.noise_sd = args.noise_sd.unwrap_or(s.noise_sd);
    s.seed = cli.seed.unwrap_or(s.seed);
    let data = synthesize_benchmark(&cfg.spec)?;
    ensure_dir(&cli.out)?;
    let schema = write_csv(&data.dataset, cli.out.join("data.csv"))?;
    schema.write(cli.out.join("schema.json"))?;
    write_json(&cfg, &cli.out.join("config.json"))?;
    println!("wrote {} rows to {}", data.dataset.n(), cli.out.join("data.csv").display());
    Ok(())
}

fn apply_flags(cfg: &mut ExperimentConfig, f: &ModelFlags) -> Result<()> {
    let h = &mut cfg.train.hyper;
    h.beta = f.beta.unwrap_or(h.beta);
    h.lambda_m = f.lambda_m.unwrap_or(h.lambda_m);
    h.lambda_v = f.lambda_v.unwrap_or(h.lambda_v);
    h.gamma = f.gamma.unwrap_or(h.gamma);
    h.cpvr_samples = f.cpvr_samples.unwrap_or(h.cpvr_samples);
    let t = &mut cfg.train;
    t.learning_rate = f.lr.unwrap_or(t.learning_rate);
    t.max_iterations = f.max_iterations.unwrap_or(t.max_iterations);
    t.batch_size = f.batch_size.unwrap_or(t.batch_size);
    t.early_stop_patience = f.patience.unwrap_or(t.early_stop_patience);
    let m = &mut cfg.model;
    m.d_z = f.d_z.unwrap_or(m.d_z);
    if let Some(h) = &f.hidden {
        m.hidden_dims = h.clone();
    }
    m.deterministic_encoder |= f.deterministic_encoder;
    m.propensity |= f.propensity;
    if f.no_standardize {
        cfg.standardize = false;
    }
    if let Some(s) = &f.split {
        cfg.split = s
            .as_slice()
            .try_into()
            .map_err(|_| CibError::Config(format!("--split needs three ratios, got {s:?}")))?;
    }
    cfg.eval.tau_samples = f.samples.unwrap_or(cfg.eval.tau_samples);
    Ok(())
}

/// Run metadata kept in the checkpoint next to the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunRecord {
    pub experiment: ExperimentConfig,
    pub standardizer: Option<Standardizer>,
    pub splits: SplitIndices,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct TrainSnapshot {
    data: PathBuf,
    schema: Option<PathBuf>,
    seed: u64,
    experiment: ExperimentConfig,
}

pub fn run_checkpoint(run: &TrainedRun, experiment: &ExperimentConfig, n: usize) -> Result<Checkpoint> {
    let mut ck = run.model.to_checkpoint(run.seed, config_hash(experiment)?);
    let record = RunRecord {
        experiment: experiment.clone(),
        standardizer: run.standardizer.clone(),
        splits: run.splits.clone(),
        n,
    };
    ck.extra.insert("run".into(), serde_json::to_value(record)?);
    Ok(ck)
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(&ExperimentConfig::default(), cli.config.as_deref())?;
    apply_flags(&mut cfg, &args.model)?;
    let seed = cli.seed.unwrap_or(cfg.train.seed);
    let ds = load_with_sidecar(&args.data, args.schema.as_deref())?;
    cfg.model.outcome = ds.outcome;
    let cfg = cfg.resolved(seed, ds.d_x());
    let run = train_pipeline(&ds, &cfg, seed)?;
    ensure_dir(&cli.out)?;
    run_checkpoint(&run, &cfg, ds.n())?.save(cli.out.join("model.json"))?;
    write_log(&run.log, cli.out.join("train.log.jsonl"))?;
    write_json(
        &TrainSnapshot {
            data: args.data.clone(),
            schema: args.schema.clone(),
            seed,
            experiment: cfg,
        },
        &cli.out.join("config.json"),
    )?;
    println!(
        "trained {} iterations; best validation loss {:.6}{}",
        run.log.last().map_or(0, |r| r.iter),
        run.best_valid_loss,
        if run.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct EvalSnapshot {
    model: PathBuf,
    data: PathBuf,
    schema: Option<PathBuf>,
    seed: u64,
    splits: Vec<String>,
    metrics: Vec<String>,
    eval: crate::eval::EvalOptions,
}

fn cmd_eval(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.model)?;
    let record: RunRecord = serde_json::from_value(
        ck.extra
            .get("run")
            .cloned()
            .ok_or_else(|| CibError::Config(format!("{}: checkpoint has no run record", args.model.display())))?,
    )?;
    let model = CibModel::from_checkpoint(&ck)?;
    let ds = load_with_sidecar(&args.data, args.schema.as_deref())?;
    if ds.d_x() != ck.spec.d_x {
        return Err(CibError::Dimension(format!(
            "model expects {} covariates, data has {}",
            ck.spec.d_x,
            ds.d_x()
        )));
    }

    let mut opts = resolve_config(&record.experiment.eval, cli.config.as_deref())?;
    opts.seed = cli.seed.unwrap_or(opts.seed);
    opts.tau_samples = args.samples.unwrap_or(opts.tau_samples);
    if let Some(ks) = &args.reject_ks {
        opts.reject_ks = ks.clone();
    }
    let metrics = args.metrics.clone().unwrap_or_default();
    for m in &metrics {
        Metric::parse(m)?.check(&ds)?;
    }
    let same_data = ds.n() == record.n;
    let splits = args.split.clone().unwrap_or_else(|| {
        if same_data {
            vec!["in".into(), "out".into()]
        } else {
            vec!["all".into()]
        }
    });

    let run = TrainedRun {
        model,
        standardizer: record.standardizer.clone(),
        splits: record.splits.clone(),
        seed: ck.seed,
        log: Vec::new(),
        best_valid_loss: f64::NAN,
        stopped_early: false,
    };
    let mut reports: BTreeMap<String, EvalReport> = BTreeMap::new();
    for name in &splits {
        let rows: Option<Vec<usize>> = match name.as_str() {
            "all" => None,
            "in" | "out" if !same_data => {
                return Err(CibError::Data(format!(
                    "split `{name}` needs the training data ({} rows), got {} rows",
                    record.n,
                    ds.n()
                )))
            }
            "in" => Some(run.in_sample_rows()),
            "out" => Some(run.splits.test.clone()),
            other => return Err(CibError::Config(format!("unknown split `{other}`"))),
        };
        let part = run.prepare(&ds, rows.as_deref())?;
        reports.insert(name.clone(), evaluate(&run.model, &part, &opts, name == "in")?);
    }

    ensure_dir(&cli.out)?;
    write_json(&reports, &cli.out.join("eval.json"))?;
    let curve_from = ["out", "all", "in"].into_iter().find(|s| reports.contains_key(*s));
    if let (false, Some(s)) = (opts.reject_ks.is_empty(), curve_from) {
        write_curve_csv(&reports[s].rejection_curve, cli.out.join("curve.csv"))?;
    }
    write_json(
        &EvalSnapshot {
            model: args.model.clone(),
            data: args.data.clone(),
            schema: args.schema.clone(),
            seed: opts.seed,
            splits,
            metrics,
            eval: opts,
        },
        &cli.out.join("config.json"),
    )?;
    for (name, r) in &reports {
        println!("{name}: {}", summary(r));
    }
    Ok(())
}

fn summary(r: &EvalReport) -> String {
    let mut parts = vec![format!("n={}", r.n)];
    let mut add = |k: &str, v: Option<f64>| {
        if let Some(v) = v {
            parts.push(format!("{k}={v:.4}"));
        }
    };
    add("sqrtPehe", r.sqrt_pehe);
    add("ateError", r.ate_error);
    add("policyRisk", r.policy_risk);
    add("auc", r.auc);
    parts.join(" ")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct AblateSnapshot {
    data: Option<PathBuf>,
    schema: Option<PathBuf>,
    realizations: Option<PathBuf>,
    repeats: usize,
    seed: u64,
    experiment: ExperimentConfig,
}

fn cmd_ablate(cli: &Cli, args: &AblateArgs) -> Result<()> {
    let mut cfg = resolve_config(&ExperimentConfig::default(), cli.config.as_deref())?;
    apply_flags(&mut cfg, &args.model)?;
    let seed = cli.seed.unwrap_or(cfg.train.seed);
    if args.repeats == 0 {
        return Err(CibError::Config("--repeats must be at least 1".into()));
    }
    let datasets = match (&args.data, &args.realizations) {
        (Some(d), None) => vec![("data".to_string(), load_with_sidecar(d, args.schema.as_deref())?)],
        (None, Some(dir)) => load_realizations(dir)?,
        _ => return Err(CibError::Config("ablate needs --data or --realizations".into())),
    };
    cfg.model.outcome = datasets[0].1.outcome;
    let runs: Vec<(u64, &crate::data::ObservationalDataset)> = datasets
        .iter()
        .flat_map(|(_, ds)| (0..args.repeats as u64).map(move |r| (seed + r, ds)))
        .collect();
    let report = ablation_run(&runs, &cfg, cli.jobs)?;
    ensure_dir(&cli.out)?;
    write_json(&report, &cli.out.join("ablation.json"))?;
    write_json(
        &AblateSnapshot {
            data: args.data.clone(),
            schema: args.schema.clone(),
            realizations: args.realizations.clone(),
            repeats: args.repeats,
            seed,
            experiment: cfg,
        },
        &cli.out.join("config.json"),
    )?;
    print!("{}", report.table());
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.jobs == 0 {
        return Err(CibError::Config("--jobs must be at least 1".into()));
    }
    match &cli.command {
        Command::Gen(a) => cmd_gen(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Ablate(a) => cmd_ablate(cli, a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
/// Errors go to standard error as one JSON object.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{msg}");
            1
        }
    }
}
