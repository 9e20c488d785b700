//! Batch front end: `train`, `prune`, `eval`, `bench`, `inspect`, `synth`.
//!
//! Every command writes machine-readable JSON (and CSV for training
//! history) into its output directory and prints a short table on stdout.
//! Exit codes: 0 ok, 2 configuration/format/I-O, 3 numeric, 4 degenerate
//! prune plan.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::cell::Gate;
use crate::data::{generate_synthetic, read_seqf, write_seqf, SequenceDataset, SynthSpec};
use crate::error::{Error, Result};
use crate::network::{
    compression_ratio, count_lstm, load_model, save_model, Dims, GateParams, ParamCounts, SequenceClassifier,
};
use crate::prune::{apply_plan, make_plan, verify_equivalence, HiddenRule, PrunePlan};
use crate::tensor::SeededRng;
use crate::train::{evaluate, initialize_model, random_inputs, retained_counts, train, EvalReport, TrainConfig};
use crate::vib::DEFAULT_ALPHA_THRESHOLD;

#[derive(Debug, Parser)]
#[command(name = "viblstm", version, about = "Train, prune and benchmark VIB-compressed LSTM classifiers")]
pub struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a `.seqf` dataset or a synthetic task.
    Train(TrainArgs),
    /// Prune a trained model into a compact one.
    Prune(PruneArgs),
    /// Evaluate a model on a `.seqf` dataset.
    Eval(EvalArgs),
    /// Time single-threaded deterministic forward passes.
    Bench(BenchArgs),
    /// Report α ratios, retained counts and parameter counts.
    Inspect(InspectArgs),
    /// Write a synthetic planted-feature dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Synthetic task, e.g. `d=32,T=8,a=5,r=4,n=100` (n = training sequences per class).
    #[arg(long, value_name = "SPEC", conflicts_with = "data")]
    pub synth: Option<SynthSpec>,
    /// Training data (`.seqf`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Validation data (`.seqf`); defaults to the training data.
    #[arg(long, requires = "data")]
    pub val: Option<PathBuf>,
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Hidden units n.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Validation sequences per class for synthetic tasks.
    #[arg(long)]
    pub val_per_class: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_vib: Option<f64>,
    #[arg(long)]
    pub lr_main: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
    /// Leading epochs trained without the KL terms.
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub beta_v: Option<f64>,
    #[arg(long)]
    pub lambda_gl: Option<f64>,
    /// Weight of the mean cross-entropy term.
    #[arg(long)]
    pub ce_weight: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sigma_init: Option<f64>,
    /// Train without the feature mask.
    #[arg(long)]
    pub no_feature_gate: bool,
    /// Train without the gate masks.
    #[arg(long)]
    pub no_gate_masks: bool,
}

/// Effective configuration of a training run, as read from `--config` and
/// echoed to `effective-config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub hidden: usize,
    pub synth: Option<SynthSpec>,
    pub val_per_class: usize,
    pub data: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            hidden: 64,
            synth: None,
            val_per_class: 20,
            data: None,
            val: None,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn resolve(args: &TrainArgs) -> Result<Self> {
        let mut cfg = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        fn set<T: Clone>(slot: &mut T, v: &Option<T>) {
            if let Some(v) = v {
                *slot = v.clone();
            }
        }
        set(&mut cfg.hidden, &args.hidden);
        set(&mut cfg.val_per_class, &args.val_per_class);
        if args.synth.is_some() {
            cfg.synth = args.synth.clone();
            cfg.data = None;
            cfg.val = None;
        }
        if args.data.is_some() {
            cfg.data = args.data.clone();
            cfg.val = args.val.clone();
            cfg.synth = None;
        }
        let t = &mut cfg.train;
        set(&mut t.epochs, &args.epochs);
        set(&mut t.batch_size, &args.batch_size);
        set(&mut t.lr_vib, &args.lr_vib);
        set(&mut t.lr_main, &args.lr_main);
        set(&mut t.lr_decay, &args.lr_decay);
        set(&mut t.warmup_epochs, &args.warmup_epochs);
        set(&mut t.objective.beta, &args.beta);
        set(&mut t.objective.beta_v, &args.beta_v);
        set(&mut t.objective.lambda_gl, &args.lambda_gl);
        set(&mut t.objective.ce_weight, &args.ce_weight);
        set(&mut t.dropout_p, &args.dropout);
        set(&mut t.seed, &args.seed);
        set(&mut t.init.sigma_init, &args.sigma_init);
        if args.no_feature_gate {
            t.feature_gate = false;
        }
        if args.no_gate_masks {
            t.gate_masks = false;
        }
        if cfg.synth.is_none() && cfg.data.is_none() {
            return Err(Error::Config("need --synth or --data".into()));
        }
        if cfg.hidden == 0 {
            return Err(Error::Config("hidden must be at least 1".into()));
        }
        cfg.train.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// α threshold for the gate masks.
    #[arg(long, default_value_t = DEFAULT_ALPHA_THRESHOLD)]
    pub threshold: f64,
    /// α threshold for the feature mask (defaults to --threshold).
    #[arg(long)]
    pub feature_threshold: Option<f64>,
    /// `any_of_igo` or `all_gates`.
    #[arg(long, default_value = "any_of_igo")]
    pub rule: HiddenRule,
    /// Random sequences used to verify the compact model.
    #[arg(long, default_value_t = 32)]
    pub check: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Model to time.
    #[arg(long, required_unless_present = "random")]
    pub model: Option<PathBuf>,
    /// Time a randomly initialized dense model instead, e.g. `d=2048,n=2048,a=5,T=32`.
    #[arg(long, value_name = "DIMS", conflicts_with = "model")]
    pub random: Option<String>,
    /// Sequences per timed repeat.
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// e.g. `d=32,T=8,a=5,r=4,n=100`
    #[arg(long, value_name = "SPEC")]
    pub spec: SynthSpec,
    #[arg(long, default_value_t = 20)]
    pub val_per_class: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => 3,
        Error::DegeneratePlan(_) => 4,
        _ => 2,
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Prune(a) => cmd_prune(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Bench(a) => cmd_bench(&a).map(|_| ()),
        Command::Inspect(a) => cmd_inspect(&a).map(|_| ()),
        Command::Synth(a) => cmd_synth(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Generates the synthetic train/validation pair: `spec.per_class`
/// training and `val_per_class` validation sequences per class.
pub fn synthetic_split(spec: &SynthSpec, val_per_class: usize) -> Result<(SequenceDataset, SequenceDataset)> {
    let full = SynthSpec {
        per_class: spec.per_class + val_per_class,
        ..spec.clone()
    };
    let ds = generate_synthetic(&full, &mut SeededRng::new(spec.seed))?;
    Ok(ds.split_per_class(spec.per_class))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub spec: SynthSpec,
    pub relevant_features: Vec<usize>,
    pub train_sequences: usize,
    pub val_sequences: usize,
}

fn write_dataset(out: &Path, spec: &SynthSpec, tr: &SequenceDataset, va: &SequenceDataset) -> Result<()> {
    write_seqf(tr, out.join("train.seqf"))?;
    write_seqf(va, out.join("val.seqf"))?;
    let info = DatasetInfo {
        spec: spec.clone(),
        relevant_features: tr.relevant_features().unwrap_or_default().to_vec(),
        train_sequences: tr.len(),
        val_sequences: va.len(),
    };
    write_json(&out.join("dataset.json"), &info)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    ensure_dir(&args.out)?;
    let (tr, va) = synthetic_split(&args.spec, args.val_per_class)?;
    write_dataset(&args.out, &args.spec, &tr, &va)?;
    println!(
        "wrote {} training and {} validation sequences; relevant features {:?}",
        tr.len(),
        va.len(),
        tr.relevant_features().unwrap_or_default()
    );
    Ok(())
}

pub struct TrainOutcome {
    pub model: SequenceClassifier,
    pub history: crate::train::TrainHistory,
    pub config: RunConfig,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    let cfg = RunConfig::resolve(args)?;
    ensure_dir(&args.out)?;
    write_json(&args.out.join("effective-config.json"), &cfg)?;

    let (tr, va) = match (&cfg.synth, &cfg.data) {
        (Some(spec), _) => {
            let (tr, va) = synthetic_split(spec, cfg.val_per_class)?;
            write_dataset(&args.out, spec, &tr, &va)?;
            (tr, va)
        }
        (None, Some(path)) => {
            let tr = read_seqf(path)?;
            let va = match &cfg.val {
                Some(v) => read_seqf(v)?,
                None => {
                    warn!("no validation set given; validating on the training data");
                    tr.clone()
                }
            };
            (tr, va)
        }
        (None, None) => unreachable!("resolve requires a data source"),
    };
    let dims = Dims::new(tr.dims.d, cfg.hidden, tr.dims.a, tr.dims.t)?;
    let t = &cfg.train;
    let model = initialize_model(dims, &t.init, t.feature_gate, t.gate_masks, &mut SeededRng::new(t.seed));
    info!("training d={} n={} a={} T={} on {} sequences", dims.d, dims.n, dims.a, dims.t, tr.len());
    let (model, history) = train(model, &tr, &va, t)?;

    save_model(&model, args.out.join("model.vibl"))?;
    fs::write(args.out.join("history.csv"), history.to_csv()).map_err(|e| Error::io(args.out.join("history.csv"), e))?;
    if let Some(last) = history.epochs.last() {
        println!("epochs            {}", last.epoch);
        println!("train ce          {:.4}", last.ce);
        println!("val accuracy      {:.4}", last.val_acc);
        println!("kept features     {}", last.retained_features);
        println!("kept hidden units {}", last.retained_hidden);
    }
    Ok(TrainOutcome {
        model,
        history,
        config: cfg,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub kept_features: Vec<usize>,
    pub kept_hidden: Vec<usize>,
    pub hidden_rule: HiddenRule,
    pub feature_threshold: f64,
    pub gate_threshold: f64,
    /// LSTM parameter count of the dense model (input width × hidden).
    pub dense_count: usize,
    pub pruned_count: usize,
    pub compression_ratio: f64,
    pub dense_total: ParamCounts,
    pub pruned_total: ParamCounts,
    /// Largest logit difference between the compact model and the original
    /// with pruned units' masks forced to zero.
    pub max_deviation: f64,
    pub check_sequences: usize,
}

pub fn prune_report(m: &SequenceClassifier, plan: &PrunePlan, check: usize, seed: u64) -> Result<(SequenceClassifier, PruneReport)> {
    let compact = apply_plan(m, plan)?;
    let inputs = random_inputs(m, check.max(1), &mut SeededRng::new(seed));
    let max_deviation = verify_equivalence(m, &compact, plan, &inputs)?;
    let dense_count = count_lstm(m.input_dim(), m.dims.n);
    let pruned_count = count_lstm(compact.dims.d, compact.dims.n);
    let report = PruneReport {
        kept_features: plan.kept_features.clone(),
        kept_hidden: plan.kept_hidden.clone(),
        hidden_rule: plan.hidden_rule,
        feature_threshold: plan.thresholds.feature,
        gate_threshold: plan.thresholds.gate,
        dense_count,
        pruned_count,
        compression_ratio: compression_ratio(dense_count, pruned_count)?,
        dense_total: m.count_parameters(),
        pruned_total: compact.count_parameters(),
        max_deviation,
        check_sequences: inputs.len(),
    };
    Ok((compact, report))
}

pub fn cmd_prune(args: &PruneArgs) -> Result<PruneReport> {
    let m = load_model(&args.model)?;
    let plan = make_plan(&m, args.threshold, args.feature_threshold.unwrap_or(args.threshold), args.rule)?;
    let (compact, report) = prune_report(&m, &plan, args.check, args.seed)?;
    ensure_dir(&args.out)?;
    save_model(&compact, args.out.join("compact.vibl"))?;
    write_json(&args.out.join("prune-report.json"), &report)?;
    println!("kept features     {} of {}", report.kept_features.len(), m.input_dim());
    println!("kept hidden units {} of {}", report.kept_hidden.len(), m.dims.n);
    println!("lstm parameters   {} -> {}", report.dense_count, report.pruned_count);
    println!("compression       {:.2}x", report.compression_ratio);
    println!("max deviation     {:.3e}", report.max_deviation);
    Ok(report)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let m = load_model(&args.model)?;
    let ds = read_seqf(&args.data)?;
    let report = evaluate(&m, &ds)?;
    ensure_dir(&args.out)?;
    write_json(&args.out.join("eval.json"), &report)?;
    println!("accuracy  {:.4}  ({} sequences)", report.accuracy, report.count);
    println!("mean ce   {:.4}", report.mean_ce);
    println!("class  count  accuracy");
    for (c, (acc, count)) in report.per_class_accuracy.iter().zip(&report.per_class_count).enumerate() {
        match acc {
            Some(a) => println!("{c:>5}  {count:>5}  {a:.4}"),
            None => println!("{c:>5}  {count:>5}  -"),
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub p10: f64,
    pub median: f64,
    pub p90: f64,
}

impl LatencyStats {
    /// Nearest-rank percentiles of `samples`.
    pub fn from_samples(samples: &[f64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let pick = |q: f64| s[((q * (s.len() - 1) as f64).round() as usize).min(s.len() - 1)];
        LatencyStats {
            p10: pick(0.1),
            median: pick(0.5),
            p90: pick(0.9),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub input_dim: usize,
    pub d: usize,
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub compact: bool,
    pub batch: usize,
    pub repeats: usize,
    pub warmup: usize,
    /// Seconds per sequence.
    pub per_sequence: LatencyStats,
    /// Seconds per time step.
    pub per_timestep: LatencyStats,
}

/// Times deterministic forward passes on the calling thread.
pub fn bench_model(m: &SequenceClassifier, batch: usize, repeats: usize, warmup: usize, seed: u64) -> Result<BenchReport> {
    if batch == 0 || repeats == 0 {
        return Err(Error::Config("batch and repeats must be at least 1".into()));
    }
    let inputs = random_inputs(m, batch, &mut SeededRng::new(seed));
    let mut sink = 0.0;
    for _ in 0..warmup {
        for x in &inputs {
            sink += m.predict(x)?[0];
        }
    }
    let mut per_seq = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        for x in &inputs {
            sink += m.predict(x)?[0];
        }
        per_seq.push(start.elapsed().as_secs_f64() / batch as f64);
    }
    std::hint::black_box(sink);
    let per_step: Vec<f64> = per_seq.iter().map(|s| s / m.dims.t as f64).collect();
    Ok(BenchReport {
        input_dim: m.input_dim(),
        d: m.dims.d,
        n: m.dims.n,
        t: m.dims.t,
        compact: m.is_compact(),
        batch,
        repeats,
        warmup,
        per_sequence: LatencyStats::from_samples(&per_seq),
        per_timestep: LatencyStats::from_samples(&per_step),
    })
}

/// Parses `d=..,n=..,a=..,T=..` into model dimensions.
pub fn parse_dims(text: &str) -> Result<Dims> {
    let (mut d, mut n, mut a, mut t) = (None, None, None, None);
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got '{part}'")))?;
        let v: usize = v.parse().map_err(|_| Error::Config(format!("bad value for {k}: '{v}'")))?;
        match k {
            "d" => d = Some(v),
            "n" => n = Some(v),
            "a" => a = Some(v),
            "T" | "t" => t = Some(v),
            other => return Err(Error::Config(format!("unknown dimension '{other}'"))),
        }
    }
    match (d, n, a, t) {
        (Some(d), Some(n), Some(a), Some(t)) => Dims::new(d, n, a, t),
        _ => Err(Error::Config(format!("dims need d, n, a and T: '{text}'"))),
    }
}

pub fn cmd_bench(args: &BenchArgs) -> Result<BenchReport> {
    let m = match (&args.model, &args.random) {
        (Some(path), _) => load_model(path)?,
        (None, Some(spec)) => {
            let dims = parse_dims(spec)?;
            let init = crate::train::InitConfig::default();
            initialize_model(dims, &init, true, true, &mut SeededRng::new(args.seed))
        }
        (None, None) => return Err(Error::Config("need --model or --random".into())),
    };
    let report = bench_model(&m, args.batch, args.repeats, args.warmup, args.seed)?;
    ensure_dir(&args.out)?;
    write_json(&args.out.join("bench.json"), &report)?;
    println!(
        "model d={} n={} T={} ({})",
        report.input_dim,
        report.n,
        report.t,
        if report.compact { "compact" } else { "dense" }
    );
    println!("                 p10          median       p90");
    for (name, s) in [("per sequence", &report.per_sequence), ("per timestep", &report.per_timestep)] {
        println!("{name:<14} {:>10.3e}s  {:>10.3e}s  {:>10.3e}s", s.p10, s.median, s.p90);
    }
    Ok(report)
}

pub const THRESHOLD_SWEEP: [f64; 4] = [1e-3, 1e-2, 1e-1, 1.0];

/// Lower edges of the log10 α histogram bins; the first bin also takes
/// everything below and the last everything above.
pub const ALPHA_BIN_EDGES: [f64; 9] = [-4.0, -3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 4.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSummary {
    pub name: String,
    pub units: usize,
    /// Counts per log10 α bin (see `bin_edges`).
    pub histogram: Vec<usize>,
    /// Units with α ≥ threshold, one per entry of `thresholds`.
    pub retained: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSummary {
    pub name: String,
    pub units: usize,
    pub nonzero: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectReport {
    pub compact: bool,
    pub dims: Dims,
    pub input_dim: usize,
    pub params: ParamCounts,
    pub thresholds: Vec<f64>,
    pub bin_edges: Vec<f64>,
    pub alpha: Vec<AlphaSummary>,
    /// Hidden units surviving the default rule at each threshold.
    pub retained_hidden: Vec<usize>,
    pub scales: Vec<ScaleSummary>,
}

fn alpha_summary(name: &str, alpha: &[f64]) -> AlphaSummary {
    let mut histogram = vec![0; ALPHA_BIN_EDGES.len()];
    for &a in alpha {
        let l = a.log10();
        let bin = ALPHA_BIN_EDGES.iter().rposition(|&e| l >= e).unwrap_or(0);
        histogram[bin] += 1;
    }
    AlphaSummary {
        name: name.to_string(),
        units: alpha.len(),
        histogram,
        retained: THRESHOLD_SWEEP
            .iter()
            .map(|&t| alpha.iter().filter(|&&a| a >= t).count())
            .collect(),
    }
}

pub fn inspect_model(m: &SequenceClassifier) -> InspectReport {
    let mut alpha = Vec::new();
    if let Some(g) = &m.feature_gate {
        alpha.push(alpha_summary("feature", &g.alpha_ratio()));
    }
    let mut scales = Vec::new();
    match &m.gates {
        GateParams::Masks(gs) => {
            for gate in Gate::ALL {
                alpha.push(alpha_summary(&format!("gate_{}", gate.letter()), &gs[gate.index()].alpha_ratio()));
            }
        }
        GateParams::Scales(s) => {
            for gate in Gate::ALL {
                let v = &s[gate.index()];
                scales.push(ScaleSummary {
                    name: format!("gate_{}", gate.letter()),
                    units: v.len(),
                    nonzero: v.iter().filter(|&&x| x != 0.0).count(),
                    min: v.iter().copied().fold(f64::INFINITY, f64::min),
                    max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    mean: v.iter().sum::<f64>() / v.len() as f64,
                });
            }
        }
    }
    InspectReport {
        compact: m.is_compact(),
        dims: m.dims,
        input_dim: m.input_dim(),
        params: m.count_parameters(),
        thresholds: THRESHOLD_SWEEP.to_vec(),
        bin_edges: ALPHA_BIN_EDGES.to_vec(),
        alpha,
        retained_hidden: THRESHOLD_SWEEP.iter().map(|&t| retained_counts(m, t).2).collect(),
        scales,
    }
}

pub fn cmd_inspect(args: &InspectArgs) -> Result<InspectReport> {
    let m = load_model(&args.model)?;
    let r = inspect_model(&m);
    ensure_dir(&args.out)?;
    write_json(&args.out.join("inspect.json"), &r)?;

    println!(
        "model d={} n={} a={} T={} ({})",
        r.input_dim,
        r.dims.n,
        r.dims.a,
        r.dims.t,
        if r.compact { "compact" } else { "trainable" }
    );
    println!(
        "parameters: lstm {}  head {}  vib {}  scales {}  total {}",
        r.params.lstm_count, r.params.head_count, r.params.vib_count, r.params.scale_count, r.params.total
    );
    if r.compact {
        println!("no VIB parameters; fixed gate scales:");
        println!("gate     units  nonzero  min        max        mean");
        for s in &r.scales {
            println!(
                "{:<8} {:>5}  {:>7}  {:<9.4}  {:<9.4}  {:.4}",
                s.name, s.units, s.nonzero, s.min, s.max, s.mean
            );
        }
        return Ok(r);
    }
    print!("log10 alpha ");
    for e in &r.bin_edges {
        print!("{:>6}", format!(">={e}"));
    }
    println!();
    for a in &r.alpha {
        print!("{:<11} ", a.name);
        for c in &a.histogram {
            print!("{c:>6}");
        }
        println!();
    }
    print!("\nretained at ");
    for t in &r.thresholds {
        print!("{:>8}", format!("{t:e}"));
    }
    println!();
    for a in &r.alpha {
        print!("{:<11} ", a.name);
        for c in &a.retained {
            print!("{c:>8}");
        }
        println!();
    }
    print!("{:<11} ", "hidden");
    for c in &r.retained_hidden {
        print!("{c:>8}");
    }
    println!();
    Ok(r)
}
