//! The `woodprune` command line.
//!
//! Exit codes: 0 success, 2 invalid flags or configuration, 3 missing or
//! malformed data, 4 numerical failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::{
    collect_grad_samples, woodfisher_build, BlockStorage, FisherConfig, LabelMode, FULL_LAYER,
};
use crate::io::{
    atomic_write, load_checkpoint, load_mnist_idx, save_checkpoint, write_grad_dump, Dataset, Split,
};
use crate::model::{sgd_train, MlpModel, TrainConfig};
use crate::pruner::{
    one_shot_prune, pruning_scan, structured_prune, unix_now, GroupMode, GroupSpec, Method,
    OneShotConfig, OneShotReport, SamplingRngs, Scope,
};
use crate::schedule::{gradual_prune, GradualConfig, LrDecay, ScheduleConfig};
use crate::space::{
    count_for_fraction, layer_sparsity, sparsity_of, FlopTable, LayerSparsity, Mask,
};

#[derive(Debug, Parser)]
#[command(
    name = "woodprune",
    version,
    about = "Second-order pruning of small MLPs"
)]
pub struct Cli {
    /// Worker threads for curvature estimation; results do not depend on it.
    #[arg(long, global = true, env = "WOODPRUNE_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a dense MLP and write a checkpoint.
    Train(TrainArgs),
    /// Prune a checkpoint once, without retraining.
    PruneOneshot(OneShotArgs),
    /// Prune gradually while retraining.
    PruneGradual(GradualArgs),
    /// Compare the loss along a pruning direction with its quadratic model.
    QuadScan(ScanArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Directory with the four MNIST IDX files.
    #[arg(long, default_value = "data/mnist")]
    pub data_dir: PathBuf,
    /// Use only the first N training examples.
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Use only the first N test examples.
    #[arg(long)]
    pub test_limit: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FisherArgs {
    /// Number of rank-one Fisher terms.
    #[arg(long, default_value_t = 240)]
    pub fisher_subsample: usize,
    /// Examples averaged into each term.
    #[arg(long, default_value_t = 100)]
    pub fisher_minibatch: usize,
    /// Dampening added to the Fisher diagonal.
    #[arg(long, default_value_t = 1e-5)]
    pub damp: f64,
    /// Block size, or `full` for whole layers.
    #[arg(long, default_value = "1000", value_parser = parse_chunk)]
    pub chunk_size: usize,
    /// `empirical` uses dataset labels, `sampled` draws them from the model.
    #[arg(long, default_value = "empirical", value_parser = parse_label_mode)]
    pub label_mode: LabelMode,
    /// Block storage: `auto`, `dense` or `factored`.
    #[arg(long, default_value = "auto", value_parser = parse_storage)]
    pub storage: BlockStorage,
}

impl FisherArgs {
    pub fn config(&self) -> FisherConfig {
        FisherConfig {
            subsample_size: self.fisher_subsample,
            minibatch_size: self.fisher_minibatch,
            damp: self.damp,
            chunk_size: self.chunk_size,
            label_mode: self.label_mode,
            storage: self.storage,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SgdArgs {
    #[arg(long, default_value_t = 0.005)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// Layer widths from input to output.
    #[arg(long, value_delimiter = ',', default_value = "784,40,20,10")]
    pub layers: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub sgd: SgdArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint header to write; weights go to the `.bin` next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch CSV: epoch, train_loss, test_acc, lr.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OneShotArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub fisher: FisherArgs,
    /// Target fraction of pruned weights (of groups with `--groups`).
    #[arg(long, default_value_t = 0.5)]
    pub sparsity: f64,
    /// `independent` (per layer) or `joint` (global ranking).
    #[arg(long, default_value = "joint", value_parser = parse_scope)]
    pub mode: Scope,
    /// woodfisher, woodtaylor, magnitude, global-magnitude, diag-fisher or obd.
    #[arg(long, default_value = "woodfisher", value_parser = parse_method)]
    pub method: Method,
    /// Stages over which the pruned count grows, re-estimating curvature
    /// before each.
    #[arg(long, default_value_t = 1)]
    pub recompute_steps: usize,
    /// FLOPs exponent for the normalized statistic.
    #[arg(long, default_value_t = 0.0)]
    pub beta: f64,
    /// JSON per-layer FLOP table (defaults to the dense count).
    #[arg(long)]
    pub flop_table: Option<PathBuf>,
    /// JSON `{"mode": "sum"|"correlated", "groups": [[i, ...], ...]}`;
    /// removes whole groups with the WoodFisher estimate.
    #[arg(long)]
    pub groups: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the pruned checkpoint.
    #[arg(long)]
    pub save_model: Option<PathBuf>,
    /// Write the first stage's Fisher gradients in the binary dump format.
    #[arg(long)]
    pub dump_grads: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GradualArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub fisher: FisherArgs,
    #[command(flatten)]
    pub sgd: SgdArgs,
    #[arg(long, default_value = "woodfisher", value_parser = parse_method)]
    pub method: Method,
    #[arg(long, default_value = "joint", value_parser = parse_scope)]
    pub mode: Scope,
    #[arg(long, default_value_t = 0.05)]
    pub initial_sparsity: f64,
    #[arg(long, default_value_t = 0.9)]
    pub final_sparsity: f64,
    #[arg(long, default_value_t = 1)]
    pub first_prune_epoch: usize,
    #[arg(long, default_value_t = 3)]
    pub prune_interval: usize,
    #[arg(long, default_value_t = 12)]
    pub last_prune_epoch: usize,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 12)]
    pub lr_decay_start: usize,
    #[arg(long, default_value_t = 0.6)]
    pub lr_decay_factor: f64,
    #[arg(long, default_value_t = 2)]
    pub lr_decay_period: usize,
    #[arg(long, default_value_t = 0.0)]
    pub beta: f64,
    #[arg(long)]
    pub flop_table: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Trace CSV: epoch, sparsity, train_loss, test_acc, lr.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub save_model: Option<PathBuf>,
}

impl GradualArgs {
    pub fn config(&self) -> GradualConfig {
        GradualConfig {
            schedule: ScheduleConfig {
                initial_sparsity: self.initial_sparsity,
                final_sparsity: self.final_sparsity,
                first_prune_epoch: self.first_prune_epoch,
                prune_interval: self.prune_interval,
                last_prune_epoch: self.last_prune_epoch,
                total_epochs: self.epochs,
                lr_decay: LrDecay {
                    start: self.lr_decay_start,
                    factor: self.lr_decay_factor,
                    period: self.lr_decay_period,
                },
            },
            train: train_config(&self.sgd, self.epochs, self.seed),
            fisher: self.fisher.config(),
            method: self.method,
            scope: self.mode,
            beta: self.beta,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScanArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub fisher: FisherArgs,
    /// Layer to prune, e.g. `fc1.weight`; all layers jointly when omitted.
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    pub sparsity: f64,
    /// Number of evenly spaced points on [0, 1].
    #[arg(long, default_value_t = 21)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Curve CSV: t, actual, predicted.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_chunk(s: &str) -> std::result::Result<usize, String> {
    if s == "full" {
        return Ok(FULL_LAYER);
    }
    match s.parse::<usize>() {
        Ok(0) | Err(_) => Err(format!("`{s}` is not a positive chunk size or `full`")),
        Ok(n) => Ok(n),
    }
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_scope(s: &str) -> std::result::Result<Scope, String> {
    match s {
        "independent" => Ok(Scope::Independent),
        "joint" => Ok(Scope::Joint),
        _ => Err(format!("unknown mode `{s}`, expected independent or joint")),
    }
}

fn parse_label_mode(s: &str) -> std::result::Result<LabelMode, String> {
    match s {
        "empirical" => Ok(LabelMode::Empirical),
        "sampled" => Ok(LabelMode::Sampled),
        _ => Err(format!("unknown label mode `{s}`")),
    }
}

fn parse_storage(s: &str) -> std::result::Result<BlockStorage, String> {
    match s {
        "auto" => Ok(BlockStorage::Auto),
        "dense" => Ok(BlockStorage::Dense),
        "factored" => Ok(BlockStorage::Factored),
        _ => Err(format!("unknown storage `{s}`")),
    }
}

fn train_config(sgd: &SgdArgs, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: sgd.lr,
        momentum: sgd.momentum,
        weight_decay: sgd.weight_decay,
        epochs,
        batch_size: sgd.batch_size,
        seed,
    }
}

const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Loads the training and test splits from `dir`.
pub fn load_mnist_dir(
    dir: &Path,
    train_limit: Option<usize>,
    test_limit: Option<usize>,
) -> Result<(Dataset<f64>, Dataset<f64>)> {
    let train = load_mnist_idx(
        &dir.join(TRAIN_IMAGES),
        &dir.join(TRAIN_LABELS),
        train_limit,
        Split::Train,
    )?;
    let test = load_mnist_idx(
        &dir.join(TEST_IMAGES),
        &dir.join(TEST_LABELS),
        test_limit,
        Split::Test,
    )?;
    Ok((train, test))
}

fn load_data(d: &DataArgs) -> Result<(Dataset<f64>, Dataset<f64>)> {
    load_mnist_dir(&d.data_dir, d.train_limit, d.test_limit)
}

fn load_model(path: &Path) -> Result<MlpModel<f64>> {
    Ok(load_checkpoint(path)?.0)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

fn layer_table(rows: &[LayerSparsity]) -> String {
    let mut out = format!("{:<14} {:>12} {:>10}\n", "layer", "params", "sparsity");
    for r in rows {
        writeln!(
            out,
            "{:<14} {:>12} {:>9.2}%",
            r.layer, r.dense_params, r.sparsity_pct
        )
        .unwrap();
    }
    out
}

/// Report JSON with the resolved command-line settings under `run`.
fn report_json<R: Serialize, A: Serialize>(report: &R, args: &A) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(report)?;
    if let serde_json::Value::Object(map) = &mut v {
        map.insert("run".into(), serde_json::to_value(args)?);
    }
    Ok(v)
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} {v} outside [0, 1]")))
    }
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = train_config(&a.sgd, a.epochs, a.seed);
    cfg.validate()?;
    crate::space::LayerLayout::mlp(&a.layers)?;
    let (train, test) = load_data(&a.data)?;
    let mut model = MlpModel::<f64>::init(&a.layers, a.seed)?;
    if model.in_dim() != train.in_dim() || model.classes() != train.classes() {
        return Err(Error::Config(format!(
            "layers {:?} do not fit data with {} inputs and {} classes",
            a.layers,
            train.in_dim(),
            train.classes()
        )));
    }
    let mask = Mask::all_active(model.space().dim());
    let trace = sgd_train(&mut model, &train, Some(&test), &cfg, &mask)?;
    save_checkpoint(&a.out, &model, a.seed, a.epochs)?;
    if let Some(path) = &a.metrics {
        let mut csv = String::from("epoch,train_loss,test_acc,lr\n");
        for r in &trace {
            let acc = r.test_accuracy.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                csv,
                "{},{},{},{}",
                r.epoch, r.train_loss, acc, r.learning_rate
            )
            .unwrap();
        }
        atomic_write(path, csv.as_bytes())?;
    }
    let m = model.evaluate(&test)?;
    println!("test accuracy {:.4} loss {:.4}", m.accuracy, m.loss);
    Ok(())
}

#[derive(Deserialize)]
struct GroupFile {
    mode: GroupMode,
    groups: Vec<Vec<usize>>,
}

fn cmd_prune_oneshot(a: &OneShotArgs) -> Result<()> {
    let cfg = OneShotConfig {
        method: a.method,
        scope: a.mode,
        target: a.sparsity,
        recompute_steps: a.recompute_steps,
        beta: a.beta,
        fisher: a.fisher.config(),
        seed: a.seed,
    };
    cfg.validate()?;
    let flops: Option<FlopTable> = a.flop_table.as_deref().map(read_json).transpose()?;
    let groups: Option<GroupFile> = a.groups.as_deref().map(read_json).transpose()?;
    let model = load_model(&a.model)?;
    let (train, test) = load_data(&a.data)?;
    let mask = Mask::from_zeros(model.space());

    if let Some(path) = &a.dump_grads {
        let mut rngs = SamplingRngs::new(a.seed);
        let samples = collect_grad_samples(
            &model,
            &train,
            &cfg.fisher,
            &mut rngs.index,
            &mut rngs.label,
        )?;
        write_grad_dump(path, &samples, cfg.fisher.minibatch_size as u32)?;
    }

    let (pruned, report) = match groups {
        None => {
            let out = one_shot_prune(&model, &mask, &train, &test, &cfg, flops.as_ref())?;
            (out.model, out.report)
        }
        Some(g) => {
            let spec = GroupSpec::new(g.groups, g.mode, model.space().layout())?;
            let before = model.evaluate(&test)?;
            let mut rngs = SamplingRngs::new(a.seed);
            let samples = collect_grad_samples(
                &model,
                &train,
                &cfg.fisher,
                &mut rngs.index,
                &mut rngs.label,
            )?;
            let inv = woodfisher_build(&samples, model.space().layout(), &cfg.fisher)?;
            let mut pruned = model.clone();
            let mut mask = mask;
            let count = count_for_fraction(a.sparsity, spec.groups().len());
            let d = structured_prune(&mut pruned, &mut mask, &inv, &spec, count)?;
            let after = pruned.evaluate(&test)?;
            let report = OneShotReport {
                method: Method::WoodFisher,
                scope: Scope::Joint,
                target: a.sparsity,
                sparsity: sparsity_of(&mask, pruned.space())?,
                removed: d.removed.len(),
                layers: layer_sparsity(&mask, pruned.space()),
                accuracy_before: before.accuracy,
                accuracy_after: after.accuracy,
                loss_before: before.loss,
                loss_after: after.loss,
                predicted_delta_loss: d.predicted_delta_loss,
                seed: a.seed,
                config: cfg.clone(),
                timestamp: unix_now(),
            };
            (pruned, report)
        }
    };
    write_json(&a.out, &report_json(&report, a)?)?;
    if let Some(path) = &a.save_model {
        save_checkpoint(path, &pruned, a.seed, 0)?;
    }
    print!("{}", layer_table(&report.layers));
    println!(
        "{} {:?}: sparsity {:.4}, test accuracy {:.4} -> {:.4}, predicted loss increase {:.6}",
        report.method,
        report.scope,
        report.sparsity,
        report.accuracy_before,
        report.accuracy_after,
        report.predicted_delta_loss
    );
    Ok(())
}

fn cmd_prune_gradual(a: &GradualArgs) -> Result<()> {
    let cfg = a.config();
    cfg.schedule.validate()?;
    cfg.train.validate()?;
    cfg.fisher.validate()?;
    check_fraction("final sparsity", a.final_sparsity)?;
    if !(a.beta >= 0.0 && a.beta.is_finite()) {
        return Err(Error::Config(format!("beta {} must be >= 0", a.beta)));
    }
    let flops: Option<FlopTable> = a.flop_table.as_deref().map(read_json).transpose()?;
    let model = load_model(&a.model)?;
    let (train, test) = load_data(&a.data)?;
    let mask = Mask::from_zeros(model.space());
    let out = gradual_prune(&model, &mask, &train, Some(&test), &cfg, flops.as_ref())?;
    atomic_write(&a.out, out.trace.to_csv().as_bytes())?;
    if let Some(path) = &a.save_model {
        save_checkpoint(path, &out.model, a.seed, a.epochs)?;
    }
    print!(
        "{}",
        layer_table(&layer_sparsity(&out.mask, out.model.space()))
    );
    if let Some(last) = out.trace.rows.last() {
        println!(
            "final sparsity {:.4}, test accuracy {}",
            last.sparsity,
            last.test_accuracy
                .map_or("n/a".into(), |v| format!("{v:.4}"))
        );
    }
    Ok(())
}

fn cmd_quad_scan(a: &ScanArgs) -> Result<()> {
    let fisher = a.fisher.config();
    fisher.validate()?;
    check_fraction("sparsity", a.sparsity)?;
    if a.steps == 0 {
        return Err(Error::Config("--steps must be >= 1".into()));
    }
    let model = load_model(&a.model)?;
    let (train, _) = load_data(&a.data)?;
    let points = pruning_scan(
        &model,
        &train,
        &fisher,
        a.layer.as_deref(),
        a.sparsity,
        a.steps,
        a.seed,
    )?;
    let mut csv = String::from("t,actual,predicted\n");
    for p in &points {
        writeln!(csv, "{},{},{}", p.t, p.actual, p.predicted).unwrap();
    }
    atomic_write(&a.out, csv.as_bytes())?;
    if let Some(p) = points.last() {
        println!(
            "t = 1: actual {:.6}, predicted {:.6}",
            p.actual, p.predicted
        );
    }
    Ok(())
}

fn init_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        // A pool that already exists (repeated calls in one process) is kept.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    init_threads(cli.threads)?;
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::PruneOneshot(a) => cmd_prune_oneshot(a),
        Command::PruneGradual(a) => cmd_prune_gradual(a),
        Command::QuadScan(a) => cmd_quad_scan(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
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
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
