//! The `lait` command line.
//!
//! Subcommands: `verify`, `cost`, `bench cartesian`, `bench replay`,
//! `train`, `encode`, `stats`. Model flags can also come from a JSON file
//! given with `--config`; flags on the command line win. Every file output
//! is written atomically and gets a `<output>.manifest.json` next to it.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or input error.

use std::collections::BTreeMap;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bench::{bench_cartesian, bench_replay, length_record, BenchOptions, BenchReport, SegmentSet};
use crate::cache::RepCache;
use crate::config::{ModelConfig, PosScheme};
use crate::cost::{read_lengths_jsonl, sweep, write_sweep_csv, LengthRecord};
use crate::error::{LaitError, Result};
use crate::io::{fnv1a64, write_atomic};
use crate::pipeline::{classify, lait_encode, read_input_jsonl, SegmentedExample, TaskTemplate};
use crate::tensor::Scalar;
use crate::train::{train, SyntheticKind, SyntheticTaskSpec, TrainOptions};
use crate::verify::{run_suite, SuiteSize};
use crate::weights::ModelWeights;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "lait", version, about = "Layer-adjustable interaction encoder tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the randomized invariant suite.
    Verify(VerifyArgs),
    /// Attention-op cost of a lengths file, for one P or all of them.
    Cost(CostArgs),
    /// Cached versus uncached encoding workloads.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Train on a synthetic two-segment task.
    Train(TrainArgs),
    /// Encode and classify a JSONL corpus, optionally through a cache.
    Encode(EncodeArgs),
    /// Segment length statistics of a JSONL corpus.
    Stats(StatsArgs),
}

#[derive(Subcommand, Debug)]
enum BenchCommand {
    /// Every pairing of two random segment sets.
    Cartesian(CartesianArgs),
    /// Sequential arrival of a JSONL corpus.
    Replay(ReplayArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Precision {
    F32,
    F64,
}

/// Flags shared by every subcommand. All are optional so that the config
/// file and the subcommand defaults can fill the gaps.
#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// JSON file with any of the flags below; command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long, value_parser = parse_pos)]
    pos: Option<PosScheme>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    cache_budget_bytes: Option<usize>,
    #[arg(long, value_enum)]
    precision: Option<Precision>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

fn parse_pos(s: &str) -> std::result::Result<PosScheme, String> {
    s.parse().map_err(|e: LaitError| e.to_string())
}

/// Mirror of [`CommonArgs`] as read from `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct FileConfig {
    layers: Option<usize>,
    p: Option<usize>,
    #[serde(alias = "d_model")]
    d_model: Option<usize>,
    heads: Option<usize>,
    #[serde(alias = "d_ff")]
    d_ff: Option<usize>,
    vocab: Option<usize>,
    pos: Option<PosScheme>,
    seed: Option<u64>,
    #[serde(alias = "cache_dir")]
    cache_dir: Option<PathBuf>,
    #[serde(alias = "cache_budget_bytes")]
    cache_budget_bytes: Option<usize>,
    precision: Option<Precision>,
    input: Option<PathBuf>,
    output: Option<PathBuf>,
}

/// Common flags after merging defaults, config file and command line.
#[derive(Debug, Clone, Serialize)]
struct Resolved {
    model: ModelConfig,
    seed: u64,
    cache_dir: Option<PathBuf>,
    cache_budget_bytes: Option<usize>,
    precision: Precision,
    input: Option<PathBuf>,
    output: Option<PathBuf>,
}

impl CommonArgs {
    fn resolve(&self, base: ModelConfig) -> Result<Resolved> {
        let file: FileConfig = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                serde_json::from_str(&text).map_err(|e| LaitError::Config(format!("{}: {e}", path.display())))?
            }
            None => FileConfig::default(),
        };
        let mut m = base;
        m.layers = self.layers.or(file.layers).unwrap_or(m.layers);
        m.parallel_layers = self.p.or(file.p).unwrap_or(m.parallel_layers);
        m.d_model = self.d_model.or(file.d_model).unwrap_or(m.d_model);
        m.n_heads = self.heads.or(file.heads).unwrap_or(m.n_heads);
        m.d_head = m.d_model / m.n_heads.max(1);
        m.d_ff = self.d_ff.or(file.d_ff).unwrap_or(m.d_ff);
        m.vocab_size = self.vocab.or(file.vocab).unwrap_or(m.vocab_size);
        m.pos_scheme = self.pos.or(file.pos).unwrap_or(m.pos_scheme);
        m.validate()?;
        Ok(Resolved {
            model: m,
            seed: self.seed.or(file.seed).unwrap_or(0),
            cache_dir: self.cache_dir.clone().or(file.cache_dir),
            cache_budget_bytes: self.cache_budget_bytes.or(file.cache_budget_bytes),
            precision: self.precision.or(file.precision).unwrap_or(Precision::F32),
            input: self.input.clone().or(file.input),
            output: self.output.clone().or(file.output),
        })
    }
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Run a reduced number of cases.
    #[arg(long)]
    quick: bool,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct CostArgs {
    /// JSONL of `{"lengths": [...], "mult": n, "digests": [...]}` records.
    #[arg(long)]
    lengths: PathBuf,
    /// Emit one row per P in 0..=L instead of only `--p`.
    #[arg(long)]
    sweep_p: bool,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct CartesianArgs {
    #[arg(long, default_value = "17x16")]
    left: SegmentSet,
    #[arg(long, default_value = "100x31")]
    right: SegmentSet,
    /// Also run with the segment cache and compare.
    #[arg(long)]
    cache: bool,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    /// Weights file; a seeded model is initialized when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value = "copy_vs_shuffle")]
    task: SyntheticKind,
    #[arg(long, default_value_t = 8)]
    seq_len: usize,
    #[arg(long, default_value_t = 4096)]
    n_train: usize,
    #[arg(long, default_value_t = 1024)]
    n_eval: usize,
    #[arg(long, default_value_t = 3000)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 250)]
    eval_every: usize,
    /// Where to save the trained weights.
    #[arg(long)]
    weights_out: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    /// Weights file; a seeded model is initialized when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub flags: serde_json::Value,
    pub config_digest: String,
    pub seed: u64,
    pub tool_version: String,
}

impl RunManifest {
    fn new(command: &str, resolved: &Resolved, extra: serde_json::Value) -> Result<Self> {
        let mut flags = serde_json::to_value(resolved)?;
        if let (Some(f), serde_json::Value::Object(e)) = (flags.as_object_mut(), extra) {
            f.extend(e);
        }
        Ok(Self {
            command: command.into(),
            flags,
            config_digest: format!("{:016x}", fnv1a64(&serde_json::to_vec(&resolved.model)?)),
            seed: resolved.seed,
            tool_version: env!("CARGO_PKG_VERSION").into(),
        })
    }
}

/// Path of the manifest written next to `output`.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

/// Writes `bytes` to `output` (or stdout) and the manifest beside it.
fn emit(output: Option<&Path>, bytes: &[u8], manifest: &RunManifest) -> Result<()> {
    match output {
        Some(path) => {
            write_atomic(path, bytes)?;
            let mut m = serde_json::to_vec_pretty(manifest)?;
            m.push(b'\n');
            write_atomic(&manifest_path(path), &m)?;
        }
        None => std::io::stdout().write_all(bytes)?,
    }
    Ok(())
}

fn bench_defaults() -> ModelConfig {
    ModelConfig::tiny(12, 9, 32, 2, 64)
}

fn train_defaults() -> ModelConfig {
    ModelConfig {
        vocab_size: 50,
        ..ModelConfig::tiny(4, 0, 32, 2, 64)
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run_cli<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Verify(a) => cmd_verify(a),
        Command::Cost(a) => cmd_cost(a),
        Command::Bench(BenchCommand::Cartesian(a)) => cmd_cartesian(a),
        Command::Bench(BenchCommand::Replay(a)) => cmd_replay(a),
        Command::Train(a) => cmd_train(a),
        Command::Encode(a) => cmd_encode(a),
        Command::Stats(a) => cmd_stats(a),
    }
}

fn cmd_verify(a: VerifyArgs) -> Result<i32> {
    let r = a.common.resolve(ModelConfig::default())?;
    let size = if a.quick {
        SuiteSize {
            dual_path: 20,
            endpoints: 10,
            counter: 100,
            cache_replay: 50,
            gradient_configs: 3,
        }
    } else {
        SuiteSize::default()
    };
    let report = run_suite(r.seed, size)?;
    for c in &report.checks {
        eprintln!(
            "{} {} ({} cases): {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.cases,
            c.detail
        );
    }
    let mut bytes = serde_json::to_vec_pretty(&report)?;
    bytes.push(b'\n');
    let manifest = RunManifest::new("verify", &r, json!({ "quick": a.quick }))?;
    emit(r.output.as_deref(), &bytes, &manifest)?;
    Ok(if report.passed() { EXIT_OK } else { EXIT_VERIFY_FAILED })
}

fn cmd_cost(a: CostArgs) -> Result<i32> {
    let r = a.common.resolve(ModelConfig::default())?;
    let records: Vec<LengthRecord> = read_lengths_jsonl(BufReader::new(std::fs::File::open(&a.lengths)?))?;
    let mut rows = sweep(&records, &r.model)?;
    if !a.sweep_p {
        rows.retain(|row| row.p == r.model.parallel_layers);
    }
    let mut bytes = Vec::new();
    write_sweep_csv(&rows, &mut bytes)?;
    let manifest = RunManifest::new("cost", &r, json!({ "lengths": a.lengths, "sweep_p": a.sweep_p }))?;
    emit(r.output.as_deref(), &bytes, &manifest)?;
    Ok(EXIT_OK)
}

fn print_bench(report: &BenchReport) {
    eprintln!(
        "{}: {} examples, L={} P={}, uncached ops {} (analytic {}), median {:.1} ms (std {:.1})",
        report.workload,
        report.examples,
        report.layers,
        report.p,
        report.uncached_ops,
        report.analytic_uncached_ops,
        report.uncached_time.median_ms,
        report.uncached_time.std_ms
    );
    if let (Some(ops), Some(t)) = (report.cached_ops, &report.cached_time) {
        eprintln!(
            "cached ops {} (analytic {}), ratio {:.4}, median {:.1} ms (std {:.1}), speedup {:.2}x, hit rate {:.3}",
            ops,
            report.analytic_cached_ops.unwrap_or_default(),
            report.op_ratio.unwrap_or_default(),
            t.median_ms,
            t.std_ms,
            report.speedup.unwrap_or_default(),
            report.hit_rate.unwrap_or_default()
        );
    }
}

fn bench_bytes(report: &BenchReport) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(report)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn cmd_cartesian(a: CartesianArgs) -> Result<i32> {
    let r = a.common.resolve(bench_defaults())?;
    let opts = BenchOptions {
        repetitions: a.reps,
        workers: a.workers,
        cache_budget_bytes: r.cache_budget_bytes,
        use_cache: a.cache,
    };
    let report = bench_cartesian(a.left, a.right, &r.model, r.seed, &opts)?;
    print_bench(&report);
    let manifest = RunManifest::new(
        "bench cartesian",
        &r,
        json!({ "left": a.left.to_string(), "right": a.right.to_string(), "cache": a.cache,
                "reps": a.reps, "workers": a.workers }),
    )?;
    emit(r.output.as_deref(), &bench_bytes(&report)?, &manifest)?;
    Ok(EXIT_OK)
}

fn load_or_init(weights: Option<&Path>, r: &Resolved, num_labels: usize) -> Result<ModelWeights<f32>> {
    match weights {
        Some(p) => ModelWeights::load(p),
        None => ModelWeights::init(&r.model, num_labels, r.seed),
    }
}

fn read_corpus(r: &Resolved, cfg: &ModelConfig) -> Result<Vec<SegmentedExample>> {
    let path = r
        .input
        .as_ref()
        .ok_or_else(|| LaitError::Config("--input is required".into()))?;
    read_input_jsonl(BufReader::new(std::fs::File::open(path)?))?
        .iter()
        .map(|rec| rec.to_example(cfg))
        .collect()
}

fn cmd_replay(a: ReplayArgs) -> Result<i32> {
    let r = a.common.resolve(bench_defaults())?;
    let weights = load_or_init(a.weights.as_deref(), &r, 2)?;
    let data = read_corpus(&r, weights.config())?;
    let opts = BenchOptions {
        repetitions: a.reps,
        workers: a.workers,
        cache_budget_bytes: r.cache_budget_bytes,
        use_cache: true,
    };
    let report = bench_replay(&data, &weights, &opts)?;
    print_bench(&report);
    let manifest = RunManifest::new(
        "bench replay",
        &r,
        json!({ "weights": a.weights, "reps": a.reps, "workers": a.workers }),
    )?;
    emit(r.output.as_deref(), &bench_bytes(&report)?, &manifest)?;
    Ok(EXIT_OK)
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let r = a.common.resolve(train_defaults())?;
    let spec = SyntheticTaskSpec {
        kind: a.task,
        seq_len: a.seq_len,
        vocab: r.model.vocab_size,
        n_train: a.n_train,
        n_eval: a.n_eval,
        seed: r.seed,
    };
    let mut opts = TrainOptions {
        steps: a.steps,
        batch_size: a.batch,
        seed: r.seed,
        eval_every: a.eval_every,
        ..TrainOptions::default()
    };
    opts.adam.lr = a.lr;
    let (weights, metrics) = train(&spec, &r.model, &opts)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for c in &metrics.curve {
        w.serialize(c)?;
    }
    let bytes = w.into_inner().map_err(|e| LaitError::Io(e.into_error()))?;
    eprintln!(
        "P={} final eval accuracy {:.4} (best {:.4})",
        r.model.parallel_layers, metrics.final_eval_accuracy, metrics.best_eval_accuracy
    );
    if let Some(p) = &a.weights_out {
        weights.save(p)?;
    }
    let manifest = RunManifest::new(
        "train",
        &r,
        json!({ "spec": spec, "options": opts, "weights_out": a.weights_out }),
    )?;
    emit(r.output.as_deref(), &bytes, &manifest)?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct EncodedLine {
    index: usize,
    task: String,
    tokens: usize,
    predicted: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    predicted_label: Option<String>,
    logits: Vec<f64>,
    cache_hits: usize,
    cache_misses: usize,
}

fn encode_all<T: Scalar>(
    data: &[SegmentedExample],
    weights: &ModelWeights<T>,
    cache: Option<&RepCache<T>>,
) -> Result<Vec<EncodedLine>> {
    data.iter()
        .enumerate()
        .map(|(index, ex)| {
            let enc = lait_encode(ex, weights, cache)?;
            let (predicted, logits) = classify(&enc.reps, weights.head())?;
            let labels = TaskTemplate::builtin(&ex.task_id)?.labels;
            Ok(EncodedLine {
                index,
                task: ex.task_id.clone(),
                tokens: ex.total_len(),
                predicted,
                predicted_label: labels.get(predicted).cloned(),
                logits: logits.into_iter().map(Scalar::as_f64).collect(),
                cache_hits: enc.cache_hits,
                cache_misses: enc.cache_misses,
            })
        })
        .collect()
}

fn cmd_encode(a: EncodeArgs) -> Result<i32> {
    let r = a.common.resolve(ModelConfig::default())?;
    let path = r
        .input
        .as_ref()
        .ok_or_else(|| LaitError::Config("--input is required".into()))?;
    let records = read_input_jsonl(BufReader::new(std::fs::File::open(path)?))?;
    let num_labels = records
        .iter()
        .map(|rec| TaskTemplate::builtin(&rec.task).map(|t| t.labels.len()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .max()
        .unwrap_or(0)
        .max(2);
    let weights = load_or_init(a.weights.as_deref(), &r, num_labels)?;
    let data = records
        .iter()
        .map(|rec| rec.to_example(weights.config()))
        .collect::<Result<Vec<_>>>()?;
    let budget = r.cache_budget_bytes.unwrap_or(usize::MAX);
    let use_cache = r.cache_dir.is_some() || r.cache_budget_bytes.is_some();
    let lines = match r.precision {
        Precision::F32 => {
            let cache = use_cache.then(|| RepCache::<f32>::new(budget));
            if let (Some(c), Some(dir)) = (&cache, &r.cache_dir) {
                c.load_dir(dir)?;
            }
            let lines = encode_all(&data, &weights, cache.as_ref())?;
            if let (Some(c), Some(dir)) = (&cache, &r.cache_dir) {
                c.save_dir(dir)?;
            }
            lines
        }
        Precision::F64 => {
            if r.cache_dir.is_some() {
                return Err(LaitError::Config(
                    "--cache-dir stores f32 entries; use --precision f32".into(),
                ));
            }
            let w64: ModelWeights<f64> = weights.cast();
            let cache = use_cache.then(|| RepCache::<f64>::new(budget));
            encode_all(&data, &w64, cache.as_ref())?
        }
    };
    let mut bytes = Vec::new();
    for l in &lines {
        serde_json::to_writer(&mut bytes, l)?;
        bytes.push(b'\n');
    }
    let (hits, misses) = lines
        .iter()
        .fold((0, 0), |(h, m), l| (h + l.cache_hits, m + l.cache_misses));
    eprintln!("encoded {} examples, cache hits {hits}, misses {misses}", lines.len());
    let manifest = RunManifest::new(
        "encode",
        &r,
        json!({ "weights": a.weights, "weights_fingerprint": format!("{:016x}", weights.fingerprint()) }),
    )?;
    emit(r.output.as_deref(), &bytes, &manifest)?;
    Ok(EXIT_OK)
}

fn cmd_stats(a: StatsArgs) -> Result<i32> {
    let r = a.common.resolve(ModelConfig::default())?;
    let data = read_corpus(&r, &r.model)?;
    let mut per_slot: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut bytes = Vec::new();
    for ex in &data {
        for (i, s) in ex.segments.iter().enumerate() {
            let e = per_slot.entry(i).or_default();
            e.0 += s.len();
            e.1 += 1;
        }
        serde_json::to_writer(&mut bytes, &length_record(ex))?;
        bytes.push(b'\n');
    }
    eprintln!("{} examples", data.len());
    for (slot, (total, count)) in &per_slot {
        eprintln!(
            "segment {slot}: {count} occurrences, mean length {:.2}",
            *total as f64 / *count as f64
        );
    }
    let manifest = RunManifest::new("stats", &r, json!({}))?;
    emit(r.output.as_deref(), &bytes, &manifest)?;
    Ok(EXIT_OK)
}
