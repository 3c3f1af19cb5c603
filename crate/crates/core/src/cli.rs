//! Command-line surface. `stdout` carries data, `stderr` diagnostics; the
//! exit code is 0 on success, 2 for usage or validation errors and 3 for
//! runtime, IO and cache errors.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::builder::{build_cache, fingerprint_task, BuildConfig};
use crate::converter::{Architecture, ConverterSpec};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, read_predictions};
use crate::features::FeatureValue;
use crate::reader::{cache_dir, Batch, Dataset, ReaderOptions};
use crate::registry::Registry;
use crate::shard_store::{verify_cache, Cache, CacheManifest};

#[derive(Debug, Parser)]
#[command(name = "taskstream", version, about = "Deterministic task-based data pipelines")]
pub struct Cli {
    /// Task registry definition file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root under which caches live as <root>/<task>/<split>.
    #[arg(long, global = true, default_value = "cache")]
    cache_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the cache for one task split.
    Cache(CacheArgs),
    /// Check a cache's files, placement, checksums and schema.
    Verify(TaskSplit),
    /// Stream batches for one data-parallel reader.
    Read(ReadArgs),
    /// Print one cached example.
    Inspect(InspectArgs),
    /// Measure read throughput.
    Bench(BenchArgs),
    /// Score a predictions file against a cached split.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct TaskSplit {
    #[arg(long)]
    task: String,
    #[arg(long, default_value = "train")]
    split: String,
}

#[derive(Debug, Args)]
struct CacheArgs {
    #[command(flatten)]
    target: TaskSplit,
    /// Output directory; defaults to <cache-dir>/<task>/<split>.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    num_shards: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Ids,
    Text,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Arch {
    EncDec,
    DecoderOnly,
}

#[derive(Debug, Args)]
#[group(id = "source", required = true, multiple = false, args = ["task", "mixture"])]
struct StreamSource {
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    mixture: Option<String>,
}

impl StreamSource {
    fn name(&self) -> &str {
        self.task.as_deref().or(self.mixture.as_deref()).expect("clap enforces one source")
    }
}

#[derive(Debug, Args)]
struct ReadArgs {
    #[command(flatten)]
    source: StreamSource,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, default_value_t = 0)]
    reader_id: u32,
    #[arg(long, default_value_t = 1)]
    num_readers: u32,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    start_step: u64,
    #[arg(long, default_value_t = 1)]
    steps: u64,
    #[arg(long, value_enum, default_value = "ids")]
    format: Format,
    #[arg(long, value_enum)]
    arch: Option<Arch>,
    /// Stream seed for epoch permutations and runtime preprocessing.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Global steps to skip, comma separated.
    #[arg(long, value_delimiter = ',')]
    skip_steps: Vec<u64>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[command(flatten)]
    target: TaskSplit,
    #[arg(long)]
    index: u64,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    source: StreamSource,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, default_value_t = 1)]
    num_readers: u32,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Measured seconds, after one second of warm-up.
    #[arg(long, default_value_t = 5.0)]
    seconds: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    task: String,
    #[arg(long, default_value = "validation")]
    split: String,
    /// Lines of `cache_index<TAB>space-separated token ids`.
    #[arg(long)]
    predictions: PathBuf,
    /// Also write the report here.
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = err.write_all(text.as_bytes());
            } else {
                let _ = out.write_all(text.as_bytes());
            }
            return code;
        }
    };
    match dispatch(&cli, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn load_registry(cli: &Cli) -> Result<Registry> {
    let path = cli.config.as_deref().ok_or_else(|| Error::Config("--config is required".into()))?;
    Registry::from_config_file(path)
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

fn dispatch(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    let registry = load_registry(cli)?;
    match &cli.command {
        Command::Cache(a) => cmd_cache(&registry, &cli.cache_dir, a, out),
        Command::Verify(a) => cmd_verify(&registry, &cli.cache_dir, a, out),
        Command::Read(a) => cmd_read(&registry, &cli.cache_dir, a, out),
        Command::Inspect(a) => cmd_inspect(&registry, &cli.cache_dir, a, out),
        Command::Bench(a) => cmd_bench(&registry, &cli.cache_dir, a, out, err),
        Command::Eval(a) => cmd_eval(&registry, &cli.cache_dir, a, out),
    }
}

fn cmd_cache(registry: &Registry, root: &Path, a: &CacheArgs, out: &mut dyn Write) -> Result<i32> {
    let dir = a.output.clone().unwrap_or_else(|| cache_dir(root, &a.target.task, &a.target.split));
    let cfg = BuildConfig::new(&a.target.task, &a.target.split, dir)
        .seed(a.seed)
        .num_shards(a.num_shards)
        .num_workers(a.workers);
    let manifest = build_cache(registry, &cfg)?;
    out.write_all(manifest.to_text().as_bytes()).map_err(io_err)?;
    Ok(0)
}

fn open_task_cache(registry: &Registry, root: &Path, t: &TaskSplit) -> Result<Cache> {
    let spec = registry.task(&t.task)?;
    let dir = cache_dir(root, &t.task, &t.split);
    let m = CacheManifest::read(&dir)?;
    Cache::open_checked(&dir, &fingerprint_task(registry, spec, m.seed, m.num_shards))
}

fn cmd_verify(registry: &Registry, root: &Path, t: &TaskSplit, out: &mut dyn Write) -> Result<i32> {
    let spec = registry.task(&t.task)?;
    let dir = cache_dir(root, &t.task, &t.split);
    let fp = CacheManifest::read(&dir).ok().map(|m| fingerprint_task(registry, spec, m.seed, m.num_shards));
    let report = verify_cache(&dir, fp.as_deref());
    for v in &report.violations {
        writeln!(out, "violation: {v}").map_err(io_err)?;
    }
    writeln!(
        out,
        "{}: {} records checked, {} violations",
        dir.display(),
        report.records_checked,
        report.violations.len()
    )
    .map_err(io_err)?;
    Ok(if report.is_ok() { 0 } else { 3 })
}

/// Converter lengths come from the `fixed_length` of `inputs`/`targets`,
/// taking the largest across the tasks being read.
fn converter_for(registry: &Registry, name: &str, arch: Arch) -> Result<ConverterSpec> {
    let tasks: Vec<String> = registry.resolve_mixture(name)?.into_iter().map(|(t, _)| t).collect();
    let length = |feature: &str, required: bool| -> Result<usize> {
        let mut best: Option<usize> = None;
        for t in &tasks {
            if let Some(l) = registry.task(t)?.fixed_length(feature) {
                best = Some(best.map_or(l as usize, |b: usize| b.max(l as usize)));
            }
        }
        match best {
            Some(l) => Ok(l),
            None if !required => Ok(1),
            None => Err(Error::InvalidReaderOptions(format!(
                "--arch needs a fixed_length for feature `{feature}` in the task schema"
            ))),
        }
    };
    let architecture = match arch {
        Arch::EncDec => Architecture::EncDec,
        Arch::DecoderOnly => Architecture::DecoderOnly,
    };
    let inputs_required = architecture == Architecture::EncDec;
    Ok(ConverterSpec {
        architecture,
        inputs_length: length("inputs", inputs_required)?,
        targets_length: length("targets", true)?,
        loss_on_inputs: false,
    })
}

fn cmd_read(registry: &Registry, root: &Path, a: &ReadArgs, out: &mut dyn Write) -> Result<i32> {
    let name = a.source.name();
    let mut opts = ReaderOptions::new(&a.split, a.reader_id, a.num_readers, a.batch_size)
        .seed(a.seed)
        .skip_steps(a.skip_steps.iter().copied());
    if let Some(arch) = a.arch {
        opts = opts.converter(converter_for(registry, name, arch)?);
    }
    let mut ds = Dataset::open(registry, root, name, opts)?;
    ds.seek_to_step(a.start_step);
    let mut buf = std::io::BufWriter::new(out);
    for _ in 0..a.steps {
        let batch = ds.next_batch()?;
        render_batch(registry, &batch, a.format, &mut buf)?;
    }
    buf.flush().map_err(io_err)?;
    Ok(0)
}

fn render_batch(registry: &Registry, batch: &Batch, format: Format, out: &mut dyn Write) -> Result<()> {
    for item in &batch.items {
        let mut line =
            format!("step={}\ttask={}\tindex={}\tepoch={}", batch.step, item.task, item.cache_index, item.epoch);
        for (name, value) in &item.features {
            line.push('\t');
            line.push_str(name);
            line.push('=');
            line.push_str(&render_value(registry, &item.task, name, value, format));
        }
        writeln!(out, "{line}").map_err(io_err)?;
    }
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::from("0x");
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

fn render_value(registry: &Registry, task: &str, name: &str, value: &FeatureValue, format: Format) -> String {
    let ids = |v: &FeatureValue| -> String {
        match v {
            FeatureValue::Int32(x) => x.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "),
            FeatureValue::Int64(x) => x.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "),
            FeatureValue::Float32(x) => x.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" "),
            FeatureValue::Bytes(x) => hex(x),
        }
    };
    match format {
        Format::Ids => format!("[{}]", ids(value)),
        Format::Text => {
            let as_text = |bytes: &[u8]| match std::str::from_utf8(bytes) {
                Ok(s) => format!("{s:?}"),
                Err(_) => hex(bytes),
            };
            if let FeatureValue::Bytes(b) = value {
                return as_text(b);
            }
            let source_feature = match name {
                "encoder_input_tokens" => "inputs",
                "decoder_input_tokens" | "decoder_target_tokens" => "targets",
                "decoder_loss_weights" => return format!("[{}]", ids(value)),
                other => other,
            };
            let vocab =
                registry.task(task).ok().and_then(|t| t.vocab_for(source_feature)).and_then(|v| registry.vocab(v));
            match (vocab, value.as_ids()) {
                (Some(vocab), Some(tokens)) => match vocab.decode(&tokens) {
                    Ok(bytes) => as_text(&bytes),
                    Err(_) => format!("[{}]", ids(value)),
                },
                _ => format!("[{}]", ids(value)),
            }
        }
    }
}

fn cmd_inspect(registry: &Registry, root: &Path, a: &InspectArgs, out: &mut dyn Write) -> Result<i32> {
    let cache = open_task_cache(registry, root, &a.target)?;
    let n = cache.manifest().num_examples;
    if a.index >= n {
        return Err(Error::InvalidReaderOptions(format!("--index {} beyond cache of {n} examples", a.index)));
    }
    let ex = cache.read_index(a.index)?;
    let f = cache.manifest().num_shards as u64;
    writeln!(out, "cache_index = {}\nshard = {}\nrecord = {}", ex.cache_index, ex.cache_index % f, ex.cache_index / f)
        .map_err(io_err)?;
    for (name, value) in &ex.features {
        writeln!(
            out,
            "{name} ({}, {}) = {}",
            value.dtype(),
            value.len(),
            render_value(registry, &a.target.task, name, value, Format::Ids)
        )
        .map_err(io_err)?;
        if let Some(v) = registry.task(&a.target.task)?.vocab_for(name).and_then(|v| registry.vocab(v)) {
            if let Some(text) = value.as_ids().and_then(|ids| v.decode(&ids).ok()) {
                writeln!(out, "{name} (text) = {:?}", String::from_utf8_lossy(&text)).map_err(io_err)?;
            }
        }
    }
    Ok(0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchResult {
    pub reader_id: u32,
    pub examples: u64,
    pub bytes: u64,
    pub seconds: f64,
}

impl BenchResult {
    pub fn examples_per_sec(&self) -> f64 {
        self.examples as f64 / self.seconds
    }

    pub fn bytes_per_sec(&self) -> f64 {
        self.bytes as f64 / self.seconds
    }
}

/// Run one reader per id in `0..template.num_readers` concurrently, each
/// for `warmup + measure`, counting only what happens after the warm-up.
pub fn bench_readers(
    registry: &Registry,
    root: &Path,
    name: &str,
    template: &ReaderOptions,
    warmup: Duration,
    measure: Duration,
) -> Result<Vec<BenchResult>> {
    let datasets = (0..template.num_readers)
        .map(|r| {
            let mut opts = template.clone();
            opts.reader_id = r;
            Dataset::open(registry, root, name, opts)
        })
        .collect::<Result<Vec<_>>>()?;
    std::thread::scope(|scope| {
        let handles: Vec<_> = datasets
            .into_iter()
            .enumerate()
            .map(|(r, mut ds)| {
                scope.spawn(move || -> Result<BenchResult> {
                    let stats = ds.io_stats();
                    let bytes = || stats.iter().map(|s| s.payload_bytes()).sum::<u64>();
                    let start = Instant::now();
                    while start.elapsed() < warmup {
                        ds.next_batch()?;
                    }
                    let (b0, t0) = (bytes(), Instant::now());
                    let mut examples = 0u64;
                    while t0.elapsed() < measure {
                        examples += ds.next_batch()?.items.len() as u64;
                    }
                    Ok(BenchResult {
                        reader_id: r as u32,
                        examples,
                        bytes: bytes() - b0,
                        seconds: t0.elapsed().as_secs_f64(),
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("bench reader panicked")).collect()
    })
}

fn cmd_bench(registry: &Registry, root: &Path, a: &BenchArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    if !(a.seconds.is_finite() && a.seconds > 0.0) {
        return Err(Error::InvalidReaderOptions(format!("--seconds must be > 0, got {}", a.seconds)));
    }
    let name = a.source.name();
    writeln!(err, "warming up for 1s, then measuring {}s", a.seconds).map_err(io_err)?;
    let template = ReaderOptions::new(&a.split, 0, a.num_readers, a.batch_size).seed(a.seed);
    let results =
        bench_readers(registry, root, name, &template, Duration::from_secs(1), Duration::from_secs_f64(a.seconds))?;
    for r in &results {
        writeln!(
            out,
            "reader={}\texamples_per_sec={:.1}\tbytes_per_sec={:.1}",
            r.reader_id,
            r.examples_per_sec(),
            r.bytes_per_sec()
        )
        .map_err(io_err)?;
    }
    let eps: f64 = results.iter().map(BenchResult::examples_per_sec).sum();
    let bps: f64 = results.iter().map(BenchResult::bytes_per_sec).sum();
    writeln!(out, "aggregate\texamples_per_sec={eps:.1}\tbytes_per_sec={bps:.1}").map_err(io_err)?;
    Ok(0)
}

fn cmd_eval(registry: &Registry, root: &Path, a: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let spec = registry.task(&a.task)?;
    let cache = open_task_cache(registry, root, &TaskSplit { task: a.task.clone(), split: a.split.clone() })?;
    let predictions = read_predictions(&a.predictions)?;
    let report = evaluate(registry.metrics(), &spec.metrics, &cache, &predictions, false)?;
    let text = report.to_text();
    out.write_all(text.as_bytes()).map_err(io_err)?;
    if let Some(path) = &a.output {
        std::fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    }
    Ok(0)
}
