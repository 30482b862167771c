//! `bmoe` command-line interface.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
//! Report files are byte-identical across runs of the same config and seed;
//! timings and memory live only in `manifest.json`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::analysis;
use crate::autodiff::Tensor;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::model::{self, Model, ModelConfig};
use crate::moe::{self, MoEConfig, MoELayer};
use crate::tasks;
use crate::ternary;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const CHECKPOINT_FILE: &str = "checkpoint.bmoe";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "bmoe", version, about = "Butterfly mixture-of-experts: training, analysis and benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a synthetic task.
    Train(TrainArgs),
    /// Memory of standard and butterfly MoE layers over an expert sweep.
    ReportMemory(MemoryArgs),
    /// Substrate quantization error at initialisation and in a checkpoint.
    QuantError(QuantArgs),
    /// Expert output cosine similarity of a checkpoint.
    Diversity(DiversityArgs),
    /// Time the MoE forward pass at several butterfly depths.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML file with model config keys; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    /// Output directory; defaults to `runs/<task>-<variant>-s<seed>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Config overrides as `--key value` pairs, e.g. `--task sort --epochs 5`.
    #[arg(num_args = 0.., allow_hyphen_values = true, trailing_var_arg = true, value_name = "--KEY VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct MemoryArgs {
    #[arg(long, default_value_t = 512)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2048)]
    pub d_ff: usize,
    /// Expert counts, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,64,128,256")]
    pub experts: Vec<usize>,
    /// Bytes per weight of the standard layer.
    #[arg(long, default_value_t = 4)]
    pub precision: u64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Also print the method comparison and device capacity tables.
    #[arg(long)]
    pub tables: bool,
}

#[derive(Debug, Args)]
pub struct QuantArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiversityArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Seed of the probe batch drawn from the checkpoint's task.
    #[arg(long)]
    pub probe_seed: u64,
    /// Probe samples; defaults to the configured batch size.
    #[arg(long)]
    pub probe_size: Option<usize>,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Butterfly depths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "2,4,6,9")]
    pub layers: Vec<usize>,
    /// Width of the square experts (`d_model = d_ff`).
    #[arg(long, default_value_t = 512)]
    pub dim: usize,
    #[arg(long, default_value_t = 8)]
    pub experts: usize,
    #[arg(long, default_value_t = 2)]
    pub k: usize,
    /// Tokens per forward pass.
    #[arg(long, default_value_t = 64)]
    pub tokens: usize,
    /// Timed passes per depth; the fastest is reported.
    #[arg(long, default_value_t = 50)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a.config.as_deref(), &a.overrides, a.seed, a.out.as_deref()).map(|o| {
            eprintln!("wrote {}", o.dir.display());
        }),
        Command::ReportMemory(a) => cmd_report_memory(&a),
        Command::QuantError(a) => cmd_quant_error(&a.checkpoint, a.output.as_deref()).map(|_| ()),
        Command::Diversity(a) => cmd_diversity(&a.checkpoint, a.probe_seed, a.probe_size, a.output.as_deref()).map(|_| ()),
        Command::Bench(a) => cmd_bench(&a).map(|_| ()),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

/// Resolves a config from an optional TOML file, `--key value` overrides and
/// the mandatory seed. Keys accept `-` or `_`; values are read as TOML
/// scalars and fall back to bare strings.
pub fn resolve_config(config_path: Option<&Path>, overrides: &[String], seed: u64) -> Result<ModelConfig> {
    let mut table: toml::Table = match config_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))?;
            text.parse().map_err(|e| Error::config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    let mut it = overrides.iter();
    while let Some(flag) = it.next() {
        let body = flag
            .strip_prefix("--")
            .ok_or_else(|| Error::config(format!("expected --key, found {flag:?}")))?;
        let (key, raw) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| Error::config(format!("--{body} needs a value")))?;
                (body.to_string(), v.clone())
            }
        };
        table.insert(key.replace('-', "_"), scalar(&raw));
    }
    table.insert("seed".into(), toml::Value::Integer(i64::try_from(seed).map_err(|_| Error::config("seed exceeds i64"))?));
    let config: ModelConfig = table.try_into().map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
    config.validate()?;
    Ok(config)
}

fn scalar(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .filter(|v| !matches!(v, toml::Value::Table(_) | toml::Value::Array(_)))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// sha-256 over `"blob <len>\0" ++ canonical JSON of the config`, hex.
pub fn config_hash(config: &ModelConfig) -> Result<String> {
    let body = serde_json::to_vec(config)?;
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", body.len()).as_bytes());
    h.update(&body);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub config: ModelConfig,
    pub config_hash: String,
    pub seed: u64,
    pub output_dir: String,
    pub artifacts: Vec<String>,
    pub precision: &'static str,
    pub workers: usize,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
    pub wall_seconds: f64,
    pub peak_memory_bytes: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub report: model::TrainReport,
    pub manifest: RunManifest,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

/// Trains in `f32` and writes the checkpoint, the per-epoch report as CSV and
/// JSON, and the manifest into the output directory. Divergence still writes
/// nothing but the error.
pub fn cmd_train(config_path: Option<&Path>, overrides: &[String], seed: u64, out: Option<&Path>) -> Result<TrainOutcome> {
    let config = resolve_config(config_path, overrides, seed)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| {
        PathBuf::from("runs").join(format!("{}-{}-s{}", config.task, config.variant, config.seed))
    });
    let started = unix_now();
    let clock = Instant::now();
    let mut m = Model::<f32>::new(config.clone())?;
    let (train_set, eval_set) = model::datasets(&config)?;
    let report = model::train(&mut m, &train_set, &eval_set, |r| {
        eprintln!(
            "epoch {:>3}  eval_loss {:.4}  acc {:.4}{}",
            r.epoch,
            r.eval_loss,
            r.token_accuracy,
            r.quant_error.map(|q| format!("  quant_err {q:.4}")).unwrap_or_default()
        );
    })?;
    fs::create_dir_all(&dir)?;
    checkpoint::save(&m, &dir.join(CHECKPOINT_FILE))?;
    let mut w = csv::Writer::from_path(dir.join(REPORT_CSV))?;
    for r in &report.epochs {
        w.serialize(r)?;
    }
    w.flush()?;
    fs::write(dir.join(REPORT_JSON), serde_json::to_string_pretty(&report)? + "\n")?;
    let manifest = RunManifest {
        config_hash: config_hash(&config)?,
        seed: config.seed,
        config,
        output_dir: dir.display().to_string(),
        artifacts: [CHECKPOINT_FILE, REPORT_CSV, REPORT_JSON].map(String::from).to_vec(),
        precision: "f32",
        workers: 1,
        started_unix_s: started,
        finished_unix_s: unix_now(),
        wall_seconds: clock.elapsed().as_secs_f64(),
        peak_memory_bytes: model::peak_memory_bytes(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(TrainOutcome { dir, report, manifest })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryRow {
    #[serde(rename = "N_E")]
    pub n_experts: usize,
    pub standard_bytes: u64,
    pub butterfly_bytes: f64,
    pub ratio: f64,
}

pub fn memory_rows(d_model: usize, d_ff: usize, experts: &[usize], precision: u64) -> Result<Vec<MemoryRow>> {
    if experts.is_empty() {
        return Err(Error::config("expert sweep is empty"));
    }
    experts
        .iter()
        .map(|&n| {
            let butterfly_bytes = analysis::butterfly_memory_bytes(d_model, d_ff, n, ternary::INFO_BITS_PER_WEIGHT, analysis::DEFAULT_BYTES_PER_ANGLE)?;
            let standard_bytes = analysis::standard_moe_memory_bytes(d_model, d_ff, n, precision);
            Ok(MemoryRow {
                n_experts: n,
                standard_bytes,
                butterfly_bytes,
                ratio: standard_bytes as f64 / butterfly_bytes,
            })
        })
        .collect()
}

fn sink(output: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match output {
        Some(p) => Box::new(fs::File::create(p)?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn write_rows<R: Serialize>(rows: &[R], output: Option<&Path>) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink(output)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_report_memory(args: &MemoryArgs) -> Result<()> {
    let rows = memory_rows(args.d_model, args.d_ff, &args.experts, args.precision)?;
    write_rows(&rows, args.output.as_deref())?;
    if args.tables {
        let mut out = std::io::stdout().lock();
        writeln!(out, "\n{}", analysis::comparison_table()?)?;
        writeln!(out, "{:<12} {:>12} {:>10} {:>10} {:>10} {:>10}", "device", "budget MiB", "butterfly", "published", "standard", "published")?;
        for r in analysis::device_table(args.d_model, args.d_ff, args.precision)? {
            writeln!(
                out,
                "{:<12} {:>12.1} {:>10} {:>10} {:>10} {:>10}",
                r.device,
                r.budget_bytes / analysis::MIB,
                r.butterfly_experts,
                r.published_butterfly,
                r.standard_experts,
                r.published_standard
            )?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantRow {
    pub layer: usize,
    pub init_error: f64,
    pub trained_error: f64,
    /// `1 − trained/init`.
    pub reduction: f64,
}

/// Substrate error of each butterfly layer in the checkpoint against the
/// same config's seeded initialisation.
pub fn cmd_quant_error(checkpoint_path: &Path, output: Option<&Path>) -> Result<Vec<QuantRow>> {
    let trained = checkpoint::load::<f32>(checkpoint_path)?;
    let init = Model::<f32>::new(trained.config().clone())?;
    let rows = init
        .butterfly_layers()
        .zip(trained.butterfly_layers())
        .enumerate()
        .map(|(layer, (a, b))| {
            let init_error = ternary::relative_quant_error(a.latent())?;
            let trained_error = ternary::relative_quant_error(b.latent())?;
            Ok(QuantRow {
                layer,
                init_error,
                trained_error,
                reduction: 1.0 - trained_error / init_error,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(Error::config("checkpoint has no butterfly layers"));
    }
    write_rows(&rows, output)?;
    Ok(rows)
}

/// Cosine matrices of every butterfly layer on a probe batch of the
/// checkpoint's task. CSV rows are `layer, expert, e0 … e(N−1)`.
pub fn cmd_diversity(checkpoint_path: &Path, probe_seed: u64, probe_size: Option<usize>, output: Option<&Path>) -> Result<Vec<moe::Similarity>> {
    let m = checkpoint::load::<f32>(checkpoint_path)?;
    let c = m.config();
    let probe = tasks::generate(c.task, probe_size.unwrap_or(c.batch), c.task_len(), c.vocab, probe_seed)?;
    let sims = model::expert_similarities(&m, &probe)?;
    if sims.is_empty() {
        return Err(Error::config("checkpoint has no butterfly layers"));
    }
    let mut w = csv::Writer::from_writer(sink(output)?);
    let n = c.n_experts;
    let mut header = vec!["layer".to_string(), "expert".to_string()];
    header.extend((0..n).map(|j| format!("e{j}")));
    w.write_record(&header)?;
    for (layer, s) in sims.iter().enumerate() {
        for i in 0..n {
            let mut rec = vec![layer.to_string(), i.to_string()];
            rec.extend(s.matrix.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        eprintln!(
            "layer {layer}: mean off-diagonal {:.4}, diversity {:.4}, excluded {}",
            moe::mean_off_diagonal(&s.matrix),
            moe::diversity_score(&s.matrix)?,
            s.excluded
        );
    }
    w.flush()?;
    Ok(sims)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub layers: usize,
    pub params_per_expert: usize,
    pub tokens_per_sec: f64,
    /// Throughput over that of the full-depth transform.
    pub speedup: f64,
    pub workers: usize,
}

/// Times the frozen-substrate forward pass of one `f32` layer per depth.
/// Passes are interleaved across depths so drift hits all of them alike.
pub fn cmd_bench(args: &BenchArgs) -> Result<Vec<BenchRow>> {
    let full = crate::butterfly::log2_exact(args.dim).ok_or_else(|| Error::config(format!("dim {} is not a power of two", args.dim)))?;
    if args.layers.is_empty() || args.repeats == 0 || args.tokens == 0 {
        return Err(Error::config("bench needs depths, repeats and tokens"));
    }
    let mut depths = args.layers.clone();
    if !depths.contains(&full) {
        depths.push(full);
    }
    let layers = depths
        .iter()
        .map(|&l| {
            let config = MoEConfig {
                layers_in: l,
                layers_out: l,
                ..MoEConfig::new(args.dim, args.dim, args.experts, args.k)
            };
            let mut layer = MoELayer::<f32>::new(config, args.seed)?;
            layer.freeze()?;
            Ok(layer)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let x = Tensor::from_fn([args.tokens, args.dim], |_| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v as f32
    });
    for l in &layers {
        l.moe_forward(&x)?;
    }
    let mut best = vec![f64::INFINITY; layers.len()];
    for _ in 0..args.repeats {
        for (l, b) in layers.iter().zip(best.iter_mut()) {
            let t = Instant::now();
            std::hint::black_box(l.moe_forward(std::hint::black_box(&x))?);
            *b = b.min(t.elapsed().as_secs_f64());
        }
    }
    let reference = args.tokens as f64 / best[depths.iter().position(|&l| l == full).expect("full depth added")];
    let rows: Vec<BenchRow> = args
        .layers
        .iter()
        .map(|&l| {
            let i = depths.iter().position(|&d| d == l).expect("requested depth");
            let tps = args.tokens as f64 / best[i];
            BenchRow {
                layers: l,
                params_per_expert: layers[i].config().angles_per_expert(),
                tokens_per_sec: tps,
                speedup: tps / reference,
                workers: 1,
            }
        })
        .collect();
    write_rows(&rows, args.output.as_deref())?;
    Ok(rows)
}
