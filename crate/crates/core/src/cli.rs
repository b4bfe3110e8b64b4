//! The `nnoc` command line: encode, decode, verify, collect, train, bench.
//!
//! Exit codes: 0 success, 2 usage, 3 input error, 4 stream or model
//! mismatch, 5 internal invariant violation.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::codec::{self, Bitstream, CodecError};
use crate::context::{collect_training_contexts, ContextError, ContextHistogram};
use crate::geometry::{GeometryError, Pyramid, VoxelSet};
use crate::io::{self as pcio, IoError, RawPointCloud};
use crate::model::{self, Model, ModelError, TrainConfig};
use crate::variant::Variant;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Mismatch(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Input(_) => 3,
            CliError::Mismatch(_) => 4,
            CliError::Internal(_) => 5,
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Geometry(GeometryError::BitdepthUnsupported(_)) => CliError::Usage(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        match e {
            GeometryError::CoordinateOutOfRange { .. } | GeometryError::BitdepthUnsupported(_) => {
                CliError::Input(e.to_string())
            }
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<ContextError> for CliError {
    fn from(e: ContextError) -> Self {
        match e {
            ContextError::UnknownVariant(_) => CliError::Usage(e.to_string()),
            ContextError::CorruptHistogram(_) | ContextError::Io(_) => CliError::Input(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::CorruptModelFile(_) | ModelError::VersionMismatch(_) | ModelError::HashMismatch => {
                CliError::Input(format!("model file: {e}"))
            }
            ModelError::EmptyHistogram => CliError::Input(e.to_string()),
            ModelError::TemplateMismatch { .. } | ModelError::LengthMismatch { .. } => {
                CliError::Mismatch(e.to_string())
            }
            ModelError::InvalidConfig(_) | ModelError::UnsupportedContextLength(_) => {
                CliError::Usage(e.to_string())
            }
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<CodecError> for CliError {
    fn from(e: CodecError) -> Self {
        match e {
            CodecError::ModelVariantMismatch { .. }
            | CodecError::HashMismatch { .. }
            | CodecError::StreamCorrupt(_)
            | CodecError::UnsupportedVersion(_)
            | CodecError::MaskInconsistent { .. } => CliError::Mismatch(e.to_string()),
            CodecError::EmptyCloud => CliError::Input(e.to_string()),
            CodecError::Geometry(g) => g.into(),
            CodecError::Model(m) => m.into(),
            CodecError::WrongBitdepth(_) => CliError::Internal(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Text,
    Tsv,
}

#[derive(Debug, Parser)]
#[command(name = "nnoc", version, about = "Lossless point cloud geometry coding with a learned context model")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// Codec variant: nnoc, fnnoc, fnnoc1 .. fnnoc5. Defaults to the model's.
    #[arg(long, global = true)]
    pub variant: Option<Variant>,
    /// Model file. Without one, the uniform (all-zero) model is used.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Seed for every random choice (initialization, shuffling).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[arg(long, global = true, value_enum, default_value_t = ReportFormat::Text)]
    pub report: ReportFormat,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode a PLY point cloud into a bitstream.
    Encode {
        input: PathBuf,
        output: PathBuf,
        /// Target bit depth; defaults to the cloud's own.
        #[arg(long)]
        depth: Option<u8>,
    },
    /// Decode a bitstream into an integer PLY.
    Decode { input: PathBuf, output: PathBuf },
    /// Encode, decode and compare; exits 0 only on exact reconstruction.
    Verify {
        input: PathBuf,
        #[arg(long)]
        depth: Option<u8>,
    },
    /// Accumulate the context histogram of PLY clouds.
    #[command(alias = "collect-contexts")]
    Collect {
        output: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        depth: Option<u8>,
    },
    /// Train a model on a context histogram.
    Train {
        histogram: PathBuf,
        output: PathBuf,
        /// Validation histogram; the training histogram is used without one.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, default_value_t = TrainConfig::default().batch_size)]
        batch_size: usize,
        #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
        lr: f64,
        #[arg(long, default_value_t = TrainConfig::default().patience)]
        patience: usize,
        #[arg(long, default_value_t = TrainConfig::default().max_epochs)]
        max_epochs: usize,
    },
    /// Encode every PLY in a directory and tabulate bits per occupied voxel.
    Bench {
        dir: PathBuf,
        /// Lines `name bpov` with reference results to compare against.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        depth: Option<u8>,
    },
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command; `Ok` carries the exit code.
pub fn execute(cli: &Cli, out: &mut (dyn Write + Send)) -> Result<i32, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.threads)
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    pool.install(|| dispatch(cli, out))
}

fn dispatch(cli: &Cli, out: &mut (dyn Write + Send)) -> Result<i32, CliError> {
    let g = &cli.global;
    match &cli.command {
        Command::Encode { input, output, depth } => cmd_encode(g, input, output, *depth, out),
        Command::Decode { input, output } => cmd_decode(g, input, output, out),
        Command::Verify { input, depth } => cmd_verify(g, input, *depth, out),
        Command::Collect { output, inputs, depth } => cmd_collect(g, inputs, output, *depth, out),
        Command::Train {
            histogram,
            output,
            val,
            batch_size,
            lr,
            patience,
            max_epochs,
        } => {
            let cfg = TrainConfig {
                batch_size: *batch_size,
                learning_rate: *lr,
                patience: *patience,
                max_epochs: *max_epochs,
                seed: g.seed,
                ..TrainConfig::default()
            };
            cmd_train(g, histogram, val.as_deref(), output, &cfg, out)
        }
        Command::Bench { dir, baseline, depth } => cmd_bench(g, dir, baseline.as_deref(), *depth, out),
    }
}

/// Resolves the model and variant, checking that they agree before any
/// work starts.
fn load_model(g: &GlobalOpts, fallback: Variant) -> Result<Model, CliError> {
    match &g.model {
        Some(path) => {
            let bytes = fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            let model = Model::from_bytes(&bytes)?;
            if let Some(v) = g.variant {
                if v != model.variant() {
                    return Err(CliError::Mismatch(format!(
                        "--variant {v} does not match model variant {}",
                        model.variant()
                    )));
                }
            }
            Ok(model)
        }
        None => Ok(Model::uniform(g.variant.unwrap_or(fallback))),
    }
}

/// Depth a raw cloud is coded at: `--depth`, else its declared or
/// smallest covering depth for integer clouds.
fn resolve_depth(pc: &RawPointCloud, depth: Option<u8>) -> Result<u8, CliError> {
    if let Some(d) = depth {
        return Ok(d);
    }
    if pc.points.iter().flatten().all(|&v| v >= 0.0 && v.fract() == 0.0) {
        let max = pc.points.iter().flatten().fold(0.0f64, |m, &v| m.max(v)) as u64;
        let covering = (64 - max.leading_zeros()).max(2) as u8;
        return Ok(pc.bitdepth.unwrap_or(covering).max(covering));
    }
    Err(CliError::Usage(
        "cloud has non-integer coordinates; pass --depth".to_string(),
    ))
}

fn load_cloud(path: &Path, depth: Option<u8>) -> Result<VoxelSet, CliError> {
    let pc = pcio::read_ply(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let d = resolve_depth(&pc, depth)?;
    Ok(pcio::requantize(&pc, d)?)
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn cmd_encode(
    g: &GlobalOpts,
    input: &Path,
    output: &Path,
    depth: Option<u8>,
    out: &mut (dyn Write + Send),
) -> Result<i32, CliError> {
    let model = load_model(g, Variant::Nnoc)?;
    let cloud = load_cloud(input, depth)?;
    let start = Instant::now();
    let bs = codec::encode(&cloud, &model, model.variant())?;
    let elapsed = start.elapsed();
    fs::write(output, bs.to_bytes())?;
    let b = codec::bpov(&bs, &cloud)?;
    match g.report {
        ReportFormat::Text => {
            writeln!(out, "variant        {}", model.variant())?;
            writeln!(out, "voxels         {}", b.voxels)?;
            writeln!(out, "bits           {}", b.total_bits)?;
            writeln!(out, "bpov           {:.4}", b.total)?;
            writeln!(out, "bpov_content   {:.4}", b.content)?;
            writeln!(out, "encode_seconds {:.3}", secs(elapsed))?;
            writeln!(out, "r  mask_bytes  payload_bytes")?;
            for l in &bs.levels {
                writeln!(out, "{:<2} {:>10}  {:>13}", l.r, l.mask.len(), l.payload.len())?;
            }
        }
        ReportFormat::Tsv => {
            writeln!(out, "key\tvalue")?;
            writeln!(out, "variant\t{}", model.variant())?;
            writeln!(out, "voxels\t{}", b.voxels)?;
            writeln!(out, "bits\t{}", b.total_bits)?;
            writeln!(out, "bpov\t{:.6}", b.total)?;
            writeln!(out, "bpov_content\t{:.6}", b.content)?;
            writeln!(out, "encode_seconds\t{:.6}", secs(elapsed))?;
            for l in &bs.levels {
                writeln!(out, "r{}_mask_bytes\t{}", l.r, l.mask.len())?;
                writeln!(out, "r{}_payload_bytes\t{}", l.r, l.payload.len())?;
            }
        }
    }
    Ok(0)
}

fn read_stream(path: &Path) -> Result<Bitstream, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(Bitstream::from_bytes(&bytes)?)
}

fn cmd_decode(g: &GlobalOpts, input: &Path, output: &Path, out: &mut (dyn Write + Send)) -> Result<i32, CliError> {
    let bs = read_stream(input)?;
    let model = load_model(g, bs.header.variant)?;
    let start = Instant::now();
    let cloud = codec::decode(&bs, &model)?;
    let elapsed = start.elapsed();
    pcio::write_ply(&cloud, output)?;
    match g.report {
        ReportFormat::Text => {
            writeln!(out, "voxels         {}", cloud.len())?;
            writeln!(out, "decode_seconds {:.3}", secs(elapsed))?;
        }
        ReportFormat::Tsv => {
            writeln!(out, "key\tvalue\nvoxels\t{}\ndecode_seconds\t{:.6}", cloud.len(), secs(elapsed))?;
        }
    }
    Ok(0)
}

fn cmd_verify(g: &GlobalOpts, input: &Path, depth: Option<u8>, out: &mut (dyn Write + Send)) -> Result<i32, CliError> {
    let model = load_model(g, Variant::Nnoc)?;
    let cloud = load_cloud(input, depth)?;
    let start = Instant::now();
    let bytes = codec::encode(&cloud, &model, model.variant())?.to_bytes();
    let encoded = start.elapsed();
    let bs = Bitstream::from_bytes(&bytes)?;
    let decoded = codec::decode(&bs, &model)?;
    let total = start.elapsed();
    let b = codec::bpov(&bs, &cloud)?;
    writeln!(
        out,
        "voxels {} bpov {:.4} encode {:.3}s decode {:.3}s",
        cloud.len(),
        b.total,
        secs(encoded),
        secs(total - encoded)
    )?;
    if decoded == cloud {
        writeln!(out, "LOSSLESS: OK")?;
        Ok(0)
    } else {
        writeln!(out, "LOSSLESS: FAILED")?;
        Ok(5)
    }
}

fn cmd_collect(
    g: &GlobalOpts,
    inputs: &[PathBuf],
    output: &Path,
    depth: Option<u8>,
    out: &mut (dyn Write + Send),
) -> Result<i32, CliError> {
    let variant = match &g.model {
        Some(_) => load_model(g, Variant::Nnoc)?.variant(),
        None => g.variant.unwrap_or(Variant::Nnoc),
    };
    let mut hist = ContextHistogram::new(variant.template());
    for path in inputs {
        let cloud = load_cloud(path, depth)?;
        hist.merge(&collect_training_contexts(&Pyramid::build(&cloud), variant.template()));
    }
    let file = fs::File::create(output)?;
    hist.write_to(std::io::BufWriter::new(file))?;
    let s = hist.stats();
    match g.report {
        ReportFormat::Text => {
            writeln!(out, "template     {}", hist.template())?;
            writeln!(out, "unique       {}", s.unique)?;
            writeln!(out, "occurrences  {}", s.total)?;
            writeln!(out, "min_count    {}", s.min_occurrences)?;
            writeln!(out, "max_count    {}", s.max_occurrences)?;
        }
        ReportFormat::Tsv => {
            writeln!(out, "key\tvalue")?;
            writeln!(out, "template\t{}", hist.template())?;
            writeln!(out, "unique\t{}", s.unique)?;
            writeln!(out, "occurrences\t{}", s.total)?;
            writeln!(out, "min_count\t{}", s.min_occurrences)?;
            writeln!(out, "max_count\t{}", s.max_occurrences)?;
        }
    }
    Ok(0)
}

fn read_histogram(path: &Path) -> Result<ContextHistogram, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(ContextHistogram::read_from(std::io::BufReader::new(file))?)
}

fn cmd_train(
    g: &GlobalOpts,
    histogram: &Path,
    val: Option<&Path>,
    output: &Path,
    cfg: &TrainConfig,
    out: &mut (dyn Write + Send),
) -> Result<i32, CliError> {
    let hist = read_histogram(histogram)?;
    let val = match val {
        Some(p) => read_histogram(p)?,
        None => ContextHistogram::new(hist.template()),
    };
    let variant = g
        .variant
        .unwrap_or_else(|| Variant::from_id(hist.template().id()).expect("template ids are variant ids"));
    let outcome = model::train(&hist, &val, variant, cfg)?;
    fs::write(output, outcome.model.to_bytes())?;
    // The log is tab separated in both report modes.
    writeln!(out, "epoch\ttrain_bits\tval_bits\tbest_val_bits")?;
    for e in &outcome.log {
        writeln!(out, "{}\t{:.6}\t{:.6}\t{:.6}", e.epoch, e.train_bits, e.val_bits, e.best_val_bits)?;
    }
    if g.report == ReportFormat::Text {
        writeln!(
            out,
            "# best epoch {} model {:016x} params {}",
            outcome.best_epoch,
            outcome.model.content_hash(),
            outcome.model.param_count()
        )?;
    }
    Ok(0)
}

/// `name bpov` pairs, whitespace or tab separated; `#` starts a comment.
fn read_baseline(path: &Path) -> Result<Vec<(String, f64)>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(name), Some(value), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(CliError::Input(format!("baseline line {line:?}: expected `name bpov`")));
        };
        let value: f64 = value
            .parse()
            .map_err(|_| CliError::Input(format!("baseline line {line:?}: bad number")))?;
        rows.push((name.to_string(), value));
    }
    Ok(rows)
}

/// Percent reduction of `ours` against `baseline`.
pub fn gain_percent(ours: f64, baseline: f64) -> f64 {
    100.0 * (1.0 - ours / baseline)
}

fn cmd_bench(
    g: &GlobalOpts,
    dir: &Path,
    baseline: Option<&Path>,
    depth: Option<u8>,
    out: &mut (dyn Write + Send),
) -> Result<i32, CliError> {
    let model = load_model(g, Variant::Nnoc)?;
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ply")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Input(format!("no .ply files in {}", dir.display())));
    }
    let baseline = baseline.map(read_baseline).transpose()?;
    let mut rows = Vec::new();
    for path in &files {
        let name = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let cloud = load_cloud(path, depth)?;
        let start = Instant::now();
        let bs = codec::encode(&cloud, &model, model.variant())?;
        let elapsed = start.elapsed();
        let b = codec::bpov(&bs, &cloud)?;
        let base = baseline
            .as_ref()
            .and_then(|rows| rows.iter().find(|(n, _)| *n == name).map(|&(_, v)| v));
        rows.push((name, b, base, elapsed));
    }
    let n = rows.len() as f64;
    let mean = rows.iter().map(|r| r.1.total).sum::<f64>() / n;
    let mean_content = rows.iter().map(|r| r.1.content).sum::<f64>() / n;
    let with_base: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.2.map(|b| (r.1.total, b))).collect();
    let show_base = baseline.is_some();
    let sep = if g.report == ReportFormat::Tsv { "\t" } else { "  " };
    let mut header = vec!["cloud", "voxels", "bpov", "bpov_content", "seconds"];
    if show_base {
        header.extend(["baseline", "gain_pct"]);
    }
    writeln!(out, "{}", header.join(sep))?;
    for (name, b, base, t) in &rows {
        let mut cols = vec![
            name.clone(),
            b.voxels.to_string(),
            format!("{:.4}", b.total),
            format!("{:.4}", b.content),
            format!("{:.3}", secs(*t)),
        ];
        if show_base {
            match base {
                Some(v) => cols.extend([format!("{v:.4}"), format!("{:.2}", gain_percent(b.total, *v))]),
                None => cols.extend(["-".to_string(), "-".to_string()]),
            }
        }
        writeln!(out, "{}", cols.join(sep))?;
    }
    let mut avg = vec![
        "average".to_string(),
        "-".to_string(),
        format!("{mean:.4}"),
        format!("{mean_content:.4}"),
        "-".to_string(),
    ];
    if show_base {
        if with_base.is_empty() {
            avg.extend(["-".to_string(), "-".to_string()]);
        } else {
            let k = with_base.len() as f64;
            let ours = with_base.iter().map(|p| p.0).sum::<f64>() / k;
            let theirs = with_base.iter().map(|p| p.1).sum::<f64>() / k;
            avg.extend([format!("{theirs:.4}"), format!("{:.2}", gain_percent(ours, theirs))]);
        }
    }
    writeln!(out, "{}", avg.join(sep))?;
    Ok(0)
}
