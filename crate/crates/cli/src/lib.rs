//! `scaleformer` command-line driver.
//!
//! [`run_cli`] is the whole program: it parses `argv`, runs one subcommand
//! and returns the process exit code (0 success, 1 usage or config error,
//! 2 runtime error). Output goes to the supplied writers so the CLI can be
//! exercised in-process.

pub mod config;
pub mod report;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use scaleformer::checkpoint;
use scaleformer::data::{build_dataset, load_pair, read_raster, write_raster, Manifest, SamplePair, Split};
use scaleformer::metrics::{evaluate_image, MetricReport};
use scaleformer::model::{ModelConfig, ModelParams};
use scaleformer::profile::{flop_count, memory_estimate};
use scaleformer::tiling::{bicubic_baseline, full_inference, seam_error, tiled_inference, Blend};
use scaleformer::training::{train, TrainConfig, TrainOutcome};
use scaleformer::Tensor;

use crate::config::{load_dataset_spec, load_run_config, RunConfig};
use crate::report::{AblationReport, AblationRow, BenchSummary, ProfileRow, Variant};

/// Pixel values of all rasters lie in `[0, 1]`.
pub const DATA_RANGE: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Core(scaleformer::Error),
    #[error("cannot write output: {0}")]
    Output(#[from] std::io::Error),
}

impl From<scaleformer::Error> for CliError {
    fn from(e: scaleformer::Error) -> Self {
        match e {
            scaleformer::Error::InvalidConfig(m) => CliError::Config(m),
            e => CliError::Core(e),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Core(_) | CliError::Output(_) => 2,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "scaleformer", version, about = "Cross-scale pansharpening: data, training, evaluation and profiling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-scale dataset (rasters + manifest.txt).
    SynthData(SynthArgs),
    /// Train a model on the train split of a manifest.
    Train(TrainArgs),
    /// Fuse one PAN/LRMS pair, optionally with tiled inference.
    Infer(InferArgs),
    /// Evaluate a checkpoint (or the bicubic baseline) on a manifest split.
    Eval(EvalArgs),
    /// Multi-scale benchmark: per-scale metric means for model and bicubic.
    Bench(BenchArgs),
    /// Train and evaluate the four ablation configurations (Table 7 layout).
    Ablate(AblateArgs),
    /// Analytic MAC and memory curves across a scale sweep.
    Profile(ProfileArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long, default_value = "data")]
    out: PathBuf,
    /// JSON dataset spec; the flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated square test scales (PAN extents).
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<usize>>,
    #[arg(long)]
    bands: Option<usize>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    test_per_scale: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, default_value = "data/manifest.txt")]
    manifest: PathBuf,
    /// JSON run config (`{"model": {...}, "train": {...}}`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long, default_value = "model.sfck")]
    out: PathBuf,
    /// Training log (defaults to the checkpoint path with a `.log` extension).
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest to take the pair from (with --id).
    #[arg(long, requires = "id", conflicts_with_all = ["pan", "lrms"])]
    manifest: Option<PathBuf>,
    #[arg(long)]
    id: Option<String>,
    /// PAN raster (with --lrms and --ratio).
    #[arg(long, requires_all = ["lrms", "ratio"])]
    pan: Option<PathBuf>,
    #[arg(long, requires = "pan")]
    lrms: Option<PathBuf>,
    #[arg(long)]
    ratio: Option<f64>,
    /// Fused raster to write (.sfrt, or .ppm for 3-band models).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    window: usize,
    /// Tile size in PAN pixels; enables tiled inference.
    #[arg(long)]
    tile: Option<usize>,
    #[arg(long, default_value_t = 0, requires = "tile")]
    overlap: usize,
    #[arg(long, default_value = "hard", requires = "tile")]
    blend: Blend,
    /// Also run full-image inference and report its seam error for comparison.
    #[arg(long, requires = "tile")]
    compare_full: bool,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("method").required(true).args(["checkpoint", "baseline"])))]
struct EvalArgs {
    #[arg(long, default_value = "data/manifest.txt")]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluate bicubic upsampling instead of a model.
    #[arg(long)]
    baseline: bool,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Restrict to one scale.
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long, default_value_t = 16)]
    window: usize,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, default_value = "data/manifest.txt")]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 16)]
    window: usize,
    /// Write the per-scale summary as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long, default_value = "data/manifest.txt")]
    manifest: PathBuf,
    /// JSON run config for the baseline; variants switch one component off.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProfileArgs {
    #[arg(long, value_delimiter = ',', default_value = "32,64,128,256")]
    scales: Vec<usize>,
    /// JSON run config; only its model section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    window: usize,
    #[arg(long, default_value_t = 2.0)]
    ratio: f64,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
}

/// Runs the CLI; returns the process exit code.
pub fn run_cli<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> CliResult {
    match cmd {
        Command::SynthData(a) => synth_data(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Infer(a) => infer_cmd(a, out),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Bench(a) => bench_cmd(a, out),
        Command::Ablate(a) => ablate_cmd(a, out),
        Command::Profile(a) => profile_cmd(a, out),
    }
}

fn write_file(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| scaleformer::Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| scaleformer::Error::io(path, e))?;
    Ok(())
}

/// Pairs of one split, resolved against the manifest's directory, with their scale.
fn load_split(manifest: &Path, split: Split, scale: Option<usize>) -> CliResult<Vec<(usize, SamplePair)>> {
    let m = Manifest::load(manifest)?;
    let root = manifest.parent().unwrap_or(Path::new(""));
    let pairs = m
        .split(split)
        .filter(|e| scale.is_none_or(|s| e.scale == s))
        .map(|e| Ok((e.scale, load_pair(e, root)?)))
        .collect::<CliResult<Vec<_>>>()?;
    if pairs.is_empty() {
        return Err(CliError::Usage(format!(
            "{} has no {split} entries{}",
            manifest.display(),
            scale.map_or(String::new(), |s| format!(" at scale {s}"))
        )));
    }
    Ok(pairs)
}

// ---- synth-data --------------------------------------------------------------

fn synth_data(a: SynthArgs, out: &mut dyn Write) -> CliResult {
    let mut spec = match &a.config {
        Some(p) => load_dataset_spec(p)?,
        None => Default::default(),
    };
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.scales {
        spec.scales = v;
    }
    if let Some(v) = a.bands {
        spec.bands = v;
    }
    if let Some(v) = a.ratio {
        spec.ratio = v;
    }
    if let Some(v) = a.train_count {
        spec.train_count = v;
    }
    if let Some(v) = a.train_size {
        spec.train_size = v;
    }
    if let Some(v) = a.test_per_scale {
        spec.test_per_scale = v;
    }
    let manifest = build_dataset(&a.out, &spec)?;
    writeln!(
        out,
        "wrote {} train and {} test pairs to {}",
        manifest.split(Split::Train).count(),
        manifest.split(Split::Test).count(),
        a.out.join("manifest.txt").display()
    )?;
    Ok(())
}

// ---- train -------------------------------------------------------------------

fn apply_overrides(cfg: &mut RunConfig, epochs: Option<usize>, steps: Option<usize>, seed: Option<u64>) -> CliResult {
    if let Some(v) = epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = steps {
        cfg.train.steps_per_epoch = Some(v);
    }
    if let Some(v) = seed {
        cfg.train.seed = v;
    }
    cfg.validate()
}

/// Trains from a fresh initialisation seeded by the train seed, writing every
/// log line to `log`.
fn run_training(
    model: &ModelConfig,
    tcfg: &TrainConfig,
    data: &[SamplePair],
    log: &mut dyn FnMut(&str) -> CliResult,
) -> CliResult<TrainOutcome> {
    let params = ModelParams::init(model, tcfg.seed)?;
    let mut sink_err = None;
    let outcome = train(params, data, tcfg, model, |e| {
        if sink_err.is_none() {
            if let Err(err) = log(&e.to_line()) {
                sink_err = Some(err);
            }
        }
    })?;
    match sink_err {
        Some(e) => Err(e),
        None => Ok(outcome),
    }
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> CliResult {
    let mut cfg = load_run_config(a.config.as_deref())?;
    apply_overrides(&mut cfg, a.epochs, a.steps_per_epoch, a.seed)?;
    let data: Vec<SamplePair> = load_split(&a.manifest, Split::Train, None)?.into_iter().map(|(_, p)| p).collect();
    let log_path = a.log.unwrap_or_else(|| a.out.with_extension("log"));
    let mut log_text = format!(
        "config={}\ntrain_pairs={} parameters={}\n",
        serde_json::to_string(&cfg).expect("config serialises"),
        data.len(),
        ModelParams::init(&cfg.model, cfg.train.seed)?.num_parameters()
    );
    write!(out, "{log_text}")?;
    let start = Instant::now();
    let outcome = run_training(&cfg.model, &cfg.train, &data, &mut |line| {
        writeln!(out, "{line}")?;
        log_text.push_str(line);
        log_text.push('\n');
        Ok(())
    })?;
    checkpoint::save(&a.out, &outcome.params, &cfg.model)?;
    let done = format!(
        "done steps={} final_loss={:.8} seconds={:.1} checkpoint={}",
        outcome.step_losses.len(),
        outcome.epochs.last().map_or(f64::NAN, |e| e.mean_loss),
        start.elapsed().as_secs_f64(),
        a.out.display()
    );
    writeln!(out, "{done}")?;
    log_text.push_str(&done);
    log_text.push('\n');
    write_file(&log_path, &log_text)
}

// ---- infer -------------------------------------------------------------------

fn infer_cmd(a: InferArgs, out: &mut dyn Write) -> CliResult {
    let (params, cfg) = checkpoint::load(&a.checkpoint)?;
    let pair = match (&a.manifest, &a.pan) {
        (Some(m), _) => {
            let id = a.id.as_deref().expect("clap enforces --id");
            let manifest = Manifest::load(m)?;
            let entry = manifest
                .entries
                .iter()
                .find(|e| e.id == id)
                .ok_or_else(|| CliError::Usage(format!("no entry `{id}` in {}", m.display())))?;
            load_pair(entry, m.parent().unwrap_or(Path::new("")))?
        }
        (None, Some(pan)) => {
            let pair = SamplePair {
                pan: read_raster(pan)?,
                lrms: read_raster(a.lrms.as_ref().expect("clap enforces --lrms"))?,
                gt: None,
                ratio: a.ratio.expect("clap enforces --ratio"),
                id: pan.file_stem().map_or("input".into(), |s| s.to_string_lossy().into_owned()),
            };
            pair.validate()?;
            pair
        }
        (None, None) => return Err(CliError::Usage("give either --manifest/--id or --pan/--lrms/--ratio".into())),
    };
    let fused = match a.tile {
        Some(tile) => tiled_inference(&params, &cfg, &pair, a.window, tile, a.overlap, a.blend)?,
        None => full_inference(&params, &cfg, &pair, a.window)?,
    };
    write_raster(&a.out, &fused)?;
    let s = fused.shape();
    writeln!(out, "wrote {} ({}x{}x{})", a.out.display(), s[0], s[1], s[2])?;
    if let Some(tile) = a.tile {
        let fmt = |r: scaleformer::Result<f64>| r.map_or_else(|e| format!("n/a ({e})"), |v| format!("{v:.4}"));
        writeln!(out, "tile={tile} overlap={} blend={} seam_error={}", a.overlap, a.blend, fmt(seam_error(&fused, tile, a.overlap)))?;
        if a.compare_full {
            let full = full_inference(&params, &cfg, &pair, a.window)?;
            writeln!(out, "full_image seam_error={}", fmt(seam_error(&full, tile, a.overlap)))?;
        }
    }
    if let Some(gt) = &pair.gt {
        let m = evaluate_image(&pair.id, &fused, &pair.lrms, &pair.pan, Some(gt), pair.ratio, DATA_RANGE)?;
        write!(out, "{}", MetricReport::from_images(vec![m])?.to_table())?;
    }
    Ok(())
}

// ---- eval / bench ------------------------------------------------------------

enum Method {
    Model(Box<(ModelParams, ModelConfig)>, usize),
    Bicubic,
}

impl Method {
    fn fuse(&self, pair: &SamplePair) -> CliResult<Tensor> {
        Ok(match self {
            Method::Model(m, window) => full_inference(&m.0, &m.1, pair, *window)?,
            Method::Bicubic => bicubic_baseline(pair)?,
        })
    }
}

fn evaluate(method: &Method, pairs: &[&SamplePair]) -> CliResult<MetricReport> {
    let images = pairs
        .iter()
        .map(|p| {
            let fused = method.fuse(p)?;
            Ok(evaluate_image(&p.id, &fused, &p.lrms, &p.pan, p.gt.as_ref(), p.ratio, DATA_RANGE)?)
        })
        .collect::<CliResult<Vec<_>>>()?;
    Ok(MetricReport::from_images(images)?)
}

fn eval_cmd(a: EvalArgs, out: &mut dyn Write) -> CliResult {
    let method = match &a.checkpoint {
        Some(p) => Method::Model(Box::new(checkpoint::load(p)?), a.window),
        None => Method::Bicubic,
    };
    let pairs = load_split(&a.manifest, a.split, a.scale)?;
    let report = evaluate(&method, &pairs.iter().map(|(_, p)| p).collect::<Vec<_>>())?;
    write!(out, "{}", report.to_table())?;
    if let Some(csv) = &a.csv {
        write_file(csv, &report.to_csv())?;
    }
    Ok(())
}

fn by_scale(pairs: &[(usize, SamplePair)]) -> BTreeMap<usize, Vec<&SamplePair>> {
    let mut groups: BTreeMap<usize, Vec<&SamplePair>> = BTreeMap::new();
    for (s, p) in pairs {
        groups.entry(*s).or_default().push(p);
    }
    groups
}

fn bench_cmd(a: BenchArgs, out: &mut dyn Write) -> CliResult {
    let model = Method::Model(Box::new(checkpoint::load(&a.checkpoint)?), a.window);
    let pairs = load_split(&a.manifest, Split::Test, None)?;
    let mut summary = BenchSummary::default();
    for (scale, group) in by_scale(&pairs) {
        for (name, method) in [("bicubic", &Method::Bicubic), ("model", &model)] {
            summary.entries.insert((scale, name.to_string()), evaluate(method, &group)?);
        }
    }
    write!(out, "{}", summary.to_table())?;
    if let Some(csv) = &a.csv {
        write_file(csv, &summary.to_csv())?;
    }
    Ok(())
}

// ---- ablate ------------------------------------------------------------------

/// Trains every ablation variant from `base` and scores it per test scale.
pub fn run_ablation(
    base: &RunConfig,
    train_set: &[SamplePair],
    test_set: &[(usize, SamplePair)],
    log: &mut dyn FnMut(&str) -> CliResult,
) -> CliResult<AblationReport> {
    let groups = by_scale(test_set);
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let model = variant.apply(&base.model);
        log(&format!("variant=\"{}\"", variant.label()))?;
        let outcome = run_training(&model, &base.train, train_set, log)?;
        let final_loss = outcome.epochs.last().map_or(f64::NAN, |e| e.mean_loss);
        let method = Method::Model(Box::new((outcome.params, model)), base.train.infer_window);
        let mut scores = Vec::new();
        for (scale, group) in &groups {
            let report = evaluate(&method, group)?;
            let get = |m| {
                report.means.get(&m).copied().ok_or_else(|| {
                    CliError::Usage(format!("test pairs at scale {scale} have no ground truth for ablation"))
                })
            };
            scores.push((get(scaleformer::metrics::Metric::Psnr)?, get(scaleformer::metrics::Metric::Ssim)?));
        }
        rows.push(AblationRow { label: variant.label().to_string(), final_loss, scores });
    }
    Ok(AblationReport { scales: groups.keys().copied().collect(), rows })
}

fn ablate_cmd(a: AblateArgs, out: &mut dyn Write) -> CliResult {
    let mut cfg = load_run_config(a.config.as_deref())?;
    apply_overrides(&mut cfg, a.epochs, a.steps_per_epoch, None)?;
    let train_set: Vec<SamplePair> =
        load_split(&a.manifest, Split::Train, None)?.into_iter().map(|(_, p)| p).collect();
    let test_set = load_split(&a.manifest, Split::Test, None)?;
    let report = run_ablation(&cfg, &train_set, &test_set, &mut |line| Ok(writeln!(out, "{line}")?))?;
    write!(out, "{}", report.to_table())?;
    if let Some(csv) = &a.csv {
        write_file(csv, &report.to_csv())?;
    }
    if let Some(json) = &a.json {
        write_file(json, &serde_json::to_string_pretty(&report).expect("report serialises"))?;
    }
    Ok(())
}

// ---- profile -----------------------------------------------------------------

fn profile_cmd(a: ProfileArgs, out: &mut dyn Write) -> CliResult {
    let cfg = load_run_config(a.config.as_deref())?;
    if a.scales.is_empty() {
        return Err(CliError::Usage("--scales must list at least one scale".into()));
    }
    let rows = a
        .scales
        .iter()
        .map(|&s| {
            let flops = flop_count(&cfg.model, s, s, a.ratio, a.window)?;
            let mem = memory_estimate(&cfg.model, s, s, a.ratio, a.window, a.batch)?;
            Ok(ProfileRow { flops, peak_elements: mem.elements, peak_bytes: mem.bytes, batch: a.batch })
        })
        .collect::<CliResult<Vec<_>>>()?;
    write!(out, "{}", report::profile_table(&rows))?;
    if let Some(csv) = &a.csv {
        write_file(csv, &report::profile_csv(&rows))?;
    }
    Ok(())
}
