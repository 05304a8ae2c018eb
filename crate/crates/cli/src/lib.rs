//! `rsfactor` command implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use rayon::prelude::*;
use serde::Deserialize;

use rsfactor_core::factorize::{ExportOptions, DEFAULT_K, DEFAULT_T};
use rsfactor_core::io::is_supported;
use rsfactor_core::metrics::format_db;
use rsfactor_core::synth::{generate, pair_stem, SynthConfig};
use rsfactor_core::train::write_history_csv;
use rsfactor_core::{
    enhance, export_factors, factorize, read_image, write_image, BilateralParams, BitDepth,
    Checkpoint, FusionConfig, FusionMode, Image64, LumaConvention, MetricReport, ParamVector,
    TrainConfig,
};

use rsfactor_core::train::train_from;

/// Checkpoint used by `enhance` when none is given.
pub const DEMO_CHECKPOINT: &str = include_str!("../assets/demo_checkpoint.json");

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl From<rsfactor_core::Error> for CliError {
    fn from(e: rsfactor_core::Error) -> Self {
        use rsfactor_core::Error as E;
        if e.is_numerical() {
            return CliError::Numerical(e.to_string());
        }
        match e {
            E::InvalidParameter(_)
            | E::NegativeThreshold(_)
            | E::FactorIndex { .. }
            | E::VersionMismatch { .. }
            | E::Json(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn with_path(path: &Path) -> impl FnOnce(rsfactor_core::Error) -> CliError + '_ {
    move |e| match CliError::from(e) {
        CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        CliError::Numerical(m) => CliError::Numerical(format!("{}: {m}", path.display())),
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "rsfactor",
    version,
    about = "Recursive specularity factorization and low-light enhancement"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split images into K additive factors (PNG layers plus a JSON sidecar)
    Factorize(FactorizeArgs),
    /// Enhance low-light images with a checkpoint
    Enhance(EnhanceArgs),
    /// Train a checkpoint on a directory of low-light images
    Train(TrainArgs),
    /// Compare predictions against references (CSV on stdout)
    Eval(EvalArgs),
    /// Write a seeded synthetic low/high paired dataset
    Synth(SynthArgs),
}

#[derive(Debug, Args, Default)]
pub struct CommonArgs {
    /// JSON run configuration; flags override its values [default: none]
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory [default: .]
    #[arg(long, value_name = "DIR")]
    pub outdir: Option<PathBuf>,
    /// Worker threads; 0 uses every core [default: 0]
    #[arg(long, value_name = "N")]
    pub jobs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FactorizeArgs {
    /// Image file, or a directory whose images are all processed
    pub input: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of factors K [default: 5, or the checkpoint's]
    #[arg(long)]
    pub k: Option<usize>,
    /// Unrolled iterations per factor T [default: 3, or the checkpoint's]
    #[arg(long)]
    pub t: Option<usize>,
    /// Checkpoint with trained parameters [default: none, untrained initialization]
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Also write the differences F1..FK [default: false]
    #[arg(long)]
    pub differences: bool,
    /// Also write the residual folded into the last factor [default: false]
    #[arg(long)]
    pub residual: bool,
    /// Write 16-bit PNG layers [default: false, 8-bit]
    #[arg(long)]
    pub sixteen_bit: bool,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    /// Image file, or a directory whose images are all processed
    pub input: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint to enhance with [default: built-in demo checkpoint]
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Fusion mode: running_average|curve [default: the checkpoint's]
    #[arg(long, value_name = "MODE")]
    pub mode: Option<FusionMode>,
    /// Factor weights a,b,.. (K values, or K+1 with the input's weight first) [default: the checkpoint's]
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training images; a `low/` subdirectory is used when present
    pub data: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of factors K [default: 5]
    #[arg(long)]
    pub k: Option<usize>,
    /// Unrolled iterations per factor T [default: 3]
    #[arg(long)]
    pub t: Option<usize>,
    /// Shuffling seed [default: 2]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epochs [default: 50]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// First epoch of the fusion phase [default: 25]
    #[arg(long, value_name = "EPOCH")]
    pub freeze_epoch: Option<usize>,
    /// Learning rate of the factorization parameters [default: 0.01]
    #[arg(long, value_name = "LR")]
    pub lr: Option<f64>,
    /// Images per step [default: 10]
    #[arg(long, value_name = "N")]
    pub batch_size: Option<usize>,
    /// Initial factor weights a,b,.. [default: 1,4,4,..]
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    /// Checkpoint path [default: <outdir>/checkpoint.json]
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predictions
    pub pred: PathBuf,
    /// Directory of references with the same file stems
    pub gt: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Luma weights: analog|digital [default: analog]
    #[arg(long, value_name = "CONVENTION")]
    pub luma: Option<LumaConvention>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Number of pairs [default: 20]
    #[arg(long)]
    pub count: Option<usize>,
    /// Seed [default: 2]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Image side in pixels [default: 128]
    #[arg(long)]
    pub size: Option<usize>,
}

/// Contents of a `--config` file. Unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub k: Option<usize>,
    pub t: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub mode: Option<FusionMode>,
    pub weights: Option<Vec<f64>>,
    pub jobs: Option<usize>,
    pub seed: Option<u64>,
    pub outdir: Option<PathBuf>,
    pub luma: Option<LumaConvention>,
    pub train: Option<TrainConfig>,
    pub bilateral: Option<BilateralParams>,
    pub gammas: Option<Vec<f64>>,
    pub differences: Option<bool>,
    pub residual: Option<bool>,
    pub sixteen_bit: Option<bool>,
    pub count: Option<usize>,
    pub size: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    fn from_common(common: &CommonArgs) -> CliResult<Self> {
        match &common.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

fn outdir(common: &CommonArgs, cfg: &RunConfig) -> PathBuf {
    common
        .outdir
        .clone()
        .or_else(|| cfg.outdir.clone())
        .unwrap_or_else(|| PathBuf::from("."))
}

fn pool(common: &CommonArgs, cfg: &RunConfig) -> CliResult<rayon::ThreadPool> {
    let jobs = common.jobs.or(cfg.jobs).unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries =
        fs::read_dir(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::Data(e.to_string()))?.path();
        if path.is_file() && is_supported(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn inputs(path: &Path) -> CliResult<Vec<PathBuf>> {
    if path.is_dir() {
        let files = list_images(path)?;
        if files.is_empty() {
            return Err(CliError::Data(format!(
                "{}: no images found",
                path.display()
            )));
        }
        Ok(files)
    } else if path.is_file() {
        Ok(vec![path.to_path_buf()])
    } else {
        Err(CliError::Data(format!(
            "{}: no such file or directory",
            path.display()
        )))
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn read_all(paths: &[PathBuf]) -> CliResult<Vec<Image64>> {
    paths
        .par_iter()
        .map(|p| read_image::<f64>(p).map_err(with_path(p)))
        .collect()
}

fn check_unique_stems(paths: &[PathBuf]) -> CliResult<()> {
    let mut seen = BTreeMap::new();
    for p in paths {
        if let Some(prev) = seen.insert(stem(p), p) {
            return Err(CliError::Data(format!(
                "{} and {} would write the same outputs",
                prev.display(),
                p.display()
            )));
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

pub fn load_checkpoint(path: Option<&Path>) -> CliResult<Checkpoint> {
    match path {
        Some(p) => Checkpoint::load(p).map_err(with_path(p)),
        None => Ok(Checkpoint::from_json(DEMO_CHECKPOINT)?),
    }
}

pub fn cmd_factorize(args: &FactorizeArgs) -> CliResult<()> {
    let cfg = RunConfig::from_common(&args.common)?;
    let ck_path = args.checkpoint.clone().or(cfg.checkpoint.clone());
    let k = args.k.or(cfg.k);
    let t = args.t.or(cfg.t);
    let params = match &ck_path {
        Some(p) => {
            let ck = load_checkpoint(Some(p))?;
            if k.is_some_and(|k| k != ck.k_factors) || t.is_some_and(|t| t != ck.t_iters) {
                return Err(CliError::Usage(format!(
                    "--k/--t disagree with the checkpoint (K={}, T={})",
                    ck.k_factors, ck.t_iters
                )));
            }
            ck.params
        }
        None => ParamVector::new(k.unwrap_or(DEFAULT_K), t.unwrap_or(DEFAULT_T)),
    };
    params.validate()?;
    let opts = ExportOptions {
        differences: args.differences || cfg.differences.unwrap_or(false),
        residual: args.residual || cfg.residual.unwrap_or(false),
        depth: if args.sixteen_bit || cfg.sixteen_bit.unwrap_or(false) {
            BitDepth::Sixteen
        } else {
            BitDepth::Eight
        },
    };
    let out = outdir(&args.common, &cfg);
    let paths = inputs(&args.input)?;
    check_unique_stems(&paths)?;
    pool(&args.common, &cfg)?.install(|| {
        let images = read_all(&paths)?;
        let stacks = paths
            .par_iter()
            .zip(&images)
            .map(|(p, img)| factorize(img, &params).map_err(with_path(p)))
            .collect::<CliResult<Vec<_>>>()?;
        create_dir(&out)?;
        paths.par_iter().zip(&stacks).try_for_each(|(p, stack)| {
            let (meta_path, _) =
                export_factors(stack, &out, &stem(p), opts).map_err(with_path(p))?;
            info!("{} -> {}", p.display(), meta_path.display());
            Ok(())
        })
    })
}

pub fn cmd_enhance(args: &EnhanceArgs) -> CliResult<()> {
    let cfg = RunConfig::from_common(&args.common)?;
    let ck_path = args.checkpoint.clone().or(cfg.checkpoint.clone());
    let ck = load_checkpoint(ck_path.as_deref())?;
    let mut fusion: FusionConfig = ck.fusion.clone();
    if let Some(m) = args.mode.or(cfg.mode) {
        fusion.mode = m;
    }
    if let Some(w) = args.weights.clone().or(cfg.weights.clone()) {
        fusion.factor_weights = w;
    }
    if let Some(g) = cfg.gammas.clone() {
        fusion.gammas = g;
    }
    if let Some(b) = cfg.bilateral {
        fusion.bilateral = b;
    }
    fusion.validate()?;
    let out = outdir(&args.common, &cfg);
    let paths = inputs(&args.input)?;
    check_unique_stems(&paths)?;
    pool(&args.common, &cfg)?.install(|| {
        let images = read_all(&paths)?;
        let results = paths
            .par_iter()
            .zip(&images)
            .map(|(p, img)| enhance(img, &ck.params, &fusion).map_err(with_path(p)))
            .collect::<CliResult<Vec<_>>>()?;
        create_dir(&out)?;
        paths.par_iter().zip(&results).try_for_each(|(p, img)| {
            let target = out.join(format!("{}.png", stem(p)));
            write_image(&target, img, BitDepth::Eight).map_err(with_path(&target))?;
            info!("{} -> {}", p.display(), target.display());
            Ok(())
        })
    })
}

/// Training configuration after applying the config file and flags.
pub fn resolve_train_config(args: &TrainArgs, cfg: &RunConfig) -> TrainConfig {
    let mut tc = cfg.train.clone().unwrap_or_default();
    if let Some(k) = args.k.or(cfg.k) {
        tc.k_factors = k;
    }
    if let Some(t) = args.t.or(cfg.t) {
        tc.t_iters = t;
    }
    if let Some(s) = args.seed.or(cfg.seed) {
        tc.seed = s;
    }
    if let Some(e) = args.epochs {
        tc.epochs = e;
    }
    if let Some(f) = args.freeze_epoch {
        tc.freeze_epoch = f;
    }
    if let Some(lr) = args.lr {
        tc.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        tc.batch_size = b;
    }
    tc
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let cfg = RunConfig::from_common(&args.common)?;
    let tc = resolve_train_config(args, &cfg);
    tc.validate()?;
    let mut fusion = FusionConfig::new(tc.k_factors);
    fusion.mode = FusionMode::Curve;
    if let Some(w) = args.weights.clone().or(cfg.weights.clone()) {
        fusion.factor_weights = w;
    }
    if let Some(g) = cfg.gammas.clone() {
        fusion.gammas = g;
    }
    if let Some(b) = cfg.bilateral {
        fusion.bilateral = b;
    }
    fusion.validate()?;
    let data = if args.data.join("low").is_dir() {
        args.data.join("low")
    } else {
        args.data.clone()
    };
    if !data.is_dir() {
        return Err(CliError::Data(format!(
            "{}: not a directory",
            data.display()
        )));
    }
    let paths = list_images(&data)?;
    if paths.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no training images",
            data.display()
        )));
    }
    let out = outdir(&args.common, &cfg);
    let ck_path = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| out.join("checkpoint.json"));
    let history_path = ck_path.with_file_name("history.csv");
    let outcome = pool(&args.common, &cfg)?.install(|| -> CliResult<_> {
        let images = read_all(&paths)?;
        info!(
            "training on {} images from {}",
            images.len(),
            data.display()
        );
        Ok(train_from(
            &images,
            &tc,
            ParamVector::new(tc.k_factors, tc.t_iters),
            fusion,
        )?)
    })?;
    if let Some(parent) = ck_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let ck = Checkpoint::new(outcome.params, outcome.fusion, Some(tc));
    ck.save(&ck_path).map_err(with_path(&ck_path))?;
    write_history_csv(&history_path, &outcome.history).map_err(with_path(&history_path))?;
    info!("wrote {} and {}", ck_path.display(), history_path.display());
    Ok(())
}

/// One row of the evaluation table.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub report: MetricReport,
}

/// Pairs predictions with references by file stem and scores them. The
/// returned rows are sorted by name; the mean row is not included.
pub fn evaluate_dirs(pred: &Path, gt: &Path, luma: LumaConvention) -> CliResult<Vec<EvalRow>> {
    let index = |dir: &Path| -> CliResult<BTreeMap<String, PathBuf>> {
        if !dir.is_dir() {
            return Err(CliError::Data(format!(
                "{}: not a directory",
                dir.display()
            )));
        }
        Ok(list_images(dir)?
            .into_iter()
            .map(|p| (stem(&p), p))
            .collect())
    };
    let (preds, gts) = (index(pred)?, index(gt)?);
    let mut missing: Vec<String> = preds
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .map(|k| format!("{k} (no reference)"))
        .collect();
    missing.extend(
        gts.keys()
            .filter(|k| !preds.contains_key(*k))
            .map(|k| format!("{k} (no prediction)")),
    );
    if !missing.is_empty() {
        return Err(CliError::Data(format!(
            "missing counterparts: {}",
            missing.join(", ")
        )));
    }
    if preds.is_empty() {
        return Err(CliError::Data(format!("{}: no images", pred.display())));
    }
    let names: Vec<&String> = preds.keys().collect();
    names
        .par_iter()
        .map(|name| {
            let p = read_image::<f64>(&preds[*name]).map_err(with_path(&preds[*name]))?;
            let g = read_image::<f64>(&gts[*name]).map_err(with_path(&gts[*name]))?;
            let report = MetricReport::compute(&p, &g, luma).map_err(with_path(&preds[*name]))?;
            Ok(EvalRow {
                name: (*name).clone(),
                report,
            })
        })
        .collect()
}

/// CSV with a header, one row per image and a final `mean` row.
pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("name,psnr_y,psnr_c,ssim_y,mse\n");
    let line = |name: &str, py: f64, pc: f64, ss: f64, m: f64| {
        format!(
            "{name},{},{},{ss:.6},{m:.8}\n",
            format_db(py),
            format_db(pc)
        )
    };
    for r in rows {
        let m = &r.report;
        s.push_str(&line(&r.name, m.psnr_y, m.psnr_c, m.ssim_y, m.mse));
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&MetricReport) -> f64| rows.iter().map(|r| f(&r.report)).sum::<f64>() / n;
    s.push_str(&line(
        "mean",
        mean(|m| m.psnr_y),
        mean(|m| m.psnr_c),
        mean(|m| m.ssim_y),
        mean(|m| m.mse),
    ));
    s
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<String> {
    let cfg = RunConfig::from_common(&args.common)?;
    let luma = args.luma.or(cfg.luma).unwrap_or_default();
    let rows = pool(&args.common, &cfg)?.install(|| evaluate_dirs(&args.pred, &args.gt, luma))?;
    let csv = eval_csv(&rows);
    if let Some(dir) = args.common.outdir.clone().or(cfg.outdir.clone()) {
        create_dir(&dir)?;
        let path = dir.join("metrics.csv");
        fs::write(&path, &csv).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    }
    Ok(csv)
}

pub fn cmd_synth(args: &SynthArgs) -> CliResult<()> {
    let cfg = RunConfig::from_common(&args.common)?;
    let size = args
        .size
        .or(cfg.size)
        .unwrap_or(rsfactor_core::synth::DEFAULT_SYNTH_SIZE);
    let sc = SynthConfig {
        count: args.count.or(cfg.count).unwrap_or(20),
        height: size,
        width: size,
        seed: args.seed.or(cfg.seed).unwrap_or(2),
    };
    let out = outdir(&args.common, &cfg);
    let pairs = generate(&sc)?;
    let (low, high) = (out.join("low"), out.join("high"));
    create_dir(&low)?;
    create_dir(&high)?;
    for (i, p) in pairs.iter().enumerate() {
        let name = format!("{}.png", pair_stem(i));
        write_image(&low.join(&name), &p.low, BitDepth::Eight)?;
        write_image(&high.join(&name), &p.high, BitDepth::Eight)?;
    }
    info!("wrote {} pairs to {}", pairs.len(), out.display());
    Ok(())
}

/// Runs a parsed command; `eval` prints its table to stdout.
pub fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Factorize(a) => cmd_factorize(a),
        Command::Enhance(a) => cmd_enhance(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => {
            print!("{}", cmd_eval(a)?);
            Ok(())
        }
        Command::Synth(a) => cmd_synth(a),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
