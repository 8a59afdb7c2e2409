//! The `stimpute` command line: one run directory per invocation holding the
//! effective configuration, a log and the command's outputs.

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    augment_missing_indicators, load_dataset, normalize, save_dataset, write_f32, GridDataset, NormalizationStats,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    baseline_estimate, evaluate_model, impute, landcover_csv, score, spatial_error_csv, Baseline, MetricReport,
    MfConfig,
};
use crate::masking::{apply_split, split, MaskSplit, Scenario, SplitFile, DEFAULT_VALIDATION_P};
use crate::model::{CovariateMode, Model, ModelConfig, SpatialVariant};
use crate::rng::Rng;
use crate::synthgen::{synth_field, FieldSpec};
use crate::tensor::load_checkpoint;
use crate::training::{config_for_dataset, final_checkpoint, prepare_training_data, train, TrainConfig, TrainOutputs};
use crate::variogram::{
    detect_range, empirical_semivariogram, grid_coords, location_residuals, recommend_tile, DEFAULT_REL_TOL,
};

pub const CONFIG_ECHO: &str = "config.json";
pub const LOG_FILE: &str = "run.log";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariogramConfig {
    pub bin_width_km: f64,
    pub max_lag_km: Option<f64>,
    pub rel_tol: f64,
}

impl Default for VariogramConfig {
    fn default() -> Self {
        Self {
            bin_width_km: 1.0,
            max_lag_km: None,
            rel_tol: DEFAULT_REL_TOL,
        }
    }
}

/// Everything a command may read, from one JSON file plus flag overrides.
/// The top-level `seed` is copied into every seeded section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub scenario: Scenario,
    pub p: f64,
    pub field: FieldSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mf: MfConfig,
    pub variogram: VariogramConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            seed: 0,
            data: None,
            split: None,
            checkpoint: None,
            scenario: Scenario::Mnar,
            p: DEFAULT_VALIDATION_P,
            field: FieldSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            mf: MfConfig::default(),
            variogram: VariogramConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    fn sync_seeds(&mut self) {
        self.field.seed = self.seed;
        self.train.seed = self.seed;
        self.mf.seed = self.seed;
        self.train.scenario = self.scenario;
    }
}

#[derive(Debug, Parser)]
#[command(name = "stimpute", version, about = "Spatiotemporal imputation with windowed transformers")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory for this invocation.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Draw a validation split.
    Split(SplitArgs),
    /// Train a model on the visible part of a split.
    Train(TrainArgs),
    /// Fill every cell of a dataset with a trained model.
    Impute(ImputeArgs),
    /// Score a trained model on the held-out points of a split.
    Evaluate(EvaluateArgs),
    /// Residual semivariogram and recommended tile size.
    Variogram(VariogramArgs),
    /// Score a classical baseline on a split.
    Baseline(BaselineArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Field spec JSON; replaces the config's `field` section.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub times: Option<usize>,
    #[arg(long)]
    pub length_scale: Option<f64>,
    #[arg(long)]
    pub phi: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Dataset manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long, value_enum)]
    pub scenario: Option<Scenario>,
    /// Held-out proportion.
    #[arg(long)]
    pub p: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
    #[arg(long, value_enum)]
    pub spatial: Option<SpatialVariant>,
    #[arg(long, value_enum)]
    pub covariates: Option<CovariateMode>,
    #[arg(long)]
    pub no_space: bool,
    #[arg(long)]
    pub no_time: bool,
    #[arg(long)]
    pub tile: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub scenario: Option<Scenario>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ImputeArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Optional split whose held-out points are erased first.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct VariogramArgs {
    #[command(flatten)]
    pub data: DataArg,
    /// Optional split; residuals then use the visible cells only.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub bin_width: Option<f64>,
    #[arg(long)]
    pub max_lag: Option<f64>,
    #[arg(long)]
    pub rel_tol: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub data: DataArg,
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Baselines to run (default: all).
    #[arg(long, value_enum, value_delimiter = ',')]
    pub method: Vec<Baseline>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
}

impl ModelArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        let m = &mut cfg.model;
        if let Some(v) = self.dim {
            m.dim = v;
        }
        if let Some(v) = self.layers {
            m.layers = v;
        }
        if let Some(v) = self.mlp_hidden {
            m.mlp_hidden = v;
        }
        if let Some(v) = self.spatial {
            m.spatial_variant = v;
        }
        if let Some(v) = self.covariates {
            m.covariate_mode = v;
        }
        if self.no_space {
            m.use_space = false;
        }
        if self.no_time {
            m.use_time = false;
        }
        let seg = &mut cfg.train.segment;
        if let Some(v) = self.tile {
            seg.tile = v;
        }
        if let Some(v) = self.window {
            seg.window_len = v;
        }
        if let Some(v) = self.stride {
            seg.stride = v;
        }
    }
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Split(_) => "split",
            Command::Train(_) => "train",
            Command::Impute(_) => "impute",
            Command::Evaluate(_) => "evaluate",
            Command::Variogram(_) => "variogram",
            Command::Baseline(_) => "baseline",
        }
    }

    fn data(&self) -> Option<&Path> {
        match self {
            Command::Synth(_) => None,
            Command::Split(a) => a.data.data.as_deref(),
            Command::Train(a) => a.data.data.as_deref(),
            Command::Impute(a) => a.data.data.as_deref(),
            Command::Evaluate(a) => a.data.data.as_deref(),
            Command::Variogram(a) => a.data.data.as_deref(),
            Command::Baseline(a) => a.data.data.as_deref(),
        }
    }

    fn checkpoint(&self) -> Option<&Path> {
        match self {
            Command::Impute(a) => a.checkpoint.as_deref(),
            Command::Evaluate(a) => a.checkpoint.as_deref(),
            _ => None,
        }
    }
}

/// Base configuration: `--config` when given, otherwise the echo next to the
/// checkpoint for commands that load one, otherwise defaults.
fn base_config(cli: &Cli) -> Result<RunConfig> {
    if let Some(p) = &cli.config {
        return RunConfig::load(p);
    }
    let ckpt = cli.command.checkpoint();
    if let Some(echo) = ckpt.and_then(|c| c.parent()).map(|d| d.join(CONFIG_ECHO)) {
        if echo.is_file() {
            let mut cfg = RunConfig::load(&echo)?;
            // paths in the echo belong to the training run
            cfg.checkpoint = None;
            return Ok(cfg);
        }
    }
    Ok(RunConfig::default())
}

/// Merges the base configuration with command-line flags.
pub fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = base_config(cli)?;
    cfg.command = cli.command.name().to_string();
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = cli.command.data() {
        cfg.data = Some(d.to_path_buf());
    }
    match &cli.command {
        Command::Synth(a) => {
            if let Some(p) = &a.spec {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                cfg.field = serde_json::from_str(&text).map_err(|e| Error::json(p, e))?;
            }
            let f = &mut cfg.field;
            f.height = a.height.unwrap_or(f.height);
            f.width = a.width.unwrap_or(f.width);
            f.num_times = a.times.unwrap_or(f.num_times);
            f.length_scale = a.length_scale.unwrap_or(f.length_scale);
            f.phi = a.phi.unwrap_or(f.phi);
            f.beta = a.beta.unwrap_or(f.beta);
        }
        Command::Split(a) => {
            cfg.scenario = a.scenario.unwrap_or(cfg.scenario);
            cfg.p = a.p.unwrap_or(cfg.p);
        }
        Command::Train(a) => {
            cfg.split = a.split.clone().or(cfg.split);
            a.model.apply(&mut cfg);
            cfg.train.epochs = a.epochs.unwrap_or(cfg.train.epochs);
            cfg.train.batch_size = a.batch_size.unwrap_or(cfg.train.batch_size);
            cfg.scenario = a.scenario.unwrap_or(cfg.scenario);
            cfg.train.checkpoint_every = a.checkpoint_every.unwrap_or(cfg.train.checkpoint_every);
        }
        Command::Impute(a) => {
            cfg.split = a.split.clone().or(cfg.split);
            cfg.checkpoint = a.checkpoint.clone().or(cfg.checkpoint);
            a.model.apply(&mut cfg);
        }
        Command::Evaluate(a) => {
            cfg.split = a.split.clone().or(cfg.split);
            cfg.checkpoint = a.checkpoint.clone().or(cfg.checkpoint);
            a.model.apply(&mut cfg);
        }
        Command::Variogram(a) => {
            cfg.split = a.split.clone().or(cfg.split);
            let v = &mut cfg.variogram;
            v.bin_width_km = a.bin_width.unwrap_or(v.bin_width_km);
            v.max_lag_km = a.max_lag.or(v.max_lag_km);
            v.rel_tol = a.rel_tol.unwrap_or(v.rel_tol);
        }
        Command::Baseline(a) => {
            cfg.split = a.split.clone().or(cfg.split);
            cfg.mf.rank = a.rank.unwrap_or(cfg.mf.rank);
            cfg.mf.lambda = a.lambda.unwrap_or(cfg.mf.lambda);
            cfg.mf.iters = a.iters.unwrap_or(cfg.mf.iters);
        }
    }
    cfg.sync_seeds();
    Ok(cfg)
}

fn required<'a>(v: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| Error::Config(format!("missing input: {what} (pass --{what})")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Appends missing-value indicators when any covariate is missing, so train
/// and evaluation see the same feature layout.
pub fn model_features(ds: GridDataset) -> GridDataset {
    if ds.z.iter().any(|&z| z) {
        augment_missing_indicators(&ds)
    } else {
        ds
    }
}

fn load_data(cfg: &RunConfig) -> Result<GridDataset> {
    load_dataset(required(&cfg.data, "data")?)
}

fn load_split(cfg: &RunConfig, ds: &GridDataset) -> Result<MaskSplit> {
    SplitFile::load(required(&cfg.split, "split")?)?.to_split(ds)
}

/// Builds the model described by `cfg` for `ds` and loads the checkpoint.
fn load_model(cfg: &RunConfig, ds: &GridDataset) -> Result<Model> {
    let model_cfg = config_for_dataset(cfg.model.clone(), ds);
    let mut model = Model::new(model_cfg, &mut Rng::new(0))?;
    load_checkpoint(required(&cfg.checkpoint, "checkpoint")?, &mut model.store)?;
    Ok(model)
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = synth_field(&cfg.field)?;
    let manifest = save_dataset(&ds, &out.join("data"))?;
    let (lo, hi) = ds
        .y
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    println!(
        "K={} L={} D={} range=[{lo:.4}, {hi:.4}] manifest={}",
        ds.num_locations(),
        ds.num_times(),
        ds.num_features(),
        manifest.display()
    );
    Ok(())
}

fn cmd_split(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = load_data(cfg)?;
    let mut rng = Rng::new(cfg.seed);
    let s = split(cfg.scenario, &ds.m, ds.num_locations(), ds.num_times(), cfg.p, &mut rng)?;
    let path = out.join("split.json");
    SplitFile::new(cfg.scenario, cfg.p, cfg.seed, &s).save(&path)?;
    println!("{} evaluation points -> {}", s.eval_points.len(), path.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = model_features(load_data(cfg)?);
    let s = load_split(cfg, &ds)?;
    let (norm, stats) = prepare_training_data(&ds, &s)?;
    let model_cfg = config_for_dataset(cfg.model.clone(), &norm);
    let outputs = TrainOutputs {
        log: Some(out.join("history.jsonl")),
        checkpoint_dir: Some(out.to_path_buf()),
    };
    let (_, history) = train(&norm, &model_cfg, &cfg.train, &outputs)?;
    write_json(&out.join("stats.json"), &stats)?;
    let last = history.epochs.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} epochs, final loss {last:.6} -> {}",
        history.epochs.len(),
        final_checkpoint(out).display()
    );
    Ok(())
}

/// Visible dataset for imputation and the statistics training would have used.
fn visible_with_stats(cfg: &RunConfig, ds: &GridDataset) -> Result<(GridDataset, NormalizationStats)> {
    let visible = match &cfg.split {
        Some(_) => apply_split(ds, &load_split(cfg, ds)?)?,
        None => ds.clone(),
    };
    Ok(normalize(&visible, None))
}

fn cmd_impute(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = model_features(load_data(cfg)?);
    let model = load_model(cfg, &ds)?;
    let (norm, stats) = visible_with_stats(cfg, &ds)?;
    let result = impute(&model, &norm, &stats, &cfg.train.segment)?;
    write_f32(&out.join("estimate.f32"), result.estimate.iter().map(|&v| v as f32))?;
    write_f32(&out.join("counts.f32"), result.counts.iter().map(|&c| c as f32))?;
    write_json(
        &out.join("imputation.json"),
        &serde_json::json!({
            "height": result.height,
            "width": result.width,
            "num_times": result.num_times,
            "layout": "location-major, f32 little-endian",
            "estimate": "estimate.f32",
            "counts": "counts.f32",
        }),
    )?;
    println!("imputed {} cells -> {}", result.estimate.len(), out.display());
    Ok(())
}

fn write_report(out: &Path, name: &str, report: &MetricReport, ds: &GridDataset) -> Result<()> {
    write_json(&out.join(format!("{name}.json")), report)?;
    write_text(
        &out.join(format!("{name}_spatial.csv")),
        &spatial_error_csv(report, ds.landcover.as_deref()),
    )?;
    if let Some(csv) = landcover_csv(report) {
        write_text(&out.join(format!("{name}_landcover.csv")), &csv)?;
    }
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = model_features(load_data(cfg)?);
    let s = load_split(cfg, &ds)?;
    let model = load_model(cfg, &ds)?;
    let (_, stats) = prepare_training_data(&ds, &s)?;
    let (report, _) = evaluate_model(&ds, &s, &model, &stats, &cfg.train.segment)?;
    write_report(out, "metrics", &report, &ds)?;
    println!("MAE {:.6} MRE {:.2}% over {} points", report.mae, report.mre_percent, report.n_eval);
    Ok(())
}

#[derive(Serialize)]
struct RangeReport {
    range_km: f64,
    sill: f64,
    plateau: bool,
    recommended_tile: usize,
}

fn cmd_variogram(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = load_data(cfg)?;
    let visible = match &cfg.split {
        Some(_) => Some(load_split(cfg, &ds)?.cond),
        None => None,
    };
    let res = location_residuals(&ds, visible.as_deref())?;
    let v = &cfg.variogram;
    let vg = empirical_semivariogram(
        &res,
        &grid_coords(ds.height, ds.width),
        ds.cell_size_km,
        v.bin_width_km,
        v.max_lag_km,
    )?;
    let range = detect_range(&vg, v.rel_tol)?;
    let tile = recommend_tile(range.range_km, ds.cell_size_km);
    write_text(&out.join("variogram.csv"), &vg.to_csv())?;
    write_json(
        &out.join("range.json"),
        &RangeReport {
            range_km: range.range_km,
            sill: range.sill,
            plateau: range.plateau,
            recommended_tile: tile,
        },
    )?;
    println!("range {} km (plateau: {}), recommended tile {tile}", range.range_km, range.plateau);
    Ok(())
}

fn cmd_baseline(cfg: &RunConfig, methods: &[Baseline], out: &Path) -> Result<()> {
    let ds = load_data(cfg)?;
    let s = load_split(cfg, &ds)?;
    let all = [Baseline::Mean, Baseline::Interp, Baseline::Mf];
    let methods = if methods.is_empty() { &all[..] } else { methods };
    for &b in methods {
        let est = baseline_estimate(&ds, &s, b, &cfg.mf)?;
        let report = score(&est, &ds, &s.eval_points)?;
        let name = serde_json::to_value(b)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default();
        write_report(out, &format!("baseline_{name}"), &report, &ds)?;
        println!("{name}: MAE {:.6} MRE {:.2}%", report.mae, report.mre_percent);
    }
    Ok(())
}

/// Writes every log line to stderr and the run log.
struct Tee(Mutex<File>);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        io::stderr().write_all(buf)?;
        self.0.lock().map_err(|_| io::Error::other("log poisoned"))?.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        io::stderr().flush()?;
        self.0.lock().map_err(|_| io::Error::other("log poisoned"))?.flush()
    }
}

fn init_logging(out: &Path) -> Result<()> {
    let path = out.join(LOG_FILE);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Pipe(Box::new(Tee(Mutex::new(file)))))
        .try_init();
    Ok(())
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let cfg = effective_config(cli)?;
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(cli.command.name()));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    init_logging(&out)?;
    write_json(&out.join(CONFIG_ECHO), &cfg)?;
    info!("{} -> {}", cfg.command, out.display());
    match &cli.command {
        Command::Synth(_) => cmd_synth(&cfg, &out),
        Command::Split(_) => cmd_split(&cfg, &out),
        Command::Train(_) => cmd_train(&cfg, &out),
        Command::Impute(_) => cmd_impute(&cfg, &out),
        Command::Evaluate(_) => cmd_evaluate(&cfg, &out),
        Command::Variogram(_) => cmd_variogram(&cfg, &out),
        Command::Baseline(a) => cmd_baseline(&cfg, &a.method, &out),
    }
}

/// Entry point: 0 on success, 2 on usage errors, 1 on runtime errors.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
