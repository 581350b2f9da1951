//! `cmtc` subcommands. Every command resolves and validates its full
//! configuration before touching the filesystem.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use cmtc::dataset::{load_dataset, write_synth_dataset, Dataset};
use cmtc::reid::AblationConfig;
use cmtc::synth::synth_dataset;
use cmtc::train::{
    evaluate_to_dir, load_trained, prepare_clips, train, EventNetMode, ExperimentConfig, Preset, TrainOptions,
};
use cmtc::CmtcError;
use serde_json::Value;

pub const CONFIG_SNAPSHOT: &str = "config.json";
pub const ABLATION_CSV: &str = "ablation.csv";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config, or missing inputs; nothing was written.
    Validation(String),
    /// Failure while doing the work.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Validation(_) => 1,
            Self::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Validation(m) | Self::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

fn invalid(e: impl fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

/// Config errors stay validation errors even when raised mid-run.
fn runtime(e: CmtcError) -> CliError {
    match e {
        CmtcError::Config(_) => CliError::Validation(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

#[derive(Debug, Parser)]
#[command(name = "cmtc", version, about = "Event-based video person re-identification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic event dataset with silhouettes.
    Synth(SynthArgs),
    /// Pretrain EventNet and train the re-identification model.
    Train(TrainArgs),
    /// Score a trained model on the test split.
    Eval(EvalArgs),
    /// Train every ablation row over several seeds and tabulate Rank-1/mAP.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetArg {
    Smoke,
    Desk,
    Paper,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Smoke => Preset::Smoke,
            PresetArg::Desk => Preset::Desk,
            PresetArg::Paper => Preset::Paper,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config merged over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: PresetArg,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
pub struct TrainSchedule {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Keep EventNet fixed after pretraining.
    #[arg(long)]
    pub freeze_eventnet: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory written by `cmtc synth` (or any manifest dataset).
    #[arg(long)]
    pub data: PathBuf,
    /// One of baseline, eventnet, eventnet+mc, eventnet+tc, full.
    #[arg(long)]
    pub ablation: Option<String>,
    #[command(flatten)]
    pub schedule: TrainSchedule,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory written by `cmtc train`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Model file; defaults to `<run>/model.cmtc`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Config snapshot; defaults to `<run>/config.json`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Must equal the run's seed when given.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    /// Seeds `seed, seed + 1, ...`.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[command(flatten)]
    pub schedule: TrainSchedule,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_json(path: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

/// Preset, then the JSON file, then `--seed`.
pub fn resolve_config(common: &Common) -> Result<ExperimentConfig, CliError> {
    let base = ExperimentConfig::preset(common.preset.into());
    let mut value = serde_json::to_value(base).map_err(invalid)?;
    if let Some(p) = &common.config {
        merge(&mut value, read_json(p)?);
    }
    let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| invalid(format!("config: {e}")))?;
    let seed = common.seed.unwrap_or(cfg.seed);
    Ok(cfg.with_seed(seed))
}

fn apply_schedule(cfg: &mut ExperimentConfig, s: &TrainSchedule) {
    if let Some(e) = s.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = s.lr {
        cfg.train.lr = lr;
    }
    if s.freeze_eventnet {
        cfg.train.eventnet_mode = EventNetMode::Frozen;
    }
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn ensure_output(out: &Path, force: bool) -> Result<(), CliError> {
    if out.exists() && !out.is_dir() {
        return Err(invalid(format!("{} exists and is not a directory", out.display())));
    }
    if is_nonempty_dir(out) && !force {
        return Err(invalid(format!("{} is not empty; pass --force to overwrite", out.display())));
    }
    Ok(())
}

fn clear_output(out: &Path) -> Result<(), CliError> {
    if out.exists() {
        fs::remove_dir_all(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    }
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))
}

fn write_file(path: &Path, text: String) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn snapshot(cfg: &ExperimentConfig) -> String {
    let mut s = serde_json::to_string_pretty(cfg).expect("config serializes");
    s.push('\n');
    s
}

pub fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    let cfg = resolve_config(&a.common)?;
    cfg.synth.validate().map_err(invalid)?;
    ensure_output(&a.common.out, a.common.force)?;
    let data = synth_dataset(&cfg.synth).map_err(runtime)?;
    clear_output(&a.common.out)?;
    let m = write_synth_dataset(&data, &a.common.out).map_err(runtime)?;
    log::info!("wrote {} clips to {}", m.clips.len(), a.common.out.display());
    Ok(())
}

/// Loads `data` and aligns the config's synthesis section with the manifest.
fn load_for(cfg: &mut ExperimentConfig, data: &Path) -> Result<Dataset, CliError> {
    if !data.join(cmtc::dataset::MANIFEST).is_file() {
        return Err(invalid(format!("{} has no {}", data.display(), cmtc::dataset::MANIFEST)));
    }
    let ds = load_dataset(data).map_err(|e| invalid(format!("dataset: {e}")))?;
    if let Some(s) = ds.manifest.synth {
        cfg.synth = s;
    } else {
        cfg.synth.clip_len = cfg.voxel.clip_len;
        cfg.synth.t_window = cfg.voxel.t_window;
    }
    Ok(ds)
}

struct Prepared {
    clips: Vec<cmtc::train::PreparedClip>,
    split: cmtc::split::ProtocolSplit,
}

fn prepare(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Prepared, CliError> {
    cfg.validate().map_err(invalid)?;
    let clips = prepare_clips(ds, &cfg.voxel, &cfg.model).map_err(|e| invalid(format!("dataset: {e}")))?;
    let split = cmtc::train::split_for(cfg, &clips).map_err(invalid)?;
    if cfg.ablation.use_eventnet && cfg.train.pretrain.epochs > 0 && split.train.iter().all(|&i| clips[i].targets.is_none()) {
        return Err(invalid("EventNet pretraining needs silhouette masks in the dataset"));
    }
    Ok(Prepared { clips, split })
}

/// Decides whether `out` holds a resumable run of the same config.
fn prepare_run_dir(out: &Path, cfg: &ExperimentConfig, force: bool) -> Result<bool, CliError> {
    if out.exists() && !out.is_dir() {
        return Err(invalid(format!("{} exists and is not a directory", out.display())));
    }
    if !is_nonempty_dir(out) {
        return Ok(false);
    }
    if force {
        return Ok(false);
    }
    let snap = out.join(CONFIG_SNAPSHOT);
    if snap.is_file() && out.join("checkpoint.cmtc").is_file() {
        let old: ExperimentConfig = serde_json::from_value(read_json(&snap)?).map_err(invalid)?;
        if &old == cfg {
            return Ok(true);
        }
        return Err(invalid(format!(
            "{} holds a run with a different config; pass --force to overwrite",
            out.display()
        )));
    }
    Err(invalid(format!("{} is not empty; pass --force to overwrite", out.display())))
}

fn run_training(cfg: &ExperimentConfig, p: &Prepared, out: &Path, force: bool) -> Result<cmtc::reid::EvalReport, CliError> {
    let resume = prepare_run_dir(out, cfg, force)?;
    if resume {
        log::info!("resuming run in {}", out.display());
    } else {
        clear_output(out)?;
        write_file(&out.join(CONFIG_SNAPSHOT), snapshot(cfg))?;
    }
    let opts = TrainOptions {
        out: Some(out),
        stop_after: None,
    };
    let outcome = train(cfg, &p.clips, &p.split, opts).map_err(runtime)?;
    Ok(outcome.report)
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = resolve_config(&a.common)?;
    if let Some(name) = &a.ablation {
        cfg.ablation = AblationConfig::from_name(name).map_err(invalid)?;
    }
    apply_schedule(&mut cfg, &a.schedule);
    cfg.validate().map_err(invalid)?;
    let ds = load_for(&mut cfg, &a.data)?;
    let p = prepare(&cfg, &ds)?;
    let r = run_training(&cfg, &p, &a.common.out, a.common.force)?;
    println!("rank1 {:.4} rank5 {:.4} rank10 {:.4} map {:.4}", r.rank1, r.rank5, r.rank10, r.map);
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let snap = a.config.clone().unwrap_or_else(|| a.run.join(CONFIG_SNAPSHOT));
    let mut cfg: ExperimentConfig =
        serde_json::from_value(read_json(&snap)?).map_err(|e| invalid(format!("{}: {e}", snap.display())))?;
    if let Some(s) = a.seed {
        if s != cfg.seed {
            return Err(invalid(format!("--seed {s} differs from the run's seed {}", cfg.seed)));
        }
    }
    let ckpt = a.checkpoint.clone().unwrap_or_else(|| a.run.join("model.cmtc"));
    if !ckpt.is_file() {
        return Err(invalid(format!("checkpoint {} not found", ckpt.display())));
    }
    ensure_output(&a.out, a.force)?;
    let ds = load_for(&mut cfg, &a.data)?;
    let p = prepare(&cfg, &ds)?;
    let trained = load_trained(&cfg, &p.split, &ckpt).map_err(runtime)?;
    clear_output(&a.out)?;
    let r = evaluate_to_dir(&trained, &cfg, &p.clips, &p.split, &a.out).map_err(runtime)?;
    println!("rank1 {:.4} rank5 {:.4} rank10 {:.4} map {:.4}", r.rank1, r.rank5, r.rank10, r.map);
    Ok(())
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// One row per ablation in table order; per-seed Rank-1 and mAP plus medians.
pub fn ablation_csv(seeds: &[u64], results: &[(AblationConfig, Vec<(f64, f64)>)]) -> String {
    let mut s = String::from("config,eventnet,mc,tc");
    for sd in seeds {
        s.push_str(&format!(",rank1_seed{sd}"));
    }
    for sd in seeds {
        s.push_str(&format!(",map_seed{sd}"));
    }
    s.push_str(",rank1_median,map_median\n");
    for (abl, runs) in results {
        let r1: Vec<f64> = runs.iter().map(|r| r.0).collect();
        let map: Vec<f64> = runs.iter().map(|r| r.1).collect();
        s.push_str(&format!("{},{},{},{}", abl.name(), abl.use_eventnet as u8, abl.use_mc as u8, abl.use_tc as u8));
        for v in r1.iter().chain(&map) {
            s.push_str(&format!(",{v:.6}"));
        }
        s.push_str(&format!(",{:.6},{:.6}\n", median(&r1), median(&map)));
    }
    s
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<(), CliError> {
    if a.seeds == 0 {
        return Err(invalid("--seeds must be at least 1"));
    }
    let mut base = resolve_config(&a.common)?;
    apply_schedule(&mut base, &a.schedule);
    base.ablation = AblationConfig::FULL;
    base.validate().map_err(invalid)?;
    ensure_output(&a.common.out, a.common.force)?;
    let ds = load_for(&mut base, &a.data)?;
    let seeds: Vec<u64> = (0..a.seeds).map(|i| base.seed + i).collect();
    // Validate every run before the first one starts.
    let mut prepared = Vec::with_capacity(seeds.len());
    for &s in &seeds {
        let mut cfg = base.clone().with_seed(s);
        cfg.synth = base.synth;
        prepared.push(prepare(&cfg, &ds)?);
    }
    clear_output(&a.common.out)?;
    let mut results = Vec::new();
    for (name, abl) in AblationConfig::ROWS {
        let mut runs = Vec::with_capacity(seeds.len());
        for (&s, p) in seeds.iter().zip(&prepared) {
            let mut cfg = base.clone().with_seed(s);
            cfg.synth = base.synth;
            cfg.ablation = abl;
            let dir = a.common.out.join(name).join(format!("seed{s}"));
            log::info!("ablation {name}, seed {s}");
            let r = run_training(&cfg, p, &dir, false)?;
            runs.push((r.rank1, r.map));
        }
        results.push((abl, runs));
    }
    let csv = ablation_csv(&seeds, &results);
    write_file(&a.common.out.join(ABLATION_CSV), csv.clone())?;
    print!("{csv}");
    Ok(())
}
