//! Command-line front end: `fuse-pose <command> [--config PATH] [--out DIR] [--seed N] [--threads N]`.
//!
//! Every command reads one TOML config, writes the resolved config to the output
//! directory as `config.resolved.toml`, and writes its outputs atomically.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    build_split, group_by_recording, load_manifest, standardize_batch, synth_generate, tensorize, write_manifest,
    write_recording, LabeledFrame, ManifestEntry, PointPlacement, Recording, SplitMode, SplitResult, SplitSpec,
    SynthConfig, LABEL_DIM,
};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::meta::{meta_train_cnn, CsvProgress, GroupedPools, MetaConfig, MetaMode, OuterOptimizer, UniformPool};
use crate::nn::{init_params, load_checkpoint, save_checkpoint, Batch, Checkpoint, CnnConfig, CnnParams};
use crate::pointcloud::{ChannelStats, POINT_FEATURES};
use crate::train::{
    evaluate_mae, fine_tune, train_supervised, write_curve_csv, CurveSplit, EvalSet, FineTuneScope, Metrics,
    OptimizerKind, TrainConfig,
};

#[derive(Debug, Parser)]
#[command(name = "fuse-pose", version, about = "Multi-frame radar pose estimation with meta-learned adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// TOML configuration file; defaults are used for missing keys.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads (overrides `threads`; 0 picks the machine default).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
enum Command {
    /// Fuse and tensorize the data, reporting pool sizes and standardization statistics.
    Fuse,
    /// Generate a synthetic dataset with a manifest.
    Synth,
    /// Train the supervised baseline.
    TrainBaseline,
    /// Meta-train an initialization.
    MetaTrain,
    /// Fine-tune a checkpoint on the held-out frames.
    FineTune,
    /// Evaluate checkpoints on the test pools.
    Evaluate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub threads: usize,
    pub data: DataSection,
    pub synth: SynthSection,
    pub model: ModelSection,
    pub meta: MetaSection,
    pub train: TrainSection,
    pub fine_tune: FineTuneSection,
    pub evaluate: EvaluateSection,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            out_dir: PathBuf::from("out"),
            threads: 0,
            data: DataSection::default(),
            synth: SynthSection::default(),
            model: ModelSection::default(),
            meta: MetaSection::default(),
            train: TrainSection::default(),
            fine_tune: FineTuneSection::default(),
            evaluate: EvaluateSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskGrouping {
    /// Each task is drawn from a single recording.
    #[default]
    PerRecording,
    /// Tasks are drawn from the pooled training frames.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Recording manifest; when absent, data comes from the `[synth]` generator.
    pub manifest: Option<PathBuf>,
    pub fusion_half_width: usize,
    pub n_fixed: usize,
    pub grid: usize,
    pub split: SplitMode,
    pub held_movement: Option<u32>,
    pub held_user: Option<u32>,
    pub finetune_frames: usize,
    pub task_grouping: TaskGrouping,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: None,
            fusion_half_width: 1,
            n_fixed: crate::pointcloud::DEFAULT_N_FIXED,
            grid: crate::pointcloud::DEFAULT_GRID,
            split: SplitMode::PerMovement,
            held_movement: None,
            held_user: None,
            finetune_frames: 200,
            task_grouping: TaskGrouping::PerRecording,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub n_tasks: usize,
    pub frames_per_task: usize,
    pub points_per_frame: usize,
    pub noise_std: f64,
    pub placement: PointPlacement,
    pub sampling_period: f64,
    pub body_radius: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        SynthSection {
            n_tasks: s.n_tasks,
            frames_per_task: s.frames_per_task,
            points_per_frame: s.points_per_frame,
            noise_std: s.noise_std,
            placement: s.placement,
            sampling_period: s.sampling_period,
            body_radius: s.body_radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub conv1_out: usize,
    pub conv2_out: usize,
    pub kernel: usize,
    pub fc_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = CnnConfig::default();
        ModelSection {
            conv1_out: c.conv1_out,
            conv2_out: c.conv2_out,
            kernel: c.kernel,
            fc_hidden: c.fc_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaSection {
    pub alpha: f64,
    pub beta: f64,
    pub tasks_per_iteration: usize,
    pub frames_per_task: usize,
    pub support_fraction: f64,
    pub iterations: usize,
    pub mode: MetaMode,
    pub outer_optimizer: OuterOptimizer,
    pub hvp_eps: f64,
}

impl Default for MetaSection {
    fn default() -> Self {
        let m = MetaConfig::default();
        MetaSection {
            alpha: m.alpha,
            beta: m.beta,
            tasks_per_iteration: m.tasks_per_iteration,
            frames_per_task: m.frames_per_task,
            support_fraction: m.support_fraction,
            iterations: m.iterations,
            mode: m.mode,
            outer_optimizer: m.outer_optimizer,
            hvp_eps: m.hvp_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            optimizer: t.optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub scope: FineTuneScope,
    /// Checkpoint to start from, relative to the output directory unless absolute.
    pub checkpoint: PathBuf,
}

impl Default for FineTuneSection {
    fn default() -> Self {
        FineTuneSection {
            epochs: 50,
            batch_size: 32,
            lr: 0.001,
            optimizer: OptimizerKind::Adam,
            scope: FineTuneScope::AllLayers,
            checkpoint: PathBuf::from(META_CKPT),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// Checkpoints to score, relative to the output directory unless absolute.
    pub checkpoints: Vec<PathBuf>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            checkpoints: vec![PathBuf::from(BASELINE_CKPT)],
        }
    }
}

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const BASELINE_CKPT: &str = "baseline.ckpt";
pub const META_CKPT: &str = "meta.ckpt";
pub const FINE_TUNED_CKPT: &str = "fine_tuned.ckpt";
pub const METRICS_HEADER: [&str; 5] = ["setting", "x_cm", "y_cm", "z_cm", "average_cm"];

impl Config {
    /// Parses a TOML document; missing keys take their defaults, unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Config> {
        toml::from_str(text).map_err(|e| Error::invalid_config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            mode: self.data.split,
            held_movement: self.data.held_movement,
            held_user: self.data.held_user,
            finetune_frames: self.data.finetune_frames,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        let s = &self.synth;
        SynthConfig {
            n_tasks: s.n_tasks,
            frames_per_task: s.frames_per_task,
            points_per_frame: s.points_per_frame,
            noise_std: s.noise_std,
            seed: self.seed,
            placement: s.placement,
            sampling_period: s.sampling_period,
            body_radius: s.body_radius,
        }
    }

    pub fn cnn_config(&self) -> CnnConfig {
        CnnConfig {
            grid_size: self.data.grid,
            in_channels: POINT_FEATURES * (2 * self.data.fusion_half_width + 1),
            conv1_out: self.model.conv1_out,
            conv2_out: self.model.conv2_out,
            kernel: self.model.kernel,
            fc_hidden: self.model.fc_hidden,
            out_dim: LABEL_DIM,
        }
    }

    pub fn meta_config(&self) -> MetaConfig {
        let m = &self.meta;
        MetaConfig {
            alpha: m.alpha,
            beta: m.beta,
            tasks_per_iteration: m.tasks_per_iteration,
            frames_per_task: m.frames_per_task,
            support_fraction: m.support_fraction,
            iterations: m.iterations,
            mode: m.mode,
            outer_optimizer: m.outer_optimizer,
            hvp_eps: m.hvp_eps,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            optimizer: self.train.optimizer,
            seed: self.seed,
        }
    }

    pub fn fine_tune_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.fine_tune.epochs,
            batch_size: self.fine_tune.batch_size,
            lr: self.fine_tune.lr,
            optimizer: self.fine_tune.optimizer,
            seed: self.seed,
        }
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.out_dir.join(path)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cnn_config().validate()?;
        self.split_spec().validate()?;
        if self.data.grid * self.data.grid != self.data.n_fixed {
            return Err(Error::invalid_config(format!(
                "grid {} x {} does not hold n_fixed = {} points",
                self.data.grid, self.data.grid, self.data.n_fixed
            )));
        }
        if self.data.manifest.is_none() {
            self.synth_config().validate()?;
        }
        Ok(())
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    match execute(cli.command, &cli.common) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(common: &CommonArgs) -> Result<Config> {
    let mut cfg = match &common.config {
        Some(path) => {
            let bytes = fsutil::read(path)?;
            let text = String::from_utf8(bytes)
                .map_err(|_| Error::invalid_config(format!("{} is not UTF-8", path.display())))?;
            let mut cfg = Config::from_toml(&text)?;
            // Relative manifest paths are taken relative to the config file.
            if let (Some(m), Some(dir)) = (&cfg.data.manifest, path.parent()) {
                if m.is_relative() {
                    cfg.data.manifest = Some(dir.join(m));
                }
            }
            cfg
        }
        None => Config::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = common.threads {
        cfg.threads = threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(command: Command, common: &CommonArgs) -> Result<()> {
    let cfg = load_config(common)?;
    if cfg.threads > 0 {
        // Fails only if a pool already exists, as when called repeatedly in one process.
        if rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global().is_err() {
            log::debug!("global thread pool already initialized");
        }
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    fsutil::write_atomic(&cfg.out_dir.join(RESOLVED_CONFIG), cfg.to_toml().as_bytes())?;
    match command {
        Command::Fuse => cmd_fuse(&cfg),
        Command::Synth => cmd_synth(&cfg),
        Command::TrainBaseline => cmd_train_baseline(&cfg),
        Command::MetaTrain => cmd_meta_train(&cfg),
        Command::FineTune => cmd_fine_tune(&cfg),
        Command::Evaluate => cmd_evaluate(&cfg),
    }
}

/// Recordings from the manifest, or generated when no manifest is configured.
pub fn load_recordings(cfg: &Config) -> Result<Vec<Recording>> {
    match &cfg.data.manifest {
        Some(path) => {
            let (recs, report) = load_manifest(path)?;
            if report.dropped_frames > 0 {
                log::warn!("dropped {} unlabeled frames", report.dropped_frames);
            }
            Ok(recs)
        }
        None => synth_generate(&cfg.synth_config()),
    }
}

/// Standardized tensors of every split pool, using statistics of the training pool.
pub struct Prepared {
    pub split: SplitResult,
    pub stats: ChannelStats,
    pub train: Batch,
    pub validation: Batch,
    pub test_finetune: Batch,
    pub test_eval: Batch,
    pub original_test: Batch,
}

impl Prepared {
    pub fn new(cfg: &Config) -> Result<Prepared> {
        let recordings = load_recordings(cfg)?;
        let split = build_split(&recordings, &cfg.split_spec(), cfg.data.fusion_half_width)?;
        if split.train.is_empty() {
            return Err(Error::invalid_config("split leaves no training frames"));
        }
        let raw = |pool: &[LabeledFrame]| tensorize(pool, cfg.data.n_fixed, cfg.data.grid);
        let train = raw(&split.train)?;
        let stats = ChannelStats::from_grids(train.inputs.iter())?;
        let prep = |pool: &[LabeledFrame]| standardize_batch(&raw(pool)?, &stats);
        Ok(Prepared {
            train: standardize_batch(&train, &stats)?,
            validation: prep(&split.validation)?,
            test_finetune: prep(&split.test_finetune)?,
            test_eval: prep(&split.test_eval)?,
            original_test: prep(&split.original_test)?,
            split,
            stats,
        })
    }

    /// Training frames grouped for task sampling.
    pub fn task_groups(&self, grouping: TaskGrouping) -> Vec<Batch> {
        match grouping {
            TaskGrouping::Uniform => vec![self.train.clone()],
            TaskGrouping::PerRecording => group_by_recording(&self.split.train)
                .into_iter()
                .map(|(_, idx)| self.train.select(&idx))
                .collect(),
        }
    }

    /// Non-empty evaluation pools: the original test split and the held-out frames.
    fn eval_sets(&self) -> Vec<(&'static str, CurveSplit, &Batch)> {
        let mut out = Vec::new();
        if !self.original_test.is_empty() {
            out.push(("original", CurveSplit::Original, &self.original_test));
        }
        if !self.test_eval.is_empty() {
            out.push(("new", CurveSplit::New, &self.test_eval));
        }
        out
    }
}

fn write_csv_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::io(path, std::io::Error::other(e.to_string()));
    w.write_record(header).map_err(to_err)?;
    for r in rows {
        w.write_record(r).map_err(to_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    fsutil::write_atomic(path, &bytes)
}

fn metrics_row(setting: &str, m: &Metrics) -> Vec<String> {
    vec![
        setting.to_string(),
        m.mae_x.to_string(),
        m.mae_y.to_string(),
        m.mae_z.to_string(),
        m.mae_avg.to_string(),
    ]
}

fn write_metrics(cfg: &Config, rows: &[Vec<String>]) -> Result<()> {
    write_csv_rows(&cfg.out_dir.join("metrics.csv"), &METRICS_HEADER, rows)
}

fn write_curve(path: &Path, curve: &[crate::train::CurvePoint]) -> Result<()> {
    let mut buf = Vec::new();
    write_curve_csv(&mut buf, curve)?;
    fsutil::write_atomic(path, &buf)
}

fn checkpoint_for(cfg: &Config, path: &Path) -> Result<CnnParams> {
    let full = cfg.resolve(path);
    // A checkpoint the config points at but that was never written is a config mistake.
    if !full.exists() {
        return Err(Error::invalid_config(format!("checkpoint {} does not exist", full.display())));
    }
    let ck = load_checkpoint(&full)?;
    let want = cfg.cnn_config();
    if *ck.params.config() != want {
        return Err(Error::invalid_config(format!(
            "checkpoint {} has architecture {:?}, config expects {:?}",
            path.display(),
            ck.params.config(),
            want
        )));
    }
    Ok(ck.params)
}

fn cmd_fuse(cfg: &Config) -> Result<()> {
    let prep = Prepared::new(cfg)?;
    let c = cfg.cnn_config();
    let rows: Vec<Vec<String>> = prep
        .split
        .pools()
        .iter()
        .map(|(name, pool)| {
            vec![
                name.to_string(),
                pool.len().to_string(),
                c.grid_size.to_string(),
                c.grid_size.to_string(),
                c.in_channels.to_string(),
            ]
        })
        .collect();
    write_csv_rows(
        &cfg.out_dir.join("fuse_summary.csv"),
        &["pool", "frames", "height", "width", "channels"],
        &rows,
    )?;
    let stats: Vec<Vec<String>> = (0..prep.stats.channels())
        .map(|ch| {
            vec![
                ch.to_string(),
                prep.stats.mean[ch].to_string(),
                prep.stats.std[ch].to_string(),
            ]
        })
        .collect();
    write_csv_rows(&cfg.out_dir.join("channel_stats.csv"), &["channel", "mean", "std"], &stats)?;
    log::info!(
        "fused {} training frames into {}x{}x{} grids",
        prep.train.len(),
        c.grid_size,
        c.grid_size,
        c.in_channels
    );
    Ok(())
}

fn cmd_synth(cfg: &Config) -> Result<()> {
    let recordings = synth_generate(&cfg.synth_config())?;
    let dir = cfg.out_dir.join("synth");
    let mut entries = Vec::new();
    for (i, rec) in recordings.iter().enumerate() {
        let frames = format!("task_{i:03}_frames.csv");
        let labels = format!("task_{i:03}_labels.csv");
        write_recording(rec, &dir.join(&frames), &dir.join(&labels))?;
        entries.push(ManifestEntry {
            subject_id: rec.subject_id,
            movement_id: rec.movement_id,
            frames_path: PathBuf::from(frames),
            labels_path: PathBuf::from(labels),
        });
    }
    write_manifest(&dir.join("manifest.csv"), &entries)?;
    log::info!("wrote {} synthetic recordings to {}", recordings.len(), dir.display());
    Ok(())
}

fn cmd_train_baseline(cfg: &Config) -> Result<()> {
    let prep = Prepared::new(cfg)?;
    let theta0 = init_params(&cfg.cnn_config(), cfg.seed)?;
    let validation = (!prep.validation.is_empty()).then_some(&prep.validation);
    let (params, curve) = train_supervised(&prep.train, validation, &cfg.train_config(), &theta0)?;
    save_checkpoint(
        &cfg.out_dir.join(BASELINE_CKPT),
        &Checkpoint {
            params: params.clone(),
            seed: cfg.seed,
        },
    )?;
    write_curve(&cfg.out_dir.join("baseline_curve.csv"), &curve)?;
    let mut rows = Vec::new();
    for (name, _, data) in prep.eval_sets() {
        rows.push(metrics_row(&format!("baseline/{name}"), &evaluate_mae(&params, data)?));
    }
    write_metrics(cfg, &rows)?;
    log::info!("baseline trained for {} epochs", cfg.train.epochs);
    Ok(())
}

fn cmd_meta_train(cfg: &Config) -> Result<()> {
    let prep = Prepared::new(cfg)?;
    let theta0 = init_params(&cfg.cnn_config(), cfg.seed)?;
    let groups = prep.task_groups(cfg.data.task_grouping);
    let mut progress = CsvProgress::new(Vec::new());
    let params = match cfg.data.task_grouping {
        TaskGrouping::Uniform => meta_train_cnn(&mut UniformPool(&groups[0]), &cfg.meta_config(), &theta0, &mut progress)?,
        TaskGrouping::PerRecording => {
            let mut source = GroupedPools::new(groups.iter().collect())?;
            meta_train_cnn(&mut source, &cfg.meta_config(), &theta0, &mut progress)?
        }
    };
    fsutil::write_atomic(&cfg.out_dir.join("meta_progress.csv"), &progress.into_inner())?;
    save_checkpoint(
        &cfg.out_dir.join(META_CKPT),
        &Checkpoint {
            params: params.clone(),
            seed: cfg.seed,
        },
    )?;
    let mut rows = Vec::new();
    for (name, _, data) in prep.eval_sets() {
        rows.push(metrics_row(&format!("meta/{name}"), &evaluate_mae(&params, data)?));
    }
    write_metrics(cfg, &rows)?;
    log::info!("meta-trained for {} iterations", cfg.meta.iterations);
    Ok(())
}

fn cmd_fine_tune(cfg: &Config) -> Result<()> {
    if cfg.data.split != SplitMode::LeaveOut {
        return Err(Error::invalid_config("fine-tune needs data.split = \"leave_out\""));
    }
    let prep = Prepared::new(cfg)?;
    if prep.test_finetune.is_empty() {
        return Err(Error::invalid_config("no held-out frames to fine-tune on"));
    }
    let theta = checkpoint_for(cfg, &cfg.fine_tune.checkpoint)?;
    let sets = prep.eval_sets();
    let eval: Vec<EvalSet> = sets.iter().map(|&(_, split, data)| EvalSet { split, data }).collect();
    let mut rows = Vec::new();
    for (name, _, data) in &sets {
        rows.push(metrics_row(&format!("epoch_0/{name}"), &evaluate_mae(&theta, data)?));
    }
    let tc = cfg.fine_tune_config();
    let (params, curve) = fine_tune(&theta, &prep.test_finetune, cfg.fine_tune.scope, &tc, &eval)?;
    for (name, _, data) in &sets {
        rows.push(metrics_row(&format!("epoch_{}/{name}", tc.epochs), &evaluate_mae(&params, data)?));
    }
    save_checkpoint(
        &cfg.out_dir.join(FINE_TUNED_CKPT),
        &Checkpoint {
            params,
            seed: cfg.seed,
        },
    )?;
    write_curve(&cfg.out_dir.join("fine_tune_curve.csv"), &curve)?;
    write_metrics(cfg, &rows)?;
    log::info!("fine-tuned on {} frames for {} epochs", prep.test_finetune.len(), tc.epochs);
    Ok(())
}

fn cmd_evaluate(cfg: &Config) -> Result<()> {
    let prep = Prepared::new(cfg)?;
    let sets = prep.eval_sets();
    if sets.is_empty() {
        return Err(Error::invalid_config("split has no test frames"));
    }
    let mut rows = Vec::new();
    for path in &cfg.evaluate.checkpoints {
        let params = checkpoint_for(cfg, path)?;
        let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for (name, _, data) in &sets {
            rows.push(metrics_row(&format!("{label}/{name}"), &evaluate_mae(&params, data)?));
        }
    }
    write_metrics(cfg, &rows)?;
    let mut summary = String::new();
    for r in &rows {
        let _ = writeln!(summary, "{:<24} avg {} cm", r[0], r[4]);
    }
    log::info!("evaluation:\n{summary}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = Config::default();
        assert_eq!(Config::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(Config::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(Config::from_toml("bogus = 1"), Err(Error::InvalidConfig(_))));
        assert!(matches!(
            Config::from_toml("[meta]\nalfa = 0.1"),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg = Config::from_toml("seed = 4\n[data]\nfusion_half_width = 2\n[meta]\nmode = \"first_order\"").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.cnn_config().in_channels, 25);
        assert_eq!(cfg.meta_config().mode, MetaMode::FirstOrder);
        assert_eq!(cfg.meta_config().seed, 4);
        assert_eq!(cfg.meta.alpha, MetaConfig::default().alpha);
        assert_eq!(cfg.train, TrainSection::default());
    }

    #[test]
    fn validation_catches_bad_shapes() {
        let mut cfg = Config::default();
        cfg.data.grid = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = Config::default();
        cfg.data.split = SplitMode::LeaveOut;
        assert!(cfg.validate().is_err());
        cfg.data.held_movement = Some(1);
        cfg.data.held_user = Some(1);
        cfg.validate().unwrap();
    }

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run(["fuse-pose", "no-such-command"]), 1);
        assert_eq!(run(["fuse-pose", "fuse", "--seed", "x"]), 1);
        assert_eq!(run(["fuse-pose", "--help"]), 0);
    }
}
