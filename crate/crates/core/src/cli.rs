//! Command-line front end: configuration, experiment commands and reports.
//!
//! Every command reads one JSON [`RunConfig`] (flags override it) and writes
//! into the output directory:
//!
//! ```text
//! data/{train,val}.jsonl, data/manifest.json     gen-data
//! models/pca.ckpt, pca_sweep.csv, eigenarcs.svg   fit-pca
//! models/<name>.ckpt, models/<name>_history.csv   train
//! recon_errors.csv                                eval-recon
//! position/{summary.csv,traces/,convergence.svg}  opt-position
//! dose/{summary.csv,traces/,convergence.svg,dose_slice.svg}  opt-dose
//! traverse.svg                                    traverse
//! report.md                                       report
//! ```
//!
//! CSV and SVG outputs start with the SHA-256 digest of the effective
//! configuration (output directory and thread count excluded).

mod svg;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anneal::{
    self, aggregate, conformal_arc, dose_dao_cells, dose_trial, full_dao_position_trial, latent_position_trial,
    summary_csv_row, trial_seed, write_trace_csv, AnnealConfig, ClockMode, DoseCase, DoseTrial, FullDaoSpace,
    LatentSpace, SearchSpace, State, StoppingRule, TimingModel, TrialMetrics,
};
use crate::arcdata::{load_dataset, save_dataset, Arc, ArcDataset, NormalizationSpec, NormalizedArc, N_LEAVES};
use crate::checkpoint::Container;
use crate::dose::{build_influence, combine, BeamGeometry, KernelConfig, Phantom, PhantomCase};
use crate::error::Error;
use crate::grad::{LatentDecoder, PcaLatent};
use crate::nn::{latent_traversal, median_abs_error, train_with, AutoencoderModel, Checkpoint, ModelConfig, TrainConfig};
use crate::pca::{self, PcaModel};
use crate::stats::{bootstrap_median_se, median};
use crate::synthgen::{generate_dataset, split, AugmentationConfig, GeneratorConfig};
use svg::{heatmap_strip, LineChart, Panel, Series};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_TRAINING: i32 = 3;
pub const EXIT_MISSING: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn missing(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_MISSING,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFiniteLoss { .. } | Error::NonFiniteObjective { .. } => EXIT_TRAINING,
            _ => EXIT_CONFIG,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "vmat-latent", version, about = "Arc plan compression and latent-space plan optimization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its train/validation split.
    GenData,
    /// Fit PCA and sweep the reconstruction error over dimensions.
    FitPca,
    /// Train every autoencoder in the training grid.
    Train,
    /// Median reconstruction error of every model on the validation split.
    EvalRecon,
    /// Position-objective annealing over the configured search spaces.
    OptPosition,
    /// Dose-objective annealing on the phantom case.
    OptDose,
    /// Render a latent traversal of one model.
    Traverse(TraverseArgs),
    /// Collect the result tables into a Markdown report.
    Report,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TraverseArgs {
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, num_args = 2, allow_negative_numbers = true)]
    pub range: Option<Vec<f64>>,
    #[arg(long)]
    pub frames: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridCell {
    pub variational: bool,
    pub k: usize,
    pub d: usize,
    pub alpha: f64,
}

impl Default for GridCell {
    fn default() -> Self {
        Self {
            variational: true,
            k: 16,
            d: 32,
            alpha: 0.01,
        }
    }
}

impl GridCell {
    pub fn name(&self) -> String {
        if self.variational {
            format!("vae_k{}_d{}_a{}", self.k, self.d, self.alpha)
        } else {
            format!("ae_k{}_d{}", self.k, self.d)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub grid: Vec<GridCell>,
    pub dropblock_rate: f64,
    pub dropblock_size: usize,
    pub schedule: TrainConfig,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            grid: vec![
                GridCell {
                    variational: false,
                    ..GridCell::default()
                },
                GridCell::default(),
            ],
            dropblock_rate: 0.0,
            dropblock_size: 3,
            schedule: desk_schedule(),
        }
    }
}

/// Training schedule sized for a single CPU core.
pub fn desk_schedule() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        max_epochs: 40,
        augmentation: AugmentationConfig {
            flip_horizontal: 0.0,
            flip_vertical: 0.0,
            ..AugmentationConfig::default()
        },
        ..TrainConfig::default()
    }
}

/// Per-iteration optimizer cost charged by the virtual clock (s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NominalTo {
    pub full_dao: f64,
    pub pca: f64,
    pub model: f64,
}

impl Default for NominalTo {
    fn default() -> Self {
        Self {
            full_dao: anneal::NOMINAL_T_O_FULL,
            pca: anneal::NOMINAL_T_O_PCA,
            model: anneal::NOMINAL_T_O_LATENT,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PositionSection {
    /// `full_dao`, `pca_d<N>` or a model name from the training grid.
    pub spaces: Vec<String>,
    pub trials: usize,
    pub t_d: Vec<f64>,
    pub stopping: StoppingRule,
    pub clock: ClockMode,
    pub nominal_t_o: NominalTo,
    pub anneal: AnnealConfig,
}

impl Default for PositionSection {
    fn default() -> Self {
        Self {
            spaces: vec!["full_dao".into(), "pca_d32".into(), GridCell::default().name()],
            trials: 20,
            t_d: vec![0.01, 0.1],
            stopping: StoppingRule::default(),
            clock: ClockMode::Virtual,
            nominal_t_o: NominalTo::default(),
            anneal: AnnealConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DoseSection {
    pub phantom: Phantom,
    pub geometry: BeamGeometry,
    pub kernel: KernelConfig,
    pub case: PhantomCase,
    pub spaces: Vec<String>,
    pub trials: usize,
    pub iterations: usize,
    pub t_d: f64,
    pub nominal_t_o: NominalTo,
    pub anneal: AnnealConfig,
}

impl Default for DoseSection {
    fn default() -> Self {
        Self {
            phantom: Phantom::default(),
            geometry: BeamGeometry::default(),
            kernel: KernelConfig::default(),
            case: PhantomCase::default(),
            spaces: vec!["full_dao".into(), GridCell::default().name()],
            trials: 5,
            iterations: 1000,
            t_d: 0.05,
            nominal_t_o: NominalTo::default(),
            anneal: AnnealConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraverseSection {
    pub model: String,
    pub dim: usize,
    pub range: (f64, f64),
    pub frames: usize,
}

impl Default for TraverseSection {
    fn default() -> Self {
        Self {
            model: GridCell::default().name(),
            dim: 10,
            range: (-1.0, 1.0),
            frames: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of every random stream: data, split, training and annealing.
    pub seed: u64,
    pub out: PathBuf,
    pub threads: Option<usize>,
    pub generator: GeneratorConfig,
    pub train_fraction: f64,
    pub normalization: NormalizationSpec,
    pub pca_dims: Vec<usize>,
    pub training: TrainingSection,
    pub position: PositionSection,
    pub dose: DoseSection,
    pub traverse: TraverseSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            threads: None,
            generator: GeneratorConfig {
                n_arcs: 800,
                ..GeneratorConfig::default()
            },
            train_fraction: 0.9,
            normalization: NormalizationSpec::default(),
            pca_dims: vec![8, 16, 32, 64],
            training: TrainingSection::default(),
            position: PositionSection::default(),
            dose: DoseSection::default(),
            traverse: TraverseSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::config(format!("bad config: {e}")))
    }

    /// Push the global seed into every section.
    fn resolve(mut self) -> Self {
        self.generator.seed = self.seed;
        self.training.schedule.seed = self.seed;
        self.position.anneal.seed = self.seed;
        self.dose.anneal.seed = self.seed;
        self
    }

    pub fn validate(&self) -> CliResult<()> {
        self.generator.validate()?;
        self.training.schedule.validate()?;
        self.position.anneal.validate()?;
        self.position.stopping.validate()?;
        self.dose.anneal.validate()?;
        self.dose.phantom.validate()?;
        self.dose.geometry.validate()?;
        for cell in &self.training.grid {
            self.model_config(cell).validate()?;
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(CliError::config("train_fraction must be in (0, 1)"));
        }
        if self.pca_dims.iter().any(|&d| d == 0) {
            return Err(CliError::config("PCA dimensions must be positive"));
        }
        if self.position.t_d.iter().any(|t| !(*t >= 0.0)) || !(self.dose.t_d >= 0.0) {
            return Err(CliError::config("T_D values must be >= 0"));
        }
        if self.position.trials < 2 || self.dose.trials == 0 || self.dose.iterations == 0 {
            return Err(CliError::config("need >= 2 position trials, >= 1 dose trial and >= 1 iteration"));
        }
        if self.traverse.frames == 0 {
            return Err(CliError::config("traversal needs at least one frame"));
        }
        Ok(())
    }

    fn model_config(&self, cell: &GridCell) -> ModelConfig {
        ModelConfig {
            k: cell.k,
            d: cell.d,
            variational: cell.variational,
            alpha: cell.alpha,
            dropblock_rate: self.training.dropblock_rate,
            dropblock_size: self.training.dropblock_size,
        }
    }

    /// Digest of everything that can change results.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.threads = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

struct Ctx {
    cfg: RunConfig,
    digest: String,
}

impl Ctx {
    fn path(&self, rel: &str) -> PathBuf {
        self.cfg.out.join(rel)
    }

    fn require(&self, rel: &str) -> CliResult<PathBuf> {
        let p = self.path(rel);
        if p.is_file() {
            Ok(p)
        } else {
            Err(CliError::missing(format!("missing artifact {}", p.display())))
        }
    }

    fn write(&self, rel: &str, body: &str) -> CliResult<()> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(p, body)?;
        Ok(())
    }

    fn write_csv(&self, rel: &str, header: &str, rows: &[String]) -> CliResult<()> {
        let mut body = format!("# config_sha256={}\n{header}\n", self.digest);
        for r in rows {
            body.push_str(r);
            body.push('\n');
        }
        self.write(rel, &body)
    }

    fn load_split(&self, name: &str) -> CliResult<ArcDataset> {
        Ok(load_dataset(self.require(&format!("data/{name}.jsonl"))?)?)
    }

    fn pca(&self) -> CliResult<PcaModel> {
        let c = Container::load(self.require("models/pca.ckpt")?).map_err(|e| CliError::missing(e.to_string()))?;
        Ok(PcaModel::from_container(&c).map_err(|e| CliError::missing(e.to_string()))?.0)
    }

    fn checkpoint(&self, name: &str) -> CliResult<Checkpoint> {
        let p = self.require(&format!("models/{name}.ckpt"))?;
        Checkpoint::load(p).map_err(|e| CliError::missing(format!("bad checkpoint {name}: {e}")))
    }

    /// Search-space decoder for a space name; `None` for full DAO.
    fn decoder(&self, space: &str) -> CliResult<Option<Box<dyn LatentDecoder>>> {
        if space == "full_dao" {
            return Ok(None);
        }
        if let Some(d) = space.strip_prefix("pca_d") {
            let d: usize = d.parse().map_err(|_| CliError::config(format!("bad space {space}")))?;
            let model = self.pca()?;
            if d > model.dim() {
                return Err(CliError::config(format!("{space}: fitted PCA has only {} components", model.dim())));
            }
            return Ok(Some(Box::new(PcaLatent {
                model: model.truncate(d)?,
                norm: self.cfg.normalization,
            })));
        }
        Ok(Some(Box::new(self.checkpoint(space)?)))
    }

    fn nominal_t_o(&self, space: &str, nominal: &NominalTo) -> f64 {
        if space == "full_dao" {
            nominal.full_dao
        } else if space.starts_with("pca_d") {
            nominal.pca
        } else {
            nominal.model
        }
    }
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::config(format!("{}: {e}", p.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    let cfg = cfg.resolve();
    cfg.validate()?;
    if let Some(n) = cfg.threads {
        // Fails only when a pool already exists, e.g. on a second in-process run.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let digest = cfg.digest();
    let ctx = Ctx { cfg, digest };
    match &cli.command {
        Command::GenData => gen_data(&ctx),
        Command::FitPca => fit_pca(&ctx),
        Command::Train => train(&ctx),
        Command::EvalRecon => eval_recon(&ctx),
        Command::OptPosition => opt_position(&ctx),
        Command::OptDose => opt_dose(&ctx),
        Command::Traverse(args) => traverse(&ctx, args),
        Command::Report => report(&ctx),
    }
}

fn gen_data(ctx: &Ctx) -> CliResult<()> {
    let cfg = &ctx.cfg;
    let ds = generate_dataset(&cfg.generator)?;
    let (train, val) = split(&ds, cfg.train_fraction, cfg.seed)?;
    fs::create_dir_all(ctx.path("data"))?;
    save_dataset(&train, ctx.path("data/train.jsonl"))?;
    save_dataset(&val, ctx.path("data/val.jsonl"))?;
    let manifest = serde_json::json!({
        "config_sha256": ctx.digest,
        "seed": cfg.seed,
        "generator_digest": cfg.generator.digest(),
        "arcs": ds.len(),
        "train": train.len(),
        "val": val.len(),
    });
    ctx.write("data/manifest.json", &format!("{manifest:#}\n"))?;
    eprintln!("wrote {} train / {} val arcs", train.len(), val.len());
    Ok(())
}

fn fit_pca(ctx: &Ctx) -> CliResult<()> {
    let norm = ctx.cfg.normalization;
    let train = ctx.load_split("train")?.normalized(&norm);
    let val = ctx.load_split("val")?.normalized(&norm);
    if val.is_empty() {
        return Err(CliError::config("validation split is empty"));
    }
    let max_d = *ctx.cfg.pca_dims.iter().max().ok_or_else(|| CliError::config("no PCA dimensions"))?;
    let model = PcaModel::fit(&train, max_d)?;
    fs::create_dir_all(ctx.path("models"))?;
    model.to_container(&norm)?.save(ctx.path("models/pca.ckpt"))?;
    let mut rows = Vec::new();
    for &d in &ctx.cfg.pca_dims {
        let m = model.truncate(d)?;
        rows.push(format!("{d},{}", pca::median_abs_error(&m, &val, &norm)?));
    }
    ctx.write_csv("pca_sweep.csv", "d,median_error_mm", &rows)?;
    let panels: Vec<Panel> = (0..max_d.min(8))
        .map(|j| Panel {
            label: format!("component {}", j + 1),
            rows: 2 * N_LEAVES,
            cols: N_LEAVES,
            values: model.component(j).to_vec(),
        })
        .collect();
    ctx.write("eigenarcs.svg", &heatmap_strip("Leading eigenarcs (positions over gaps)", &panels, 1.5, false, &ctx.digest))?;
    Ok(())
}

fn train(ctx: &Ctx) -> CliResult<()> {
    let norm = ctx.cfg.normalization;
    let train = ctx.load_split("train")?.normalized(&norm);
    let val = ctx.load_split("val")?.normalized(&norm);
    if train.is_empty() || val.is_empty() {
        return Err(CliError::config("empty train or validation split"));
    }
    fs::create_dir_all(ctx.path("models"))?;
    for cell in &ctx.cfg.training.grid {
        let name = cell.name();
        let model = AutoencoderModel::new(ctx.cfg.model_config(cell), ctx.cfg.seed)?;
        let ckpt = train_with(model, &train, &val, &norm, &ctx.cfg.training.schedule, |r| {
            eprintln!("{name} epoch {} train {:.4} val {:.4}", r.epoch, r.train_loss, r.val_loss)
        })?;
        ckpt.save(ctx.path(&format!("models/{name}.ckpt")))?;
        let rows: Vec<String> = ckpt
            .meta
            .history
            .iter()
            .map(|r| format!("{},{},{},{},{},{}", r.epoch, r.train_loss, r.train_recon, r.train_kl, r.val_loss, r.val_running))
            .collect();
        ctx.write_csv(
            &format!("models/{name}_history.csv"),
            "epoch,train_loss,train_recon,train_kl,val_loss,val_running",
            &rows,
        )?;
        if let Some(epoch) = ckpt.meta.aborted_at {
            return Err(CliError {
                code: EXIT_TRAINING,
                message: format!("{name}: training aborted at epoch {epoch} (non-finite loss)"),
            });
        }
    }
    Ok(())
}

fn eval_recon(ctx: &Ctx) -> CliResult<()> {
    let norm = ctx.cfg.normalization;
    let val = ctx.load_split("val")?.normalized(&norm);
    if val.is_empty() {
        return Err(CliError::config("validation split is empty"));
    }
    let mut rows = Vec::new();
    if !ctx.cfg.pca_dims.is_empty() {
        let model = ctx.pca()?;
        for &d in &ctx.cfg.pca_dims {
            let m = model.truncate(d.min(model.dim()))?;
            rows.push(format!("pca,,{d},,{}", pca::median_abs_error(&m, &val, &norm)?));
        }
    }
    for cell in &ctx.cfg.training.grid {
        let ckpt = ctx.checkpoint(&cell.name())?;
        let kind = if cell.variational { "vae" } else { "ae" };
        let alpha = if cell.variational { cell.alpha.to_string() } else { String::new() };
        rows.push(format!("{kind},{},{},{alpha},{}", cell.k, cell.d, median_abs_error(&ckpt, &val)?));
    }
    ctx.write_csv("recon_errors.csv", "model,k,d,alpha,median_error_mm", &rows)
}

fn targets(ctx: &Ctx, n: usize) -> CliResult<Vec<Arc>> {
    let val = ctx.load_split("val")?;
    if val.len() < n {
        return Err(CliError::config(format!("{n} trials need {n} validation arcs, found {}", val.len())));
    }
    Ok(val.arcs.into_iter().take(n).collect())
}

fn trace_label(space: &str, t_d: f64) -> String {
    format!("{space} T_D={}ms", t_d * 1000.0)
}

fn best_curve(m: &TrialMetrics) -> Vec<(f64, f64)> {
    m.trace.iter().map(|r| (r.time, r.best)).collect()
}

fn trace_string(m: &TrialMetrics) -> CliResult<String> {
    let mut buf = Vec::new();
    write_trace_csv(m, &mut buf)?;
    Ok(String::from_utf8(buf).expect("ASCII CSV"))
}

fn opt_position(ctx: &Ctx) -> CliResult<()> {
    let sec = &ctx.cfg.position;
    let targets = targets(ctx, sec.trials)?;
    let mut rows = Vec::new();
    let mut series = Vec::new();
    let mut timing_report = serde_json::Map::new();
    for space in &sec.spaces {
        let decoder = ctx.decoder(space)?;
        let d = decoder.as_ref().map_or(0, |dec| dec.latent_dim());
        for &t_d in &sec.t_d {
            let timing = TimingModel {
                clock: sec.clock,
                t_d,
                t_o: ctx.nominal_t_o(space, &sec.nominal_t_o),
            };
            let trials: Vec<TrialMetrics> = targets
                .par_iter()
                .enumerate()
                .map(|(i, target)| {
                    let cfg = AnnealConfig {
                        seed: trial_seed(sec.anneal.seed, i),
                        ..sec.anneal
                    };
                    match &decoder {
                        None => full_dao_position_trial(target, &sec.stopping, &timing, &cfg),
                        Some(dec) => latent_position_trial(dec.as_ref(), target, &sec.stopping, &timing, &cfg),
                    }
                })
                .collect::<crate::Result<_>>()?;
            let summary = aggregate(&trials, ctx.cfg.seed)?;
            rows.push(summary_csv_row(space, d, t_d, &summary));
            for (i, m) in trials.iter().enumerate() {
                let rel = format!("position/traces/{space}_td{}ms_trial{i:02}.csv", t_d * 1000.0);
                ctx.write(&rel, &format!("# config_sha256={}\n{}", ctx.digest, trace_string(m)?))?;
            }
            series.push(Series {
                label: trace_label(space, t_d),
                points: best_curve(&trials[0]),
            });
            let mean_t_o = trials.iter().map(|m| m.mean_measured_t_o).sum::<f64>() / trials.len() as f64;
            timing_report.insert(format!("{space}@{t_d}"), serde_json::json!({ "measured_t_o_s": mean_t_o }));
            eprintln!(
                "{space} T_D={t_d}: median error {:.3} mm, median iterations {}",
                summary.median_error, summary.median_iterations
            );
        }
    }
    ctx.write_csv("position/summary.csv", anneal::SUMMARY_HEADER, &rows)?;
    let chart = LineChart {
        title: "Position objective, first target".into(),
        x_label: "virtual time (s)".into(),
        y_label: "best objective (mm^2)".into(),
        log_y: true,
        series,
    };
    ctx.write("position/convergence.svg", &chart.render(&ctx.digest))?;
    // Wall-clock measurements vary between runs, so they stay out of the CSVs.
    ctx.write("position/timing.json", &format!("{:#}\n", serde_json::Value::Object(timing_report)))
}

pub const DOSE_SUMMARY_HEADER: &str = "space,d,trials,iterations,median_initial_objective,median_final_objective,median_relative_reduction,se_relative_reduction";

fn opt_dose(ctx: &Ctx) -> CliResult<()> {
    let sec = &ctx.cfg.dose;
    let influence = build_influence(&sec.phantom, &sec.geometry, &sec.kernel)?;
    fs::create_dir_all(ctx.path("dose"))?;
    influence.save(ctx.path("dose/influence.arcd"))?;
    let objective = sec.case.objective(&sec.phantom)?;
    let case = DoseCase {
        influence: &influence,
        objective: &objective,
    };
    let stopping = StoppingRule::MaxIterations(sec.iterations);
    let pitch = sec.geometry.rows as f64 * sec.geometry.beamlet_width / N_LEAVES as f64;
    let conformal = conformal_arc(sec.case.target_radius, pitch)?;
    let mut rows = Vec::new();
    let mut series = Vec::new();
    let mut slices = Vec::new();
    for space in &sec.spaces {
        let decoder = ctx.decoder(space)?;
        let d = decoder.as_ref().map_or(0, |dec| dec.latent_dim());
        let timing = TimingModel {
            clock: ClockMode::Virtual,
            t_d: sec.t_d,
            t_o: ctx.nominal_t_o(space, &sec.nominal_t_o),
        };
        let dao = FullDaoSpace::with_cells(dose_dao_cells(&conformal, &sec.geometry));
        let trials: Vec<DoseTrial> = (0..sec.trials)
            .map(|i| {
                let cfg = AnnealConfig {
                    seed: trial_seed(sec.anneal.seed, i),
                    ..sec.anneal
                };
                match &decoder {
                    None => dose_trial(
                        SearchSpace::FullDao(&dao),
                        &case,
                        State::Cells(conformal.to_vec()),
                        &stopping,
                        &timing,
                        &cfg,
                    ),
                    Some(dec) => {
                        let space = LatentSpace::new(dec.as_ref());
                        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed ^ 0x5EED);
                        let init = space.initial_state(&mut rng);
                        dose_trial(SearchSpace::Latent(space), &case, init, &stopping, &timing, &cfg)
                    }
                }
            })
            .collect::<crate::Result<_>>()?;
        let reductions: Vec<f64> = trials.iter().map(DoseTrial::relative_reduction).collect();
        let initial: Vec<f64> = trials.iter().map(|t| t.initial_objective).collect();
        let finals: Vec<f64> = trials.iter().map(|t| t.final_objective).collect();
        let se = if trials.len() > 1 {
            bootstrap_median_se(&reductions, anneal::BOOTSTRAP_RESAMPLES, ctx.cfg.seed)
        } else {
            f64::NAN
        };
        rows.push(format!(
            "{space},{d},{},{},{},{},{},{se}",
            trials.len(),
            sec.iterations,
            median(&initial),
            median(&finals),
            median(&reductions)
        ));
        for (i, t) in trials.iter().enumerate() {
            let rel = format!("dose/traces/{space}_trial{i:02}.csv");
            ctx.write(&rel, &format!("# config_sha256={}\n{}", ctx.digest, trace_string(&t.metrics)?))?;
        }
        series.push(Series {
            label: trace_label(space, sec.t_d),
            points: best_curve(&trials[0].metrics),
        });
        let best = &trials[0];
        let dose = combine(&case.unit_doses(&best.metrics.best_arc)?, &best.final_weights);
        let [nx, ny, nz] = sec.phantom.extents;
        let mid = nz / 2;
        slices.push(Panel {
            label: space.clone(),
            rows: ny,
            cols: nx,
            values: (0..ny)
                .flat_map(|iy| (0..nx).map(move |ix| (ix, iy)))
                .map(|(ix, iy)| dose[sec.phantom.index(ix, iy, mid)])
                .collect(),
        });
        eprintln!("{space}: median relative reduction {:.4}", median(&reductions));
    }
    ctx.write_csv("dose/summary.csv", DOSE_SUMMARY_HEADER, &rows)?;
    let chart = LineChart {
        title: "Dose objective, first trial".into(),
        x_label: "virtual time (s)".into(),
        y_label: "best objective".into(),
        log_y: true,
        series,
    };
    ctx.write("dose/convergence.svg", &chart.render(&ctx.digest))?;
    ctx.write(
        "dose/dose_slice.svg",
        &heatmap_strip("Axial dose through the isocenter", &slices, 12.0, true, &ctx.digest),
    )
}

fn traverse(ctx: &Ctx, args: &TraverseArgs) -> CliResult<()> {
    let sec = &ctx.cfg.traverse;
    let name = args.model.clone().unwrap_or_else(|| sec.model.clone());
    let dim = args.dim.unwrap_or(sec.dim);
    let range = args.range.as_ref().map_or(sec.range, |r| (r[0], r[1]));
    let frames = args.frames.unwrap_or(sec.frames);
    if frames == 0 {
        return Err(CliError::config("traversal needs at least one frame"));
    }
    let ckpt = ctx.checkpoint(&name)?;
    let d = ckpt.model().latent_dim();
    if dim >= d {
        return Err(CliError::config(format!("dimension {dim} out of range for d = {d}")));
    }
    let decoded = latent_traversal(&ckpt, &vec![0.0; d], dim, range, frames)?;
    let panels: Vec<Panel> = decoded
        .iter()
        .enumerate()
        .map(|(i, x): (usize, &NormalizedArc)| {
            let t = if frames == 1 { 0.0 } else { i as f64 / (frames - 1) as f64 };
            Panel {
                label: format!("{:+.2}", range.0 + t * (range.1 - range.0)),
                rows: 2 * N_LEAVES,
                cols: N_LEAVES,
                values: x.to_mm(ckpt.normalization()),
            }
        })
        .collect();
    let title = format!("{name}: latent dimension {dim}, positions over gaps (mm)");
    ctx.write("traverse.svg", &heatmap_strip(&title, &panels, 1.5, true, &ctx.digest))
}

fn markdown_table(csv: &str) -> String {
    let mut lines = csv.lines().filter(|l| !l.starts_with('#'));
    let mut out = String::new();
    if let Some(h) = lines.next() {
        let cols: Vec<&str> = h.split(',').collect();
        let _ = writeln!(out, "| {} |", cols.join(" | "));
        let _ = writeln!(out, "|{}", "---|".repeat(cols.len()));
    }
    for l in lines {
        let _ = writeln!(out, "| {} |", l.split(',').collect::<Vec<_>>().join(" | "));
    }
    out
}

fn report(ctx: &Ctx) -> CliResult<()> {
    let sections = [
        ("PCA dimension sweep", "pca_sweep.csv"),
        ("Reconstruction error", "recon_errors.csv"),
        ("Position-based optimization", "position/summary.csv"),
        ("Dose-based optimization", "dose/summary.csv"),
    ];
    let mut body = format!("# Results\n\nConfiguration digest `{}`.\n", ctx.digest);
    let mut found = 0;
    for (title, rel) in sections {
        if let Ok(text) = fs::read_to_string(ctx.path(rel)) {
            found += 1;
            let _ = write!(body, "\n## {title}\n\n{}", markdown_table(&text));
        }
    }
    if found == 0 {
        return Err(CliError::missing(format!("no result tables under {}", ctx.cfg.out.display())));
    }
    ctx.write("report.md", &body)
}

/// Whether two directories hold identical CSV files (same relative paths).
pub fn same_csv_outputs(a: &Path, b: &Path) -> std::io::Result<bool> {
    fn collect(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for e in fs::read_dir(dir)? {
            let p = e?.path();
            if p.is_dir() {
                collect(root, &p, out)?;
            } else if p.extension().is_some_and(|x| x == "csv") {
                out.push(p.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
        Ok(())
    }
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    collect(a, a, &mut fa)?;
    collect(b, b, &mut fb)?;
    fa.sort();
    fb.sort();
    if fa != fb {
        return Ok(false);
    }
    for rel in &fa {
        if fs::read(a.join(rel))? != fs::read(b.join(rel))? {
            return Ok(false);
        }
    }
    Ok(true)
}
