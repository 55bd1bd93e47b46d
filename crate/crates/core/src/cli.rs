//! Command-line front end. Every command reads one config file (plus
//! `--set` overrides), works inside an output directory, and leaves a
//! `<command>.manifest.json` describing exactly what it read and wrote.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::backbone::{load_checkpoint, save_checkpoint, Backbone, CheckpointError};
use crate::config::{hex, ConfigError, ExperimentConfig, RawConfig};
use crate::data::{generate_shapeworld, load_dataset, save_dataset, split_classes, DataError, Dataset, Normalizer, Split};
use crate::metrics::{render_plot, render_table, write_report, EvalReport, MetricsError, PlotKind, ReportFormat};
use crate::pipelines::{
    ablate_how, ablate_where, evaluate, pretrain, simclr_pretrain, stage_probe, surgery_seed, EvalParams, Method,
    MethodSpec, PipelineError,
};
use crate::rerand::{rerandomize, RerandError, SurgeryReport};
use crate::rng;

#[derive(Debug, Parser)]
#[command(name = "refine", version, about = "Re-randomize upper backbone layers before few-shot fine-tuning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the base split in the source domain and the novel split in every configured domain
    GenData(Common),
    /// Supervised pre-training on the base split
    Pretrain(WithInputs),
    /// Re-randomize a checkpoint according to the [rerand] section
    Rerand(WithInputs),
    /// Contrastive training on unlabeled novel-split images
    Simclr(SimclrArgs),
    /// Few-shot evaluation of the configured method
    Eval(WithInputs),
    /// Linear probes on each stage of a frozen checkpoint
    ProbeStages(WithInputs),
    /// ReFine under each configured re-randomization preset
    AblateWhere(WithInputs),
    /// ReFine (topmost) under each configured distribution
    AblateHow(WithInputs),
    /// Render a table and plot from saved JSON reports
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config file
    #[arg(long, value_name = "FILE")]
    pub config: PathBuf,
    /// Override one config key, e.g. `--set finetune.steps=50` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Override the root seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; created if missing
    #[arg(long, value_name = "DIR", default_value = "runs")]
    pub out: PathBuf,
    /// Worker threads for episode loops (results do not depend on it)
    #[arg(long, env = "REFINE_WORKERS", hide_env_values = true, value_name = "N")]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct WithInputs {
    #[command(flatten)]
    pub common: Common,
    /// Input checkpoint [default: OUT/pretrained.rfck]
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Input dataset [default: the base split for pretrain, else the novel split of data.target]
    #[arg(long, value_name = "FILE")]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimclrArgs {
    #[command(flatten)]
    pub inputs: WithInputs,
    /// Start from a freshly built backbone instead of a checkpoint
    #[arg(long, conflicts_with = "checkpoint")]
    pub fresh: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub common: Common,
    /// JSON report files written by eval, probe-stages or the ablations
    #[arg(long = "input", value_name = "FILE", required = true)]
    pub inputs: Vec<PathBuf>,
    /// Plot layout
    #[arg(long, value_enum, default_value = "bars")]
    pub plot: PlotChoice,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum PlotChoice {
    Trend,
    Bars,
}

/// Failure classes, each with its own exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Io(_) | MetricsError::Parse(_) | MetricsError::Csv(_) => CliError::Data(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<RerandError> for CliError {
    fn from(e: RerandError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Diverged { .. } => CliError::Numeric(e.to_string()),
            PipelineError::Optim(crate::optim::OptimError::NonFiniteGrad(_)) => CliError::Numeric(e.to_string()),
            PipelineError::Data(d) => d.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<crate::backbone::BackboneError> for CliError {
    fn from(e: crate::backbone::BackboneError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

/// A file read or written by a run.
#[derive(Clone, Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub bytes: u64,
    pub crc32: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        Ok(Self {
            path: path.display().to_string(),
            bytes: bytes.len() as u64,
            crc32: format!("{:08x}", crc32fast::hash(&bytes)),
            sha256: hex(&Sha256::digest(&bytes)),
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Seeds {
    pub root: u64,
    pub surgery: u64,
}

/// Record of one command invocation.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: String,
    /// SHA-256 of the effective configuration, overrides included.
    pub config_digest: String,
    /// Effective configuration in canonical form.
    pub config: String,
    pub overrides: Vec<String>,
    pub seeds: Seeds,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub surgery: Option<SurgeryReport>,
    /// Batch norm uses batch statistics (and updates its running averages)
    /// while fitting the support set; the query set sees running averages.
    pub finetune_bn_train_mode: bool,
    /// Command-specific results, e.g. pre-training losses.
    pub summary: serde_json::Value,
    pub wall_time_secs: f64,
}

struct Run {
    command: &'static str,
    config_path: PathBuf,
    raw: RawConfig,
    cfg: ExperimentConfig,
    overrides: Vec<String>,
    out: PathBuf,
    workers: usize,
    started: Instant,
    inputs: Vec<FileDigest>,
    outputs: Vec<FileDigest>,
    surgery: Option<SurgeryReport>,
    summary: serde_json::Value,
}

impl Run {
    fn start(command: &'static str, c: &Common) -> Result<Self, CliError> {
        let started = Instant::now();
        let mut raw = RawConfig::load(&c.config).map_err(|e| match e {
            ConfigError::Io(io) => CliError::Config(format!("{}: {io}", c.config.display())),
            other => other.into(),
        })?;
        let mut overrides = c.set.clone();
        if let Some(seed) = c.seed {
            overrides.push(format!("seed={seed}"));
        }
        for o in &overrides {
            raw.set(o)?;
        }
        let cfg = ExperimentConfig::from_raw(&raw)?;
        std::fs::create_dir_all(&c.out).map_err(|e| io_err(&c.out, e))?;
        Ok(Self {
            command,
            config_path: c.config.clone(),
            workers: c.workers.unwrap_or(cfg.eval.workers).max(1),
            raw,
            cfg,
            overrides,
            out: c.out.clone(),
            started,
            inputs: Vec::new(),
            outputs: Vec::new(),
            surgery: None,
            summary: serde_json::Value::Null,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn data_dir(&self) -> PathBuf {
        self.out.join("data")
    }

    fn base_path(&self) -> PathBuf {
        self.data_dir().join(format!("base-{}.rfds", self.cfg.data.source))
    }

    fn novel_path(&self, domain: &str) -> PathBuf {
        self.data_dir().join(format!("novel-{domain}.rfds"))
    }

    fn read_dataset(&mut self, path: &Path) -> Result<Dataset, CliError> {
        let ds = load_dataset(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        self.inputs.push(FileDigest::of(path)?);
        Ok(ds)
    }

    fn read_checkpoint(&mut self, path: &Path) -> Result<Backbone, CliError> {
        let reg = load_checkpoint(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        self.inputs.push(FileDigest::of(path)?);
        Ok(Backbone::from_registry(reg, self.cfg.backbone.input_size)?)
    }

    fn wrote(&mut self, path: &Path) -> Result<(), CliError> {
        self.outputs.push(FileDigest::of(path)?);
        Ok(())
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        let p = self.path(name);
        std::fs::write(&p, text).map_err(|e| io_err(&p, e))?;
        self.wrote(&p)
    }

    /// Input normalization is always fitted on the source base split, so that
    /// the checkpoint sees target images through the same lens it was
    /// trained with.
    fn normalizer(&mut self) -> Result<Normalizer, CliError> {
        let path = self.base_path();
        let base = self.read_dataset(&path)?;
        Ok(Normalizer::fit(&base))
    }

    fn params(&self, k: usize) -> EvalParams {
        let e = &self.cfg.eval;
        EvalParams {
            n: e.n,
            k,
            k_q: e.k_q,
            tasks: e.tasks,
            seed: self.cfg.seed,
            workers: self.workers,
            source: self.cfg.data.source.clone(),
        }
    }

    fn write_reports(&mut self, stem: &str, reports: &[EvalReport], plot: Option<PlotKind>) -> Result<(), CliError> {
        for (ext, format) in [("csv", ReportFormat::Csv), ("json", ReportFormat::Json)] {
            let p = self.path(&format!("{stem}.{ext}"));
            write_report(reports, format, &p)?;
            self.wrote(&p)?;
        }
        if let Some(kind) = plot {
            let svg = render_plot(reports, kind)?;
            self.write_text(&format!("{stem}.svg"), &svg)?;
        }
        print!("{}", render_table(reports));
        Ok(())
    }

    fn finish(self) -> Result<RunManifest, CliError> {
        let m = RunManifest {
            command: self.command.into(),
            config_path: self.config_path.display().to_string(),
            config_digest: self.raw.digest(),
            config: self.raw.canonical(),
            overrides: self.overrides,
            seeds: Seeds { root: self.cfg.seed, surgery: surgery_seed(self.cfg.seed) },
            inputs: self.inputs,
            outputs: self.outputs,
            surgery: self.surgery,
            finetune_bn_train_mode: true,
            summary: self.summary,
            wall_time_secs: self.started.elapsed().as_secs_f64(),
        };
        let p = self.out.join(format!("{}.manifest.json", self.command));
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        std::fs::write(&p, text + "\n").map_err(|e| io_err(&p, e))?;
        Ok(m)
    }
}

fn gen_data(c: &Common) -> Result<RunManifest, CliError> {
    let mut run = Run::start("gen-data", c)?;
    let cfg = run.cfg.clone();
    let d = &cfg.data;
    let (base, novel) = split_classes(d.base_classes, d.novel_classes, rng::derive_seed(cfg.seed, "data/classes", 0))?;
    std::fs::create_dir_all(run.data_dir()).map_err(|e| io_err(&run.data_dir(), e))?;
    let source = cfg.domain(&d.source).expect("validated domain");
    let seed = rng::derive_seed(cfg.seed, "data/base", 0);
    let ds = generate_shapeworld(source, &base, d.base_per_class, d.image_size, Split::Base, seed)?;
    let p = run.base_path();
    save_dataset(&ds, &p)?;
    run.wrote(&p)?;
    let mut domains = vec![d.source.clone()];
    for t in d.targets.iter().chain([&d.target]) {
        if !domains.contains(t) {
            domains.push(t.clone());
        }
    }
    for name in &domains {
        let spec = cfg.domain(name).expect("validated domain");
        // every domain renders the same novel images before its transforms
        let seed = rng::derive_seed(cfg.seed, "data/novel", 0);
        let ds = generate_shapeworld(spec, &novel, d.novel_per_class, d.image_size, Split::Novel, seed)?;
        let p = run.novel_path(name);
        save_dataset(&ds, &p)?;
        run.wrote(&p)?;
    }
    run.summary = serde_json::json!({ "base_classes": base, "novel_classes": novel, "novel_domains": domains });
    run.finish()
}

fn cmd_pretrain(a: &WithInputs) -> Result<RunManifest, CliError> {
    let mut run = Run::start("pretrain", &a.common)?;
    let path = a.data.clone().unwrap_or_else(|| run.base_path());
    let ds = run.read_dataset(&path)?;
    let norm = Normalizer::fit(&ds);
    let out = match pretrain(&run.cfg.backbone, &run.cfg.pretrain, &ds, &norm) {
        Err(PipelineError::Diverged { epoch, reason, last_good }) => {
            let p = run.path("pretrained.last-good.rfck");
            save_checkpoint(&last_good, &p)?;
            return Err(CliError::Numeric(format!(
                "training diverged in epoch {epoch}: {reason}; last good weights saved to {}",
                p.display()
            )));
        }
        r => r?,
    };
    let p = run.path("pretrained.rfck");
    save_checkpoint(out.backbone.registry(), &p)?;
    run.wrote(&p)?;
    println!("train accuracy {:.4}", out.train_accuracy);
    run.summary = serde_json::json!({ "epoch_losses": out.epoch_losses, "train_accuracy": out.train_accuracy });
    run.finish()
}

fn checkpoint_or_default(run: &Run, a: &WithInputs) -> PathBuf {
    a.checkpoint.clone().unwrap_or_else(|| run.path("pretrained.rfck"))
}

fn cmd_rerand(a: &WithInputs) -> Result<RunManifest, CliError> {
    let mut run = Run::start("rerand", &a.common)?;
    let path = checkpoint_or_default(&run, a);
    let mut model = run.read_checkpoint(&path)?;
    let policy = run.cfg.rerand.policy(&run.cfg.backbone, surgery_seed(run.cfg.seed));
    println!("{policy}");
    let report = rerandomize(model.registry_mut(), &policy)?;
    for p in &report.touched {
        println!("  {p}");
    }
    let p = run.path("rerand.rfck");
    save_checkpoint(model.registry(), &p)?;
    run.wrote(&p)?;
    run.summary = serde_json::json!({ "policy": policy.to_string() });
    run.surgery = Some(report);
    run.finish()
}

fn cmd_simclr(a: &SimclrArgs) -> Result<RunManifest, CliError> {
    let mut run = Run::start("simclr", &a.inputs.common)?;
    let start = if a.fresh {
        Backbone::build(run.cfg.backbone.clone(), run.cfg.seed)?
    } else {
        let path = checkpoint_or_default(&run, &a.inputs);
        run.read_checkpoint(&path)?
    };
    let norm = run.normalizer()?;
    let path = a.inputs.data.clone().unwrap_or_else(|| run.novel_path(&run.cfg.data.target));
    let ds = run.read_dataset(&path)?;
    let out = simclr_pretrain(&start, &ds, &run.cfg.simclr, &norm)?;
    let p = run.path("simclr.rfck");
    save_checkpoint(out.backbone.registry(), &p)?;
    run.wrote(&p)?;
    run.summary = serde_json::json!({ "epoch_losses": out.epoch_losses, "first_batch_loss": out.first_batch_loss });
    run.finish()
}

/// Checkpoint, normalizer and evaluation split shared by the evaluation
/// commands.
fn eval_inputs(run: &mut Run, a: &WithInputs) -> Result<(Backbone, Normalizer, Dataset), CliError> {
    let path = checkpoint_or_default(run, a);
    let model = run.read_checkpoint(&path)?;
    let norm = run.normalizer()?;
    let path = a.data.clone().unwrap_or_else(|| run.novel_path(&run.cfg.data.target));
    let ds = run.read_dataset(&path)?;
    Ok((model, norm, ds))
}

fn method_spec(run: &Run) -> MethodSpec {
    match run.cfg.eval.method {
        Method::Linear => MethodSpec::linear(),
        Method::Refine => MethodSpec::refine(run.cfg.rerand.policy(&run.cfg.backbone, surgery_seed(run.cfg.seed))),
        m => MethodSpec::full(m),
    }
}

fn cmd_eval(a: &WithInputs) -> Result<RunManifest, CliError> {
    let mut run = Run::start("eval", &a.common)?;
    let (model, norm, ds) = eval_inputs(&mut run, a)?;
    let spec = method_spec(&run);
    let params = run.params(run.cfg.eval.k);
    let ev = evaluate(&model, &ds, &norm, &spec, &params, &run.cfg.finetune)?;
    run.write_reports("eval", std::slice::from_ref(&ev.report), None)?;
    run.surgery = ev.surgery;
    run.finish()
}

fn cmd_probe(a: &WithInputs) -> Result<RunManifest, CliError> {
    let mut run = Run::start("probe-stages", &a.common)?;
    let (model, norm, ds) = eval_inputs(&mut run, a)?;
    let params = run.params(run.cfg.eval.k);
    let reports = stage_probe(&model, &ds, &norm, &params, &run.cfg.finetune)?;
    run.write_reports("probe-stages", &reports, Some(PlotKind::StageTrend))?;
    run.finish()
}

fn cmd_ablate(a: &WithInputs, what: &'static str) -> Result<RunManifest, CliError> {
    let mut run = Run::start(what, &a.common)?;
    let (model, norm, ds) = eval_inputs(&mut run, a)?;
    let mut reports = Vec::new();
    for &k in &run.cfg.ablate.shots {
        let params = run.params(k);
        let ft = &run.cfg.finetune;
        let rows = if what == "ablate-where" {
            ablate_where(&model, &ds, &norm, &run.cfg.ablate.presets, &params, ft)?
        } else {
            ablate_how(&model, &ds, &norm, &run.cfg.ablate.distributions, &params, ft)?
        };
        reports.extend(rows);
    }
    run.write_reports(what, &reports, Some(PlotKind::AblationBars))?;
    run.finish()
}

fn cmd_report(a: &ReportArgs) -> Result<RunManifest, CliError> {
    let mut run = Run::start("report", &a.common)?;
    let mut reports: Vec<EvalReport> = Vec::new();
    for path in &a.inputs {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut rs: Vec<EvalReport> = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{}: not a JSON report list: {e}", path.display())))?;
        run.inputs.push(FileDigest::of(path)?);
        reports.append(&mut rs);
    }
    let kind = match a.plot {
        PlotChoice::Trend => PlotKind::StageTrend,
        PlotChoice::Bars => PlotKind::AblationBars,
    };
    let table = render_table(&reports);
    print!("{table}");
    run.write_text("report.txt", &table)?;
    run.write_text("report.svg", &render_plot(&reports, kind)?)?;
    run.finish()
}

/// Runs one parsed invocation.
pub fn execute(cli: &Cli) -> Result<RunManifest, CliError> {
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Rerand(a) => cmd_rerand(a),
        Command::Simclr(a) => cmd_simclr(a),
        Command::Eval(a) => cmd_eval(a),
        Command::ProbeStages(a) => cmd_probe(a),
        Command::AblateWhere(a) => cmd_ablate(a, "ablate-where"),
        Command::AblateHow(a) => cmd_ablate(a, "ablate-how"),
        Command::Report(a) => cmd_report(a),
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code; usage errors count as configuration errors.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}
