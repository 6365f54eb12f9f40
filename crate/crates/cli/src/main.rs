use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use gensense::baseline::{encode_checkpoint, load_checkpoint};
use gensense::config::{ModalitySpec, RunConfig};
use gensense::data::load_dataset;
use gensense::genunits::{encode_gen_net, load_gen_net};
use gensense::pipeline::{
    baseline_stage, eval_stage, gen_data_stage, head_stage, rank_stage, run_pipeline, stage, task_stage,
    units_stage, ArtifactWriter, BASELINE_METHOD, GEN_FILE, GENERATIVE_METHOD, HEAD_FILE, REPORT_FILE, ROWS_FILE,
    STATS_FILE, TABLE_FILE,
};
use gensense::susceptibility::SusceptibilityReport;
use gensense::transfer::{encode_head, load_head, EvalTable};

#[derive(Parser)]
#[command(name = "gensense", version, about = "Generative sensing experiments on synthetic shape images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus per-key overrides; flags win over the file.
#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file; reference values fill missing keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// Blur levels, e.g. 0,1,2,3
    #[arg(long)]
    sigma_levels: Option<String>,
    /// Keep the k most susceptible channels
    #[arg(long, conflicts_with = "threshold")]
    top_k: Option<usize>,
    /// Keep channels whose accuracy drop exceeds this value
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Regularizer kind: l1 or l2
    #[arg(long)]
    reg: Option<String>,
    /// Master seed
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    unit_width: Option<usize>,
    /// Comma-separated modalities, e.g. visible,ir:invert
    #[arg(long)]
    modalities: Option<String>,
    #[arg(long)]
    baseline_epochs: Option<usize>,
    #[arg(long)]
    unit_epochs: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
        }
        let overrides = [
            ("sigma_levels", self.sigma_levels.clone()),
            ("top_k", self.top_k.map(|v| v.to_string())),
            ("threshold", self.threshold.map(|v| v.to_string())),
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("reg", self.reg.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
            ("unit_width", self.unit_width.map(|v| v.to_string())),
            ("modalities", self.modalities.clone()),
            ("baseline_epochs", self.baseline_epochs.map(|v| v.to_string())),
            ("unit_epochs", self.unit_epochs.map(|v| v.to_string())),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                cfg.set(key, &v).with_context(|| format!("--{}", key.replace('_', "-")))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Inputs shared by the per-modality stages.
#[derive(Args, Debug, Clone)]
struct StageArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset directory written by gen-data
    #[arg(long)]
    data: PathBuf,
    /// Baseline checkpoint written by train-baseline
    #[arg(long)]
    checkpoint: PathBuf,
    /// Modality tag from the config
    #[arg(long, default_value = "visible")]
    modality: String,
    /// Directory holding this modality's artifacts
    #[arg(long)]
    dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset as IDX files
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the baseline classifier on clean images
    TrainBaseline {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint file to write
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the modality's linear head and rank channel susceptibility
    Rank(StageArgs),
    /// Build and train generative units on the selected channels
    TrainUnits(StageArgs),
    /// Evaluate baseline and generative extractors under every blur level
    Eval(StageArgs),
    /// Merge per-modality rows into one table plus statistics
    Report {
        /// rows.csv files written by eval
        #[arg(long, required = true, num_args = 1..)]
        rows: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage end to end
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn writer_for_file(path: &Path) -> Result<(ArtifactWriter, String)> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| anyhow!("bad output path {}", path.display()))?;
    Ok((ArtifactWriter::new(parent)?, name.to_string()))
}

fn modality(cfg: &RunConfig, tag: &str) -> Result<(usize, ModalitySpec)> {
    cfg.modalities
        .iter()
        .position(|m| m.tag == tag)
        .map(|i| (i, cfg.modalities[i].clone()))
        .ok_or_else(|| {
            let known: Vec<_> = cfg.modalities.iter().map(|m| m.tag.as_str()).collect();
            anyhow!("modality `{tag}` is not configured (have {})", known.join(", "))
        })
}

fn rank(args: &StageArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let (_, m) = modality(&cfg, &args.modality)?;
    let dataset = load_dataset(&args.data)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let mut w = ArtifactWriter::new(&args.dir)?;
    let head = stage("fit-head", || head_stage(&cfg, &ckpt, &dataset, &m))?;
    w.write(HEAD_FILE, &encode_head(&head))?;
    let task = stage("fit-head", || task_stage(&ckpt, &head))?;
    let report = stage("rank", || rank_stage(&cfg, &task, &dataset, &m))?;
    w.write(REPORT_FILE, report.to_text().as_bytes())?;
    print!("{}", report.to_text());
    Ok(())
}

fn train_units(args: &StageArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let (i, m) = modality(&cfg, &args.modality)?;
    let dataset = load_dataset(&args.data)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let head = load_head(&args.dir.join(HEAD_FILE))?;
    let report = SusceptibilityReport::from_text(&fs::read_to_string(args.dir.join(REPORT_FILE))?)?;
    let task = task_stage(&ckpt, &head)?;
    let (gen_net, objective) = stage("train-units", || units_stage(&cfg, i, task, &report, &dataset, &m))?;
    ArtifactWriter::new(&args.dir)?.write(GEN_FILE, &encode_gen_net(&gen_net))?;
    match objective {
        Some(e) => println!("final objective {e}"),
        None => println!("no channels selected; network left without units"),
    }
    Ok(())
}

fn eval(args: &StageArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let (_, m) = modality(&cfg, &args.modality)?;
    let dataset = load_dataset(&args.data)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let head = load_head(&args.dir.join(HEAD_FILE))?;
    let gen_net = load_gen_net(&args.dir.join(GEN_FILE))?;
    let rows = stage("eval", || eval_stage(&cfg, &ckpt, &head, &gen_net, &dataset, &m))?;
    let table = EvalTable::new(cfg.sigma_levels.clone(), rows.to_vec())?;
    ArtifactWriter::new(&args.dir)?.write(ROWS_FILE, table.to_csv().as_bytes())?;
    print!("{}", table.to_csv());
    Ok(())
}

fn report(rows: &[PathBuf], out: &Path) -> Result<()> {
    let mut merged: Option<EvalTable> = None;
    for path in rows {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let t = EvalTable::from_csv(&text).with_context(|| format!("in {}", path.display()))?;
        match merged.as_mut() {
            None => merged = Some(t),
            Some(m) if m.sigma_levels == t.sigma_levels => m.rows.extend(t.rows),
            Some(_) => bail!("{} uses different blur levels", path.display()),
        }
    }
    let table = merged.ok_or_else(|| anyhow!("no row files given"))?;
    let mut w = ArtifactWriter::new(out)?;
    w.write(TABLE_FILE, table.to_csv().as_bytes())?;
    let stats = table.stats_text(BASELINE_METHOD, GENERATIVE_METHOD)?;
    w.write(STATS_FILE, stats.as_bytes())?;
    print!("{}{stats}", table.to_csv());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = config.load()?;
            let mut w = ArtifactWriter::new(&out)?;
            stage("gen-data", || gen_data_stage(&cfg, &mut w, "."))?;
            info!("dataset written to {}", out.display());
        }
        Command::TrainBaseline { config, data, out } => {
            let cfg = config.load()?;
            let dataset = load_dataset(&data)?;
            let ckpt = stage("train-baseline", || baseline_stage(&cfg, &dataset))?;
            let (mut w, name) = writer_for_file(&out)?;
            w.write(&name, &encode_checkpoint(&ckpt))?;
            println!("final train loss {}", ckpt.meta.final_train_loss);
        }
        Command::Rank(args) => rank(&args)?,
        Command::TrainUnits(args) => train_units(&args)?,
        Command::Eval(args) => eval(&args)?,
        Command::Report { rows, out } => report(&rows, &out)?,
        Command::Run { config, out } => {
            let cfg = config.load()?;
            info!("config hash {}", cfg.hash());
            let result = run_pipeline(&cfg, &out)?;
            print!("{}", result.table.to_csv());
            print!("{}", fs::read_to_string(out.join(STATS_FILE))?);
        }
    }
    Ok(())
}
