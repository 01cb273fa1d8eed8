//! Command-line driver: variance diagnostics, init-scheme probes, paired
//! training comparisons and ablation sweeps, all emitted as CSV and JSON.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{parse_schemes, parse_seeds, Command, ExperimentConfig, TaskKind};
pub use error::{CliError, ErrorRecord};
use output::OutputDir;

#[derive(Debug, Parser)]
#[command(
    name = "randpercep",
    version,
    about = "Randomly-weighted perceptual loss experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Per-layer variance profile and discrepancy bound of one loss network.
    DiagnoseVariance(Overrides),
    /// Stability verdict (stable / exploded / vanished) per init scheme.
    ProbeInit(Overrides),
    /// Baseline vs. perceptual-loss training on paired seeds.
    TrainCompare(Overrides),
    /// One comparison per block structure.
    SweepStructure(Overrides),
    /// One comparison per loss-network kernel size.
    SweepKernel(Overrides),
    /// One comparison per level weighting.
    SweepLevels(Overrides),
    /// Write the generated datasets as flat binary tensors plus a manifest.
    DumpDataset(Overrides),
    /// Re-run the config embedded in a previous summary.json.
    Rerun {
        summary: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Flags shared by every command. Each one overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML (or JSON) config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory [default: $RANDPERCEP_OUT/<command> or randpercep-out/<command>].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seeds, e.g. "1,2,3" or "1..5".
    #[arg(long)]
    pub seeds: Option<String>,
    /// Worker threads for independent runs.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Loss-network block structure, e.g. "2,2,3,3,3".
    #[arg(long)]
    pub structure: Option<String>,
    /// Loss-network widths per block, comma-separated.
    #[arg(long)]
    pub channels: Option<String>,
    #[arg(long)]
    pub kernel_size: Option<usize>,
    /// calibrated | xavier_normal | gaussian(s) | uniform(a)
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    /// final | equal | pyramid | scales(a,b,...)
    #[arg(long)]
    pub levels: Option<String>,
    /// shapes | restore
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub train_count: Option<usize>,
    #[arg(long)]
    pub eval_count: Option<usize>,
    /// Image height for the datasets and probes.
    #[arg(long)]
    pub height: Option<usize>,
    /// Image width for the datasets and probes.
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Init schemes to probe: "all" or ';'-separated names.
    #[arg(long)]
    pub schemes: Option<String>,
    /// Conv depth of the stability probe.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Structures to sweep, ';'-separated.
    #[arg(long)]
    pub structures: Option<String>,
    /// Kernel sizes to sweep, comma-separated.
    #[arg(long)]
    pub kernels: Option<String>,
    /// Level weightings to sweep, ';'-separated.
    #[arg(long)]
    pub level_arms: Option<String>,
}

fn list<T: std::str::FromStr>(s: &str, sep: char, what: &str) -> Result<Vec<T>, CliError> {
    s.split(sep)
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse()
                .map_err(|_| CliError::Config(format!("invalid {what} {p:?}")))
        })
        .collect()
}

impl Overrides {
    /// File config (or defaults) with every given flag applied on top.
    pub fn resolve(&self, command: Command) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.command = command;
        if let Some(v) = &self.out {
            cfg.out_dir = Some(v.clone());
        }
        if let Some(v) = &self.seeds {
            cfg.seeds = parse_seeds(v)?;
        }
        if let Some(v) = self.jobs {
            cfg.jobs = v;
        }
        if let Some(v) = &self.structure {
            cfg.net.structure = v.clone();
        }
        if let Some(v) = &self.channels {
            cfg.net.channels = list(v, ',', "channel width")?;
        }
        if let Some(v) = self.kernel_size {
            cfg.net.kernel_size = v;
        }
        if let Some(v) = &self.init {
            cfg.net.init = v.parse()?;
        }
        if let Some(v) = self.lambda {
            cfg.loss.lambda = v;
        }
        if let Some(v) = &self.levels {
            cfg.loss.levels = v.parse()?;
        }
        if let Some(v) = &self.task {
            cfg.train.task = match v.as_str() {
                "shapes" => TaskKind::Shapes,
                "restore" => TaskKind::Restore,
                other => return Err(CliError::Config(format!("unknown task {other:?}"))),
            };
        }
        if let Some(v) = self.lr {
            cfg.train.base_lr = v;
        }
        if let Some(v) = self.max_iter {
            cfg.train.max_iter = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.eval_every {
            cfg.train.eval_every = v;
        }
        if let Some(v) = self.train_count {
            cfg.train.train_count = v;
        }
        if let Some(v) = self.eval_count {
            cfg.train.eval_count = v;
        }
        if let Some(v) = self.height {
            (cfg.shapes.height, cfg.restore.height, cfg.probe.height) = (v, v, v);
        }
        if let Some(v) = self.width {
            (cfg.shapes.width, cfg.restore.width, cfg.probe.width) = (v, v, v);
        }
        if let Some(v) = self.classes {
            cfg.shapes.n_classes = v;
        }
        if let Some(v) = &self.schemes {
            cfg.probe.schemes = parse_schemes(v)?;
        }
        if let Some(v) = self.depth {
            cfg.probe.depth = v;
        }
        if let Some(v) = &self.structures {
            cfg.sweep.structures = list(v, ';', "structure")?;
        }
        if let Some(v) = &self.kernels {
            cfg.sweep.kernels = list(v, ',', "kernel size")?;
        }
        if let Some(v) = &self.level_arms {
            cfg.sweep.levels = list(v, ';', "level weighting")?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// What a successful run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
}

/// Runs a resolved config, writing its outputs.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutcome, CliError> {
    cfg.validate()?;
    let dir = cfg.resolved_out_dir();
    let mut out = OutputDir::create(&dir, cfg)?;
    commands::dispatch(cfg, &mut out)?;
    Ok(RunOutcome {
        out_dir: dir,
        files: out.written().to_vec(),
    })
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let (command, o) = match &cli.command {
        CliCommand::DiagnoseVariance(o) => (Command::DiagnoseVariance, o),
        CliCommand::ProbeInit(o) => (Command::ProbeInit, o),
        CliCommand::TrainCompare(o) => (Command::TrainCompare, o),
        CliCommand::SweepStructure(o) => (Command::SweepStructure, o),
        CliCommand::SweepKernel(o) => (Command::SweepKernel, o),
        CliCommand::SweepLevels(o) => (Command::SweepLevels, o),
        CliCommand::DumpDataset(o) => (Command::DumpDataset, o),
        CliCommand::Rerun { summary, out } => {
            let mut cfg = ExperimentConfig::load(summary)?;
            cfg.out_dir = out.clone();
            cfg.validate()?;
            return Ok(cfg);
        }
    };
    o.resolve(command)
}

/// Parses `args`, runs the command and returns the process exit code. On
/// failure an [`ErrorRecord`] goes to stderr and, when possible, to
/// `error.json` in the output directory.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let message = text.trim().trim_start_matches("error: ").to_string();
            let record = CliError::Config(message).record(None);
            eprintln!(
                "{}",
                serde_json::to_string(&record).expect("record serializes")
            );
            return record.exit_code;
        }
    };
    let cfg = match resolve(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            let record = e.record(None);
            eprintln!(
                "{}",
                serde_json::to_string(&record).expect("record serializes")
            );
            return record.exit_code;
        }
    };
    match run(&cfg) {
        Ok(outcome) => {
            for f in &outcome.files {
                if f.extension().is_some_and(|e| e != "bin") {
                    println!("{}", f.display());
                }
            }
            0
        }
        Err(e) => {
            let record = e.record(Some(cfg.command.name()));
            let json = serde_json::to_string(&record).expect("record serializes");
            eprintln!("{json}");
            let dir = cfg.resolved_out_dir();
            if std::fs::create_dir_all(&dir).is_ok() {
                let _ = std::fs::write(dir.join("error.json"), format!("{json}\n"));
            }
            record.exit_code
        }
    }
}
