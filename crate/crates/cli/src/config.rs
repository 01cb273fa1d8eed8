//! Experiment configuration: file format, defaults and flag overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use randpercep::percep::{parse_structure, InitScheme, LevelSpec, PercepNetSpec, VGG_CHANNELS};
use randpercep::tasks::{RestoreParams, ShapesParams};

use crate::error::CliError;

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "RANDPERCEP_OUT";
pub const DEFAULT_OUT: &str = "randpercep-out";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    DiagnoseVariance,
    ProbeInit,
    TrainCompare,
    SweepStructure,
    SweepKernel,
    SweepLevels,
    DumpDataset,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::DiagnoseVariance => "diagnose-variance",
            Command::ProbeInit => "probe-init",
            Command::TrainCompare => "train-compare",
            Command::SweepStructure => "sweep-structure",
            Command::SweepKernel => "sweep-kernel",
            Command::SweepLevels => "sweep-levels",
            Command::DumpDataset => "dump-dataset",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Shapes,
    Restore,
}

/// Loss-network layout shared by every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSettings {
    /// Per-block conv counts, e.g. "2,2,3,3,3".
    pub structure: String,
    pub channels: Vec<usize>,
    pub kernel_size: usize,
    pub init: InitScheme,
}

impl Default for NetSettings {
    fn default() -> Self {
        NetSettings {
            structure: "2,2,3,3,3".into(),
            channels: VGG_CHANNELS.to_vec(),
            kernel_size: 3,
            init: InitScheme::Calibrated,
        }
    }
}

impl NetSettings {
    pub fn spec(&self, in_channels: usize, seed: u64) -> Result<PercepNetSpec, CliError> {
        let spec = PercepNetSpec {
            blocks: parse_structure(&self.structure)?,
            channels: self.channels.clone(),
            kernel_size: self.kernel_size,
            in_channels,
            init: self.init,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSettings {
    pub lambda: f64,
    pub levels: LevelSpec,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            lambda: 0.1,
            levels: LevelSpec::Final,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub task: TaskKind,
    pub base_lr: f64,
    pub max_iter: usize,
    pub batch_size: usize,
    pub poly_power: f64,
    pub eval_every: usize,
    pub train_count: usize,
    pub eval_count: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            task: TaskKind::Shapes,
            base_lr: 0.01,
            max_iter: 2000,
            batch_size: 1,
            poly_power: 0.9,
            eval_every: 250,
            train_count: 200,
            eval_count: 50,
        }
    }
}

/// Inputs of the variance, discrepancy and stability probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSettings {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub depth: usize,
    pub schemes: Vec<InitScheme>,
    /// Step size of the nearby-input discrepancy check.
    pub perturbation: f64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            height: 64,
            width: 64,
            in_channels: 4,
            depth: 16,
            schemes: InitScheme::table(),
            perturbation: 0.01,
        }
    }
}

/// Arms of the sweep commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub structures: Vec<String>,
    pub kernels: Vec<usize>,
    pub levels: Vec<LevelSpec>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            structures: vec!["1,1,1,1,1".into(), "2,2,3,3,3".into(), "2,2,4,4,4".into()],
            kernels: vec![1, 3, 5, 7],
            levels: vec![LevelSpec::Final, LevelSpec::Equal, LevelSpec::Pyramid],
        }
    }
}

/// Everything a command needs. Serialized verbatim into every output
/// except for `out_dir`, so an output re-runs to the same files wherever
/// it is written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Command,
    pub seeds: Vec<u64>,
    /// Worker threads for independent runs; 1 runs them in order.
    pub jobs: usize,
    pub net: NetSettings,
    pub loss: LossSettings,
    pub train: TrainSettings,
    pub shapes: ShapesParams,
    pub restore: RestoreParams,
    pub probe: ProbeSettings,
    pub sweep: SweepSettings,
    #[serde(skip_serializing)]
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            command: Command::TrainCompare,
            seeds: vec![1, 2, 3, 4, 5],
            jobs: 1,
            net: NetSettings::default(),
            loss: LossSettings::default(),
            train: TrainSettings::default(),
            shapes: ShapesParams::default(),
            restore: RestoreParams::default(),
            probe: ProbeSettings::default(),
            sweep: SweepSettings::default(),
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Reads a TOML config, or JSON when the extension is `.json`. A JSON
    /// file may also be a command summary, whose `config` key is used, and
    /// a `.csv` output is read from its `# config=` first line.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        if path.extension().is_some_and(|e| e == "csv") {
            let json = text
                .lines()
                .next()
                .and_then(|l| l.strip_prefix("# config="))
                .ok_or_else(|| {
                    CliError::Config(format!("{}: no embedded config", path.display()))
                })?;
            return serde_json::from_str(json)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())));
        }
        if path.extension().is_some_and(|e| e == "json") {
            let value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let value = match value.get("config") {
                Some(inner) if value.get("command").is_none() => inner.clone(),
                _ => value,
            };
            serde_json::from_value(value)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
        } else {
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seed list is empty".into()));
        }
        if self.jobs == 0 {
            return Err(CliError::Config("jobs must be >= 1".into()));
        }
        if !(self.loss.lambda >= 0.0 && self.loss.lambda.is_finite()) {
            return Err(CliError::Config(format!(
                "lambda must be >= 0, got {}",
                self.loss.lambda
            )));
        }
        if !(self.train.base_lr >= 0.0 && self.train.base_lr.is_finite()) {
            return Err(CliError::Config(format!(
                "base_lr must be >= 0, got {}",
                self.train.base_lr
            )));
        }
        if self.train.max_iter == 0 || self.train.batch_size == 0 || self.train.eval_every == 0 {
            return Err(CliError::Config(
                "max_iter, batch_size and eval_every must be >= 1".into(),
            ));
        }
        self.net.spec(self.probe.in_channels, 0)?;
        Ok(())
    }

    /// Output directory: the configured one, else `$RANDPERCEP_OUT`, else
    /// `randpercep-out/<command>`.
    pub fn resolved_out_dir(&self) -> PathBuf {
        if let Some(dir) = &self.out_dir {
            return dir.clone();
        }
        match std::env::var_os(OUT_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir).join(self.command.name()),
            _ => PathBuf::from(DEFAULT_OUT).join(self.command.name()),
        }
    }
}

/// Parses "1,2,3", "1..5" (inclusive) or a mix such as "1..3,10".
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Config(format!("invalid seed list {s:?}"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a.trim().parse().map_err(|_| bad())?;
            let b: u64 = b
                .trim()
                .trim_start_matches('=')
                .parse()
                .map_err(|_| bad())?;
            if b < a {
                return Err(bad());
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

/// Parses a scheme list: "all" or `;`-separated scheme names.
pub fn parse_schemes(s: &str) -> Result<Vec<InitScheme>, CliError> {
    if s.trim() == "all" {
        return Ok(InitScheme::table());
    }
    s.split(';')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(CliError::from))
        .collect()
}
