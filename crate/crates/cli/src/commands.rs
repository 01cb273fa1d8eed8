//! Command implementations. Each writes its CSV tables and a JSON summary.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use randpercep::diagnostics::{
    measure_discrepancy_bound, measure_variance_propagation, probe_stability, LayerVariance,
    ProbeInput, ProbeSettings as CoreProbeSettings, Verdict,
};
use randpercep::percep::LevelSpec;
use randpercep::tasks::{gen_restore, gen_shapes};
use randpercep::tensor::{mix_seed, write_tensor};
use randpercep::trainer::{train, Metric, RunMetrics, TaskData, TrainConfig};
use randpercep::Tensor;

use crate::config::{Command, ExperimentConfig, NetSettings, TaskKind};
use crate::error::CliError;
use crate::output::OutputDir;

const TRAIN_DATA_STREAM: u64 = 0xDA7A_0001;
const EVAL_DATA_STREAM: u64 = 0xDA7A_0002;
const PERCEP_NET_STREAM: u64 = 0x9E7C_0001;

pub fn dispatch(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<(), CliError> {
    match cfg.command {
        Command::DiagnoseVariance => diagnose_variance(cfg, out),
        Command::ProbeInit => probe_init(cfg, out),
        Command::TrainCompare => {
            let arms = vec![Arm {
                label: "percep".into(),
                net: cfg.net.clone(),
                levels: cfg.loss.levels.clone(),
            }];
            compare(cfg, out, arms)
        }
        Command::SweepStructure => {
            let arms = cfg
                .sweep
                .structures
                .iter()
                .map(|s| Arm {
                    label: s.clone(),
                    net: NetSettings {
                        structure: s.clone(),
                        ..cfg.net.clone()
                    },
                    levels: cfg.loss.levels.clone(),
                })
                .collect();
            compare(cfg, out, arms)
        }
        Command::SweepKernel => {
            let arms = cfg
                .sweep
                .kernels
                .iter()
                .map(|&k| Arm {
                    label: format!("k={k}"),
                    net: NetSettings {
                        kernel_size: k,
                        ..cfg.net.clone()
                    },
                    levels: cfg.loss.levels.clone(),
                })
                .collect();
            compare(cfg, out, arms)
        }
        Command::SweepLevels => {
            let arms = cfg
                .sweep
                .levels
                .iter()
                .map(|l| Arm {
                    label: l.to_string(),
                    net: cfg.net.clone(),
                    levels: l.clone(),
                })
                .collect();
            compare(cfg, out, arms)
        }
        Command::DumpDataset => dump_dataset(cfg, out),
    }
}

/// Runs `f(0..n)` on up to `jobs` threads; results keep index order.
fn run_indexed<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    if jobs <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(n) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("threads joined")
        .into_iter()
        .map(|r| r.expect("every index ran"))
        .collect()
}

fn probe_input(cfg: &ExperimentConfig) -> ProbeInput {
    ProbeInput {
        height: cfg.probe.height,
        width: cfg.probe.width,
    }
}

#[derive(Serialize)]
struct DiscrepancyRow {
    seed: u64,
    var_e1: f64,
    var_e1_prime: f64,
    product: f64,
    bound: f64,
    measured: f64,
    ratio: f64,
    max_near_ratio: f64,
    identical_is_zero: bool,
}

fn diagnose_variance(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let spec = cfg.net.spec(cfg.probe.in_channels, 0)?;
    let variance = measure_variance_propagation(&spec, &cfg.seeds, probe_input(cfg))?;
    let discrepancy =
        measure_discrepancy_bound(&spec, &cfg.seeds, probe_input(cfg), cfg.probe.perturbation)?;
    out.write_csv::<LayerVariance>("variance.csv", &variance.layers)?;
    let rows: Vec<DiscrepancyRow> = discrepancy
        .seeds
        .iter()
        .map(|s| DiscrepancyRow {
            seed: s.seed,
            var_e1: s.var_e1,
            var_e1_prime: s.var_e1_prime,
            product: s.product,
            bound: s.bound,
            measured: s.measured,
            ratio: s.ratio,
            max_near_ratio: s.near_ratios.iter().copied().fold(0.0, f64::max),
            identical_is_zero: s.identical_is_zero,
        })
        .collect();
    out.write_csv("discrepancy.csv", &rows)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        variance: &'a randpercep::diagnostics::VarianceReport,
        max_abs_log_ratio: f64,
        log_variance_slope: f64,
        discrepancy: &'a randpercep::diagnostics::DiscrepancyReport,
        max_discrepancy_ratio: f64,
    }
    out.write_summary(
        "summary.json",
        cfg,
        &Summary {
            variance: &variance,
            max_abs_log_ratio: variance.max_abs_log_ratio(),
            log_variance_slope: variance.log_variance_slope(),
            discrepancy: &discrepancy,
            max_discrepancy_ratio: discrepancy.max_ratio(),
        },
    )
}

#[derive(Serialize)]
struct TrialRow {
    init: String,
    depth: usize,
    structure: String,
    seed: u64,
    ratio: f64,
    verdict: Verdict,
}

#[derive(Serialize)]
struct VerdictRow {
    init: String,
    depth: usize,
    structure: String,
    median_ratio: f64,
    verdict: Verdict,
}

fn probe_init(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<(), CliError> {
    if cfg.probe.schemes.is_empty() {
        return Err(CliError::Config("no init schemes to probe".into()));
    }
    let settings = CoreProbeSettings {
        in_channels: cfg.probe.in_channels,
        input: probe_input(cfg),
    };
    let probes = run_indexed(cfg.probe.schemes.len(), cfg.jobs, |i| {
        probe_stability(cfg.probe.schemes[i], cfg.probe.depth, &cfg.seeds, settings)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let mut trials = Vec::new();
    let mut verdicts = Vec::new();
    for p in &probes {
        for ((&seed, &ratio), &verdict) in p
            .trial_seeds
            .iter()
            .zip(&p.trial_ratios)
            .zip(&p.trial_verdicts)
        {
            trials.push(TrialRow {
                init: p.init.clone(),
                depth: p.depth,
                structure: p.structure.clone(),
                seed,
                ratio,
                verdict,
            });
        }
        verdicts.push(VerdictRow {
            init: p.init.clone(),
            depth: p.depth,
            structure: p.structure.clone(),
            median_ratio: p.ratio,
            verdict: p.verdict,
        });
    }
    out.write_csv("trials.csv", &trials)?;
    out.write_csv("verdicts.csv", &verdicts)?;
    out.write_summary(
        "summary.json",
        cfg,
        &serde_json::json!({ "probes": probes }),
    )
}

/// Training data for one seed, shared by every arm of that seed.
pub fn task_data(cfg: &ExperimentConfig, seed: u64) -> Result<TaskData, CliError> {
    let (tr, ev) = (
        mix_seed(seed, TRAIN_DATA_STREAM),
        mix_seed(seed, EVAL_DATA_STREAM),
    );
    Ok(match cfg.train.task {
        TaskKind::Shapes => TaskData::Shapes {
            n_classes: cfg.shapes.n_classes,
            train: gen_shapes(tr, cfg.train.train_count, &cfg.shapes)?,
            eval: gen_shapes(ev, cfg.train.eval_count, &cfg.shapes)?,
        },
        TaskKind::Restore => TaskData::Restore {
            train: gen_restore(tr, cfg.train.train_count, &cfg.restore)?,
            eval: gen_restore(ev, cfg.train.eval_count, &cfg.restore)?,
        },
    })
}

/// Trainer settings for one seed. The student seed is the run seed; the
/// loss network is re-drawn per seed from its own stream.
pub fn train_config(
    cfg: &ExperimentConfig,
    seed: u64,
    net: &NetSettings,
    levels: &LevelSpec,
    data: &TaskData,
) -> Result<TrainConfig, CliError> {
    let t = &cfg.train;
    let tc = TrainConfig {
        base_lr: t.base_lr,
        max_iter: t.max_iter,
        batch_size: t.batch_size,
        poly_power: t.poly_power,
        lambda: cfg.loss.lambda,
        levels: levels.clone(),
        percep: net.spec(data.out_channels(), mix_seed(seed, PERCEP_NET_STREAM))?,
        seed,
        eval_every: t.eval_every,
    };
    tc.validate()?;
    Ok(tc)
}

struct Arm {
    label: String,
    net: NetSettings,
    levels: LevelSpec,
}

#[derive(Serialize)]
struct CurveRow<'a> {
    arm: &'a str,
    seed: u64,
    use_percep: bool,
    iteration: usize,
    lr: f64,
    task_loss: f64,
    percep_loss: Option<f64>,
    total_loss: f64,
    eval_metric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairRow {
    pub arm: String,
    pub seed: u64,
    pub metric: Metric,
    pub baseline: Option<f64>,
    pub percep: Option<f64>,
    /// Positive when the perceptual arm scores better.
    pub improvement: Option<f64>,
    pub percep_better: bool,
    pub status: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ArmSummary {
    pub arm: String,
    pub pairs: usize,
    pub completed: usize,
    pub wins: usize,
    pub mean_baseline: Option<f64>,
    pub mean_percep: Option<f64>,
    pub mean_improvement: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn pair_row(arm: &str, seed: u64, metric: Metric, base: &RunMetrics, run: &RunMetrics) -> PairRow {
    let (b, p) = (base.final_metric, run.final_metric);
    let improvement = match (b, p) {
        (Some(b), Some(p)) => Some(match metric {
            Metric::Miou => p - b,
            Metric::Rmse => b - p,
        }),
        _ => None,
    };
    let status = match (&base.diverged, &run.diverged) {
        (None, None) => "ok".to_string(),
        (Some(d), None) => format!("baseline diverged at {}: {}", d.iteration, d.message),
        (None, Some(d)) => format!("percep diverged at {}: {}", d.iteration, d.message),
        (Some(_), Some(_)) => "both diverged".to_string(),
    };
    PairRow {
        arm: arm.to_string(),
        seed,
        metric,
        baseline: b,
        percep: p,
        improvement,
        percep_better: improvement.is_some_and(|d| d > 0.0),
        status,
    }
}

fn compare(cfg: &ExperimentConfig, out: &mut OutputDir, arms: Vec<Arm>) -> Result<(), CliError> {
    if arms.is_empty() {
        return Err(CliError::Config("sweep has no arms".into()));
    }
    let datasets = run_indexed(cfg.seeds.len(), cfg.jobs, |i| task_data(cfg, cfg.seeds[i]))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    // Resolve every trainer config up front so bad arms fail before any run.
    let mut units = Vec::new();
    for (si, &seed) in cfg.seeds.iter().enumerate() {
        let base = train_config(cfg, seed, &cfg.net, &cfg.loss.levels, &datasets[si])?;
        units.push((si, None, base, false));
        for (ai, arm) in arms.iter().enumerate() {
            units.push((
                si,
                Some(ai),
                train_config(cfg, seed, &arm.net, &arm.levels, &datasets[si])?,
                true,
            ));
        }
    }
    let results = run_indexed(units.len(), cfg.jobs, |u| {
        let (si, _, tc, use_percep) = &units[u];
        train(&datasets[*si], tc, *use_percep)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;

    let mut curves = Vec::new();
    let mut pairs = Vec::new();
    let per_seed = arms.len() + 1;
    for (si, &seed) in cfg.seeds.iter().enumerate() {
        let base = &results[si * per_seed];
        let metric = datasets[si].metric();
        for r in &base.records {
            curves.push(CurveRow {
                arm: "baseline",
                seed,
                use_percep: false,
                iteration: r.iteration,
                lr: r.lr,
                task_loss: r.task_loss,
                percep_loss: r.percep_loss,
                total_loss: r.total_loss,
                eval_metric: r.eval_metric,
            });
        }
        for (ai, arm) in arms.iter().enumerate() {
            let run = &results[si * per_seed + 1 + ai];
            for r in &run.records {
                curves.push(CurveRow {
                    arm: &arm.label,
                    seed,
                    use_percep: true,
                    iteration: r.iteration,
                    lr: r.lr,
                    task_loss: r.task_loss,
                    percep_loss: r.percep_loss,
                    total_loss: r.total_loss,
                    eval_metric: r.eval_metric,
                });
            }
            pairs.push(pair_row(&arm.label, seed, metric, base, run));
        }
    }
    let summaries: Vec<ArmSummary> = arms
        .iter()
        .map(|arm| {
            let rows: Vec<&PairRow> = pairs.iter().filter(|p| p.arm == arm.label).collect();
            let done: Vec<&&PairRow> = rows.iter().filter(|p| p.improvement.is_some()).collect();
            ArmSummary {
                arm: arm.label.clone(),
                pairs: rows.len(),
                completed: done.len(),
                wins: rows.iter().filter(|p| p.percep_better).count(),
                mean_baseline: mean(done.iter().filter_map(|p| p.baseline)),
                mean_percep: mean(done.iter().filter_map(|p| p.percep)),
                mean_improvement: mean(done.iter().filter_map(|p| p.improvement)),
            }
        })
        .collect();
    out.write_csv("curves.csv", &curves)?;
    out.write_csv("paired.csv", &pairs)?;
    out.write_csv("arms.csv", &summaries)?;
    let metric = datasets[0].metric();
    out.write_summary(
        "summary.json",
        cfg,
        &serde_json::json!({ "metric": metric, "arms": summaries, "pairs": pairs }),
    )
}

#[derive(Serialize)]
struct ManifestRow {
    seed: u64,
    split: &'static str,
    index: usize,
    kind: &'static str,
    file: String,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}

fn dump_dataset(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let mut manifest = Vec::new();
    for &seed in &cfg.seeds {
        let data = task_data(cfg, seed)?;
        let mut put = |split: &'static str,
                       index: usize,
                       kind: &'static str,
                       t: &Tensor|
         -> Result<(), CliError> {
            let file = format!("seed{seed}/{split}/{index:04}_{kind}.bin");
            let mut buf = Vec::with_capacity(40 + 8 * t.len());
            write_tensor(&mut buf, t).expect("writing to memory");
            out.write_bytes(&file, &buf)?;
            let s = t.shape();
            manifest.push(ManifestRow {
                seed,
                split,
                index,
                kind,
                file,
                n: s.n,
                c: s.c,
                h: s.h,
                w: s.w,
            });
            Ok(())
        };
        match &data {
            TaskData::Shapes { train, eval, .. } => {
                for (split, set) in [("train", train), ("eval", eval)] {
                    for (i, s) in set.iter().enumerate() {
                        put(split, i, "image", &s.image)?;
                        put(split, i, "label", &s.label.to_tensor())?;
                        put(split, i, "soft_target", &s.soft_target)?;
                    }
                }
            }
            TaskData::Restore { train, eval } => {
                for (split, set) in [("train", train), ("eval", eval)] {
                    for (i, s) in set.iter().enumerate() {
                        put(split, i, "degraded", &s.degraded)?;
                        put(split, i, "clean", &s.clean)?;
                    }
                }
            }
        }
    }
    out.write_csv("manifest.csv", &manifest)?;
    out.write_summary(
        "summary.json",
        cfg,
        &serde_json::json!({ "files": manifest.len() }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexed_runs_keep_order() {
        let seq = run_indexed(7, 1, |i| i * i);
        assert_eq!(seq, run_indexed(7, 3, |i| i * i));
        assert_eq!(seq, vec![0, 1, 4, 9, 16, 25, 36]);
    }
}
