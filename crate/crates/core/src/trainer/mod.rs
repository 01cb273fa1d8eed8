//! SGD training of the student on the toy tasks, with or without the
//! perceptual term.

mod losses;
mod student;

pub use losses::{pixel_ce_loss, pixel_mse_loss, softmax_backward, softmax_channels};
pub use student::{StudentGrads, StudentNet, StudentTrace, STUDENT_WIDTHS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::percep::{
    embed_target, mix_losses, percep_loss_grad_cached, LevelSpec, Levels, LossConfig, PercepNet,
    PercepNetSpec, TargetEmbedding,
};
use crate::tasks::{rmse, Confusion, LabelMap, RestoreSample, ShapesSample};
use crate::tensor::{Rng, Tensor};

const STUDENT_STREAM: u64 = 0x5747;
const ORDER_STREAM: u64 = 0x0D3E;

/// Training hyper-parameters. The loss-network spec's `in_channels` must
/// equal the student's output channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub max_iter: usize,
    pub batch_size: usize,
    pub poly_power: f64,
    pub lambda: f64,
    pub levels: LevelSpec,
    pub percep: PercepNetSpec,
    /// Seeds the student init, batch order and flips.
    pub seed: u64,
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // A zero rate is allowed so that a run can be checked to leave the
        // weights untouched.
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!(
                "base_lr must be finite and >= 0, got {}",
                self.base_lr
            )));
        }
        if self.max_iter == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "max_iter, batch_size and eval_every must be >= 1".into(),
            ));
        }
        if !(self.poly_power >= 0.0 && self.poly_power.is_finite()) {
            return Err(Error::Config(format!(
                "poly_power must be finite and >= 0, got {}",
                self.poly_power
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        self.percep.validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            levels: self.levels.resolve(self.percep.num_blocks()),
        }
    }
}

/// `base_lr * (1 - t / max_iter)^power`.
pub fn poly_lr(base_lr: f64, t: usize, max_iter: usize, power: f64) -> f64 {
    base_lr * (1.0 - t as f64 / max_iter as f64).max(0.0).powf(power)
}

/// A dense-prediction dataset: inputs, per-pixel truth and the targets the
/// perceptual term compares against.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskData {
    /// Segmentation; the perceptual target is the soft label map.
    Shapes {
        n_classes: usize,
        train: Vec<ShapesSample>,
        eval: Vec<ShapesSample>,
    },
    /// Restoration; the perceptual target is the clean image.
    Restore {
        train: Vec<RestoreSample>,
        eval: Vec<RestoreSample>,
    },
}

/// What a single example is scored against.
enum Truth<'a> {
    Labels(&'a LabelMap),
    Dense(&'a Tensor),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Higher is better.
    Miou,
    /// Lower is better.
    Rmse,
}

impl Metric {
    /// Whether `a` is a strictly better score than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Metric::Miou => a > b,
            Metric::Rmse => a < b,
        }
    }
}

impl TaskData {
    pub fn metric(&self) -> Metric {
        match self {
            TaskData::Shapes { .. } => Metric::Miou,
            TaskData::Restore { .. } => Metric::Rmse,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            TaskData::Shapes { .. } => 3,
            TaskData::Restore { .. } => 1,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            TaskData::Shapes { n_classes, .. } => *n_classes,
            TaskData::Restore { .. } => 1,
        }
    }

    pub fn train_len(&self) -> usize {
        match self {
            TaskData::Shapes { train, .. } => train.len(),
            TaskData::Restore { train, .. } => train.len(),
        }
    }

    pub fn eval_len(&self) -> usize {
        match self {
            TaskData::Shapes { eval, .. } => eval.len(),
            TaskData::Restore { eval, .. } => eval.len(),
        }
    }

    /// Input, truth and perceptual target of a training example.
    fn train_example(&self, i: usize) -> (&Tensor, Truth<'_>, &Tensor) {
        match self {
            TaskData::Shapes { train, .. } => (
                &train[i].image,
                Truth::Labels(&train[i].label),
                &train[i].soft_target,
            ),
            TaskData::Restore { train, .. } => (
                &train[i].degraded,
                Truth::Dense(&train[i].clean),
                &train[i].clean,
            ),
        }
    }

    fn eval_example(&self, i: usize) -> (&Tensor, Truth<'_>) {
        match self {
            TaskData::Shapes { eval, .. } => (&eval[i].image, Truth::Labels(&eval[i].label)),
            TaskData::Restore { eval, .. } => (&eval[i].degraded, Truth::Dense(&eval[i].clean)),
        }
    }
}

/// Metrics at one evaluation point. Losses are means over the training
/// steps since the previous record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Completed SGD steps.
    pub iteration: usize,
    /// Rate used by the last step.
    pub lr: f64,
    pub task_loss: f64,
    /// Unweighted perceptual loss; absent when the term is disabled.
    pub percep_loss: Option<f64>,
    /// `task_loss + lambda * percep_loss` as optimized.
    pub total_loss: f64,
    pub eval_metric: f64,
}

/// Where and why a run stopped early.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub iteration: usize,
    /// Absent when the forward pass itself failed.
    pub task_loss: Option<f64>,
    pub percep_loss: Option<f64>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub metric: Metric,
    pub use_percep: bool,
    pub records: Vec<EvalRecord>,
    /// Eval metric of the last record; absent if the run diverged.
    pub final_metric: Option<f64>,
    pub diverged: Option<Divergence>,
}

/// Mean of the task metric over the eval set: mIoU over the pooled
/// confusion of every pixel, or RMSE over every pixel.
pub fn evaluate(net: &StudentNet, data: &TaskData) -> Result<f64> {
    let n = data.eval_len();
    if n == 0 {
        return Err(Error::Config("empty eval set".into()));
    }
    match data {
        TaskData::Shapes { n_classes, .. } => {
            let mut conf = Confusion::new(*n_classes);
            for i in 0..n {
                let (x, truth) = data.eval_example(i);
                let Truth::Labels(label) = truth else {
                    unreachable!()
                };
                let pred = crate::tasks::argmax_channels(&net.forward(x)?);
                conf.add(&pred, label.data())?;
            }
            conf.miou()
        }
        TaskData::Restore { .. } => {
            let mut sq = 0.0;
            let mut count = 0usize;
            for i in 0..n {
                let (x, truth) = data.eval_example(i);
                let Truth::Dense(clean) = truth else {
                    unreachable!()
                };
                let e = rmse(&net.forward(x)?, clean)?;
                sq += e * e * clean.len() as f64;
                count += clean.len();
            }
            Ok((sq / count as f64).sqrt())
        }
    }
}

/// The perceptual side of a run: net, loss settings and, for the
/// final-embedding loss, every training target embedded once per flip.
struct PercepTerm {
    net: PercepNet,
    cfg: LossConfig,
    cache: Option<Vec<[TargetEmbedding; 2]>>,
}

impl PercepTerm {
    fn new(cfg: &TrainConfig, data: &TaskData) -> Result<Self> {
        if cfg.percep.in_channels != data.out_channels() {
            return Err(Error::Config(format!(
                "loss network takes {} channels but the student emits {}",
                cfg.percep.in_channels,
                data.out_channels()
            )));
        }
        let net = PercepNet::build(&cfg.percep)?;
        let loss_cfg = cfg.loss_config();
        loss_cfg.validate(&net)?;
        let cache = match loss_cfg.levels {
            Levels::FinalOnly => Some(
                (0..data.train_len())
                    .map(|i| {
                        let t = data.train_example(i).2;
                        Ok([
                            embed_target(&net, t, &loss_cfg)?,
                            embed_target(&net, &t.flip_horizontal(), &loss_cfg)?,
                        ])
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            Levels::MultiLevel(_) => None,
        };
        Ok(PercepTerm {
            net,
            cfg: loss_cfg,
            cache,
        })
    }

    fn target(&self, data: &TaskData, batch: &[(usize, bool)]) -> Result<TargetEmbedding> {
        match &self.cache {
            Some(cache) => {
                let parts: Vec<&TargetEmbedding> =
                    batch.iter().map(|&(i, f)| &cache[i][f as usize]).collect();
                TargetEmbedding::stack(&parts)
            }
            None => {
                let targets = batch
                    .iter()
                    .map(|&(i, f)| {
                        let t = data.train_example(i).2;
                        if f {
                            t.flip_horizontal()
                        } else {
                            t.clone()
                        }
                    })
                    .collect::<Vec<_>>();
                embed_target(&self.net, &Tensor::stack(&targets)?, &self.cfg)
            }
        }
    }
}

/// Batch order: a fresh permutation every epoch, each item flipped with
/// probability 1/2.
struct Sampler {
    rng: Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        Sampler {
            rng: Rng::derive(seed, ORDER_STREAM),
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self) -> (usize, bool) {
        if self.pos == self.order.len() {
            for i in (1..self.order.len()).rev() {
                self.order.swap(i, self.rng.below(i + 1));
            }
            self.pos = 0;
        }
        let i = self.order[self.pos];
        self.pos += 1;
        (i, self.rng.bernoulli(0.5))
    }
}

/// Trains a fresh student and returns its metrics.
pub fn train(data: &TaskData, cfg: &TrainConfig, use_percep: bool) -> Result<RunMetrics> {
    train_student(data, cfg, use_percep).map(|(m, _)| m)
}

/// [`train`], also returning the final student.
pub fn train_student(
    data: &TaskData,
    cfg: &TrainConfig,
    use_percep: bool,
) -> Result<(RunMetrics, StudentNet)> {
    cfg.validate()?;
    if data.train_len() == 0 {
        return Err(Error::Config("empty training set".into()));
    }
    let mut net = StudentNet::new(
        data.in_channels(),
        data.out_channels(),
        crate::tensor::mix_seed(cfg.seed, STUDENT_STREAM),
    )?;
    let percep = if use_percep {
        Some(PercepTerm::new(cfg, data)?)
    } else {
        None
    };
    let mut sampler = Sampler::new(data.train_len(), cfg.seed);
    let mut metrics = RunMetrics {
        metric: data.metric(),
        use_percep,
        records: Vec::new(),
        final_metric: None,
        diverged: None,
    };
    let (mut task_sum, mut percep_sum, mut total_sum, mut steps) = (0.0, 0.0, 0.0, 0usize);

    for t in 0..cfg.max_iter {
        let batch: Vec<(usize, bool)> = (0..cfg.batch_size).map(|_| sampler.next()).collect();
        let step = train_step(&net, data, &batch, percep.as_ref());
        let (task_loss, percep_loss, total_loss, grads) = match step {
            Ok(s) if s.2.is_finite() => s,
            Ok((task_loss, percep_loss, _, _)) => {
                metrics.diverged = Some(Divergence {
                    iteration: t,
                    task_loss: Some(task_loss),
                    percep_loss,
                    message: "non-finite loss".into(),
                });
                break;
            }
            Err(Error::Numeric(message)) => {
                metrics.diverged = Some(Divergence {
                    iteration: t,
                    task_loss: None,
                    percep_loss: None,
                    message,
                });
                break;
            }
            Err(e) => return Err(e),
        };
        let lr = poly_lr(cfg.base_lr, t, cfg.max_iter, cfg.poly_power);
        net.sgd_step(&grads, lr);
        task_sum += task_loss;
        percep_sum += percep_loss.unwrap_or(0.0);
        total_sum += total_loss;
        steps += 1;

        let done = t + 1;
        if done % cfg.eval_every == 0 || done == cfg.max_iter {
            if !net.is_finite() {
                metrics.diverged = Some(Divergence {
                    iteration: done,
                    task_loss: Some(task_sum / steps as f64),
                    percep_loss: percep.as_ref().map(|_| percep_sum / steps as f64),
                    message: "non-finite weights".into(),
                });
                break;
            }
            let eval_metric = match evaluate(&net, data) {
                Ok(v) if v.is_finite() => v,
                Ok(_) | Err(Error::Numeric(_)) => {
                    metrics.diverged = Some(Divergence {
                        iteration: done,
                        task_loss: Some(task_sum / steps as f64),
                        percep_loss: percep.as_ref().map(|_| percep_sum / steps as f64),
                        message: "non-finite evaluation".into(),
                    });
                    break;
                }
                Err(e) => return Err(e),
            };
            metrics.records.push(EvalRecord {
                iteration: done,
                lr,
                task_loss: task_sum / steps as f64,
                percep_loss: percep.as_ref().map(|_| percep_sum / steps as f64),
                total_loss: total_sum / steps as f64,
                eval_metric,
            });
            (task_sum, percep_sum, total_sum, steps) = (0.0, 0.0, 0.0, 0);
        }
    }
    if metrics.diverged.is_none() {
        metrics.final_metric = metrics.records.last().map(|r| r.eval_metric);
    }
    Ok((metrics, net))
}

type StepOutput = (f64, Option<f64>, f64, StudentGrads);

fn train_step(
    net: &StudentNet,
    data: &TaskData,
    batch: &[(usize, bool)],
    percep: Option<&PercepTerm>,
) -> Result<StepOutput> {
    let mut inputs = Vec::with_capacity(batch.len());
    let mut labels = Vec::new();
    let mut dense = Vec::new();
    for &(i, flip) in batch {
        let (x, truth, _) = data.train_example(i);
        inputs.push(if flip { x.flip_horizontal() } else { x.clone() });
        match truth {
            Truth::Labels(l) => {
                labels.extend_from_slice(if flip { l.flip_horizontal() } else { l.clone() }.data())
            }
            Truth::Dense(d) => dense.push(if flip { d.flip_horizontal() } else { d.clone() }),
        }
    }
    let trace = net.forward_trace(&Tensor::stack(&inputs)?)?;
    let out = trace.output();
    let segmentation = matches!(data, TaskData::Shapes { .. });
    let (task_loss, task_grad) = if segmentation {
        pixel_ce_loss(out, &labels)?
    } else {
        pixel_mse_loss(out, &Tensor::stack(&dense)?)?
    };

    let (percep_loss, total_loss, grad) = match percep {
        None => (None, task_loss, task_grad),
        Some(term) => {
            let target = term.target(data, batch)?;
            let (loss, grad) = if segmentation {
                let probs = softmax_channels(out);
                let (l, g) = percep_loss_grad_cached(&term.net, &probs, &target, &term.cfg)?;
                (l, softmax_backward(&probs, &g)?)
            } else {
                percep_loss_grad_cached(&term.net, out, &target, &term.cfg)?
            };
            let (total, g) =
                mix_losses(task_loss, &task_grad, term.cfg.lambda, Some((loss, &grad)))?;
            (Some(loss), total, g)
        }
    };
    if !total_loss.is_finite() {
        return Ok((task_loss, percep_loss, total_loss, Vec::new()));
    }
    let grads = net.backward(&trace, &grad)?;
    Ok((task_loss, percep_loss, total_loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::percep::InitScheme;
    use crate::tasks::{gen_restore, gen_shapes, RestoreParams, ShapesParams};

    fn shapes_data() -> TaskData {
        let p = ShapesParams {
            height: 32,
            width: 32,
            ..ShapesParams::default()
        };
        TaskData::Shapes {
            n_classes: 4,
            train: gen_shapes(1, 6, &p).unwrap(),
            eval: gen_shapes(2, 3, &p).unwrap(),
        }
    }

    fn restore_data() -> TaskData {
        let p = RestoreParams {
            height: 32,
            width: 32,
            ..RestoreParams::default()
        };
        TaskData::Restore {
            train: gen_restore(1, 6, &p).unwrap(),
            eval: gen_restore(2, 3, &p).unwrap(),
        }
    }

    fn cfg(in_channels: usize, lambda: f64) -> TrainConfig {
        TrainConfig {
            base_lr: 0.003,
            max_iter: 6,
            batch_size: 2,
            poly_power: 0.9,
            lambda,
            levels: LevelSpec::Final,
            percep: PercepNetSpec {
                blocks: vec![1, 1, 1, 1, 1],
                channels: vec![8, 8, 8, 8, 8],
                kernel_size: 3,
                in_channels,
                init: InitScheme::Calibrated,
                seed: 3,
            },
            seed: 9,
            eval_every: 3,
        }
    }

    #[test]
    fn poly_schedule() {
        assert_eq!(poly_lr(0.1, 0, 10, 0.9), 0.1);
        assert_eq!(poly_lr(0.1, 10, 10, 0.9), 0.0);
        let lrs: Vec<f64> = (0..=10).map(|t| poly_lr(0.1, t, 10, 0.9)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!((poly_lr(1.0, 5, 10, 0.9) - 0.5f64.powf(0.9)).abs() < 1e-15);
    }

    #[test]
    fn zero_rate_single_step_keeps_weights() {
        let data = shapes_data();
        let c = TrainConfig {
            base_lr: 0.0,
            max_iter: 1,
            ..cfg(4, 0.1)
        };
        let (m, net) = train_student(&data, &c, true).unwrap();
        assert_eq!(
            net,
            StudentNet::new(3, 4, crate::tensor::mix_seed(c.seed, STUDENT_STREAM)).unwrap()
        );
        assert_eq!(m.records.len(), 1);
        assert_eq!(m.records[0].iteration, 1);
        assert_eq!(m.final_metric, Some(m.records[0].eval_metric));
    }

    #[test]
    fn zero_lambda_matches_baseline_bitwise() {
        for (data, c) in [(shapes_data(), cfg(4, 0.0)), (restore_data(), cfg(1, 0.0))] {
            let (a, na) = train_student(&data, &c, false).unwrap();
            let (b, nb) = train_student(&data, &c, true).unwrap();
            assert_eq!(na, nb);
            assert_eq!(
                a.final_metric.map(f64::to_bits),
                b.final_metric.map(f64::to_bits)
            );
            for (x, y) in a.records.iter().zip(&b.records) {
                assert_eq!(x.task_loss.to_bits(), y.task_loss.to_bits());
                assert_eq!(x.total_loss.to_bits(), y.total_loss.to_bits());
                assert_eq!(x.eval_metric.to_bits(), y.eval_metric.to_bits());
                assert!(x.percep_loss.is_none() && y.percep_loss.is_some());
            }
        }
    }

    #[test]
    fn deterministic_records() {
        let data = restore_data();
        let c = cfg(1, 0.1);
        let a = train(&data, &c, true).unwrap();
        assert_eq!(a, train(&data, &c, true).unwrap());
        let iters: Vec<usize> = a.records.iter().map(|r| r.iteration).collect();
        assert_eq!(iters, vec![3, 6]);
        assert!(a
            .records
            .iter()
            .all(|r| r.task_loss.is_finite() && r.percep_loss.unwrap().is_finite()));
    }

    #[test]
    fn multilevel_runs_without_cache() {
        let data = shapes_data();
        let c = TrainConfig {
            levels: LevelSpec::Pyramid,
            max_iter: 2,
            eval_every: 1,
            ..cfg(4, 0.1)
        };
        let m = train(&data, &c, true).unwrap();
        assert_eq!(m.records.len(), 2);
        assert!(m.diverged.is_none());
    }

    #[test]
    fn divergence_is_recorded() {
        let data = restore_data();
        let c = TrainConfig {
            base_lr: 1e6,
            max_iter: 100,
            eval_every: 1,
            ..cfg(1, 0.1)
        };
        let m = train(&data, &c, true).unwrap();
        let d = m.diverged.expect("huge rate diverges");
        assert!(d.iteration < 100);
        assert!(m.final_metric.is_none());
        assert!(m.records.iter().all(|r| r.task_loss.is_finite()));
    }

    #[test]
    fn config_checks() {
        let data = shapes_data();
        assert!(train(&data, &cfg(3, 0.1), true).is_err());
        assert!(train(&data, &cfg(3, 0.1), false).is_ok());
        assert!(train(
            &data,
            &TrainConfig {
                max_iter: 0,
                ..cfg(4, 0.1)
            },
            false
        )
        .is_err());
        assert!(train(
            &data,
            &TrainConfig {
                base_lr: -1.0,
                ..cfg(4, 0.1)
            },
            false
        )
        .is_err());
        let empty = TaskData::Restore {
            train: vec![],
            eval: vec![],
        };
        assert!(train(&empty, &cfg(1, 0.1), false).is_err());
    }

    #[test]
    fn evaluate_perfect_predictors() {
        let data = shapes_data();
        let mut conf = Confusion::new(4);
        if let TaskData::Shapes { eval, .. } = &data {
            for s in eval {
                let one_hot = s.label.one_hot(4).unwrap();
                conf.add(&crate::tasks::argmax_channels(&one_hot), s.label.data())
                    .unwrap();
            }
        }
        assert_eq!(conf.miou().unwrap(), 1.0);

        let p = RestoreParams {
            height: 32,
            width: 32,
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            ..RestoreParams::default()
        };
        let data = TaskData::Restore {
            train: vec![],
            eval: gen_restore(5, 2, &p).unwrap(),
        };
        assert_eq!(evaluate(&identity_student(), &data).unwrap(), 0.0);
        assert!(evaluate(
            &identity_student(),
            &TaskData::Restore {
                train: vec![],
                eval: vec![]
            }
        )
        .is_err());
    }

    /// Passes channel 0 through every layer; exact for non-negative inputs.
    fn identity_student() -> StudentNet {
        let mut c_in = 1;
        let convs = STUDENT_WIDTHS
            .iter()
            .chain([1].iter())
            .map(|&d| {
                let mut k = crate::tensor::ConvKernel::zeros(d, c_in, 3).unwrap();
                k.weights_mut()[4] = 1.0;
                c_in = d;
                k
            })
            .collect();
        StudentNet::from_convs(convs).unwrap()
    }
}
