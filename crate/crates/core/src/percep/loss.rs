//! Perceptual loss through a shared [`PercepNet`] and its input gradient.
//!
//! Every level uses the per-element normalised squared error
//! `(1 / C_j H_j W_j) ||phi_j(pred) - phi_j(target)||^2`, averaged over the
//! batch. Inputs whose spatial size is not a multiple of `2^k` are zero-padded
//! on the bottom/right before entering the net; the gradient is cropped back.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::net::{BlockActivations, EmbeddingGrads, PercepNet};
use crate::error::{Error, Result};
use crate::tensor::{mse, mse_grad, Tensor};

/// Which activations enter the loss.
#[derive(Debug, Clone, PartialEq)]
pub enum Levels {
    /// Only the final embedding (after the last pool).
    FinalOnly,
    /// One scale per block, applied to that block's pre-pool output.
    MultiLevel(Vec<f64>),
}

/// A level selection that is resolved against a concrete block count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LevelSpec {
    Final,
    /// Every block with weight 1.
    Equal,
    /// Halving weights towards the input: `..., 1/8, 1/4, 1/2, 1`.
    Pyramid,
    Scales(Vec<f64>),
}

impl LevelSpec {
    pub fn resolve(&self, num_blocks: usize) -> Levels {
        match self {
            LevelSpec::Final => Levels::FinalOnly,
            LevelSpec::Equal => Levels::MultiLevel(vec![1.0; num_blocks]),
            LevelSpec::Pyramid => Levels::MultiLevel(
                (0..num_blocks)
                    .map(|j| 0.5f64.powi((num_blocks - 1 - j) as i32))
                    .collect(),
            ),
            LevelSpec::Scales(s) => Levels::MultiLevel(s.clone()),
        }
    }
}

impl fmt::Display for LevelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LevelSpec::Final => write!(f, "final"),
            LevelSpec::Equal => write!(f, "equal"),
            LevelSpec::Pyramid => write!(f, "pyramid"),
            LevelSpec::Scales(s) => {
                let parts: Vec<String> = s.iter().map(|v| v.to_string()).collect();
                write!(f, "scales({})", parts.join(","))
            }
        }
    }
}

fn parse_scale(s: &str) -> Result<f64> {
    let s = s.trim();
    let bad = |e: &dyn fmt::Display| Error::Config(format!("bad level scale {s:?}: {e}"));
    match s.split_once('/') {
        Some((num, den)) => {
            let num: f64 = num.trim().parse().map_err(|e| bad(&e))?;
            let den: f64 = den.trim().parse().map_err(|e| bad(&e))?;
            Ok(num / den)
        }
        None => s.parse().map_err(|e| bad(&e)),
    }
}

impl FromStr for LevelSpec {
    type Err = Error;

    /// `final`, `equal`, `pyramid`, or `scales(1/16,1/8,1/4,1/2,1)`.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        match t.as_str() {
            "final" => Ok(LevelSpec::Final),
            "equal" => Ok(LevelSpec::Equal),
            "pyramid" => Ok(LevelSpec::Pyramid),
            _ => {
                let inner = t
                    .strip_prefix("scales(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| Error::Config(format!("unknown level selection {s:?}")))?;
                Ok(LevelSpec::Scales(
                    inner.split(',').map(parse_scale).collect::<Result<_>>()?,
                ))
            }
        }
    }
}

impl TryFrom<String> for LevelSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LevelSpec> for String {
    fn from(l: LevelSpec) -> String {
        l.to_string()
    }
}

/// Mixing weight and level selection.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub levels: Levels,
}

impl LossConfig {
    pub fn final_only(lambda: f64) -> Self {
        LossConfig {
            lambda,
            levels: Levels::FinalOnly,
        }
    }

    pub fn validate(&self, net: &PercepNet) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if let Levels::MultiLevel(scales) = &self.levels {
            if scales.len() != net.num_blocks() {
                return Err(Error::Config(format!(
                    "{} level scales for a {}-block network",
                    scales.len(),
                    net.num_blocks()
                )));
            }
            if scales.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
                return Err(Error::Config("level scales must be finite and >= 0".into()));
            }
            if scales.iter().all(|&s| s == 0.0) {
                return Err(Error::Config("level scales are all zero".into()));
            }
        }
        Ok(())
    }
}

/// Target-side activations, kept only at the taps the loss reads.
#[derive(Debug, Clone)]
pub struct TargetEmbedding {
    blocks: Vec<Option<Tensor>>,
    embedding: Option<Tensor>,
    input_shape: crate::Shape,
}

impl TargetEmbedding {
    pub fn input_shape(&self) -> crate::Shape {
        self.input_shape
    }

    /// Concatenates embeddings of single targets along the batch axis.
    pub fn stack(items: &[&TargetEmbedding]) -> Result<TargetEmbedding> {
        let first = items
            .first()
            .ok_or_else(|| Error::Config("cannot stack an empty list".into()))?;
        let stack_tap =
            |get: &dyn Fn(&TargetEmbedding) -> &Option<Tensor>| -> Result<Option<Tensor>> {
                if get(first).is_none() {
                    if items.iter().any(|t| get(t).is_some()) {
                        return Err(Error::Config(
                            "target embeddings keep different levels".into(),
                        ));
                    }
                    return Ok(None);
                }
                let parts = items
                    .iter()
                    .map(|t| tap(get(t)).cloned())
                    .collect::<Result<Vec<_>>>()?;
                Tensor::stack(&parts).map(Some)
            };
        let blocks = (0..first.blocks.len())
            .map(|j| stack_tap(&|t: &TargetEmbedding| &t.blocks[j]))
            .collect::<Result<Vec<_>>>()?;
        let embedding = stack_tap(&|t: &TargetEmbedding| &t.embedding)?;
        let mut input_shape = first.input_shape;
        input_shape.n = 0;
        for t in items {
            let s = t.input_shape;
            if (s.c, s.h, s.w) != (input_shape.c, input_shape.h, input_shape.w)
                || t.blocks.len() != first.blocks.len()
            {
                return Err(Error::Shape {
                    op: "TargetEmbedding::stack",
                    expected: first.input_shape.to_string(),
                    got: s.to_string(),
                });
            }
            input_shape.n += s.n;
        }
        Ok(TargetEmbedding {
            blocks,
            embedding,
            input_shape,
        })
    }
}

fn pad_for(net: &PercepNet, x: &Tensor) -> Result<Tensor> {
    let m = net.spec().spatial_multiple();
    let s = x.shape();
    x.pad_bottom_right(s.h.div_ceil(m) * m, s.w.div_ceil(m) * m)
}

fn check_inputs(
    net: &PercepNet,
    pred: &Tensor,
    target_shape: crate::Shape,
    cfg: &LossConfig,
) -> Result<()> {
    cfg.validate(net)?;
    if pred.shape() != target_shape {
        return Err(Error::Shape {
            op: "percep_loss",
            expected: target_shape.to_string(),
            got: pred.shape().to_string(),
        });
    }
    if pred.shape().c != net.spec().in_channels {
        return Err(Error::Config(format!(
            "prediction has {} channels, loss network expects {}",
            pred.shape().c,
            net.spec().in_channels
        )));
    }
    Ok(())
}

/// Runs the target through the net once so repeated losses can reuse it.
pub fn embed_target(net: &PercepNet, target: &Tensor, cfg: &LossConfig) -> Result<TargetEmbedding> {
    cfg.validate(net)?;
    let acts = net.forward(&pad_for(net, target)?)?;
    Ok(keep_taps(acts, &cfg.levels, target.shape()))
}

fn keep_taps(
    acts: BlockActivations,
    levels: &Levels,
    input_shape: crate::Shape,
) -> TargetEmbedding {
    match levels {
        Levels::FinalOnly => TargetEmbedding {
            blocks: vec![None; acts.blocks.len()],
            embedding: Some(acts.embedding),
            input_shape,
        },
        Levels::MultiLevel(scales) => TargetEmbedding {
            blocks: acts
                .blocks
                .into_iter()
                .zip(scales)
                .map(|(a, &s)| (s != 0.0).then_some(a))
                .collect(),
            embedding: None,
            input_shape,
        },
    }
}

fn tap(t: &Option<Tensor>) -> Result<&Tensor> {
    t.as_ref()
        .ok_or_else(|| Error::Config("target embedding was built for different levels".into()))
}

fn loss_from(pred: &BlockActivations, target: &TargetEmbedding, levels: &Levels) -> Result<f64> {
    match levels {
        Levels::FinalOnly => mse(&pred.embedding, tap(&target.embedding)?),
        Levels::MultiLevel(scales) => {
            let mut total = 0.0;
            for (j, &s) in scales.iter().enumerate() {
                if s != 0.0 {
                    total += s * mse(&pred.blocks[j], tap(&target.blocks[j])?)?;
                }
            }
            Ok(total)
        }
    }
}

/// Perceptual loss between `pred` and `target`.
pub fn percep_loss(
    net: &PercepNet,
    pred: &Tensor,
    target: &Tensor,
    cfg: &LossConfig,
) -> Result<f64> {
    check_inputs(net, pred, target.shape(), cfg)?;
    let t = embed_target(net, target, cfg)?;
    let p = net.forward(&pad_for(net, pred)?)?;
    loss_from(&p, &t, &cfg.levels)
}

/// Loss and its gradient with respect to `pred`; `target` is a constant.
pub fn percep_loss_grad(
    net: &PercepNet,
    pred: &Tensor,
    target: &Tensor,
    cfg: &LossConfig,
) -> Result<(f64, Tensor)> {
    check_inputs(net, pred, target.shape(), cfg)?;
    let t = embed_target(net, target, cfg)?;
    percep_loss_grad_cached(net, pred, &t, cfg)
}

/// [`percep_loss_grad`] against a target embedded by [`embed_target`].
pub fn percep_loss_grad_cached(
    net: &PercepNet,
    pred: &Tensor,
    target: &TargetEmbedding,
    cfg: &LossConfig,
) -> Result<(f64, Tensor)> {
    check_inputs(net, pred, target.input_shape, cfg)?;
    let s = pred.shape();
    let trace = net.forward_trace(&pad_for(net, pred)?)?;
    let acts = &trace.activations;
    let loss = loss_from(acts, target, &cfg.levels)?;
    let grads = match &cfg.levels {
        Levels::FinalOnly => EmbeddingGrads {
            blocks: Vec::new(),
            embedding: Some(mse_grad(&acts.embedding, tap(&target.embedding)?, 1.0)?),
        },
        Levels::MultiLevel(scales) => EmbeddingGrads {
            blocks: scales
                .iter()
                .enumerate()
                .map(|(j, &w)| {
                    if w == 0.0 {
                        Ok(None)
                    } else {
                        mse_grad(&acts.blocks[j], tap(&target.blocks[j])?, w).map(Some)
                    }
                })
                .collect::<Result<_>>()?,
            embedding: None,
        },
    };
    let g = net.backward_trace(&trace, &grads)?;
    Ok((loss, g.crop_top_left(s.h, s.w)?))
}

/// `task + lambda * percep` for both value and gradient. With `lambda == 0`
/// the task terms are returned untouched.
pub fn mix_losses(
    task_loss: f64,
    task_grad: &Tensor,
    lambda: f64,
    percep: Option<(f64, &Tensor)>,
) -> Result<(f64, Tensor)> {
    match percep {
        Some((loss, grad)) if lambda != 0.0 => {
            let mut total = task_grad.clone();
            total.add_scaled(lambda, grad)?;
            Ok((task_loss + lambda * loss, total))
        }
        Some((_, grad)) => {
            task_grad.expect_same_shape("combined_loss", grad)?;
            Ok((task_loss, task_grad.clone()))
        }
        None => Ok((task_loss, task_grad.clone())),
    }
}

/// Unary task loss plus `lambda` times the perceptual loss.
pub fn combined_loss(
    task_loss: f64,
    task_grad: &Tensor,
    net: &PercepNet,
    pred: &Tensor,
    target: &Tensor,
    cfg: &LossConfig,
) -> Result<(f64, Tensor)> {
    task_grad.expect_same_shape("combined_loss", pred)?;
    let (pl, pg) = percep_loss_grad(net, pred, target, cfg)?;
    mix_losses(task_loss, task_grad, cfg.lambda, Some((pl, &pg)))
}
