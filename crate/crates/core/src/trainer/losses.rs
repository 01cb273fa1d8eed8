//! Per-pixel unary losses and the softmax they use.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Softmax over channels at every pixel.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let s = logits.shape();
    let plane = s.plane();
    let mut out = Tensor::zeros(s);
    for b in 0..s.n {
        let src = logits.item(b);
        let dst = out.item_mut(b);
        for px in 0..plane {
            let top = (0..s.c)
                .map(|c| src[c * plane + px])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..s.c {
                let e = (src[c * plane + px] - top).exp();
                dst[c * plane + px] = e;
                z += e;
            }
            for c in 0..s.c {
                dst[c * plane + px] /= z;
            }
        }
    }
    out
}

/// Pulls a gradient with respect to softmax probabilities back to logits:
/// `p * (g - sum_c p_c g_c)` at every pixel.
pub fn softmax_backward(probs: &Tensor, grad: &Tensor) -> Result<Tensor> {
    probs.expect_same_shape("softmax_backward", grad)?;
    let s = probs.shape();
    let plane = s.plane();
    let mut out = Tensor::zeros(s);
    for b in 0..s.n {
        let (p, g) = (probs.item(b), grad.item(b));
        let dst = out.item_mut(b);
        for px in 0..plane {
            let dot: f64 = (0..s.c)
                .map(|c| p[c * plane + px] * g[c * plane + px])
                .sum();
            for c in 0..s.c {
                let i = c * plane + px;
                dst[i] = p[i] * (g[i] - dot);
            }
        }
    }
    Ok(out)
}

/// Mean softmax cross-entropy over pixels. `labels` is in NHW order.
/// Returns the loss and `(softmax - one_hot) / pixels`.
pub fn pixel_ce_loss(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let s = logits.shape();
    let plane = s.plane();
    let pixels = s.n * plane;
    if labels.len() != pixels {
        return Err(Error::Shape {
            op: "pixel_ce_loss",
            expected: format!("{pixels} labels"),
            got: format!("{} labels", labels.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= s.c) {
        return Err(Error::Config(format!(
            "label {bad} out of range for {} classes",
            s.c
        )));
    }
    let mut grad = softmax_channels(logits);
    let mut loss = 0.0;
    for b in 0..s.n {
        let z = logits.item(b);
        let g = grad.item_mut(b);
        for px in 0..plane {
            let y = labels[b * plane + px];
            let top = (0..s.c)
                .map(|c| z[c * plane + px])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = top
                + (0..s.c)
                    .map(|c| (z[c * plane + px] - top).exp())
                    .sum::<f64>()
                    .ln();
            loss += lse - z[y * plane + px];
            g[y * plane + px] -= 1.0;
        }
    }
    let inv = 1.0 / pixels as f64;
    grad.data_mut().iter_mut().for_each(|v| *v *= inv);
    Ok((loss * inv, grad))
}

/// Mean squared error over every element and its gradient `2 (p - t) / count`.
pub fn pixel_mse_loss(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    let diff = pred.sub(target)?;
    let count = diff.len() as f64;
    let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / count;
    Ok((loss, diff.scale(2.0 / count)))
}
