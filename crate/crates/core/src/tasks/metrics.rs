//! Evaluation metrics for the toy tasks.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pixel counts of (true class, predicted class) pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    n_classes: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(n_classes: usize) -> Self {
        Confusion {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_classes + pred]
    }

    pub fn add(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::Shape {
                op: "miou",
                expected: format!("{} labels", truth.len()),
                got: format!("{} labels", pred.len()),
            });
        }
        let n = self.n_classes;
        for (&p, &t) in pred.iter().zip(truth) {
            if p >= n || t >= n {
                return Err(Error::Config(format!(
                    "label {} out of range for {n} classes",
                    p.max(t)
                )));
            }
            self.counts[t * n + p] += 1;
        }
        Ok(())
    }

    /// IoU per class; `None` for classes absent from both maps.
    pub fn ious(&self) -> Vec<Option<f64>> {
        let n = self.n_classes;
        (0..n)
            .map(|c| {
                let inter = self.count(c, c);
                let truth: u64 = (0..n).map(|p| self.count(c, p)).sum();
                let pred: u64 = (0..n).map(|t| self.count(t, c)).sum();
                let union = truth + pred - inter;
                (union > 0).then(|| inter as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes present in either map.
    pub fn miou(&self) -> Result<f64> {
        let present: Vec<f64> = self.ious().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::Config("mIoU of an empty label set".into()));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Mean intersection over union between two label maps.
pub fn miou(pred: &[usize], truth: &[usize], n_classes: usize) -> Result<f64> {
    let mut c = Confusion::new(n_classes);
    c.add(pred, truth)?;
    c.miou()
}

/// Channel argmax at every pixel of an NCHW tensor, in NHW order. Ties go
/// to the lowest channel.
pub fn argmax_channels(t: &Tensor) -> Vec<usize> {
    let s = t.shape();
    let mut out = Vec::with_capacity(s.n * s.plane());
    for b in 0..s.n {
        let item = t.item(b);
        for px in 0..s.plane() {
            let mut best = 0;
            for c in 1..s.c {
                if item[c * s.plane() + px] > item[best * s.plane() + px] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Root mean squared error over every element.
pub fn rmse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    Ok(pred.sub(truth)?.rms())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Shape;

    #[test]
    fn perfect_and_disjoint() {
        let t = [0, 1, 2, 2, 1, 0];
        assert_eq!(miou(&t, &t, 3).unwrap(), 1.0);
        let p = [1, 0, 0, 1, 0, 1];
        let t = [0, 1, 1, 0, 1, 0];
        assert_eq!(miou(&p, &t, 3).unwrap(), 0.0);
    }

    #[test]
    fn hand_built_two_class_case() {
        // 4x5 grid: 4 pixels agree on class 0, 8 agree on class 1, 8 differ.
        // IoU_0 = 4 / (4 + 8) = 1/3, IoU_1 = 8 / (8 + 8) = 1/2.
        let truth = [0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1];
        let pred = [0, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1];
        let got = miou(&pred, &truth, 2).unwrap();
        assert!((got - 5.0 / 12.0).abs() < 1e-15, "{got}");
    }

    #[test]
    fn absent_classes_are_skipped() {
        assert_eq!(miou(&[0, 0, 1], &[0, 0, 1], 5).unwrap(), 1.0);
        let c = {
            let mut c = Confusion::new(3);
            c.add(&[0, 1], &[0, 0]).unwrap();
            c
        };
        assert_eq!(c.ious(), vec![Some(0.5), Some(0.0), None]);
    }

    #[test]
    fn errors() {
        assert!(miou(&[0, 3], &[0, 1], 3).is_err());
        assert!(miou(&[0], &[0, 1], 3).is_err());
        assert!(miou(&[], &[], 3).is_err());
    }

    #[test]
    fn relabeling_invariance() {
        let p = [0, 1, 2, 2, 1, 0, 1, 1];
        let t = [0, 1, 1, 2, 2, 0, 1, 0];
        let perm = [2, 0, 1];
        let pp: Vec<usize> = p.iter().map(|&c| perm[c]).collect();
        let tp: Vec<usize> = t.iter().map(|&c| perm[c]).collect();
        let a = miou(&p, &t, 3).unwrap();
        let b = miou(&pp, &tp, 3).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn argmax_and_rmse() {
        let t =
            Tensor::from_vec(Shape::new(1, 2, 1, 3), vec![0.0, 2.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(argmax_channels(&t), vec![1, 0, 0]);
        let a = Tensor::filled(Shape::new(1, 1, 2, 2), 1.0);
        let b = Tensor::zeros(Shape::new(1, 1, 2, 2));
        assert_eq!(rmse(&a, &b).unwrap(), 1.0);
    }
}
