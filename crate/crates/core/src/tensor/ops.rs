use super::{Shape, Tensor};
use crate::error::{Error, Result};

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|x| if x > 0.0 { x } else { 0.0 })
}

/// Masks `grad_out` by `forward_input > 0`. The subgradient at 0 is 0.
pub fn relu_backward(grad_out: &Tensor, forward_input: &Tensor) -> Result<Tensor> {
    grad_out.expect_same_shape("relu_backward", forward_input)?;
    let data = grad_out
        .data()
        .iter()
        .zip(forward_input.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(grad_out.shape(), data)
}

/// Flat argmax positions recorded by [`maxpool2x2_forward`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    input_shape: Shape,
    argmax: Vec<usize>,
}

impl PoolIndices {
    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn output_shape(&self) -> Shape {
        let s = self.input_shape;
        Shape::new(s.n, s.c, s.h / 2, s.w / 2)
    }
}

/// 2x2 max pool with stride 2. Ties go to the first element in row-major
/// window order.
pub fn maxpool2x2_forward(input: &Tensor) -> Result<(Tensor, PoolIndices)> {
    let s = input.shape();
    if !s.h.is_multiple_of(2) || !s.w.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "maxpool2x2 needs even spatial dims, got {}x{}",
            s.h, s.w
        )));
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut argmax = Vec::with_capacity(out_shape.numel());
    let data = input.data();
    for b in 0..s.n {
        for c in 0..s.c {
            let base = input.offset(b, c, 0, 0);
            for i in 0..oh {
                for j in 0..ow {
                    let top = base + 2 * i * s.w + 2 * j;
                    let mut best = top;
                    for cand in [top + 1, top + s.w, top + s.w + 1] {
                        if data[cand] > data[best] {
                            best = cand;
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(out_shape, out)?,
        PoolIndices {
            input_shape: s,
            argmax,
        },
    ))
}

pub fn maxpool2x2_backward(grad_out: &Tensor, indices: &PoolIndices) -> Result<Tensor> {
    if grad_out.shape() != indices.output_shape() {
        return Err(Error::Config(format!(
            "maxpool2x2_backward: gradient {} does not match pool indices for {}",
            grad_out.shape(),
            indices.input_shape
        )));
    }
    let mut grad_in = Tensor::zeros(indices.input_shape);
    let dst = grad_in.data_mut();
    for (&g, &idx) in grad_out.data().iter().zip(&indices.argmax) {
        dst[idx] += g;
    }
    Ok(grad_in)
}

/// Squared error normalised per item by `c*h*w`, averaged over the batch.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape("mse", b)?;
    let s = a.shape();
    if s.numel() == 0 {
        return Ok(0.0);
    }
    let sq: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sq / (s.item_len() as f64 * s.n as f64))
}

/// Gradient of [`mse`] with respect to `a`, scaled by `weight`.
pub(crate) fn mse_grad(a: &Tensor, b: &Tensor, weight: f64) -> Result<Tensor> {
    a.expect_same_shape("mse_grad", b)?;
    let s = a.shape();
    let coef = 2.0 * weight / (s.item_len() as f64 * s.n as f64);
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| coef * (x - y))
        .collect();
    Tensor::from_vec(s, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn t(shape: Shape, v: &[f64]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn relu_examples() {
        let x = t(Shape::new(1, 1, 1, 3), &[-1.0, 0.0, 2.0]);
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::filled(Shape::new(2, 2, 2, 2), -0.5);
        assert!(relu_forward(&neg).data().iter().all(|&v| v == 0.0));
        let mut rng = Rng::new(1);
        let r = Tensor::randn(Shape::new(1, 3, 4, 4), &mut rng);
        assert_eq!(relu_forward(&relu_forward(&r)), relu_forward(&r));
    }

    #[test]
    fn relu_backward_masks() {
        let s = Shape::new(1, 1, 2, 2);
        let g = t(s, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(relu_backward(&g, &Tensor::filled(s, 1.0)).unwrap(), g);
        assert!(relu_backward(&g, &Tensor::filled(s, -1.0))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let at_zero = relu_backward(&g, &Tensor::zeros(s)).unwrap();
        assert!(at_zero.data().iter().all(|&v| v == 0.0));
        assert!(relu_backward(&g, &Tensor::zeros(Shape::new(1, 1, 1, 4))).is_err());
    }

    #[test]
    fn relu_backward_finite_differences() {
        let mut rng = Rng::new(2);
        let s = Shape::new(1, 2, 4, 4);
        // Keep every point at least 0.1 away from the kink.
        let x = Tensor::randn(s, &mut rng).map(|v| {
            if v.abs() < 0.1 {
                v.signum() * 0.1 + v
            } else {
                v
            }
        });
        let r = Tensor::randn(s, &mut rng);
        let f = |x: &Tensor| {
            relu_forward(x)
                .data()
                .iter()
                .zip(r.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let g = relu_backward(&r, &x).unwrap();
        let h = 1e-5;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let an = g.data()[idx];
            if an == 0.0 {
                assert!(fd.abs() < 1e-9);
            } else {
                assert!((fd - an).abs() / an.abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pool_examples() {
        let c = Tensor::filled(Shape::new(2, 3, 4, 6), 1.5);
        let (o, _) = maxpool2x2_forward(&c).unwrap();
        assert_eq!(o.shape(), Shape::new(2, 3, 2, 3));
        assert!(o.data().iter().all(|&v| v == 1.5));
        let x = t(Shape::new(1, 1, 2, 2), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(maxpool2x2_forward(&x).unwrap().0.data(), &[4.0]);
        assert!(maxpool2x2_forward(&Tensor::zeros(Shape::new(1, 1, 3, 4))).is_err());
    }

    #[test]
    fn pool_matches_window_scan() {
        let mut rng = Rng::new(3);
        let x = Tensor::randn(Shape::new(1, 3, 8, 8), &mut rng);
        let (o, _) = maxpool2x2_forward(&x).unwrap();
        for c in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    let mut m = f64::NEG_INFINITY;
                    for di in 0..2 {
                        for dj in 0..2 {
                            m = m.max(x.get(0, c, 2 * i + di, 2 * j + dj));
                        }
                    }
                    assert_eq!(o.get(0, c, i, j), m);
                }
            }
        }
    }

    #[test]
    fn pool_ties_go_to_first() {
        let x = Tensor::filled(Shape::new(1, 1, 2, 2), 7.0);
        let (o, idx) = maxpool2x2_forward(&x).unwrap();
        let g = maxpool2x2_backward(&Tensor::filled(o.shape(), 1.0), &idx).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pool_backward_routes() {
        let mut rng = Rng::new(4);
        let x = Tensor::randn(Shape::new(2, 2, 4, 4), &mut rng);
        let (o, idx) = maxpool2x2_forward(&x).unwrap();
        let ones = maxpool2x2_backward(&Tensor::filled(o.shape(), 1.0), &idx).unwrap();
        for b in 0..2 {
            for c in 0..2 {
                for i in 0..2 {
                    for j in 0..2 {
                        let s: f64 = (0..4)
                            .map(|k| ones.get(b, c, 2 * i + k / 2, 2 * j + k % 2))
                            .sum();
                        assert_eq!(s, 1.0);
                    }
                }
            }
        }
        let zero = maxpool2x2_backward(&Tensor::zeros(o.shape()), &idx).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        assert!(maxpool2x2_backward(&Tensor::zeros(Shape::new(2, 2, 4, 4)), &idx).is_err());
    }

    #[test]
    fn pool_backward_finite_differences() {
        let mut rng = Rng::new(5);
        let s = Shape::new(1, 2, 4, 4);
        let x = Tensor::randn(s, &mut rng);
        let (o, idx) = maxpool2x2_forward(&x).unwrap();
        let r = Tensor::randn(o.shape(), &mut rng);
        let f = |x: &Tensor| {
            let (p, _) = maxpool2x2_forward(x).unwrap();
            p.data()
                .iter()
                .zip(r.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let g = maxpool2x2_backward(&r, &idx).unwrap();
        // Gaussian windows have unique maxima separated by far more than h.
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let an = g.data()[i];
            if an == 0.0 {
                assert!(fd.abs() < 1e-9);
            } else {
                assert!((fd - an).abs() / an.abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mse_examples() {
        let s = Shape::new(1, 1, 2, 2);
        assert_eq!(
            mse(&Tensor::filled(s, 1.0), &Tensor::zeros(s)).unwrap(),
            1.0
        );
        let mut rng = Rng::new(6);
        let a = Tensor::randn(Shape::new(3, 2, 5, 4), &mut rng);
        let b = Tensor::randn(Shape::new(3, 2, 5, 4), &mut rng);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        let mut per_item = 0.0;
        for n in 0..3 {
            let mut acc = 0.0;
            for i in 0..40 {
                let d = a.item(n)[i] - b.item(n)[i];
                acc += d * d;
            }
            per_item += acc / 40.0;
        }
        assert!((mse(&a, &b).unwrap() - per_item / 3.0).abs() < 1e-12);
        assert!(mse(&a, &Tensor::zeros(Shape::new(1, 2, 5, 4))).is_err());
    }
}
