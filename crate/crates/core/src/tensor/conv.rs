//! Stride-1, same-zero-padded 2-D convolution lowered to im2col + GEMM.
//!
//! Forward is a cross-correlation:
//! `out[b,d,i,j] = bias[d] + sum_{c,u,v} w[d,c,u,v] * x[b,c,i+u-p,j+v-p]`
//! with `p = (k-1)/2` and zeros outside the input.

use super::gemm::{gemm, Layout};
use super::{Shape, Tensor};
use crate::error::{Error, Result};

/// Weights `(d_out, c_in, k, k)` and bias `(d_out)` of one conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    d_out: usize,
    c_in: usize,
    k: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ConvKernel {
    pub fn new(
        d_out: usize,
        c_in: usize,
        k: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if k == 0 || k.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel size must be odd and >= 1, got {k}"
            )));
        }
        if d_out == 0 || c_in == 0 {
            return Err(Error::Config(format!(
                "conv needs d_out > 0 and c_in > 0, got {d_out} and {c_in}"
            )));
        }
        if weights.len() != d_out * c_in * k * k {
            return Err(Error::Shape {
                op: "ConvKernel::new",
                expected: format!("{} weights", d_out * c_in * k * k),
                got: format!("{} weights", weights.len()),
            });
        }
        if bias.len() != d_out {
            return Err(Error::Shape {
                op: "ConvKernel::new",
                expected: format!("{d_out} biases"),
                got: format!("{} biases", bias.len()),
            });
        }
        Ok(ConvKernel {
            d_out,
            c_in,
            k,
            weights,
            bias,
        })
    }

    pub fn zeros(d_out: usize, c_in: usize, k: usize) -> Result<Self> {
        Self::new(
            d_out,
            c_in,
            k,
            vec![0.0; d_out * c_in * k * k],
            vec![0.0; d_out],
        )
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn kernel_size(&self) -> usize {
        self.k
    }

    /// Inputs feeding one output unit: `k^2 * c_in`.
    pub fn fan_in(&self) -> usize {
        self.k * self.k * self.c_in
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    #[inline]
    pub fn weight(&self, d: usize, c: usize, u: usize, v: usize) -> f64 {
        self.weights[((d * self.c_in + c) * self.k + u) * self.k + v]
    }
}

/// Valid output columns `j` for kernel column `v`: those with
/// `0 <= j + v - pad < w`.
#[inline]
fn valid_range(v: usize, pad: usize, w: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(v).min(w);
    let hi = (w + pad).saturating_sub(v).min(w);
    (lo, hi.max(lo))
}

/// Unfolds one `(c, h, w)` item into a `(c*k*k) x (h*w)` column matrix.
fn im2col(item: &[f64], c_in: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = (k - 1) / 2;
    let plane = h * w;
    cols.fill(0.0);
    for c in 0..c_in {
        let src = &item[c * plane..(c + 1) * plane];
        for u in 0..k {
            let (ilo, ihi) = valid_range(u, pad, h);
            for v in 0..k {
                let (jlo, jhi) = valid_range(v, pad, w);
                if jlo == jhi {
                    continue;
                }
                let row = &mut cols[((c * k + u) * k + v) * plane..][..plane];
                for i in ilo..ihi {
                    let si = i + u - pad;
                    let s = &src[si * w + jlo + v - pad..si * w + jhi + v - pad];
                    row[i * w + jlo..i * w + jhi].copy_from_slice(s);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into an item.
fn col2im(cols: &[f64], c_in: usize, h: usize, w: usize, k: usize, item: &mut [f64]) {
    let pad = (k - 1) / 2;
    let plane = h * w;
    item.fill(0.0);
    for c in 0..c_in {
        let dst = &mut item[c * plane..(c + 1) * plane];
        for u in 0..k {
            let (ilo, ihi) = valid_range(u, pad, h);
            for v in 0..k {
                let (jlo, jhi) = valid_range(v, pad, w);
                if jlo == jhi {
                    continue;
                }
                let row = &cols[((c * k + u) * k + v) * plane..][..plane];
                for i in ilo..ihi {
                    let di = i + u - pad;
                    let d = &mut dst[di * w + jlo + v - pad..di * w + jhi + v - pad];
                    for (a, b) in d.iter_mut().zip(&row[i * w + jlo..i * w + jhi]) {
                        *a += b;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(input: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    let s = input.shape();
    if s.c != kernel.c_in {
        return Err(Error::Config(format!(
            "conv2d_forward: input has {} channels, kernel expects {}",
            s.c, kernel.c_in
        )));
    }
    input.expect_finite("conv2d_forward")?;
    let plane = s.plane();
    let kk = kernel.fan_in();
    let mut out = Tensor::zeros(Shape::new(s.n, kernel.d_out, s.h, s.w));
    let mut cols = if kernel.k == 1 {
        Vec::new()
    } else {
        vec![0.0; kk * plane]
    };
    for b in 0..s.n {
        let dst = out.item_mut(b);
        for (d, row) in dst.chunks_mut(plane).enumerate() {
            row.fill(kernel.bias[d]);
        }
        let rhs: &[f64] = if kernel.k == 1 {
            input.item(b)
        } else {
            im2col(input.item(b), s.c, s.h, s.w, kernel.k, &mut cols);
            &cols
        };
        gemm(
            kernel.d_out,
            kk,
            plane,
            &kernel.weights,
            Layout::Normal,
            rhs,
            Layout::Normal,
            1.0,
            dst,
        );
    }
    Ok(out)
}

/// Gradient with respect to the input of [`conv2d_forward`].
pub fn conv2d_backward_input(grad_out: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    let s = grad_out.shape();
    if s.c != kernel.d_out {
        return Err(Error::Shape {
            op: "conv2d_backward_input",
            expected: format!("{} channels", kernel.d_out),
            got: format!("{} channels", s.c),
        });
    }
    let plane = s.plane();
    let kk = kernel.fan_in();
    let mut grad_in = Tensor::zeros(Shape::new(s.n, kernel.c_in, s.h, s.w));
    let mut cols = if kernel.k == 1 {
        Vec::new()
    } else {
        vec![0.0; kk * plane]
    };
    for b in 0..s.n {
        if kernel.k == 1 {
            gemm(
                kk,
                kernel.d_out,
                plane,
                &kernel.weights,
                Layout::Transposed,
                grad_out.item(b),
                Layout::Normal,
                0.0,
                grad_in.item_mut(b),
            );
        } else {
            gemm(
                kk,
                kernel.d_out,
                plane,
                &kernel.weights,
                Layout::Transposed,
                grad_out.item(b),
                Layout::Normal,
                0.0,
                &mut cols,
            );
            col2im(&cols, kernel.c_in, s.h, s.w, kernel.k, grad_in.item_mut(b));
        }
    }
    Ok(grad_in)
}

/// Gradients with respect to weights and bias, summed over the batch.
pub fn conv2d_backward_params(
    input: &Tensor,
    grad_out: &Tensor,
    kernel: &ConvKernel,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = input.shape();
    let g = grad_out.shape();
    if s.c != kernel.c_in || g != Shape::new(s.n, kernel.d_out, s.h, s.w) {
        return Err(Error::Shape {
            op: "conv2d_backward_params",
            expected: Shape::new(s.n, kernel.d_out, s.h, s.w).to_string(),
            got: g.to_string(),
        });
    }
    let plane = s.plane();
    let kk = kernel.fan_in();
    let mut dw = vec![0.0; kernel.weights.len()];
    let mut db = vec![0.0; kernel.d_out];
    let mut cols = if kernel.k == 1 {
        Vec::new()
    } else {
        vec![0.0; kk * plane]
    };
    for b in 0..s.n {
        let go = grad_out.item(b);
        for (d, row) in go.chunks(plane).enumerate() {
            db[d] += row.iter().sum::<f64>();
        }
        let rhs: &[f64] = if kernel.k == 1 {
            input.item(b)
        } else {
            im2col(input.item(b), s.c, s.h, s.w, kernel.k, &mut cols);
            &cols
        };
        let beta = if b == 0 { 0.0 } else { 1.0 };
        gemm(
            kernel.d_out,
            plane,
            kk,
            go,
            Layout::Normal,
            rhs,
            Layout::Transposed,
            beta,
            &mut dw,
        );
    }
    Ok((dw, db))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    /// Direct loop over every output position, tap and channel.
    fn naive_conv(x: &Tensor, kern: &ConvKernel) -> Tensor {
        let s = x.shape();
        let p = (kern.kernel_size() - 1) as isize / 2;
        let k = kern.kernel_size();
        let mut out = Tensor::zeros(Shape::new(s.n, kern.d_out(), s.h, s.w));
        for b in 0..s.n {
            for d in 0..kern.d_out() {
                for i in 0..s.h {
                    for j in 0..s.w {
                        let mut acc = kern.bias()[d];
                        for c in 0..s.c {
                            for u in 0..k {
                                for v in 0..k {
                                    let ii = i as isize + u as isize - p;
                                    let jj = j as isize + v as isize - p;
                                    if ii >= 0
                                        && jj >= 0
                                        && (ii as usize) < s.h
                                        && (jj as usize) < s.w
                                    {
                                        acc += kern.weight(d, c, u, v)
                                            * x.get(b, c, ii as usize, jj as usize);
                                    }
                                }
                            }
                        }
                        out.set(b, d, i, j, acc);
                    }
                }
            }
        }
        out
    }

    fn random_kernel(rng: &mut Rng, d: usize, c: usize, k: usize) -> ConvKernel {
        let w = crate::tensor::randn(rng, d * c * k * k, 0.0, 1.0);
        let b = crate::tensor::randn(rng, d, 0.0, 1.0);
        ConvKernel::new(d, c, k, w, b).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut rng = Rng::new(1);
        let mut kern = random_kernel(&mut rng, 3, 2, 3);
        kern.bias_mut().fill(0.0);
        let out = conv2d_forward(&Tensor::zeros(Shape::new(1, 2, 5, 5)), &kern).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centered_delta_reads_out_flipped_kernel() {
        let mut x = Tensor::zeros(Shape::new(1, 1, 3, 3));
        x.set(0, 0, 1, 1, 1.0);
        let w: Vec<f64> = (1..=9).map(f64::from).collect();
        let kern = ConvKernel::new(1, 1, 3, w, vec![0.0]).unwrap();
        let out = conv2d_forward(&x, &kern).unwrap();
        // out[i,j] = w[2-i, 2-j] for a delta at the centre.
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(out.get(0, 0, i, j), kern.weight(0, 0, 2 - i, 2 - j));
            }
        }
        assert_eq!(out, naive_conv(&x, &kern));
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = Rng::new(11);
        let x = Tensor::randn(Shape::new(2, 4, 8, 8), &mut rng);
        let kern = random_kernel(&mut rng, 5, 4, 3);
        let got = conv2d_forward(&x, &kern).unwrap();
        assert!(max_abs_diff(&got, &naive_conv(&x, &kern)) < 1e-10);
        for k in [1, 5, 7] {
            let kern = random_kernel(&mut rng, 3, 4, k);
            let got = conv2d_forward(&x, &kern).unwrap();
            assert!(max_abs_diff(&got, &naive_conv(&x, &kern)) < 1e-10, "k={k}");
        }
    }

    #[test]
    fn kernel_larger_than_image() {
        let mut rng = Rng::new(12);
        for (h, w) in [(2, 3), (1, 1), (1, 4), (3, 1)] {
            let x = Tensor::randn(Shape::new(1, 2, h, w), &mut rng);
            let kern = random_kernel(&mut rng, 2, 2, 7);
            let got = conv2d_forward(&x, &kern).unwrap();
            assert!(max_abs_diff(&got, &naive_conv(&x, &kern)) < 1e-10);
            let g = Tensor::randn(got.shape(), &mut rng);
            let back = conv2d_backward_input(&g, &kern).unwrap();
            assert_eq!(back.shape(), x.shape());
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let kern = ConvKernel::zeros(2, 3, 3).unwrap();
        assert!(matches!(
            conv2d_forward(&Tensor::zeros(Shape::new(1, 2, 4, 4)), &kern),
            Err(Error::Config(_))
        ));
        let mut x = Tensor::zeros(Shape::new(1, 3, 4, 4));
        x.data_mut()[5] = f64::NAN;
        assert!(matches!(conv2d_forward(&x, &kern), Err(Error::Numeric(_))));
        assert!(conv2d_backward_input(&Tensor::zeros(Shape::new(1, 3, 4, 4)), &kern).is_err());
        assert!(ConvKernel::zeros(1, 1, 2).is_err());
        assert!(ConvKernel::zeros(1, 0, 3).is_err());
    }

    #[test]
    fn backward_input_zero_grad() {
        let mut rng = Rng::new(2);
        let kern = random_kernel(&mut rng, 4, 3, 3);
        let g = conv2d_backward_input(&Tensor::zeros(Shape::new(2, 4, 5, 5)), &kern).unwrap();
        assert_eq!(g.shape(), Shape::new(2, 3, 5, 5));
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_input_matches_finite_differences() {
        let mut rng = Rng::new(3);
        let x = Tensor::randn(Shape::new(1, 2, 6, 6), &mut rng);
        let kern = random_kernel(&mut rng, 3, 2, 3);
        // Fixed linear functional f(y) = <r, y>.
        let r = Tensor::randn(Shape::new(1, 3, 6, 6), &mut rng);
        let f = |x: &Tensor| -> f64 {
            let y = conv2d_forward(x, &kern).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let grad = conv2d_backward_input(&r, &kern).unwrap();
        let h = 1e-5;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let an = grad.data()[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-6, "idx {idx}: fd {fd} analytic {an}");
        }
    }

    #[test]
    fn one_by_one_backward_is_weight_transpose_product() {
        let mut rng = Rng::new(4);
        let (d, c, h, w) = (5, 3, 4, 4);
        let kern = random_kernel(&mut rng, d, c, 1);
        let g = Tensor::randn(Shape::new(2, d, h, w), &mut rng);
        let got = conv2d_backward_input(&g, &kern).unwrap();
        for b in 0..2 {
            for ci in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = 0.0;
                        for di in 0..d {
                            acc += kern.weight(di, ci, 0, 0) * g.get(b, di, i, j);
                        }
                        assert!((got.get(b, ci, i, j) - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn params_gradient_matches_finite_differences() {
        let mut rng = Rng::new(5);
        let x = Tensor::randn(Shape::new(2, 2, 5, 5), &mut rng);
        let kern = random_kernel(&mut rng, 3, 2, 3);
        let r = Tensor::randn(Shape::new(2, 3, 5, 5), &mut rng);
        let f = |k: &ConvKernel| -> f64 {
            let y = conv2d_forward(&x, k).unwrap();
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let (dw, db) = conv2d_backward_params(&x, &r, &kern).unwrap();
        let h = 1e-5;
        for (idx, &analytic) in dw.iter().enumerate() {
            let mut kp = kern.clone();
            kp.weights_mut()[idx] += h;
            let mut km = kern.clone();
            km.weights_mut()[idx] -= h;
            let fd = (f(&kp) - f(&km)) / (2.0 * h);
            assert!((fd - analytic).abs() / fd.abs().max(1e-8) < 1e-6);
        }
        for (d, &got) in db.iter().enumerate() {
            let want: f64 = (0..2)
                .flat_map(|b| (0..25).map(move |p| (b, p)))
                .map(|(b, p)| r.item(b)[d * 25 + p])
                .sum();
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn linearity_without_bias() {
        let mut rng = Rng::new(6);
        let mut kern = random_kernel(&mut rng, 4, 3, 5);
        kern.bias_mut().fill(0.0);
        let x = Tensor::randn(Shape::new(1, 3, 7, 9), &mut rng);
        let z = Tensor::randn(Shape::new(1, 3, 7, 9), &mut rng);
        let (alpha, beta) = (1.7, -0.3);
        let mut mix = x.scale(alpha);
        mix.add_scaled(beta, &z).unwrap();
        let lhs = conv2d_forward(&mix, &kern).unwrap();
        let mut rhs = conv2d_forward(&x, &kern).unwrap().scale(alpha);
        rhs.add_scaled(beta, &conv2d_forward(&z, &kern).unwrap())
            .unwrap();
        assert!(max_abs_diff(&lhs, &rhs) < 1e-10);
    }
}
