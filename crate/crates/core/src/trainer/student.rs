//! The small fully-convolutional student trained on the toy tasks.

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d_backward_input, conv2d_backward_params, conv2d_forward, randn, relu_backward,
    relu_forward, ConvKernel, Rng, Tensor,
};

/// Hidden widths; the last layer emits the task's output channels.
pub const STUDENT_WIDTHS: [usize; 5] = [16, 32, 32, 32, 16];

/// Six same-padded conv layers with ReLU between them and a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentNet {
    convs: Vec<ConvKernel>,
}

/// Forward intermediates needed by [`StudentNet::backward`].
#[derive(Debug, Clone)]
pub struct StudentTrace {
    inputs: Vec<Tensor>,
    pre_activations: Vec<Tensor>,
}

impl StudentTrace {
    /// Network output (the last layer's pre-activation).
    pub fn output(&self) -> &Tensor {
        self.pre_activations.last().expect("student has layers")
    }
}

/// Weight and bias gradients, one pair per conv layer.
pub type StudentGrads = Vec<(Vec<f64>, Vec<f64>)>;

impl StudentNet {
    /// He-initialized weights, std `sqrt(2 / fan_in)`, zero biases.
    pub fn new(in_channels: usize, out_channels: usize, seed: u64) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Config("student channels must be positive".into()));
        }
        let mut convs = Vec::with_capacity(STUDENT_WIDTHS.len() + 1);
        let mut c_in = in_channels;
        for (l, &d) in STUDENT_WIDTHS
            .iter()
            .chain([out_channels].iter())
            .enumerate()
        {
            let fan_in = 9 * c_in;
            let w = randn(
                &mut Rng::derive(seed, l as u64),
                d * fan_in,
                0.0,
                (2.0 / fan_in as f64).sqrt(),
            );
            convs.push(ConvKernel::new(d, c_in, 3, w, vec![0.0; d])?);
            c_in = d;
        }
        Ok(StudentNet { convs })
    }

    /// Builds a student from explicit layers, checking that channels chain.
    pub fn from_convs(convs: Vec<ConvKernel>) -> Result<Self> {
        if convs.is_empty() {
            return Err(Error::Config("student needs at least one layer".into()));
        }
        for pair in convs.windows(2) {
            if pair[0].d_out() != pair[1].c_in() {
                return Err(Error::Config(format!(
                    "layer emits {} channels but the next expects {}",
                    pair[0].d_out(),
                    pair[1].c_in()
                )));
            }
        }
        Ok(StudentNet { convs })
    }

    pub fn convs(&self) -> &[ConvKernel] {
        &self.convs
    }

    pub fn in_channels(&self) -> usize {
        self.convs[0].c_in()
    }

    pub fn out_channels(&self) -> usize {
        self.convs.last().expect("non-empty").d_out()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self
            .forward_trace(x)?
            .pre_activations
            .pop()
            .expect("non-empty"))
    }

    pub fn forward_trace(&self, x: &Tensor) -> Result<StudentTrace> {
        let last = self.convs.len() - 1;
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut pre = Vec::with_capacity(self.convs.len());
        let mut h = x.clone();
        for (l, conv) in self.convs.iter().enumerate() {
            let e = conv2d_forward(&h, conv)?;
            let next = (l < last).then(|| relu_forward(&e));
            inputs.push(h);
            pre.push(e);
            match next {
                Some(n) => h = n,
                None => break,
            }
        }
        Ok(StudentTrace {
            inputs,
            pre_activations: pre,
        })
    }

    /// Parameter gradients given the gradient of the loss at the output.
    pub fn backward(&self, trace: &StudentTrace, grad_out: &Tensor) -> Result<StudentGrads> {
        grad_out.expect_same_shape("StudentNet::backward", trace.output())?;
        let last = self.convs.len() - 1;
        let mut grads = vec![(Vec::new(), Vec::new()); self.convs.len()];
        let mut g = grad_out.clone();
        for l in (0..=last).rev() {
            if l < last {
                g = relu_backward(&g, &trace.pre_activations[l])?;
            }
            grads[l] = conv2d_backward_params(&trace.inputs[l], &g, &self.convs[l])?;
            if l > 0 {
                g = conv2d_backward_input(&g, &self.convs[l])?;
            }
        }
        Ok(grads)
    }

    /// `theta -= lr * grad` for every weight and bias.
    pub fn sgd_step(&mut self, grads: &StudentGrads, lr: f64) {
        for (conv, (dw, db)) in self.convs.iter_mut().zip(grads) {
            for (w, g) in conv.weights_mut().iter_mut().zip(dw) {
                *w -= lr * g;
            }
            for (b, g) in conv.bias_mut().iter_mut().zip(db) {
                *b -= lr * g;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.convs
            .iter()
            .all(|c| c.weights().iter().chain(c.bias()).all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::losses::pixel_mse_loss;
    use crate::Shape;

    #[test]
    fn shapes_and_determinism() {
        let net = StudentNet::new(3, 4, 1).unwrap();
        assert_eq!(net.convs().len(), 6);
        assert_eq!(net.in_channels(), 3);
        assert_eq!(net.out_channels(), 4);
        let x = Tensor::randn(Shape::new(2, 3, 8, 12), &mut Rng::new(2));
        let y = net.forward(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 4, 8, 12));
        assert_eq!(StudentNet::new(3, 4, 1).unwrap(), net);
        assert_ne!(StudentNet::new(3, 4, 2).unwrap(), net);
    }

    #[test]
    fn he_init_scale() {
        let net = StudentNet::new(3, 4, 7).unwrap();
        for c in net.convs() {
            let n = c.weights().len() as f64;
            let var = c.weights().iter().map(|w| w * w).sum::<f64>() / n;
            let want = 2.0 / c.fan_in() as f64;
            assert!((var / want - 1.0).abs() < 0.25, "{var} vs {want}");
            assert!(c.bias().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        let net = StudentNet::new(2, 3, 11).unwrap();
        let mut rng = Rng::new(12);
        let x = Tensor::randn(Shape::new(2, 2, 5, 5), &mut rng);
        let t = Tensor::randn(Shape::new(2, 3, 5, 5), &mut rng);
        let trace = net.forward_trace(&x).unwrap();
        let (_, g) = pixel_mse_loss(trace.output(), &t).unwrap();
        let grads = net.backward(&trace, &g).unwrap();
        let loss = |n: &StudentNet| pixel_mse_loss(&n.forward(&x).unwrap(), &t).unwrap().0;
        let h = 1e-6;
        for (l, i) in [(0, 0), (0, 17), (2, 100), (5, 3), (5, 40)] {
            let mut p = net.clone();
            p.convs[l].weights_mut()[i] += h;
            let mut m = net.clone();
            m.convs[l].weights_mut()[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            let an = grads[l].0[i];
            assert!(
                (fd - an).abs() <= 1e-6 * fd.abs().max(an.abs()).max(1e-6),
                "layer {l} w{i}: {fd} vs {an}"
            );
        }
        for l in [1, 5] {
            let mut p = net.clone();
            p.convs[l].bias_mut()[1] += h;
            let mut m = net.clone();
            m.convs[l].bias_mut()[1] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - grads[l].1[1]).abs() <= 1e-6 * fd.abs().max(1e-6));
        }
    }

    #[test]
    fn zero_lr_step_is_a_no_op() {
        let mut net = StudentNet::new(1, 1, 3).unwrap();
        let before = net.clone();
        let grads: StudentGrads = net
            .convs()
            .iter()
            .map(|c| (vec![1.0; c.weights().len()], vec![1.0; c.d_out()]))
            .collect();
        net.sgd_step(&grads, 0.0);
        assert_eq!(net, before);
    }

    #[test]
    fn from_convs_checks_chaining() {
        let a = ConvKernel::zeros(4, 1, 3).unwrap();
        let b = ConvKernel::zeros(2, 3, 3).unwrap();
        assert!(StudentNet::from_convs(vec![a.clone(), b]).is_err());
        assert!(StudentNet::from_convs(vec![]).is_err());
        assert!(StudentNet::from_convs(vec![a]).is_ok());
    }
}
