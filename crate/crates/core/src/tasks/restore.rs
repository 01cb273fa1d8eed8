//! Synthetic blur-and-noise restoration: piecewise-smooth clean fields and
//! their degraded observations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct RestoreSample {
    /// 1x1xHxW.
    pub degraded: Tensor,
    /// 1x1xHxW, values in [0, 1].
    pub clean: Tensor,
}

impl RestoreSample {
    pub fn flip_horizontal(&self) -> RestoreSample {
        RestoreSample {
            degraded: self.degraded.flip_horizontal(),
            clean: self.clean.flip_horizontal(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RestoreParams {
    pub height: usize,
    pub width: usize,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub bumps: usize,
    pub steps: usize,
}

impl Default for RestoreParams {
    fn default() -> Self {
        RestoreParams {
            height: 64,
            width: 64,
            blur_sigma: 1.5,
            noise_sigma: 0.05,
            bumps: 6,
            steps: 3,
        }
    }
}

impl RestoreParams {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(32)
            || !self.width.is_multiple_of(32)
        {
            return Err(Error::Config(format!(
                "image size {}x{} must be a positive multiple of 32",
                self.height, self.width
            )));
        }
        for (name, v) in [
            ("blur_sigma", self.blur_sigma),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Separable Gaussian blur of every plane, truncated at `ceil(3 sigma)` with
/// clamp-to-edge borders. `sigma == 0` returns the input unchanged.
pub fn gaussian_blur(x: &Tensor, sigma: f64) -> Tensor {
    if sigma == 0.0 {
        return x.clone();
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= z);

    let s = x.shape();
    let (h, w) = (s.h as isize, s.w as isize);
    let mut tmp = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    for (src, dst) in x
        .data()
        .chunks(s.plane())
        .zip(tmp.data_mut().chunks_mut(s.plane()))
    {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (k, d) in kernel.iter().zip(-r..=r) {
                    acc += k * src[(i * w + (j + d).clamp(0, w - 1)) as usize];
                }
                dst[(i * w + j) as usize] = acc;
            }
        }
    }
    for (src, dst) in tmp
        .data()
        .chunks(s.plane())
        .zip(out.data_mut().chunks_mut(s.plane()))
    {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (k, d) in kernel.iter().zip(-r..=r) {
                    acc += k * src[((i + d).clamp(0, h - 1) * w + j) as usize];
                }
                dst[(i * w + j) as usize] = acc;
            }
        }
    }
    out
}

fn clean_field(p: &RestoreParams, rng: &mut Rng) -> Tensor {
    let (h, w) = (p.height, p.width);
    let scale = h.min(w) as f64;
    let mut f = vec![rng.uniform_range(-0.5, 0.5); h * w];
    for _ in 0..p.bumps {
        let (ci, cj) = (
            rng.uniform_range(0.0, h as f64),
            rng.uniform_range(0.0, w as f64),
        );
        let width = rng.uniform_range(0.05, 0.25) * scale;
        let amp = rng.uniform_range(-1.0, 1.0);
        for i in 0..h {
            for j in 0..w {
                let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
                f[i * w + j] += amp * (-d2 / (2.0 * width * width)).exp();
            }
        }
    }
    for _ in 0..p.steps {
        let angle = rng.uniform_range(0.0, std::f64::consts::TAU);
        let (ni, nj) = (angle.sin(), angle.cos());
        let (ci, cj) = (
            rng.uniform_range(0.0, h as f64),
            rng.uniform_range(0.0, w as f64),
        );
        let amp = rng.uniform_range(-1.0, 1.0);
        for i in 0..h {
            for j in 0..w {
                if (i as f64 - ci) * ni + (j as f64 - cj) * nj > 0.0 {
                    f[i * w + j] += amp;
                }
            }
        }
    }
    let lo = f.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data = f.into_iter().map(|v| (v - lo) / span).collect();
    Tensor::from_vec(Shape::new(1, 1, h, w), data).expect("sizes agree")
}

/// Draws sample `index` of the dataset keyed by `seed`.
pub fn gen_restore_sample(seed: u64, index: u64, p: &RestoreParams) -> Result<RestoreSample> {
    p.validate()?;
    let mut rng = Rng::derive(seed, index);
    let clean = clean_field(p, &mut rng);
    let mut degraded = gaussian_blur(&clean, p.blur_sigma);
    if p.noise_sigma > 0.0 {
        let noise = Tensor::randn(clean.shape(), &mut rng);
        degraded.add_scaled(p.noise_sigma, &noise)?;
    }
    Ok(RestoreSample { degraded, clean })
}

/// `count` samples, each a pure function of `(seed, index, params)`.
pub fn gen_restore(seed: u64, count: usize, p: &RestoreParams) -> Result<Vec<RestoreSample>> {
    p.validate()?;
    (0..count as u64)
        .map(|i| gen_restore_sample(seed, i, p))
        .collect()
}
