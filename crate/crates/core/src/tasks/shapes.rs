//! Synthetic shapes segmentation: filled rectangles, disks and triangles on
//! a noisy background, with exact per-pixel labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Shape, Tensor};

/// Per-pixel class indices of one image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<usize>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<usize>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape {
                op: "LabelMap::new",
                expected: format!("{} labels", height * width),
                got: format!("{} labels", data.len()),
            });
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, class: usize) -> Self {
        LabelMap {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[usize] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> usize {
        self.data[i * self.width + j]
    }

    pub fn flip_horizontal(&self) -> LabelMap {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev());
        }
        LabelMap {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Checks every label against `n_classes`.
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&c| c >= n_classes) {
            Some(c) => Err(Error::Config(format!(
                "label {c} out of range for {n_classes} classes"
            ))),
            None => Ok(()),
        }
    }

    /// Labels as a 1x1xHxW tensor of class indices.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&c| c as f64).collect();
        Tensor::from_vec(Shape::new(1, 1, self.height, self.width), data).expect("sizes agree")
    }

    /// One-hot encoding as a 1xCxHxW tensor.
    pub fn one_hot(&self, n_classes: usize) -> Result<Tensor> {
        self.validate(n_classes)?;
        let plane = self.height * self.width;
        let mut t = Tensor::zeros(Shape::new(1, n_classes, self.height, self.width));
        for (p, &c) in self.data.iter().enumerate() {
            t.data_mut()[c * plane + p] = 1.0;
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapesSample {
    /// 1x3xHxW, values in [0, 1].
    pub image: Tensor,
    pub label: LabelMap,
    /// 1xCxHxW, a distribution over classes at every pixel.
    pub soft_target: Tensor,
}

impl ShapesSample {
    pub fn flip_horizontal(&self) -> ShapesSample {
        ShapesSample {
            image: self.image.flip_horizontal(),
            label: self.label.flip_horizontal(),
            soft_target: self.soft_target.flip_horizontal(),
        }
    }
}

/// Generator settings. Class 0 is background; classes `1..n_classes` cycle
/// through rectangle, disk and triangle with their own base colors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapesParams {
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    /// Extra primitives beyond one per foreground class, drawn in `0..=max`.
    pub max_extra_shapes: usize,
    /// Std of the per-primitive color offset around the class color.
    pub color_jitter: f64,
    /// Std of the per-pixel Gaussian noise.
    pub pixel_noise: f64,
    /// Every class must cover at least this many pixels.
    pub min_class_pixels: usize,
    pub temperature: f64,
    pub blur_radius: usize,
}

impl Default for ShapesParams {
    fn default() -> Self {
        ShapesParams {
            height: 64,
            width: 64,
            n_classes: 4,
            max_extra_shapes: 3,
            color_jitter: 0.15,
            pixel_noise: 0.1,
            min_class_pixels: 24,
            temperature: 0.25,
            blur_radius: 2,
        }
    }
}

const CLASS_COLORS: [[f64; 3]; 8] = [
    [0.45, 0.45, 0.45],
    [0.80, 0.30, 0.25],
    [0.30, 0.70, 0.35],
    [0.30, 0.40, 0.80],
    [0.80, 0.75, 0.30],
    [0.70, 0.35, 0.75],
    [0.30, 0.75, 0.75],
    [0.90, 0.55, 0.20],
];

const MAX_ATTEMPTS: usize = 1000;

impl ShapesParams {
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
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        for (name, v) in [
            ("color_jitter", self.color_jitter),
            ("pixel_noise", self.pixel_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        check_temperature(self.temperature)?;
        if self.min_class_pixels * self.n_classes > self.height * self.width {
            return Err(Error::Config(
                "min_class_pixels cannot be met on this image size".into(),
            ));
        }
        Ok(())
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Config(format!("temperature must be > 0, got {t}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
enum Primitive {
    Rect {
        top: f64,
        left: f64,
        bottom: f64,
        right: f64,
    },
    Disk {
        ci: f64,
        cj: f64,
        r: f64,
    },
    Triangle {
        p: [(f64, f64); 3],
    },
}

impl Primitive {
    fn random(kind: usize, h: f64, w: f64, rng: &mut Rng) -> Primitive {
        let scale = h.min(w);
        match kind % 3 {
            0 => {
                let ph = rng.uniform_range(0.15, 0.4) * scale;
                let pw = rng.uniform_range(0.15, 0.4) * scale;
                let top = rng.uniform_range(0.0, h - ph);
                let left = rng.uniform_range(0.0, w - pw);
                Primitive::Rect {
                    top,
                    left,
                    bottom: top + ph,
                    right: left + pw,
                }
            }
            1 => {
                let r = rng.uniform_range(0.09, 0.2) * scale;
                Primitive::Disk {
                    ci: rng.uniform_range(r, h - r),
                    cj: rng.uniform_range(r, w - r),
                    r,
                }
            }
            _ => {
                let size = rng.uniform_range(0.25, 0.45) * scale;
                let ci = rng.uniform_range(size / 2.0, h - size / 2.0);
                let cj = rng.uniform_range(size / 2.0, w - size / 2.0);
                let turn = rng.uniform_range(0.0, std::f64::consts::TAU);
                let p = [0.0, 1.0, 2.0].map(|k: f64| {
                    let a = turn + k * std::f64::consts::TAU / 3.0 + rng.uniform_range(-0.3, 0.3);
                    (ci + 0.5 * size * a.sin(), cj + 0.5 * size * a.cos())
                });
                Primitive::Triangle { p }
            }
        }
    }

    /// Whether the pixel centered at `(i + 0.5, j + 0.5)` is covered.
    fn covers(&self, i: usize, j: usize) -> bool {
        let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
        match *self {
            Primitive::Rect {
                top,
                left,
                bottom,
                right,
            } => y >= top && y < bottom && x >= left && x < right,
            Primitive::Disk { ci, cj, r } => (y - ci).powi(2) + (x - cj).powi(2) <= r * r,
            Primitive::Triangle { p } => {
                let side = |a: (f64, f64), b: (f64, f64)| {
                    (b.1 - a.1) * (y - a.0) - (b.0 - a.0) * (x - a.1)
                };
                let s = [side(p[0], p[1]), side(p[1], p[2]), side(p[2], p[0])];
                s.iter().all(|&v| v >= 0.0) || s.iter().all(|&v| v <= 0.0)
            }
        }
    }
}

fn class_color(class: usize) -> [f64; 3] {
    CLASS_COLORS[class % CLASS_COLORS.len()]
}

fn draw_one(p: &ShapesParams, rng: &mut Rng) -> (Tensor, LabelMap) {
    let (h, w) = (p.height, p.width);
    let mut classes: Vec<usize> = (1..p.n_classes).collect();
    for _ in 0..rng.below(p.max_extra_shapes + 1) {
        classes.push(1 + rng.below(p.n_classes - 1));
    }
    // Fisher-Yates so the guaranteed primitives are not always drawn first.
    for i in (1..classes.len()).rev() {
        classes.swap(i, rng.below(i + 1));
    }

    let mut label = vec![0usize; h * w];
    let mut color = vec![[0.0; 3]; h * w];
    let bg = class_color(0).map(|c| c + p.color_jitter * rng.normal());
    color.iter_mut().for_each(|px| *px = bg);
    for &class in &classes {
        let shape = Primitive::random(class - 1, h as f64, w as f64, rng);
        let fill = class_color(class).map(|c| c + p.color_jitter * rng.normal());
        for i in 0..h {
            for j in 0..w {
                if shape.covers(i, j) {
                    label[i * w + j] = class;
                    color[i * w + j] = fill;
                }
            }
        }
    }

    let plane = h * w;
    let mut image = Tensor::zeros(Shape::new(1, 3, h, w));
    let noise = crate::tensor::randn(rng, 3 * plane, 0.0, p.pixel_noise);
    for c in 0..3 {
        for px in 0..plane {
            image.data_mut()[c * plane + px] =
                (color[px][c] + noise[c * plane + px]).clamp(0.0, 1.0);
        }
    }
    (
        image,
        LabelMap {
            height: h,
            width: w,
            data: label,
        },
    )
}

/// Draws sample `index` of the dataset keyed by `seed`. Draws in which some
/// class covers fewer than `min_class_pixels` pixels are rejected.
pub fn gen_shapes_sample(seed: u64, index: u64, p: &ShapesParams) -> Result<ShapesSample> {
    p.validate()?;
    let mut rng = Rng::derive(seed, index);
    for _ in 0..MAX_ATTEMPTS {
        let (image, label) = draw_one(p, &mut rng);
        let mut counts = vec![0usize; p.n_classes];
        label.data.iter().for_each(|&c| counts[c] += 1);
        if counts.iter().all(|&n| n >= p.min_class_pixels) {
            let soft_target = soft_targets(&label, p.n_classes, p.temperature, p.blur_radius)?;
            return Ok(ShapesSample {
                image,
                label,
                soft_target,
            });
        }
    }
    Err(Error::Config(format!(
        "could not place all {} classes on a {}x{} image",
        p.n_classes, p.height, p.width
    )))
}

/// `count` samples, each a pure function of `(seed, index, params)`.
pub fn gen_shapes(seed: u64, count: usize, p: &ShapesParams) -> Result<Vec<ShapesSample>> {
    p.validate()?;
    (0..count as u64)
        .map(|i| gen_shapes_sample(seed, i, p))
        .collect()
}

/// Soft class distribution per pixel: the one-hot map is averaged over a
/// disk of radius `blur_radius` (clipped at the image border), then passed
/// through `softmax(q / temperature)`. Pixels whose disk holds a single
/// class keep that class as the argmax.
pub fn soft_targets(
    label: &LabelMap,
    n_classes: usize,
    temperature: f64,
    blur_radius: usize,
) -> Result<Tensor> {
    check_temperature(temperature)?;
    label.validate(n_classes)?;
    let (h, w) = (label.height, label.width);
    let r = blur_radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|di| (-r..=r).map(move |dj| (di, dj)))
        .filter(|(di, dj)| di * di + dj * dj <= r * r)
        .collect();
    let plane = h * w;
    let mut out = Tensor::zeros(Shape::new(1, n_classes, h, w));
    let mut q = vec![0.0; n_classes];
    for i in 0..h {
        for j in 0..w {
            q.iter_mut().for_each(|v| *v = 0.0);
            let mut inside = 0usize;
            for &(di, dj) in &offsets {
                let (y, x) = (i as isize + di, j as isize + dj);
                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                    q[label.get(y as usize, x as usize)] += 1.0;
                    inside += 1;
                }
            }
            let top = q.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v)) / inside as f64;
            let mut z = 0.0;
            for v in q.iter_mut() {
                *v = ((*v / inside as f64 - top) / temperature).exp();
                z += *v;
            }
            for (c, v) in q.iter().enumerate() {
                out.data_mut()[c * plane + i * w + j] = v / z;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ShapesParams {
        ShapesParams {
            height: 32,
            width: 32,
            ..ShapesParams::default()
        }
    }

    #[test]
    fn empty_and_deterministic() {
        assert!(gen_shapes(1, 0, &small()).unwrap().is_empty());
        let a = gen_shapes(7, 3, &small()).unwrap();
        let b = gen_shapes(7, 3, &small()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_shapes(8, 3, &small()).unwrap());
    }

    #[test]
    fn rejects_bad_params() {
        for p in [
            ShapesParams {
                height: 48,
                ..small()
            },
            ShapesParams {
                width: 0,
                ..small()
            },
            ShapesParams {
                n_classes: 1,
                ..small()
            },
            ShapesParams {
                temperature: 0.0,
                ..small()
            },
        ] {
            assert!(gen_shapes(1, 1, &p).is_err(), "{p:?}");
        }
    }

    #[test]
    fn sample_invariants() {
        let p = small();
        for s in gen_shapes(3, 4, &p).unwrap() {
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            s.label.validate(p.n_classes).unwrap();
            let plane = p.height * p.width;
            for px in 0..plane {
                let total: f64 = (0..p.n_classes)
                    .map(|c| s.soft_target.data()[c * plane + px])
                    .sum();
                assert!((total - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn one_hot_limit_and_uniform_map() {
        let label = LabelMap::new(2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        let t = soft_targets(&label, 3, 1e-3, 0).unwrap();
        for (px, &c) in label.data().iter().enumerate() {
            assert!(t.data()[c * 6 + px] > 0.999);
        }
        let flat = LabelMap::filled(4, 4, 2);
        for temp in [0.1, 1.0, 10.0] {
            let t = soft_targets(&flat, 3, temp, 2).unwrap();
            for px in 0..16 {
                assert!(t.data()[2 * 16 + px] > t.data()[px]);
                assert_eq!(t.data()[px], t.data()[16 + px]);
            }
        }
        assert!(soft_targets(&flat, 3, -1.0, 0).is_err());
        assert!(soft_targets(&flat, 2, 1.0, 0).is_err());
    }

    #[test]
    fn flip_keeps_label_and_image_aligned() {
        let s = gen_shapes(2, 1, &small()).unwrap().remove(0);
        let f = s.flip_horizontal();
        assert_eq!(f.label.get(5, 0), s.label.get(5, 31));
        assert_eq!(f.image.get(0, 1, 5, 0), s.image.get(0, 1, 5, 31));
        assert_eq!(f.flip_horizontal(), s);
    }
}
