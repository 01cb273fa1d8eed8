//! The fixed, randomly-weighted VGG-style loss network.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d_backward_input, conv2d_forward, maxpool2x2_backward, maxpool2x2_forward, relu_backward,
    relu_forward, ConvKernel, PoolIndices, Rng, Tensor,
};

/// How conv weights are drawn. Biases are always zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum InitScheme {
    /// N(0, 2 / n_l) with n_l = k^2 * c_in.
    Calibrated,
    /// N(0, sigma^2).
    Gaussian(f64),
    /// U[-a, a].
    Uniform(f64),
    /// N(0, 2 / (n_l + k^2 * d_l)).
    XavierNormal,
}

impl InitScheme {
    /// The schemes compared in the initialization study.
    pub fn table() -> Vec<InitScheme> {
        vec![
            InitScheme::Gaussian(1.0),
            InitScheme::Gaussian(0.1),
            InitScheme::Gaussian(0.01),
            InitScheme::Uniform(1.0),
            InitScheme::Uniform(0.1),
            InitScheme::Uniform(0.01),
            InitScheme::XavierNormal,
            InitScheme::Calibrated,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            InitScheme::Gaussian(s) if !(s > 0.0 && s.is_finite()) => Err(Error::Config(format!(
                "gaussian init needs sigma > 0, got {s}"
            ))),
            InitScheme::Uniform(a) if !(a > 0.0 && a.is_finite()) => {
                Err(Error::Config(format!("uniform init needs a > 0, got {a}")))
            }
            _ => Ok(()),
        }
    }

    /// Weight variance for a layer with the given fan-in and output width.
    pub fn weight_variance(&self, fan_in: usize, k: usize, d_out: usize) -> f64 {
        match *self {
            InitScheme::Calibrated => 2.0 / fan_in as f64,
            InitScheme::Gaussian(s) => s * s,
            InitScheme::Uniform(a) => a * a / 3.0,
            InitScheme::XavierNormal => 2.0 / (fan_in + k * k * d_out) as f64,
        }
    }

    fn sample(
        &self,
        rng: &mut Rng,
        count: usize,
        fan_in: usize,
        k: usize,
        d_out: usize,
    ) -> Vec<f64> {
        match *self {
            InitScheme::Uniform(a) => (0..count).map(|_| rng.uniform_range(-a, a)).collect(),
            _ => {
                let std = self.weight_variance(fan_in, k, d_out).sqrt();
                crate::tensor::randn(rng, count, 0.0, std)
            }
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitScheme::Calibrated => write!(f, "calibrated"),
            InitScheme::Gaussian(s) => write!(f, "gaussian({s})"),
            InitScheme::Uniform(a) => write!(f, "uniform({a})"),
            InitScheme::XavierNormal => write!(f, "xavier_normal"),
        }
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    /// Accepts `calibrated`, `xavier_normal`, `gaussian(σ)` and `uniform(a)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let param = |name: &str| -> Option<Result<f64>> {
            let inner = s.strip_prefix(name)?.strip_prefix('(')?.strip_suffix(')')?;
            Some(
                inner
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("bad init parameter {inner:?}: {e}"))),
            )
        };
        let scheme = match s.as_str() {
            "calibrated" | "ours" | "he" => InitScheme::Calibrated,
            "xavier_normal" | "xavier" => InitScheme::XavierNormal,
            _ => {
                if let Some(p) = param("gaussian") {
                    InitScheme::Gaussian(p?)
                } else if let Some(p) = param("uniform") {
                    InitScheme::Uniform(p?)
                } else {
                    return Err(Error::Config(format!("unknown init scheme {s:?}")));
                }
            }
        };
        scheme.validate()?;
        Ok(scheme)
    }
}

impl TryFrom<String> for InitScheme {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<InitScheme> for String {
    fn from(s: InitScheme) -> String {
        s.to_string()
    }
}

/// Declarative description of a loss network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercepNetSpec {
    /// Conv layers per block, N_1..N_k.
    pub blocks: Vec<usize>,
    /// Output width of each block.
    pub channels: Vec<usize>,
    pub kernel_size: usize,
    /// Channel count of the prediction fed to the net.
    pub in_channels: usize,
    pub init: InitScheme,
    pub seed: u64,
}

/// Block widths of the VGG family.
pub const VGG_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];

impl PercepNetSpec {
    /// VGG16 block pattern `2,2,3,3,3` with the VGG widths.
    pub fn vgg16(in_channels: usize, seed: u64) -> Self {
        Self::vgg(vec![2, 2, 3, 3, 3], in_channels, seed)
    }

    /// The given block structure with the VGG widths, 3x3 kernels and
    /// calibrated init.
    pub fn vgg(blocks: Vec<usize>, in_channels: usize, seed: u64) -> Self {
        let channels = VGG_CHANNELS
            .iter()
            .copied()
            .cycle()
            .take(blocks.len())
            .collect();
        PercepNetSpec {
            blocks,
            channels,
            kernel_size: 3,
            in_channels,
            init: InitScheme::Calibrated,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config(
                "loss network needs at least one block".into(),
            ));
        }
        if self.blocks.len() != self.channels.len() {
            return Err(Error::Config(format!(
                "{} blocks but {} channel widths",
                self.blocks.len(),
                self.channels.len()
            )));
        }
        if self.blocks.contains(&0) || self.channels.contains(&0) {
            return Err(Error::Config("block counts and widths must be >= 1".into()));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        self.init.validate()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_convs(&self) -> usize {
        self.blocks.iter().sum()
    }

    /// Spatial divisor imposed by the pools: `2^k`.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.blocks.len()
    }
}

/// Parses the comma-separated block notation, e.g. `"2,2,3,3,3"`.
pub fn parse_structure(s: &str) -> Result<Vec<usize>> {
    let blocks = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("bad block count {p:?} in {s:?}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if blocks.is_empty() || blocks.contains(&0) {
        return Err(Error::Config(format!(
            "structure {s:?} needs positive block counts"
        )));
    }
    Ok(blocks)
}

pub fn format_structure(blocks: &[usize]) -> String {
    blocks
        .iter()
        .map(|b| b.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Five-block VGG-style structure with `depth` convs in total, matching
/// VGG11/13/16/19 (8/10/13/16 convs) and `3,3,4,4,4` at 18. Past 18 the
/// extra layers go to blocks 3, 4, 5, 1, 2 in turn.
pub fn vgg_blocks_for_depth(depth: usize) -> Result<Vec<usize>> {
    const ORDER: [usize; 13] = [2, 3, 4, 0, 1, 2, 3, 4, 2, 3, 4, 0, 1];
    if depth < 5 {
        return Err(Error::Config(format!(
            "depth {depth} is below one conv per block"
        )));
    }
    let mut blocks = vec![1; 5];
    let extra = ORDER.iter().chain([2, 3, 4, 0, 1].iter().cycle());
    for &b in extra.take(depth - 5) {
        blocks[b] += 1;
    }
    Ok(blocks)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(ConvKernel),
    Relu,
    MaxPool,
}

/// Activations at every tap of the loss network.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockActivations {
    /// Output of each block's final ReLU, before its pool.
    pub blocks: Vec<Tensor>,
    /// Output of the last pool.
    pub embedding: Tensor,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Conv outputs before the ReLU, one per conv layer.
    pub pre_activations: Vec<Tensor>,
    pool_indices: Vec<PoolIndices>,
    pub activations: BlockActivations,
}

/// Upstream gradients injected at the taps of [`BlockActivations`].
#[derive(Debug, Clone, Default)]
pub struct EmbeddingGrads {
    pub blocks: Vec<Option<Tensor>>,
    pub embedding: Option<Tensor>,
}

/// A materialized loss network. Weights never change after [`PercepNet::build`].
#[derive(Debug, Clone, PartialEq)]
pub struct PercepNet {
    spec: PercepNetSpec,
    layers: Vec<Layer>,
}

impl PercepNet {
    pub fn build(spec: &PercepNetSpec) -> Result<Self> {
        spec.validate()?;
        let k = spec.kernel_size;
        let mut layers = Vec::with_capacity(2 * spec.num_convs() + spec.num_blocks());
        let mut c_in = spec.in_channels;
        let mut conv_index = 0u64;
        for (&n, &d) in spec.blocks.iter().zip(&spec.channels) {
            for _ in 0..n {
                let fan_in = k * k * c_in;
                let mut rng = Rng::derive(spec.seed, conv_index);
                let weights = spec.init.sample(&mut rng, d * fan_in, fan_in, k, d);
                layers.push(Layer::Conv(ConvKernel::new(
                    d,
                    c_in,
                    k,
                    weights,
                    vec![0.0; d],
                )?));
                layers.push(Layer::Relu);
                c_in = d;
                conv_index += 1;
            }
            layers.push(Layer::MaxPool);
        }
        Ok(PercepNet {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &PercepNetSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn convs(&self) -> impl Iterator<Item = &ConvKernel> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(k) => Some(k),
            _ => None,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.spec.num_blocks()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.c != self.spec.in_channels {
            return Err(Error::Config(format!(
                "loss network expects {} input channels, got {}",
                self.spec.in_channels, s.c
            )));
        }
        let m = self.spec.spatial_multiple();
        if !s.h.is_multiple_of(m) || !s.w.is_multiple_of(m) {
            return Err(Error::Config(format!(
                "input {}x{} is not divisible by {m}; pad it first",
                s.h, s.w
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<BlockActivations> {
        Ok(self.forward_trace(x)?.activations)
    }

    pub fn forward_trace(&self, x: &Tensor) -> Result<ForwardTrace> {
        self.check_input(x)?;
        let mut pre_activations = Vec::with_capacity(self.spec.num_convs());
        let mut pool_indices = Vec::with_capacity(self.num_blocks());
        let mut blocks = Vec::with_capacity(self.num_blocks());
        let mut cur = x.clone();
        for layer in &self.layers {
            match layer {
                Layer::Conv(k) => {
                    let e = conv2d_forward(&cur, k)?;
                    cur = relu_forward(&e);
                    pre_activations.push(e);
                }
                // Applied together with the conv above.
                Layer::Relu => {}
                Layer::MaxPool => {
                    let (pooled, idx) = maxpool2x2_forward(&cur)?;
                    blocks.push(std::mem::replace(&mut cur, pooled));
                    pool_indices.push(idx);
                }
            }
        }
        Ok(ForwardTrace {
            pre_activations,
            pool_indices,
            activations: BlockActivations {
                blocks,
                embedding: cur,
            },
        })
    }

    /// Gradient with respect to the network input of a scalar whose
    /// gradients at the taps are `grads`.
    pub fn backward_to_input(&self, x: &Tensor, grads: &EmbeddingGrads) -> Result<Tensor> {
        let trace = self.forward_trace(x)?;
        self.backward_trace(&trace, grads)
    }

    pub fn backward_trace(&self, trace: &ForwardTrace, grads: &EmbeddingGrads) -> Result<Tensor> {
        let nb = self.num_blocks();
        if !grads.blocks.is_empty() && grads.blocks.len() != nb {
            return Err(Error::Config(format!(
                "{} block gradients for a {nb}-block network",
                grads.blocks.len()
            )));
        }
        let check = |g: &Tensor, want: &Tensor| -> Result<()> {
            if g.shape() != want.shape() {
                return Err(Error::Shape {
                    op: "PercepNet::backward",
                    expected: want.shape().to_string(),
                    got: g.shape().to_string(),
                });
            }
            Ok(())
        };
        if let Some(g) = &grads.embedding {
            check(g, &trace.activations.embedding)?;
        }
        for (g, a) in grads.blocks.iter().zip(&trace.activations.blocks) {
            if let Some(g) = g {
                check(g, a)?;
            }
        }

        let mut g: Option<Tensor> = grads.embedding.clone();
        let mut block = nb;
        let mut conv = trace.pre_activations.len();
        for layer in self.layers.iter().rev() {
            match layer {
                Layer::MaxPool => {
                    block -= 1;
                    let mut below = match g.take() {
                        Some(up) => Some(maxpool2x2_backward(&up, &trace.pool_indices[block])?),
                        None => None,
                    };
                    if let Some(Some(tap)) = grads.blocks.get(block) {
                        match below.as_mut() {
                            Some(b) => b.add_scaled(1.0, tap)?,
                            None => below = Some(tap.clone()),
                        }
                    }
                    g = below;
                }
                Layer::Relu => {}
                Layer::Conv(k) => {
                    conv -= 1;
                    if let Some(up) = g.take() {
                        let masked = relu_backward(&up, &trace.pre_activations[conv])?;
                        g = Some(conv2d_backward_input(&masked, k)?);
                    }
                }
            }
        }
        let input_shape = trace
            .pool_indices
            .first()
            .map(|p| p.input_shape())
            .expect("at least one block");
        let in_shape = crate::Shape::new(
            input_shape.n,
            self.spec.in_channels,
            input_shape.h,
            input_shape.w,
        );
        Ok(g.unwrap_or_else(|| Tensor::zeros(in_shape)))
    }
}
