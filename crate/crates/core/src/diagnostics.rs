//! Empirical checks of how activation variance propagates through a
//! randomly-weighted loss network.
//!
//! For a conv layer `e_l = W_l y_l` with zero-mean weights and
//! `y_l = relu(e_{l-1})`, the per-layer variance factor is
//! `f_l = (1/2) n_l Var[w_l]`, so `Var[e_L] = Var[e_1] * prod_{l=2..L} f_l`.
//! A 2x2 max pool between two convs is not part of that product; the reports
//! keep the pool-free prediction and, separately, the measured second-moment
//! gain of each pool so both can be inspected.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::percep::{vgg_blocks_for_depth, InitScheme, PercepNet, PercepNetSpec, VGG_CHANNELS};
use crate::tensor::{maxpool2x2_forward, Rng, Shape, Tensor};

const INPUT_STREAM: u64 = 0x1A;
const PAIR_STREAM: u64 = 0x2B;
const NOISE_STREAM: u64 = 0x3C;

/// Size of the standard-normal probe inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ProbeInput {
    pub height: usize,
    pub width: usize,
}

impl Default for ProbeInput {
    fn default() -> Self {
        ProbeInput {
            height: 64,
            width: 64,
        }
    }
}

impl ProbeInput {
    fn draw(&self, channels: usize, rng: &mut Rng) -> Tensor {
        Tensor::randn(Shape::new(1, channels, self.height, self.width), rng)
    }
}

/// One conv layer of a [`VarianceReport`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerVariance {
    /// 1-based conv index.
    pub layer: usize,
    /// 1-based block index.
    pub block: usize,
    /// A max pool sits between this conv and the previous one.
    pub after_pool: bool,
    pub fan_in: usize,
    /// Nominal weight variance of the init scheme.
    pub weight_var: f64,
    /// `(1/2) n_l Var[w_l]`.
    pub factor: f64,
    /// Mean over seeds of the sample variance of `e_l`.
    pub measured_var: f64,
    /// `Var[e_1] * prod_{m=2..l} f_m`, pools excluded.
    pub predicted_var: f64,
    pub ratio: f64,
    /// Measured `E[y^2]` gain of the preceding pool, 1 when there is none.
    pub pool_gain: f64,
    /// `predicted_var` times every pool gain up to this layer.
    pub pool_adjusted_predicted_var: f64,
    pub pool_adjusted_ratio: f64,
    /// `ln(Var[e_l] / Var[e_{l-1}])`, 0 for the first layer.
    pub log_increment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceReport {
    pub structure: String,
    pub init: String,
    pub input: ProbeInput,
    pub seeds: Vec<u64>,
    pub layers: Vec<LayerVariance>,
}

impl VarianceReport {
    /// Largest `|ln ratio|` over all layers.
    pub fn max_abs_log_ratio(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.ratio.ln().abs())
            .fold(0.0, f64::max)
    }

    /// Least-squares slope of `ln Var[e_l]` against `l`.
    pub fn log_variance_slope(&self) -> f64 {
        let n = self.layers.len() as f64;
        if self.layers.len() < 2 {
            return 0.0;
        }
        let xs: Vec<f64> = self.layers.iter().map(|l| l.layer as f64).collect();
        let ys: Vec<f64> = self.layers.iter().map(|l| l.measured_var.ln()).collect();
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        sxy / sxx
    }
}

fn mean_square(t: &Tensor) -> f64 {
    if t.is_empty() {
        return 0.0;
    }
    t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    Ok(())
}

/// Per-layer variance of conv outputs, averaged over `seeds`. Each seed
/// draws its own net (spec seed replaced by the trial seed) and input.
pub fn measure_variance_propagation(
    spec: &PercepNetSpec,
    seeds: &[u64],
    input: ProbeInput,
) -> Result<VarianceReport> {
    spec.validate()?;
    check_seeds(seeds)?;
    let n_layers = spec.num_convs();
    let mut measured = vec![0.0; n_layers];
    // Second-moment gain of the pool closing block b, indexed by block.
    let mut gains = vec![0.0; spec.num_blocks()];
    for &seed in seeds {
        let net = PercepNet::build(&PercepNetSpec {
            seed,
            ..spec.clone()
        })?;
        let x = input.draw(spec.in_channels, &mut Rng::derive(seed, INPUT_STREAM));
        let trace = net.forward_trace(&x)?;
        for (m, e) in measured.iter_mut().zip(&trace.pre_activations) {
            *m += e.variance() / seeds.len() as f64;
        }
        for (b, block) in trace.activations.blocks.iter().enumerate() {
            let before = mean_square(block);
            let after = mean_square(&maxpool2x2_forward(block)?.0);
            let gain = if before > 0.0 { after / before } else { 1.0 };
            gains[b] += gain / seeds.len() as f64;
        }
    }

    let net = PercepNet::build(spec)?;
    let mut layers = Vec::with_capacity(n_layers);
    let mut predicted = measured[0];
    let mut adjusted = measured[0];
    let mut layer = 0;
    for (b, &count) in spec.blocks.iter().enumerate() {
        for i in 0..count {
            let kern = net.convs().nth(layer).expect("layer exists");
            let weight_var =
                spec.init
                    .weight_variance(kern.fan_in(), kern.kernel_size(), kern.d_out());
            let factor = 0.5 * kern.fan_in() as f64 * weight_var;
            let after_pool = i == 0 && b > 0;
            let pool_gain = if after_pool { gains[b - 1] } else { 1.0 };
            if layer > 0 {
                predicted *= factor;
                adjusted *= factor * pool_gain;
            }
            layers.push(LayerVariance {
                layer: layer + 1,
                block: b + 1,
                after_pool,
                fan_in: kern.fan_in(),
                weight_var,
                factor,
                measured_var: measured[layer],
                predicted_var: predicted,
                ratio: measured[layer] / predicted,
                pool_gain,
                pool_adjusted_predicted_var: adjusted,
                pool_adjusted_ratio: measured[layer] / adjusted,
                log_increment: if layer == 0 {
                    0.0
                } else {
                    (measured[layer] / measured[layer - 1]).ln()
                },
            });
            layer += 1;
        }
    }
    Ok(VarianceReport {
        structure: crate::percep::format_structure(&spec.blocks),
        init: spec.init.to_string(),
        input,
        seeds: seeds.to_vec(),
        layers,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Stable,
    Exploded,
    Vanished,
}

impl Verdict {
    pub const EXPLODE_ABOVE: f64 = 1e3;
    pub const VANISH_BELOW: f64 = 1e-3;

    /// Classifies an RMS magnitude ratio `||e_L|| / ||e_1||`.
    pub fn classify(ratio: f64) -> Verdict {
        if ratio.is_nan() || ratio > Self::EXPLODE_ABOVE {
            Verdict::Exploded
        } else if ratio < Self::VANISH_BELOW {
            Verdict::Vanished
        } else {
            Verdict::Stable
        }
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Stable => "stable",
            Verdict::Exploded => "exploded",
            Verdict::Vanished => "vanished",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityProbe {
    pub init: String,
    pub depth: usize,
    pub structure: String,
    pub trial_seeds: Vec<u64>,
    pub trial_ratios: Vec<f64>,
    pub trial_verdicts: Vec<Verdict>,
    /// Median of the trial ratios.
    pub ratio: f64,
    pub verdict: Verdict,
}

/// Settings shared by every stability trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ProbeSettings {
    pub in_channels: usize,
    pub input: ProbeInput,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            in_channels: 4,
            input: ProbeInput::default(),
        }
    }
}

/// Embedding scale after `depth` convs in a five-block VGG-style net with
/// the given init, as `||e_L||_rms / ||e_1||_rms`. The verdict is the
/// majority over trials; without a majority it follows the median ratio.
pub fn probe_stability(
    scheme: InitScheme,
    depth: usize,
    trials: &[u64],
    settings: ProbeSettings,
) -> Result<StabilityProbe> {
    if depth < 8 {
        return Err(Error::Config(format!(
            "stability probe needs depth >= 8, got {depth}"
        )));
    }
    check_seeds(trials)?;
    let blocks = vgg_blocks_for_depth(depth)?;
    let mut ratios = Vec::with_capacity(trials.len());
    for &seed in trials {
        let spec = PercepNetSpec {
            blocks: blocks.clone(),
            channels: VGG_CHANNELS.to_vec(),
            kernel_size: 3,
            in_channels: settings.in_channels,
            init: scheme,
            seed,
        };
        let net = PercepNet::build(&spec)?;
        let x = settings
            .input
            .draw(settings.in_channels, &mut Rng::derive(seed, INPUT_STREAM));
        let trace = net.forward_trace(&x)?;
        let first = trace.pre_activations.first().expect("non-empty").rms();
        let last = trace.pre_activations.last().expect("non-empty").rms();
        ratios.push(last / first);
    }
    let verdicts: Vec<Verdict> = ratios.iter().map(|&r| Verdict::classify(r)).collect();
    let mut sorted = ratios.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let verdict = [Verdict::Stable, Verdict::Exploded, Verdict::Vanished]
        .into_iter()
        .find(|v| 2 * verdicts.iter().filter(|x| *x == v).count() > verdicts.len())
        .unwrap_or_else(|| Verdict::classify(median));
    Ok(StabilityProbe {
        init: scheme.to_string(),
        depth,
        structure: crate::percep::format_structure(&blocks),
        trial_seeds: trials.to_vec(),
        trial_ratios: ratios,
        trial_verdicts: verdicts,
        ratio: median,
        verdict,
    })
}

/// One seed of [`DiscrepancyReport`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscrepancySeed {
    pub seed: u64,
    pub var_e1: f64,
    pub var_e1_prime: f64,
    /// `prod_{l=2..L} (1/2) n_l Var[w_l]`.
    pub product: f64,
    /// `(Var[e_1] + Var[e'_1]) * product`.
    pub bound: f64,
    /// Sample variance of `e'_L - e_L` for independent inputs.
    pub measured: f64,
    pub ratio: f64,
    /// Per layer: discrepancy variance for `x' = x + eps * n` over the
    /// independent-input discrepancy variance.
    pub near_ratios: Vec<f64>,
    /// Every layer's discrepancy is exactly zero for `x' = x`.
    pub identical_is_zero: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiscrepancyReport {
    pub structure: String,
    pub init: String,
    pub input: ProbeInput,
    pub perturbation: f64,
    pub seeds: Vec<DiscrepancySeed>,
}

impl DiscrepancyReport {
    pub fn max_ratio(&self) -> f64 {
        self.seeds.iter().map(|s| s.ratio).fold(0.0, f64::max)
    }

    pub fn max_near_ratio(&self) -> f64 {
        self.seeds
            .iter()
            .flat_map(|s| s.near_ratios.iter().copied())
            .fold(0.0, f64::max)
    }
}

/// Monte-Carlo check that the embedding discrepancy of two inputs is bounded
/// by their first-layer variances times the layer-factor product, and that
/// it shrinks to zero as the inputs meet.
pub fn measure_discrepancy_bound(
    spec: &PercepNetSpec,
    seeds: &[u64],
    input: ProbeInput,
    perturbation: f64,
) -> Result<DiscrepancyReport> {
    spec.validate()?;
    check_seeds(seeds)?;
    let mut out = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let net = PercepNet::build(&PercepNetSpec {
            seed,
            ..spec.clone()
        })?;
        let c = spec.in_channels;
        let x = input.draw(c, &mut Rng::derive(seed, INPUT_STREAM));
        let x_ind = input.draw(c, &mut Rng::derive(seed, PAIR_STREAM));
        let mut x_near = x.clone();
        x_near.add_scaled(
            perturbation,
            &input.draw(c, &mut Rng::derive(seed, NOISE_STREAM)),
        )?;

        let e = net.forward_trace(&x)?.pre_activations;
        let e_ind = net.forward_trace(&x_ind)?.pre_activations;
        let e_near = net.forward_trace(&x_near)?.pre_activations;
        let e_same = net.forward_trace(&x)?.pre_activations;

        let product: f64 = net
            .convs()
            .skip(1)
            .map(|k| {
                0.5 * k.fan_in() as f64
                    * spec
                        .init
                        .weight_variance(k.fan_in(), k.kernel_size(), k.d_out())
            })
            .product();
        let var_e1 = e[0].variance();
        let var_e1_prime = e_ind[0].variance();
        let bound = (var_e1 + var_e1_prime) * product;
        let last = e.len() - 1;
        let measured = e_ind[last].sub(&e[last])?.variance();
        let near_ratios = e
            .iter()
            .zip(&e_ind)
            .zip(&e_near)
            .map(|((a, ind), near)| Ok(near.sub(a)?.variance() / ind.sub(a)?.variance()))
            .collect::<Result<Vec<_>>>()?;
        let identical_is_zero = e
            .iter()
            .zip(&e_same)
            .all(|(a, b)| a.data().iter().zip(b.data()).all(|(p, q)| p - q == 0.0));
        out.push(DiscrepancySeed {
            seed,
            var_e1,
            var_e1_prime,
            product,
            bound,
            measured,
            ratio: measured / bound,
            near_ratios,
            identical_is_zero,
        });
    }
    Ok(DiscrepancyReport {
        structure: crate::percep::format_structure(&spec.blocks),
        init: spec.init.to_string(),
        input,
        perturbation,
        seeds: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(blocks: Vec<usize>, init: InitScheme) -> PercepNetSpec {
        PercepNetSpec {
            blocks,
            channels: vec![16, 24, 32],
            kernel_size: 3,
            in_channels: 3,
            init,
            seed: 0,
        }
    }

    const INPUT: ProbeInput = ProbeInput {
        height: 16,
        width: 16,
    };

    #[test]
    fn first_layer_prediction_is_the_measurement() {
        let r = measure_variance_propagation(
            &small(vec![1, 1, 1], InitScheme::Calibrated),
            &[1, 2],
            INPUT,
        )
        .unwrap();
        assert_eq!(r.layers.len(), 3);
        assert_eq!(r.layers[0].ratio, 1.0);
        assert!(r.layers[1].after_pool && !r.layers[0].after_pool);
        assert_eq!(r.layers[0].pool_gain, 1.0);
        // Calibrated factors are exactly one.
        for l in &r.layers {
            assert!((l.factor - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_factor_matches_fan_in() {
        let r = measure_variance_propagation(
            &small(vec![2, 1, 1], InitScheme::Gaussian(0.1)),
            &[3],
            INPUT,
        )
        .unwrap();
        let l = &r.layers[1];
        assert_eq!(l.fan_in, 9 * 16);
        assert!((l.factor - 0.5 * 144.0 * 0.01).abs() < 1e-12);
        assert!(
            (l.predicted_var - r.layers[0].measured_var * l.factor).abs() < 1e-12 * l.predicted_var
        );
    }

    #[test]
    fn pool_gain_at_least_one() {
        // The max of four values has a second moment no smaller than their mean.
        let r = measure_variance_propagation(
            &small(vec![1, 1, 1], InitScheme::Calibrated),
            &[5, 6],
            INPUT,
        )
        .unwrap();
        for l in r.layers.iter().filter(|l| l.after_pool) {
            assert!(l.pool_gain >= 1.0, "{}", l.pool_gain);
        }
    }

    #[test]
    fn adjusted_ratio_tracks_the_conv_law() {
        let spec = small(vec![1, 1, 1], InitScheme::Calibrated);
        let input = ProbeInput {
            height: 32,
            width: 32,
        };
        let r = measure_variance_propagation(&spec, &(0..6).collect::<Vec<_>>(), input).unwrap();
        for l in &r.layers {
            assert!((0.5..2.0).contains(&l.pool_adjusted_ratio), "{l:?}");
        }
    }

    #[test]
    fn rejects_empty_seeds_and_bad_spec() {
        let spec = small(vec![1, 1, 1], InitScheme::Calibrated);
        assert!(measure_variance_propagation(&spec, &[], INPUT).is_err());
        let bad = PercepNetSpec {
            blocks: vec![],
            ..spec
        };
        assert!(measure_variance_propagation(&bad, &[1], INPUT).is_err());
    }

    #[test]
    fn verdict_thresholds() {
        assert_eq!(Verdict::classify(2e3), Verdict::Exploded);
        assert_eq!(Verdict::classify(f64::INFINITY), Verdict::Exploded);
        assert_eq!(Verdict::classify(f64::NAN), Verdict::Exploded);
        assert_eq!(Verdict::classify(5e-4), Verdict::Vanished);
        assert_eq!(Verdict::classify(1.0), Verdict::Stable);
        assert_eq!(Verdict::classify(1e3), Verdict::Stable);
    }

    #[test]
    fn probe_requires_depth_eight() {
        assert!(
            probe_stability(InitScheme::Calibrated, 7, &[1], ProbeSettings::default()).is_err()
        );
        assert!(probe_stability(InitScheme::Calibrated, 8, &[], ProbeSettings::default()).is_err());
    }

    #[test]
    fn probe_flags_tiny_gaussian_as_vanished() {
        let settings = ProbeSettings {
            in_channels: 1,
            input: ProbeInput {
                height: 32,
                width: 32,
            },
        };
        let p = probe_stability(InitScheme::Gaussian(0.01), 8, &[1], settings).unwrap();
        assert_eq!(p.verdict, Verdict::Vanished);
        assert_eq!(p.structure, "1,1,2,2,2");
    }

    #[test]
    fn discrepancy_identical_and_near_inputs() {
        let spec = small(vec![1, 1, 1], InitScheme::Calibrated);
        let r = measure_discrepancy_bound(&spec, &[1, 2, 3], INPUT, 0.01).unwrap();
        for s in &r.seeds {
            assert!(s.identical_is_zero);
            assert!(s.ratio.is_finite() && s.ratio > 0.0);
            assert_eq!(s.near_ratios.len(), 3);
        }
        assert!(r.max_near_ratio() < 1e-2);
        assert!(r.max_ratio() <= 1.5);
    }

    #[test]
    fn log_slope_of_geometric_profile() {
        let mut r = measure_variance_propagation(
            &small(vec![1, 1, 1], InitScheme::Calibrated),
            &[1],
            INPUT,
        )
        .unwrap();
        for (i, l) in r.layers.iter_mut().enumerate() {
            l.measured_var = 3.0 * 2f64.powi(i as i32);
        }
        assert!((r.log_variance_slope() - 2f64.ln()).abs() < 1e-12);
    }
}
