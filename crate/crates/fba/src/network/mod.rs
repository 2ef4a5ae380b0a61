//! Network specification and the forward pass, with attention injection
//! points at ReLU layers.
//!
//! A network is a flat list of layers validated so that adjacent shapes chain
//! consistently. ReLU layers carry a 1-based `relu_index` (assigned in order)
//! which is the coordinate the attention machinery targets. The forward pass
//! records a [`ForwardTrace`]: pre- and post-activation tensors at every ReLU
//! layer, the feature vector entering the classifier head, and the softmax
//! output.

pub mod format;
pub mod train;

use crate::attention::{AttentionConfig, FeaturePatternSet, Mode};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// One layer of the network. Hyperparameters only; weights live in [`Weights`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { in_channels: usize, out_channels: usize, kernel: (usize, usize), stride: usize, pad: usize },
    Relu,
    MaxPool { k: usize, stride: usize },
    Fc { in_dim: usize, out_dim: usize },
    Softmax,
}

/// Input shape plus the layer list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

/// Derived facts about a validated network: per-layer output shapes, the
/// positions of the ReLU layers, and the classifier head.
#[derive(Debug, Clone)]
pub struct NetworkInfo {
    /// Output shape of each layer, same order as `spec.layers`.
    pub layer_shapes: Vec<Vec<usize>>,
    /// Layer position of each ReLU; entry `r` holds relu_index `r + 1`.
    pub relu_positions: Vec<usize>,
    /// Channel count seen by each ReLU (vector length for rank-1 inputs).
    pub relu_channels: Vec<usize>,
    /// Position of the final fully connected layer feeding the softmax.
    pub head_layer: usize,
    /// Flattened length of the feature vector entering the head.
    pub feature_dim: usize,
}

impl NetworkSpec {
    /// Checks that adjacent layer shapes chain consistently and that the
    /// network ends in a fully connected layer followed by softmax.
    pub fn validate(&self) -> Result<NetworkInfo> {
        const OP: &str = "NetworkSpec::validate";
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument { op: OP, detail: "empty layer list".into() });
        }
        let mut shape: Vec<usize> = self.input_shape.to_vec();
        let mut layer_shapes = Vec::with_capacity(self.layers.len());
        let mut relu_positions = Vec::new();
        let mut relu_channels = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv { in_channels, out_channels, kernel, stride, pad } => {
                    if shape.len() != 3 {
                        return Err(Error::ShapeMismatch {
                            op: OP,
                            detail: format!("layer {i}: conv requires rank-3 input, got {shape:?}"),
                        });
                    }
                    if shape[0] != *in_channels {
                        return Err(Error::ShapeMismatch {
                            op: OP,
                            detail: format!(
                                "layer {i}: conv expects {in_channels} input channels, previous layer provides {}",
                                shape[0]
                            ),
                        });
                    }
                    let (kh, kw) = *kernel;
                    if *stride == 0 || kh == 0 || kw == 0 {
                        return Err(Error::InvalidArgument {
                            op: OP,
                            detail: format!("layer {i}: conv kernel/stride must be >= 1"),
                        });
                    }
                    if kh > shape[1] + 2 * pad || kw > shape[2] + 2 * pad {
                        return Err(Error::ShapeMismatch {
                            op: OP,
                            detail: format!(
                                "layer {i}: kernel {kh}x{kw} larger than padded input {}x{}",
                                shape[1] + 2 * pad,
                                shape[2] + 2 * pad
                            ),
                        });
                    }
                    let oh = (shape[1] + 2 * pad - kh) / stride + 1;
                    let ow = (shape[2] + 2 * pad - kw) / stride + 1;
                    shape = vec![*out_channels, oh, ow];
                }
                LayerSpec::Relu => {
                    relu_positions.push(i);
                    relu_channels.push(shape[0]);
                }
                LayerSpec::MaxPool { k, stride } => {
                    if shape.len() != 3 {
                        return Err(Error::ShapeMismatch {
                            op: OP,
                            detail: format!("layer {i}: maxpool requires rank-3 input, got {shape:?}"),
                        });
                    }
                    if *k == 0 || *stride == 0 || *k > shape[1] || *k > shape[2] {
                        return Err(Error::InvalidArgument {
                            op: OP,
                            detail: format!(
                                "layer {i}: pool window {k} stride {stride} invalid for input {}x{}",
                                shape[1], shape[2]
                            ),
                        });
                    }
                    shape = vec![shape[0], (shape[1] - k) / stride + 1, (shape[2] - k) / stride + 1];
                }
                LayerSpec::Fc { in_dim, out_dim } => {
                    let flat: usize = shape.iter().product();
                    if flat != *in_dim {
                        return Err(Error::ShapeMismatch {
                            op: OP,
                            detail: format!(
                                "layer {i}: fc expects input dim {in_dim}, previous layer provides {flat}"
                            ),
                        });
                    }
                    if *out_dim == 0 {
                        return Err(Error::InvalidArgument {
                            op: OP,
                            detail: format!("layer {i}: fc output dim must be >= 1"),
                        });
                    }
                    shape = vec![*out_dim];
                }
                LayerSpec::Softmax => {
                    if i != self.layers.len() - 1 {
                        return Err(Error::InvalidArgument {
                            op: OP,
                            detail: format!("layer {i}: softmax must be the final layer"),
                        });
                    }
                }
            }
            layer_shapes.push(shape.clone());
        }
        if !matches!(self.layers.last(), Some(LayerSpec::Softmax)) {
            return Err(Error::InvalidArgument { op: OP, detail: "network must end in softmax".into() });
        }
        let head_layer = self
            .layers
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Fc { .. }))
            .ok_or(Error::InvalidArgument {
                op: OP,
                detail: "network has no fully connected classifier head".into(),
            })?;
        let feature_dim = match &self.layers[head_layer] {
            LayerSpec::Fc { in_dim, .. } => *in_dim,
            _ => unreachable!(),
        };
        Ok(NetworkInfo { layer_shapes, relu_positions, relu_channels, head_layer, feature_dim })
    }

    pub fn relu_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, LayerSpec::Relu)).count()
    }
}

/// Kernel and bias for one parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Per-layer parameter tensors, aligned with `NetworkSpec::layers`. Entries
/// are `Some` exactly for conv and fc layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub params: Vec<Option<LayerParams>>,
}

impl Weights {
    /// Checks that every tensor shape matches the layer spec exactly.
    pub fn validate_against(&self, spec: &NetworkSpec) -> Result<()> {
        const OP: &str = "Weights::validate_against";
        if self.params.len() != spec.layers.len() {
            return Err(Error::ShapeMismatch {
                op: OP,
                detail: format!(
                    "{} parameter entries for {} layers",
                    self.params.len(),
                    spec.layers.len()
                ),
            });
        }
        for (i, (layer, params)) in spec.layers.iter().zip(self.params.iter()).enumerate() {
            let expect: Option<(Vec<usize>, Vec<usize>)> = match layer {
                LayerSpec::Conv { in_channels, out_channels, kernel, .. } => Some((
                    vec![*out_channels, *in_channels, kernel.0, kernel.1],
                    vec![*out_channels],
                )),
                LayerSpec::Fc { in_dim, out_dim } => Some((vec![*out_dim, *in_dim], vec![*out_dim])),
                _ => None,
            };
            match (expect, params) {
                (None, None) => {}
                (Some((wshape, bshape)), Some(p)) => {
                    if p.weight.shape() != wshape.as_slice() {
                        return Err(Error::ShapeMismatch {
                            op: OP,
                            detail: format!(
                                "layer {i}: weight shape {:?} != expected {wshape:?}",
                                p.weight.shape()
                            ),
                        });
                    }
                    if p.bias.shape() != bshape.as_slice() {
                        return Err(Error::ShapeMismatch {
                            op: OP,
                            detail: format!(
                                "layer {i}: bias shape {:?} != expected {bshape:?}",
                                p.bias.shape()
                            ),
                        });
                    }
                }
                (None, Some(_)) => {
                    return Err(Error::ShapeMismatch {
                        op: OP,
                        detail: format!("layer {i}: unexpected parameters for a parameter-free layer"),
                    })
                }
                (Some(_), None) => {
                    return Err(Error::ShapeMismatch {
                        op: OP,
                        detail: format!("layer {i}: missing parameters"),
                    })
                }
            }
        }
        Ok(())
    }

    pub fn bits_eq(&self, other: &Weights) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(other.params.iter()).all(|(a, b)| match (a, b) {
                (None, None) => true,
                (Some(x), Some(y)) => x.weight.bits_eq(&y.weight) && x.bias.bits_eq(&y.bias),
                _ => false,
            })
    }
}

/// Everything the rest of the pipeline consumes from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input to each ReLU layer (after additive modulation, when applied).
    pub relu_pre: Vec<Tensor>,
    /// Output of each ReLU layer as seen by the next layer (after
    /// multiplicative modulation, when applied).
    pub relu_post: Vec<Tensor>,
    /// Flattened activation entering the classifier head.
    pub features: Tensor,
    pub softmax: Tensor,
}

impl ForwardTrace {
    pub fn bits_eq(&self, other: &ForwardTrace) -> bool {
        self.relu_pre.len() == other.relu_pre.len()
            && self.relu_pre.iter().zip(&other.relu_pre).all(|(a, b)| a.bits_eq(b))
            && self.relu_post.iter().zip(&other.relu_post).all(|(a, b)| a.bits_eq(b))
            && self.features.bits_eq(&other.features)
            && self.softmax.bits_eq(&other.softmax)
    }
}

/// Category-specific modulation to apply during a forward pass.
#[derive(Debug, Clone, Copy)]
pub struct AttentionContext<'a> {
    pub config: &'a AttentionConfig,
    pub patterns: &'a FeaturePatternSet,
    pub category: &'a str,
}

/// Runs the network on one image, optionally applying feature-based attention
/// at the targeted ReLU layers.
///
/// With `attention` absent, or with strength zero, the result is bit-identical
/// to an unmodulated pass. Additive modulation adds the per-map term to every
/// spatial position before the ReLU; multiplicative modulation scales the
/// ReLU output slope per map. A missing pattern for any targeted layer is
/// rejected before any compute.
pub fn forward(
    spec: &NetworkSpec,
    weights: &Weights,
    image: &Tensor,
    attention: Option<&AttentionContext<'_>>,
) -> Result<ForwardTrace> {
    const OP: &str = "forward";
    let info = spec.validate()?;
    weights.validate_against(spec)?;
    if image.shape() != spec.input_shape {
        return Err(Error::ShapeMismatch {
            op: OP,
            detail: format!("image shape {:?} != network input {:?}", image.shape(), spec.input_shape),
        });
    }

    // Resolve all modulation terms up front so a missing pattern or a bad
    // layer index fails before any compute.
    let relu_total = info.relu_positions.len() as u32;
    let mut terms: Vec<Option<Vec<f32>>> = vec![None; info.relu_positions.len()];
    if let Some(ctx) = attention {
        if ctx.config.beta != 0.0 {
            for &layer in &ctx.config.layers {
                if layer == 0 || layer > relu_total {
                    return Err(Error::InvalidArgument {
                        op: OP,
                        detail: format!("targeted relu layer {layer} out of range 1..={relu_total}"),
                    });
                }
                let t = crate::attention::modulation_terms(ctx.config, ctx.patterns, layer, ctx.category)?;
                let want = info.relu_channels[(layer - 1) as usize];
                if t.len() != want {
                    return Err(Error::ShapeMismatch {
                        op: OP,
                        detail: format!(
                            "pattern for relu layer {layer} has {} elements, layer has {want} maps",
                            t.len()
                        ),
                    });
                }
                terms[(layer - 1) as usize] = Some(t);
            }
        }
    }

    let mut act = image.clone();
    let mut relu_pre = Vec::with_capacity(info.relu_positions.len());
    let mut relu_post = Vec::with_capacity(info.relu_positions.len());
    let mut features = None;
    let mut relu_seen = 0usize;

    for (i, layer) in spec.layers.iter().enumerate() {
        match layer {
            LayerSpec::Conv { stride, pad, .. } => {
                let p = weights.params[i].as_ref().expect("validated");
                act = tensor::conv2d(&act, &p.weight, &p.bias, *stride, *pad)?;
            }
            LayerSpec::MaxPool { k, stride } => {
                act = tensor::maxpool2d(&act, *k, *stride)?;
            }
            LayerSpec::Fc { .. } => {
                if i == info.head_layer {
                    features = Some(act.flattened());
                }
                let p = weights.params[i].as_ref().expect("validated");
                act = tensor::affine(&act, &p.weight, &p.bias)?;
            }
            LayerSpec::Softmax => {
                act = tensor::softmax(&act);
            }
            LayerSpec::Relu => {
                let term = terms[relu_seen].as_deref();
                let mode = attention.map(|c| c.config.mode);
                let (pre, post) = apply_relu_layer(&act, term, mode);
                relu_pre.push(pre);
                relu_post.push(post.clone());
                act = post;
                relu_seen += 1;
            }
        }
    }

    Ok(ForwardTrace {
        relu_pre,
        relu_post,
        features: features.expect("validated head"),
        softmax: act,
    })
}

/// Applies one ReLU layer with optional per-map modulation. Returns the
/// pre-activation actually rectified and the propagated output.
fn apply_relu_layer(input: &Tensor, term: Option<&[f32]>, mode: Option<Mode>) -> (Tensor, Tensor) {
    match (term, mode) {
        (Some(t), Some(Mode::Additive)) => {
            let pre = add_per_map(input, t);
            let post = tensor::relu(&pre);
            (pre, post)
        }
        (Some(t), Some(Mode::Multiplicative)) => {
            let post = scale_per_map(&tensor::relu(input), t);
            (input.clone(), post)
        }
        _ => {
            let post = tensor::relu(input);
            (input.clone(), post)
        }
    }
}

/// Adds `term[k]` to every spatial position of map `k` (spatially global).
fn add_per_map(input: &Tensor, term: &[f32]) -> Tensor {
    let mut out = input.clone();
    per_map_apply(&mut out, term, |v, t| v + t);
    out
}

/// Multiplies every spatial position of map `k` by `term[k]`.
fn scale_per_map(input: &Tensor, term: &[f32]) -> Tensor {
    let mut out = input.clone();
    per_map_apply(&mut out, term, |v, t| v * t);
    out
}

fn per_map_apply(t: &mut Tensor, term: &[f32], f: impl Fn(f32, f32) -> f32) {
    debug_assert_eq!(t.shape()[0], term.len());
    let per_map = t.len() / term.len();
    let data = t.data_mut();
    for (k, &m) in term.iter().enumerate() {
        for v in &mut data[k * per_map..(k + 1) * per_map] {
            *v = f(*v, m);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{build_patterns, ActivitySummary, Rectification};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    /// Three stacked conv+ReLU blocks, no pooling, so each ReLU's input can
    /// be recomputed from the previous ReLU's output alone.
    fn toy_spec() -> NetworkSpec {
        NetworkSpec {
            input_shape: [2, 8, 8],
            layers: vec![
                LayerSpec::Conv { in_channels: 2, out_channels: 3, kernel: (3, 3), stride: 1, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::Conv { in_channels: 3, out_channels: 4, kernel: (3, 3), stride: 1, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::Conv { in_channels: 4, out_channels: 4, kernel: (3, 3), stride: 1, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::Fc { in_dim: 256, out_dim: 3 },
                LayerSpec::Softmax,
            ],
        }
    }

    fn toy_setup() -> (NetworkSpec, Weights, Tensor, FeaturePatternSet) {
        let spec = toy_spec();
        let weights = train::init_weights(&spec, 1234).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let image = Tensor::new(
            vec![2, 8, 8],
            (0..128).map(|_| rng.random_range(0.0f32..1.0)).collect(),
        )
        .unwrap();
        // Patterns from real activity of two synthetic categories so the
        // values behave like genuine z-scores.
        let mut summary = ActivitySummary::new(vec![3, 4, 4]);
        for i in 0..8 {
            let cat = if i % 2 == 0 { "t" } else { "other" };
            let img = Tensor::new(
                vec![2, 8, 8],
                (0..128).map(|_| rng.random_range(0.0f32..1.0)).collect(),
            )
            .unwrap();
            let trace = forward(&spec, &weights, &img, None).unwrap();
            let acts = crate::attention::trace_activities(&trace);
            summary.add_image(cat, &acts).unwrap();
        }
        let patterns = build_patterns(&summary, Rectification::Bidirectional).unwrap();
        (spec, weights, image, patterns)
    }

    fn config(mode: Mode, rect: Rectification, layers: &[u32], beta: f32) -> AttentionConfig {
        AttentionConfig::new(mode, rect, layers.iter().copied(), beta).unwrap()
    }

    /// Naive convolution used to recompute single layers by hand.
    fn conv_oracle(input: &Tensor, kernels: &Tensor, bias: &Tensor, pad: usize) -> Vec<f64> {
        let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (c_out, kh, kw) = (kernels.shape()[0], kernels.shape()[2], kernels.shape()[3]);
        let oh = h + 2 * pad - kh + 1;
        let ow = w + 2 * pad - kw + 1;
        let mut out = vec![0.0f64; c_out * oh * ow];
        for o in 0..c_out {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[o] as f64;
                    for c in 0..c_in {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy + ky) as isize - pad as isize;
                                let ix = (ox + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += input.at3(c, iy as usize, ix as usize) as f64
                                    * kernels.at4(o, c, ky, kx) as f64;
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn zero_beta_is_bit_identical_for_every_option() {
        let (spec, weights, image, patterns) = toy_setup();
        let plain = forward(&spec, &weights, &image, None).unwrap();
        for mode in [Mode::Additive, Mode::Multiplicative] {
            for rect in [Rectification::Bidirectional, Rectification::Positive] {
                for layers in [vec![1u32], vec![2], vec![3], vec![1, 2], vec![1, 2, 3]] {
                    let cfg = config(mode, rect, &layers, 0.0);
                    let ctx = AttentionContext { config: &cfg, patterns: &patterns, category: "t" };
                    let traced = forward(&spec, &weights, &image, Some(&ctx)).unwrap();
                    assert!(
                        traced.bits_eq(&plain),
                        "beta=0 must be bit-identical ({mode:?} {rect:?} {layers:?})"
                    );
                }
            }
        }
    }

    #[test]
    fn multiplicative_zero_pattern_element_leaves_map_alone() {
        let (spec, weights, image, patterns) = toy_setup();
        // Force map 1 of relu layer 2 to have a zero pattern element.
        let patterns = patterns.map_patterns(|layer, _, v| {
            let mut v = v.to_vec();
            if layer == 2 {
                v[1] = 0.0;
            }
            v
        });
        let plain = forward(&spec, &weights, &image, None).unwrap();
        let cfg = config(Mode::Multiplicative, Rectification::Bidirectional, &[2], 0.8);
        let ctx = AttentionContext { config: &cfg, patterns: &patterns, category: "t" };
        let traced = forward(&spec, &weights, &image, Some(&ctx)).unwrap();

        let post = &traced.relu_post[1];
        let base = &plain.relu_post[1];
        let (h, w) = (post.shape()[1], post.shape()[2]);
        let mut some_other_map_changed = false;
        for y in 0..h {
            for x in 0..w {
                assert_eq!(post.at3(1, y, x).to_bits(), base.at3(1, y, x).to_bits());
                if post.at3(0, y, x).to_bits() != base.at3(0, y, x).to_bits() {
                    some_other_map_changed = true;
                }
            }
        }
        assert!(some_other_map_changed, "nonzero pattern elements should modulate");
    }

    #[test]
    fn additive_layer_matches_hand_recomputation() {
        let (spec, weights, image, patterns) = toy_setup();
        let plain = forward(&spec, &weights, &image, None).unwrap();
        let beta = 6.0f32;
        let cfg = config(Mode::Additive, Rectification::Bidirectional, &[2], beta);
        let ctx = AttentionContext { config: &cfg, patterns: &patterns, category: "t" };
        let traced = forward(&spec, &weights, &image, Some(&ctx)).unwrap();

        // Recompute relu layer 2 from the (identical) previous trace: the
        // conv feeding it, plus beta*f, rectified.
        let params = weights.params[2].as_ref().unwrap();
        let pre = conv_oracle(&plain.relu_post[0], &params.weight, &params.bias, 1);
        let f = patterns.get(2, "t").unwrap();
        let post = &traced.relu_post[1];
        let (c, h, w) = (post.shape()[0], post.shape()[1], post.shape()[2]);
        for k in 0..c {
            let term = beta as f64 * f[k] as f64;
            for y in 0..h {
                for x in 0..w {
                    let want = (pre[(k * h + y) * w + x] + term).max(0.0);
                    let got = post.at3(k, y, x) as f64;
                    assert!(
                        (got - want).abs() <= 1e-5 * want.abs().max(1.0),
                        "map {k} ({y},{x}): {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn multiplicative_layer_matches_hand_recomputation() {
        let (spec, weights, image, patterns) = toy_setup();
        let plain = forward(&spec, &weights, &image, None).unwrap();
        let beta = 0.9f32;
        let cfg = config(Mode::Multiplicative, Rectification::Bidirectional, &[2], beta);
        let ctx = AttentionContext { config: &cfg, patterns: &patterns, category: "t" };
        let traced = forward(&spec, &weights, &image, Some(&ctx)).unwrap();

        let params = weights.params[2].as_ref().unwrap();
        let pre = conv_oracle(&plain.relu_post[0], &params.weight, &params.bias, 1);
        let f = patterns.get(2, "t").unwrap();
        let post = &traced.relu_post[1];
        let (c, h, w) = (post.shape()[0], post.shape()[1], post.shape()[2]);
        for k in 0..c {
            let slope = 1.0 + beta as f64 * f[k] as f64;
            for y in 0..h {
                for x in 0..w {
                    let want = slope * pre[(k * h + y) * w + x].max(0.0);
                    let got = post.at3(k, y, x) as f64;
                    assert!(
                        (got - want).abs() <= 1e-5 * want.abs().max(1.0),
                        "map {k} ({y},{x}): {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn attention_locality_before_first_targeted_layer() {
        let (spec, weights, image, patterns) = toy_setup();
        let plain = forward(&spec, &weights, &image, None).unwrap();
        let cfg = config(Mode::Additive, Rectification::Bidirectional, &[2, 3], 8.0);
        let ctx = AttentionContext { config: &cfg, patterns: &patterns, category: "t" };
        let traced = forward(&spec, &weights, &image, Some(&ctx)).unwrap();
        assert!(traced.relu_pre[0].bits_eq(&plain.relu_pre[0]));
        assert!(traced.relu_post[0].bits_eq(&plain.relu_post[0]));
        assert!(!traced.relu_post[1].bits_eq(&plain.relu_post[1]));
    }

    #[test]
    fn multiplicative_globality_constant_ratio() {
        let (spec, weights, image, patterns) = toy_setup();
        let plain = forward(&spec, &weights, &image, None).unwrap();
        let beta = 1.1f32;
        let cfg = config(Mode::Multiplicative, Rectification::Bidirectional, &[2], beta);
        let ctx = AttentionContext { config: &cfg, patterns: &patterns, category: "t" };
        let traced = forward(&spec, &weights, &image, Some(&ctx)).unwrap();
        let f = patterns.get(2, "t").unwrap();
        let (c, h, w) = (
            plain.relu_post[1].shape()[0],
            plain.relu_post[1].shape()[1],
            plain.relu_post[1].shape()[2],
        );
        let mut checked = 0;
        for k in 0..c {
            let slope = (1.0 + beta as f64 * f[k] as f64) as f64;
            if slope <= 0.0 {
                continue;
            }
            for y in 0..h {
                for x in 0..w {
                    let base = plain.relu_post[1].at3(k, y, x) as f64;
                    if base > 1e-3 {
                        let ratio = traced.relu_post[1].at3(k, y, x) as f64 / base;
                        assert!(
                            (ratio - slope).abs() < 1e-5,
                            "map {k}: ratio {ratio} vs slope {slope}"
                        );
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 20, "ratio check barely exercised: {checked}");
    }

    #[test]
    fn additive_globality_same_offset_every_position() {
        let (spec, weights, image, patterns) = toy_setup();
        let plain = forward(&spec, &weights, &image, None).unwrap();
        let beta = 5.0f32;
        let cfg = config(Mode::Additive, Rectification::Bidirectional, &[2], beta);
        let ctx = AttentionContext { config: &cfg, patterns: &patterns, category: "t" };
        let traced = forward(&spec, &weights, &image, Some(&ctx)).unwrap();
        let f = patterns.get(2, "t").unwrap();
        // First targeted layer: upstream is bit-identical, so the modulated
        // pre-activation must equal base + beta*f, the exact f32 expression.
        let base = &plain.relu_pre[1];
        let got = &traced.relu_pre[1];
        let (c, h, w) = (base.shape()[0], base.shape()[1], base.shape()[2]);
        for k in 0..c {
            let term = beta * f[k];
            for y in 0..h {
                for x in 0..w {
                    let want = base.at3(k, y, x) + term;
                    assert_eq!(got.at3(k, y, x).to_bits(), want.to_bits());
                }
            }
        }
    }

    #[test]
    fn missing_pattern_rejected_before_compute() {
        let (spec, weights, image, patterns) = toy_setup();
        // A pattern set covering only layers 1 and 2.
        let mut subset = BTreeMap::new();
        for ((layer, cat), v) in patterns.iter() {
            if *layer <= 2 {
                subset.insert((*layer, cat.clone()), v.clone());
            }
        }
        let partial = FeaturePatternSet::from_parts(
            Rectification::Bidirectional,
            patterns.channels()[..2].to_vec(),
            subset,
            patterns.image_counts().clone(),
        );
        let cfg = config(Mode::Additive, Rectification::Bidirectional, &[3], 4.0);
        let ctx = AttentionContext { config: &cfg, patterns: &partial, category: "t" };
        match forward(&spec, &weights, &image, Some(&ctx)) {
            Err(Error::MissingPattern { layer: 3, .. }) => {}
            other => panic!("expected missing pattern for layer 3, got {other:?}"),
        }

        // Unknown category is rejected the same way.
        let cfg = config(Mode::Additive, Rectification::Bidirectional, &[1], 4.0);
        let ctx = AttentionContext { config: &cfg, patterns: &patterns, category: "zebra" };
        assert!(matches!(
            forward(&spec, &weights, &image, Some(&ctx)),
            Err(Error::MissingPattern { .. })
        ));
    }

    #[test]
    fn negative_multiplicative_slope_is_literal_unless_clamped() {
        let (spec, weights, image, patterns) = toy_setup();
        // Make layer 2's pattern strongly negative on map 0.
        let patterns = patterns.map_patterns(|layer, _, v| {
            let mut v = v.to_vec();
            if layer == 2 {
                v[0] = -2.0;
            }
            v
        });
        let mut cfg = config(Mode::Multiplicative, Rectification::Bidirectional, &[2], 1.0);
        let ctx = AttentionContext { config: &cfg, patterns: &patterns, category: "t" };
        let traced = forward(&spec, &weights, &image, Some(&ctx)).unwrap();
        let min = traced.relu_post[1].data().iter().cloned().fold(f32::INFINITY, f32::min);
        assert!(min < 0.0, "slope 1 + 1.0*(-2.0) = -1 must invert activity");

        cfg.clamp_multiplicative = true;
        let ctx = AttentionContext { config: &cfg, patterns: &patterns, category: "t" };
        let clamped = forward(&spec, &weights, &image, Some(&ctx)).unwrap();
        let min = clamped.relu_post[1].data().iter().cloned().fold(f32::INFINITY, f32::min);
        assert!(min >= 0.0, "clamped slope must floor at zero");
    }

    #[test]
    fn relu_indices_and_shapes_chain() {
        let spec = toy_spec();
        let info = spec.validate().unwrap();
        assert_eq!(info.relu_positions, vec![1, 3, 5]);
        assert_eq!(info.relu_channels, vec![3, 4, 4]);
        assert_eq!(info.head_layer, 6);
        assert_eq!(info.feature_dim, 256);
        assert_eq!(spec.relu_count(), 3);

        // Break the chain: fc expects the wrong input dim.
        let mut bad = spec.clone();
        bad.layers[6] = LayerSpec::Fc { in_dim: 99, out_dim: 3 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn features_are_the_classifier_head_input() {
        let (spec, weights, image, _) = toy_setup();
        let trace = forward(&spec, &weights, &image, None).unwrap();
        // Head input is the flattened last relu output.
        assert_eq!(trace.features.shape(), &[256]);
        assert_eq!(trace.features.data(), trace.relu_post[2].flattened().data());
        let sum: f64 = trace.softmax.data().iter().map(|&v| v as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
}
