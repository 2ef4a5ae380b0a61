//! Desk-scale SGD trainer for the backbone.
//!
//! Plain SGD with momentum over softmax cross-entropy. Gradients are
//! accumulated in f64 (backpropagation written against the same layer
//! definitions the forward pass uses), weights are stored as f32. Everything
//! is deterministic given the seed: weight init, epoch shuffling and batch
//! order all come from one seeded generator, and the loop is single-threaded.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{LayerParams, LayerSpec, NetworkSpec, Weights};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone)]
pub struct TrainHyper {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper { lr: 0.05, momentum: 0.9, epochs: 15, batch: 32, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

/// Per-layer parameter gradients, f64, aligned with `Weights::params`.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub entries: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Gradients {
    fn zeros_like(weights: &Weights) -> Self {
        let entries = weights
            .params
            .iter()
            .map(|p| p.as_ref().map(|lp| (vec![0.0; lp.weight.len()], vec![0.0; lp.bias.len()])))
            .collect();
        Gradients { entries }
    }
}

use crate::util::standard_normal as gaussian;

/// He-initialized weights: kernels drawn from N(0, 2/fan_in), biases zero.
pub fn init_weights(spec: &NetworkSpec, seed: u64) -> Result<Weights> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        let entry = match layer {
            LayerSpec::Conv { in_channels, out_channels, kernel, .. } => {
                let fan_in = in_channels * kernel.0 * kernel.1;
                let std = (2.0 / fan_in as f64).sqrt();
                let shape = vec![*out_channels, *in_channels, kernel.0, kernel.1];
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| (gaussian(&mut rng) * std) as f32).collect();
                Some(LayerParams {
                    weight: Tensor::new(shape, data)?,
                    bias: Tensor::zeros(vec![*out_channels]),
                })
            }
            LayerSpec::Fc { in_dim, out_dim } => {
                let std = (2.0 / *in_dim as f64).sqrt();
                let data = (0..in_dim * out_dim).map(|_| (gaussian(&mut rng) * std) as f32).collect();
                Some(LayerParams {
                    weight: Tensor::new(vec![*out_dim, *in_dim], data)?,
                    bias: Tensor::zeros(vec![*out_dim]),
                })
            }
            _ => None,
        };
        params.push(entry);
    }
    Ok(Weights { params })
}

/// Runs every layer, returning the input activation of each layer plus the
/// final output. `acts[i]` is the input to layer `i`.
fn forward_acts(spec: &NetworkSpec, weights: &Weights, image: &Tensor) -> Result<Vec<Tensor>> {
    let mut acts = Vec::with_capacity(spec.layers.len() + 1);
    acts.push(image.clone());
    for (i, layer) in spec.layers.iter().enumerate() {
        let prev = acts.last().unwrap();
        let next = match layer {
            LayerSpec::Conv { stride, pad, .. } => {
                let p = weights.params[i].as_ref().expect("validated");
                tensor::conv2d(prev, &p.weight, &p.bias, *stride, *pad)?
            }
            LayerSpec::Relu => tensor::relu(prev),
            LayerSpec::MaxPool { k, stride } => tensor::maxpool2d(prev, *k, *stride)?,
            LayerSpec::Fc { .. } => {
                let p = weights.params[i].as_ref().expect("validated");
                tensor::affine(prev, &p.weight, &p.bias)?
            }
            LayerSpec::Softmax => tensor::softmax(prev),
        };
        acts.push(next);
    }
    Ok(acts)
}

/// Cross-entropy of one sample from the logits, in f64, with the gradient at
/// the softmax input. Returns (loss, grad, predicted class).
fn cross_entropy(logits: &Tensor, target: usize) -> (f64, Vec<f64>, usize) {
    let z: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let loss = lse - z[target];
    let mut grad: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
    grad[target] -= 1.0;
    let pred = z
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    (loss, grad, pred)
}

fn backward_sample(
    spec: &NetworkSpec,
    weights: &Weights,
    acts: &[Tensor],
    mut grad: Vec<f64>,
    scale: f64,
    grads: &mut Gradients,
) {
    // `grad` enters as dL/d(input to softmax); walk the remaining layers in
    // reverse. The softmax layer itself is folded into the loss gradient.
    let last = spec.layers.len() - 1;
    debug_assert!(matches!(spec.layers[last], LayerSpec::Softmax));
    for v in &mut grad {
        *v *= scale;
    }
    for i in (0..last).rev() {
        let input = &acts[i];
        grad = match &spec.layers[i] {
            LayerSpec::Fc { in_dim, out_dim } => {
                let p = weights.params[i].as_ref().expect("validated");
                let (gw, gb) = grads.entries[i].as_mut().expect("validated");
                let w = p.weight.data();
                let x = input.data();
                let mut gin = vec![0.0f64; *in_dim];
                for o in 0..*out_dim {
                    let g = grad[o];
                    gb[o] += g;
                    let row = o * in_dim;
                    for j in 0..*in_dim {
                        gw[row + j] += g * x[j] as f64;
                        gin[j] += w[row + j] as f64 * g;
                    }
                }
                gin
            }
            LayerSpec::Relu => {
                input
                    .data()
                    .iter()
                    .zip(grad.iter())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect()
            }
            LayerSpec::MaxPool { k, stride } => {
                let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
                let oh = (h - k) / stride + 1;
                let ow = (w - k) / stride + 1;
                let mut gin = vec![0.0f64; input.len()];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            // First maximum wins, matching the forward pass.
                            let (mut by, mut bx, mut best) = (0, 0, f32::NEG_INFINITY);
                            for ky in 0..*k {
                                for kx in 0..*k {
                                    let v = input.at3(ch, oy * stride + ky, ox * stride + kx);
                                    if v > best {
                                        best = v;
                                        by = oy * stride + ky;
                                        bx = ox * stride + kx;
                                    }
                                }
                            }
                            gin[(ch * h + by) * w + bx] += grad[(ch * oh + oy) * ow + ox];
                        }
                    }
                }
                gin
            }
            LayerSpec::Conv { in_channels, out_channels, kernel, stride, pad } => {
                let p = weights.params[i].as_ref().expect("validated");
                let (gw, gb) = grads.entries[i].as_mut().expect("validated");
                let (kh, kw) = *kernel;
                let (h, w) = (input.shape()[1], input.shape()[2]);
                let oh = (h + 2 * pad - kh) / stride + 1;
                let ow = (w + 2 * pad - kw) / stride + 1;
                let mut gin = vec![0.0f64; input.len()];
                for o in 0..*out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = grad[(o * oh + oy) * ow + ox];
                            if g == 0.0 {
                                continue;
                            }
                            gb[o] += g;
                            for c in 0..*in_channels {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - *pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let widx = ((o * in_channels + c) * kh + ky) * kw + kx;
                                        let iidx = (c * h + iy as usize) * w + ix as usize;
                                        gw[widx] += g * input.data()[iidx] as f64;
                                        gin[iidx] += g * p.weight.data()[widx] as f64;
                                    }
                                }
                            }
                        }
                    }
                }
                gin
            }
            LayerSpec::Softmax => unreachable!("softmax is the final layer"),
        };
    }
}

/// Mean cross-entropy loss and gradients over a batch, without updating
/// anything. Also reports how many samples the network classifies correctly.
pub fn loss_and_gradients(
    spec: &NetworkSpec,
    weights: &Weights,
    batch: &[(&Tensor, usize)],
) -> Result<(f64, Gradients, usize)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument { op: "loss_and_gradients", detail: "empty batch".into() });
    }
    let mut grads = Gradients::zeros_like(weights);
    let scale = 1.0 / batch.len() as f64;
    let mut total_loss = 0.0;
    let mut correct = 0;
    for (image, target) in batch {
        let acts = forward_acts(spec, weights, image)?;
        let logits = &acts[acts.len() - 2];
        if *target >= logits.len() {
            return Err(Error::InvalidArgument {
                op: "loss_and_gradients",
                detail: format!("class {target} out of range for {} outputs", logits.len()),
            });
        }
        let (loss, grad, pred) = cross_entropy(logits, *target);
        total_loss += loss * scale;
        if pred == *target {
            correct += 1;
        }
        backward_sample(spec, weights, &acts, grad, scale, &mut grads);
    }
    Ok((total_loss, grads, correct))
}

/// Mean loss over a batch; the numeric function the gradient checks probe.
pub fn loss_on_batch(spec: &NetworkSpec, weights: &Weights, batch: &[(&Tensor, usize)]) -> Result<f64> {
    let mut total = 0.0;
    for (image, target) in batch {
        let acts = forward_acts(spec, weights, image)?;
        let logits = &acts[acts.len() - 2];
        let (loss, _, _) = cross_entropy(logits, *target);
        total += loss;
    }
    Ok(total / batch.len() as f64)
}

/// Trains the backbone with SGD + momentum. Deterministic given the seed;
/// aborts with a diagnostic if the loss stops being finite.
pub fn train_backbone(
    dataset: &[(Tensor, usize)],
    spec: &NetworkSpec,
    hyper: &TrainHyper,
) -> Result<(Weights, TrainLog)> {
    const OP: &str = "train_backbone";
    let info = spec.validate()?;
    if dataset.is_empty() {
        return Err(Error::InsufficientData { detail: "empty training set".into() });
    }
    let n_classes = match spec.layers[info.head_layer] {
        LayerSpec::Fc { out_dim, .. } => out_dim,
        _ => unreachable!(),
    };
    let mut seen = vec![false; n_classes];
    for (_, t) in dataset {
        if *t >= n_classes {
            return Err(Error::InvalidArgument {
                op: OP,
                detail: format!("label {t} out of range for {n_classes} classes"),
            });
        }
        seen[*t] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::InsufficientData { detail: "training set has fewer than 2 classes".into() });
    }
    if hyper.batch == 0 {
        return Err(Error::InvalidArgument { op: OP, detail: "batch size must be >= 1".into() });
    }

    let mut weights = init_weights(spec, hyper.seed)?;
    let mut velocity = Gradients::zeros_like(&weights);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    shuffle_rng.set_stream(1);

    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..hyper.epochs {
        // Fisher-Yates driven by the dedicated stream.
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;
        for chunk in order.chunks(hyper.batch) {
            let batch: Vec<(&Tensor, usize)> =
                chunk.iter().map(|&i| (&dataset[i].0, dataset[i].1)).collect();
            let (loss, grads, correct) = loss_and_gradients(spec, &weights, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    detail: format!(
                        "loss became non-finite in epoch {epoch}; try a lower learning rate than {}",
                        hyper.lr
                    ),
                });
            }
            epoch_loss += loss * batch.len() as f64;
            epoch_correct += correct;
            for (i, entry) in grads.entries.iter().enumerate() {
                if let Some((gw, gb)) = entry {
                    let (vw, vb) = velocity.entries[i].as_mut().expect("aligned");
                    let p = weights.params[i].as_mut().expect("aligned");
                    let wdata = p.weight.data_mut();
                    for j in 0..gw.len() {
                        vw[j] = hyper.momentum * vw[j] - hyper.lr * gw[j];
                        wdata[j] = (wdata[j] as f64 + vw[j]) as f32;
                    }
                    let bdata = p.bias.data_mut();
                    for j in 0..gb.len() {
                        vb[j] = hyper.momentum * vb[j] - hyper.lr * gb[j];
                        bdata[j] = (bdata[j] as f64 + vb[j]) as f32;
                    }
                }
            }
        }
        log.epochs.push(EpochStats {
            loss: epoch_loss / dataset.len() as f64,
            accuracy: epoch_correct as f64 / dataset.len() as f64,
        });
    }
    Ok((weights, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec {
            input_shape: [1, 6, 6],
            layers: vec![
                LayerSpec::Conv { in_channels: 1, out_channels: 2, kernel: (3, 3), stride: 1, pad: 0 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { k: 2, stride: 2 },
                LayerSpec::Fc { in_dim: 8, out_dim: 3 },
                LayerSpec::Softmax,
            ],
        }
    }

    /// Left-half-bright vs right-half-bright 8x8 images, linearly separable.
    fn separable_dataset() -> (NetworkSpec, Vec<(Tensor, usize)>) {
        let spec = NetworkSpec {
            input_shape: [1, 8, 8],
            layers: vec![
                LayerSpec::Conv { in_channels: 1, out_channels: 4, kernel: (3, 3), stride: 1, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { k: 2, stride: 2 },
                LayerSpec::Fc { in_dim: 64, out_dim: 2 },
                LayerSpec::Softmax,
            ],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut data = Vec::new();
        for i in 0..40 {
            let class = i % 2;
            let mut img = Tensor::zeros(vec![1, 8, 8]);
            for y in 0..8 {
                for x in 0..8 {
                    let bright = if class == 0 { x < 4 } else { x >= 4 };
                    let base = if bright { 0.9 } else { 0.1 };
                    img.set3(0, y, x, base + rng.random_range(-0.05..0.05));
                }
            }
            data.push((img, class));
        }
        (spec, data)
    }

    #[test]
    fn separable_shapes_reach_95_percent() {
        let (spec, data) = separable_dataset();
        let hyper = TrainHyper { lr: 0.1, momentum: 0.9, epochs: 20, batch: 8, seed: 1 };
        let (_, log) = train_backbone(&data, &spec, &hyper).unwrap();
        let final_acc = log.epochs.last().unwrap().accuracy;
        assert!(final_acc >= 0.95, "expected >= 95% train accuracy, got {final_acc}");
    }

    #[test]
    fn zero_epochs_returns_initialized_weights() {
        let (spec, data) = separable_dataset();
        let hyper = TrainHyper { epochs: 0, seed: 9, ..TrainHyper::default() };
        let (w, log) = train_backbone(&data, &spec, &hyper).unwrap();
        assert!(log.epochs.is_empty());
        assert!(w.bits_eq(&init_weights(&spec, 9).unwrap()));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (spec, data) = separable_dataset();
        let hyper = TrainHyper { lr: 0.05, momentum: 0.9, epochs: 3, batch: 8, seed: 77 };
        let (w1, log1) = train_backbone(&data, &spec, &hyper).unwrap();
        let (w2, log2) = train_backbone(&data, &spec, &hyper).unwrap();
        assert!(w1.bits_eq(&w2));
        assert_eq!(
            log1.epochs.iter().map(|e| e.loss.to_bits()).collect::<Vec<_>>(),
            log2.epochs.iter().map(|e| e.loss.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn absurd_learning_rate_reports_divergence() {
        let (spec, data) = separable_dataset();
        let hyper = TrainHyper { lr: 1e30, momentum: 0.9, epochs: 5, batch: 8, seed: 3 };
        match train_backbone(&data, &spec, &hyper) {
            Err(Error::Divergence { detail }) => {
                assert!(detail.contains("lower learning rate"), "{detail}");
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn single_class_rejected() {
        let (spec, mut data) = separable_dataset();
        for d in &mut data {
            d.1 = 0;
        }
        assert!(matches!(
            train_backbone(&data, &spec, &TrainHyper::default()),
            Err(Error::InsufficientData { .. })
        ));
    }

    /// Independent f64 re-implementation of the forward pass and loss, used
    /// as the target function for central finite differences. Keeping the
    /// oracle in f64 removes the f32 rounding noise that would otherwise
    /// drown small difference quotients.
    mod f64_oracle {
        use super::*;

        pub type ParamsF64 = Vec<Option<(Vec<f64>, Vec<f64>)>>;

        pub fn lift(weights: &Weights) -> ParamsF64 {
            weights
                .params
                .iter()
                .map(|p| {
                    p.as_ref().map(|lp| {
                        (
                            lp.weight.data().iter().map(|&v| v as f64).collect(),
                            lp.bias.data().iter().map(|&v| v as f64).collect(),
                        )
                    })
                })
                .collect()
        }

        pub fn mean_loss(spec: &NetworkSpec, params: &ParamsF64, batch: &[(&Tensor, usize)]) -> f64 {
            let mut total = 0.0;
            for (image, target) in batch {
                let logits = forward_logits(spec, params, image);
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - logits[*target];
            }
            total / batch.len() as f64
        }

        fn forward_logits(spec: &NetworkSpec, params: &ParamsF64, image: &Tensor) -> Vec<f64> {
            let mut act: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();
            let mut shape = spec.input_shape.to_vec();
            for (i, layer) in spec.layers.iter().enumerate() {
                match layer {
                    LayerSpec::Conv { in_channels, out_channels, kernel, stride, pad } => {
                        let (kh, kw) = *kernel;
                        let (h, w) = (shape[1], shape[2]);
                        let oh = (h + 2 * pad - kh) / stride + 1;
                        let ow = (w + 2 * pad - kw) / stride + 1;
                        let (kern, bias) = params[i].as_ref().unwrap();
                        let mut out = vec![0.0f64; out_channels * oh * ow];
                        for o in 0..*out_channels {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let mut acc = bias[o];
                                    for c in 0..*in_channels {
                                        for ky in 0..kh {
                                            for kx in 0..kw {
                                                let iy = (oy * stride + ky) as isize - *pad as isize;
                                                let ix = (ox * stride + kx) as isize - *pad as isize;
                                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                                    continue;
                                                }
                                                acc += act[(c * h + iy as usize) * w + ix as usize]
                                                    * kern[((o * in_channels + c) * kh + ky) * kw + kx];
                                            }
                                        }
                                    }
                                    out[(o * oh + oy) * ow + ox] = acc;
                                }
                            }
                        }
                        act = out;
                        shape = vec![*out_channels, oh, ow];
                    }
                    LayerSpec::Relu => {
                        for v in &mut act {
                            if *v < 0.0 {
                                *v = 0.0;
                            }
                        }
                    }
                    LayerSpec::MaxPool { k, stride } => {
                        let (c, h, w) = (shape[0], shape[1], shape[2]);
                        let oh = (h - k) / stride + 1;
                        let ow = (w - k) / stride + 1;
                        let mut out = vec![0.0f64; c * oh * ow];
                        for ch in 0..c {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let mut m = f64::NEG_INFINITY;
                                    for ky in 0..*k {
                                        for kx in 0..*k {
                                            m = m.max(
                                                act[(ch * h + oy * stride + ky) * w + ox * stride + kx],
                                            );
                                        }
                                    }
                                    out[(ch * oh + oy) * ow + ox] = m;
                                }
                            }
                        }
                        act = out;
                        shape = vec![c, oh, ow];
                    }
                    LayerSpec::Fc { in_dim, out_dim } => {
                        let (wt, bias) = params[i].as_ref().unwrap();
                        let mut out = vec![0.0f64; *out_dim];
                        for o in 0..*out_dim {
                            let mut acc = bias[o];
                            for j in 0..*in_dim {
                                acc += wt[o * in_dim + j] * act[j];
                            }
                            out[o] = acc;
                        }
                        act = out;
                        shape = vec![*out_dim];
                    }
                    LayerSpec::Softmax => return act,
                }
            }
            act
        }
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        // Small network (< 200 parameters), random batch, every parameter
        // probed against a central difference of an independent f64 oracle.
        let spec = tiny_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let weights = init_weights(&spec, 42).unwrap();
        let images: Vec<Tensor> = (0..6)
            .map(|_| {
                let data = (0..36).map(|_| rng.random_range(0.0f32..1.0)).collect();
                Tensor::new(vec![1, 6, 6], data).unwrap()
            })
            .collect();
        let batch: Vec<(&Tensor, usize)> =
            images.iter().enumerate().map(|(i, t)| (t, i % 3)).collect();

        let (loss, grads, _) = loss_and_gradients(&spec, &weights, &batch).unwrap();
        let params = f64_oracle::lift(&weights);
        let oracle_loss = f64_oracle::mean_loss(&spec, &params, &batch);
        assert!((loss - oracle_loss).abs() < 1e-5, "loss {loss} vs oracle {oracle_loss}");

        let n_params: usize = weights
            .params
            .iter()
            .flatten()
            .map(|p| p.weight.len() + p.bias.len())
            .sum();
        assert!(n_params <= 200, "gradient-check net must stay small, has {n_params}");

        let eps = 1e-5f64;
        let mut checked = 0;
        for (i, entry) in grads.entries.iter().enumerate() {
            let Some((gw, gb)) = entry else { continue };
            for (which, g) in [(0usize, gw), (1usize, gb)] {
                for (j, &an) in g.iter().enumerate() {
                    let mut plus = params.clone();
                    let mut minus = params.clone();
                    {
                        let e = plus[i].as_mut().unwrap();
                        let v = if which == 0 { &mut e.0 } else { &mut e.1 };
                        v[j] += eps;
                    }
                    {
                        let e = minus[i].as_mut().unwrap();
                        let v = if which == 0 { &mut e.0 } else { &mut e.1 };
                        v[j] -= eps;
                    }
                    let fd = (f64_oracle::mean_loss(&spec, &plus, &batch)
                        - f64_oracle::mean_loss(&spec, &minus, &batch))
                        / (2.0 * eps);
                    let denom = an.abs().max(fd.abs());
                    if denom < 1e-4 {
                        // Both effectively zero at f32 resolution.
                        continue;
                    }
                    let rel = (an - fd).abs() / denom;
                    assert!(
                        rel < 1e-3,
                        "param layer {i} slot {which} idx {j}: analytic {an} vs fd {fd} (rel {rel})"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 30, "too few parameters actually checked: {checked}");
    }
}
