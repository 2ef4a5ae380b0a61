//! Build a small network, run one image through it, and walk the trace:
//! per-ReLU activations, the feature vector the detectors consume, and the
//! softmax output.

use fba::network::{forward, train::init_weights, LayerSpec, NetworkSpec};
use fba::Tensor;

fn main() -> fba::Result<()> {
    let spec = NetworkSpec {
        input_shape: [3, 16, 16],
        layers: vec![
            LayerSpec::Conv { in_channels: 3, out_channels: 6, kernel: (3, 3), stride: 1, pad: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { k: 2, stride: 2 },
            LayerSpec::Conv { in_channels: 6, out_channels: 10, kernel: (3, 3), stride: 1, pad: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { k: 2, stride: 2 },
            LayerSpec::Fc { in_dim: 160, out_dim: 24 },
            LayerSpec::Relu,
            LayerSpec::Fc { in_dim: 24, out_dim: 4 },
            LayerSpec::Softmax,
        ],
    };
    let info = spec.validate()?;
    println!("network with {} layers, {} relu layers", spec.layers.len(), info.relu_positions.len());
    for (i, shape) in info.layer_shapes.iter().enumerate() {
        println!("  layer {i:2} -> {shape:?}");
    }

    let weights = init_weights(&spec, 42)?;
    let image = Tensor::filled(vec![3, 16, 16], 0.5);
    let trace = forward(&spec, &weights, &image, None)?;

    for (i, (pre, post)) in trace.relu_pre.iter().zip(&trace.relu_post).enumerate() {
        let active = post.data().iter().filter(|&&v| v > 0.0).count();
        println!(
            "relu {}: shape {:?}, {active}/{} active, pre-activation range [{:.3}, {:.3}]",
            i + 1,
            post.shape(),
            post.len(),
            pre.iter().cloned().fold(f32::INFINITY, f32::min),
            pre.iter().cloned().fold(f32::NEG_INFINITY, f32::max),
        );
    }
    println!("feature vector entering the classifier head: {} values", trace.features.len());
    println!("softmax: {:?}", trace.softmax.data());
    Ok(())
}
