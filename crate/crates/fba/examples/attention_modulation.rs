//! Apply feature-based attention at a ReLU layer and inspect what it does to
//! the activity: additive modulation shifts the pre-activation of every
//! spatial position of a map by beta*f, multiplicative modulation scales the
//! rectified output by 1 + beta*f.

use fba::attention::{
    build_patterns, trace_activities, ActivitySummary, AttentionConfig, Mode, Rectification,
};
use fba::network::{forward, train::init_weights, AttentionContext, LayerSpec, NetworkSpec};
use fba::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fba::Result<()> {
    let spec = NetworkSpec {
        input_shape: [1, 12, 12],
        layers: vec![
            LayerSpec::Conv { in_channels: 1, out_channels: 5, kernel: (3, 3), stride: 1, pad: 1 },
            LayerSpec::Relu,
            LayerSpec::Conv { in_channels: 5, out_channels: 5, kernel: (3, 3), stride: 1, pad: 1 },
            LayerSpec::Relu,
            LayerSpec::Fc { in_dim: 720, out_dim: 2 },
            LayerSpec::Softmax,
        ],
    };
    let weights = init_weights(&spec, 7)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    // Feature patterns from two synthetic "categories": bright images vs
    // dark images. Bright images drive the maps harder, so the "bright"
    // pattern is positive where maps respond to intensity.
    let mut summary = ActivitySummary::new(vec![5, 5]);
    for i in 0..20 {
        let bright = i % 2 == 0;
        let base = if bright { 0.8 } else { 0.2 };
        let data: Vec<f32> = (0..144).map(|_| base + rng.random_range(-0.1f32..0.1)).collect();
        let image = Tensor::new(vec![1, 12, 12], data)?;
        let trace = forward(&spec, &weights, &image, None)?;
        summary.add_image(if bright { "bright" } else { "dark" }, &trace_activities(&trace))?;
    }
    let patterns = build_patterns(&summary, Rectification::Bidirectional)?;
    println!("pattern for 'bright' at relu 2: {:?}", patterns.get(2, "bright")?);

    let image = Tensor::new(
        vec![1, 12, 12],
        (0..144).map(|_| rng.random_range(0.0f32..1.0)).collect(),
    )?;
    let plain = forward(&spec, &weights, &image, None)?;

    for (mode, beta) in [(Mode::Additive, 8.0f32), (Mode::Multiplicative, 0.8)] {
        let config = AttentionConfig::new(mode, Rectification::Bidirectional, [2], beta)?;
        let ctx = AttentionContext { config: &config, patterns: &patterns, category: "bright" };
        let traced = forward(&spec, &weights, &image, Some(&ctx))?;
        println!("\n{mode} modulation, beta = {beta}, attending 'bright' at relu 2:");
        let f = patterns.get(2, "bright")?;
        for map in 0..5 {
            let base_mean: f32 = mean_of_map(&plain.relu_post[1], map);
            let mod_mean: f32 = mean_of_map(&traced.relu_post[1], map);
            println!(
                "  map {map}: f = {:+.3}, mean activity {:.4} -> {:.4}",
                f[map], base_mean, mod_mean
            );
        }
        // Downstream, the class balance shifts.
        println!("  softmax: {:?} -> {:?}", plain.softmax.data(), traced.softmax.data());
    }
    Ok(())
}

fn mean_of_map(t: &Tensor, map: usize) -> f32 {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let mut acc = 0.0;
    for y in 0..h {
        for x in 0..w {
            acc += t.at3(map, y, x);
        }
    }
    acc / (h * w) as f32
}
