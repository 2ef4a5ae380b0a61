//! Compute category feature patterns from network activity, save them, load
//! them back, and show to the rectification options.
//!
//! Pattern values are z-scores: positive where a category drives a feature
//! map above the all-category average, negative where it suppresses it.

use fba::attention::{
    build_patterns, load_patterns, save_patterns, trace_activities, ActivitySummary, Rectification,
};
use fba::imagesets::shapes::{synthetic_pool, ShapePoolConfig};
use fba::network::train::{train_backbone, TrainHyper};
use fba::network::{forward, LayerSpec, NetworkSpec};

fn main() -> fba::Result<()> {
    let categories = vec!["disk".to_string(), "vstripes".to_string()];
    let pool = synthetic_pool(&ShapePoolConfig {
        categories: categories.clone(),
        per_category: 30,
        size: 16,
        seed: 2,
    })?;

    let spec = NetworkSpec {
        input_shape: [3, 16, 16],
        layers: vec![
            LayerSpec::Conv { in_channels: 3, out_channels: 6, kernel: (3, 3), stride: 1, pad: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { k: 2, stride: 2 },
            LayerSpec::Fc { in_dim: 384, out_dim: 12 },
            LayerSpec::Relu,
            LayerSpec::Fc { in_dim: 12, out_dim: 2 },
            LayerSpec::Softmax,
        ],
    };
    // Quick training so the activity actually separates the categories.
    let dataset: Vec<_> = pool
        .iter()
        .map(|r| (r.pixels.clone(), categories.iter().position(|c| c == &r.category).unwrap()))
        .collect();
    let (weights, _) =
        train_backbone(&dataset, &spec, &TrainHyper { lr: 0.02, epochs: 6, batch: 10, ..Default::default() })?;

    let info = spec.validate()?;
    let mut summary = ActivitySummary::new(info.relu_channels.clone());
    for record in &pool {
        let trace = forward(&spec, &weights, &record.pixels, None)?;
        summary.add_image(&record.category, &trace_activities(&trace))?;
    }
    let mut patterns = build_patterns(&summary, Rectification::Bidirectional)?;
    patterns.set_network_hash("example");

    for layer in patterns.layers() {
        for category in &categories {
            println!("relu {layer} / {category}: {:?}", patterns.get(layer, category)?);
        }
    }
    println!("\npositive rectification clamps the negatives:");
    println!("relu 1 / disk: {:?}", patterns.rectified(1, "disk", Rectification::Positive)?);

    let path = std::env::temp_dir().join("fba-patterns-example.fbap");
    save_patterns(&patterns, &path)?;
    let loaded = load_patterns(&path)?;
    println!(
        "\nround-trip through {} ok: {} categories, {} layers",
        path.display(),
        loaded.categories().len(),
        loaded.layers().len()
    );
    Ok(())
}
