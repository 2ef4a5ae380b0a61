//! Train a small backbone on the bundled synthetic shapes and watch the
//! per-epoch loss/accuracy. Uses a reduced pool so it finishes quickly.

use fba::imagesets::shapes::{synthetic_pool, ShapePoolConfig};
use fba::network::train::{train_backbone, TrainHyper};
use fba::network::{LayerSpec, NetworkSpec};

fn main() -> fba::Result<()> {
    let categories = vec!["box".to_string(), "disk".to_string(), "hstripes".to_string(), "ring".to_string()];
    let pool = synthetic_pool(&ShapePoolConfig {
        categories: categories.clone(),
        per_category: 40,
        size: 32,
        seed: 9,
    })?;
    let dataset: Vec<_> = pool
        .iter()
        .map(|r| {
            let class = categories.iter().position(|c| c == &r.category).unwrap();
            (r.pixels.clone(), class)
        })
        .collect();

    let spec = NetworkSpec {
        input_shape: [3, 32, 32],
        layers: vec![
            LayerSpec::Conv { in_channels: 3, out_channels: 8, kernel: (3, 3), stride: 1, pad: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { k: 2, stride: 2 },
            LayerSpec::Conv { in_channels: 8, out_channels: 16, kernel: (3, 3), stride: 1, pad: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { k: 2, stride: 2 },
            LayerSpec::Fc { in_dim: 16 * 8 * 8, out_dim: 32 },
            LayerSpec::Relu,
            LayerSpec::Fc { in_dim: 32, out_dim: categories.len() },
            LayerSpec::Softmax,
        ],
    };
    let hyper = TrainHyper { lr: 0.02, momentum: 0.9, epochs: 10, batch: 16, seed: 3 };
    println!("training on {} images, {} classes", dataset.len(), categories.len());
    let (_, log) = train_backbone(&dataset, &spec, &hyper)?;
    for (epoch, stats) in log.epochs.iter().enumerate() {
        println!("epoch {epoch:2}: loss {:.4}  accuracy {:.3}", stats.loss, stats.accuracy);
    }
    Ok(())
}
