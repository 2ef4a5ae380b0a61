//! Win histograms: which implementation option (mode x rectification) wins
//! most (category, layer) cells, with Wilcoxon-significant wins marked.

use fba::attention::{Mode, Rectification};
use fba::evaluate::{win_histograms, AttentionDesc, ComparisonAxis, EvalRecord, ImagesetKind};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> fba::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let options = [
        (Mode::Additive, Rectification::Bidirectional, 0.02),
        (Mode::Additive, Rectification::Positive, 0.01),
        (Mode::Multiplicative, Rectification::Bidirectional, 0.08),
        (Mode::Multiplicative, Rectification::Positive, 0.04),
    ];
    let betas = [4.0f32, 8.0, 12.0];

    // Synthetic records with a built-in ground truth: multiplicative
    // bidirectional carries the largest average lift.
    let mut records = Vec::new();
    for category in ["box", "cross", "disk", "ring", "triangle"] {
        for layer in 1u32..=4 {
            for fold in 0..10u32 {
                let noise = rng.random_range(-0.02..0.02);
                records.push(EvalRecord::new(
                    category.into(),
                    ImagesetKind::Array,
                    None,
                    fold,
                    (55.0 + 100.0 * noise) as u32,
                    10,
                    90,
                    100 - (55.0 + 100.0 * noise) as u32,
                ));
                for (mode, rect, lift) in options {
                    for beta in betas {
                        let layer_gain = 0.01 * layer as f64;
                        let beta_bump = if beta == 8.0 { 0.01 } else { 0.0 };
                        let noise = rng.random_range(-0.03..0.03);
                        let acc = 0.55 + lift + layer_gain + beta_bump + noise;
                        let tp = (acc * 100.0).round() as u32;
                        records.push(EvalRecord::new(
                            category.into(),
                            ImagesetKind::Array,
                            Some(AttentionDesc { mode, rectification: rect, layers: vec![layer], beta }),
                            fold,
                            tp,
                            10,
                            90,
                            100 - tp,
                        ));
                    }
                }
            }
        }
    }

    for axis in [
        ComparisonAxis::Options,
        ComparisonAxis::Layers,
        ComparisonAxis::ModeWithinRectification(Rectification::Bidirectional),
        ComparisonAxis::RectificationWithinMode(Mode::Multiplicative),
    ] {
        let result = win_histograms(&records, &axis)?;
        println!("axis: {} ({} cells, alpha {})", result.axis, result.cells.len(), result.alpha);
        for option in &result.contenders {
            println!(
                "  {option:<30} wins {:>3}   significant {:>3}",
                result.wins[option], result.significant_wins[option]
            );
        }
        println!();
    }
    Ok(())
}
