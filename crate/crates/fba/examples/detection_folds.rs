//! Binary presence detectors with fold resampling: train on clean-image
//! features, test on composites with and without attention, one record per
//! (condition, fold).

use std::collections::BTreeMap;

use fba::attention::{
    build_patterns, trace_activities, ActivitySummary, AttentionConfig, Mode, Rectification,
};
use fba::classify::{run_folds, FeatureSet, FoldPlan, TestCondition};
use fba::evaluate::{AttentionDesc, ImagesetKind};
use fba::imagesets::shapes::{synthetic_pool, ShapePoolConfig};
use fba::imagesets::{make_array, ArrayPolicy};
use fba::network::train::{train_backbone, TrainHyper};
use fba::network::{forward, AttentionContext, LayerSpec, NetworkSpec};

fn main() -> fba::Result<()> {
    let categories: Vec<String> =
        ["box", "disk", "hstripes", "ring"].iter().map(|s| s.to_string()).collect();
    let pool = synthetic_pool(&ShapePoolConfig {
        categories: categories.clone(),
        per_category: 50,
        size: 32,
        seed: 31,
    })?;

    let spec = NetworkSpec {
        input_shape: [3, 32, 32],
        layers: vec![
            LayerSpec::Conv { in_channels: 3, out_channels: 8, kernel: (3, 3), stride: 1, pad: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { k: 2, stride: 2 },
            LayerSpec::Conv { in_channels: 8, out_channels: 12, kernel: (3, 3), stride: 1, pad: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { k: 2, stride: 2 },
            LayerSpec::Fc { in_dim: 12 * 8 * 8, out_dim: 24 },
            LayerSpec::Relu,
            LayerSpec::Fc { in_dim: 24, out_dim: 4 },
            LayerSpec::Softmax,
        ],
    };
    // Train on the first 30 per category, leave the rest for composites.
    let train_pool: Vec<_> = pool.iter().filter(|r| index_of(&r.id) < 30).collect();
    let test_pool: Vec<_> = pool.iter().filter(|r| index_of(&r.id) >= 30).cloned().collect();
    let dataset: Vec<_> = train_pool
        .iter()
        .map(|r| (r.pixels.clone(), categories.iter().position(|c| c == &r.category).unwrap()))
        .collect();
    let (weights, _) =
        train_backbone(&dataset, &spec, &TrainHyper { lr: 0.02, epochs: 8, batch: 16, ..Default::default() })?;

    // Feature patterns from the training images.
    let info = spec.validate()?;
    let mut summary = ActivitySummary::new(info.relu_channels.clone());
    let mut train_features = FeatureSet::new(info.feature_dim);
    for r in &train_pool {
        let trace = forward(&spec, &weights, &r.pixels, None)?;
        summary.add_image(&r.category, &trace_activities(&trace))?;
        train_features.insert(&r.id, trace.features.into_data())?;
    }
    let patterns = build_patterns(&summary, Rectification::Bidirectional)?;

    // Array composites from the held-out images; target category "disk".
    let exclude = train_pool.iter().map(|r| r.id.clone()).collect();
    let arrays = make_array(&test_pool, 80, 77, 32, &exclude, &ArrayPolicy::Unconstrained)?;
    let test_labels: BTreeMap<String, bool> =
        arrays.iter().map(|c| (c.id.clone(), c.contains_category("disk"))).collect();

    let mut baseline = FeatureSet::new(info.feature_dim);
    let mut attended = FeatureSet::new(info.feature_dim);
    let config = AttentionConfig::new(Mode::Multiplicative, Rectification::Bidirectional, [4], 0.8)?;
    let ctx = AttentionContext { config: &config, patterns: &patterns, category: "disk" };
    for comp in &arrays {
        baseline.insert(&comp.id, forward(&spec, &weights, &comp.pixels, None)?.features.into_data())?;
        attended
            .insert(&comp.id, forward(&spec, &weights, &comp.pixels, Some(&ctx))?.features.into_data())?;
    }

    let pos: Vec<String> = train_pool.iter().filter(|r| r.category == "disk").map(|r| r.id.clone()).collect();
    let neg: Vec<String> = train_pool.iter().filter(|r| r.category != "disk").map(|r| r.id.clone()).collect();
    let plan = FoldPlan::sample(&pos, &neg, 20, 20, 6, 123)?;
    let conditions = [
        TestCondition { attention: None, features: &baseline },
        TestCondition {
            attention: Some(AttentionDesc::from_config(&config)),
            features: &attended,
        },
    ];
    let (records, _) =
        run_folds(&plan, "disk", ImagesetKind::Array, &train_features, &test_labels, &conditions, 1.0)?;

    println!("condition            fold  tp  fp  tn  fn  accuracy");
    for r in &records {
        let label = match &r.attention {
            None => "baseline".to_string(),
            Some(a) => format!("{} b={}", a.option_name(), a.beta),
        };
        println!(
            "{label:<20} {:>4} {:>3} {:>3} {:>3} {:>3}  {:.3}",
            r.fold, r.true_pos, r.false_pos, r.true_neg, r.false_neg, r.accuracy
        );
    }
    Ok(())
}

fn index_of(id: &str) -> usize {
    id.rsplit('-').next().unwrap().parse().unwrap()
}
