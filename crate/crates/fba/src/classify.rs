//! Binary presence/absence detectors on final-layer features.
//!
//! L2-regularized logistic regression fit by full-batch gradient descent
//! (per-block Lipschitz steps), run to gradient norm < 1e-6 or an iteration
//! cap.
//! The objective is convex, so different initializations land on the same
//! loss. Features are standardized per dimension with training-fold
//! statistics; the classifier stores them and applies them at prediction
//! time. Classifiers are trained on unmodulated normal-image features only;
//! attention changes test features, never the detector.

use std::collections::BTreeMap;

use rand::seq::index::sample as index_sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evaluate::{AttentionDesc, EvalRecord, ImagesetKind};
use crate::util::standard_normal;

/// Feature vectors keyed by image id.
#[derive(Debug, Clone, Default)]
pub struct FeatureSet {
    pub dim: usize,
    pub by_id: BTreeMap<String, Vec<f32>>,
}

impl FeatureSet {
    pub fn new(dim: usize) -> Self {
        FeatureSet { dim, by_id: BTreeMap::new() }
    }

    pub fn insert(&mut self, id: impl Into<String>, features: Vec<f32>) -> Result<()> {
        if features.len() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "FeatureSet::insert",
                detail: format!("feature length {} != dim {}", features.len(), self.dim),
            });
        }
        self.by_id.insert(id.into(), features);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&[f32]> {
        self.by_id.get(id).map(|v| v.as_slice()).ok_or_else(|| Error::InsufficientData {
            detail: format!("no features for image '{id}'"),
        })
    }
}

#[derive(Debug, Clone)]
pub struct BinaryClassifier {
    pub category: String,
    pub fold: u32,
    pub seed: u64,
    pub reg: f64,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub score: f64,
    pub present: bool,
}

const GRAD_TOL: f64 = 1e-6;
const MAX_ITERS: usize = 50_000;

/// Stable log(1 + exp(-x)).
fn log1p_exp_neg(x: f64) -> f64 {
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean logistic loss plus the L2 penalty (bias unregularized).
pub fn logistic_loss(
    features: &[Vec<f64>],
    labels: &[bool],
    weights: &[f64],
    bias: f64,
    reg: f64,
) -> f64 {
    let n = features.len() as f64;
    let mut loss = 0.0;
    for (x, &y) in features.iter().zip(labels.iter()) {
        let z: f64 = weights.iter().zip(x.iter()).map(|(w, v)| w * v).sum::<f64>() + bias;
        let margin = if y { z } else { -z };
        loss += log1p_exp_neg(margin);
    }
    loss / n + 0.5 * reg * weights.iter().map(|w| w * w).sum::<f64>()
}

/// Fits an L2-regularized logistic regression detector.
///
/// The seed only randomizes the starting point; convexity drives every start
/// to the same optimum, which the convexity tests rely on.
pub fn train_binary(
    features: &[(Vec<f32>, bool)],
    reg: f64,
    seed: u64,
) -> Result<BinaryClassifier> {
    const OP: &str = "train_binary";
    if features.is_empty() {
        return Err(Error::InsufficientData { detail: "no training features".into() });
    }
    if !(reg > 0.0) {
        return Err(Error::InvalidArgument {
            op: OP,
            detail: format!("regularization must be positive, got {reg}"),
        });
    }
    let n_pos = features.iter().filter(|(_, y)| *y).count();
    if n_pos == 0 || n_pos == features.len() {
        return Err(Error::InsufficientData {
            detail: format!("both classes required: {n_pos} positive of {}", features.len()),
        });
    }
    let dim = features[0].0.len();
    for (x, _) in features {
        if x.len() != dim {
            return Err(Error::ShapeMismatch {
                op: OP,
                detail: format!("feature length {} != {dim}", x.len()),
            });
        }
    }
    let n = features.len() as f64;

    // Standardize per dimension with training statistics.
    let mut mean = vec![0.0f64; dim];
    for (x, _) in features {
        for (m, v) in mean.iter_mut().zip(x.iter()) {
            *m += *v as f64;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut std = vec![0.0f64; dim];
    for (x, _) in features {
        for ((s, v), m) in std.iter_mut().zip(x.iter()).zip(mean.iter()) {
            let d = *v as f64 - m;
            *s += d * d;
        }
    }
    for s in &mut std {
        *s = (*s / n).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }

    let xs: Vec<Vec<f64>> = features
        .iter()
        .map(|(x, _)| {
            x.iter().zip(mean.iter().zip(std.iter())).map(|(v, (m, s))| (*v as f64 - m) / s).collect()
        })
        .collect();
    let ys: Vec<bool> = features.iter().map(|(_, y)| *y).collect();

    // Full-batch gradient descent with per-block step sizes. The weight
    // block sees curvature up to reg + X'X/(4n) while the unregularized bias
    // sees at most 1/4; a single shared step would stall whichever block is
    // better conditioned, so the blocks alternate, each with its own
    // Lipschitz step. Every update is a descent step and the loop runs until
    // the joint gradient norm passes the tolerance.
    let frob: f64 = xs.iter().map(|x| x.iter().map(|v| v * v).sum::<f64>()).sum();
    let step_w = 1.0 / (reg + frob / (4.0 * n));
    let step_b = 4.0;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w: Vec<f64> = (0..dim).map(|_| 0.01 * standard_normal(&mut rng)).collect();
    let mut b = 0.0f64;
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;
    while iterations < MAX_ITERS {
        let mut gw = vec![0.0f64; dim];
        let mut gb = 0.0f64;
        for (x, &y) in xs.iter().zip(ys.iter()) {
            let z: f64 = w.iter().zip(x.iter()).map(|(wi, v)| wi * v).sum::<f64>() + b;
            let err = sigmoid(z) - if y { 1.0 } else { 0.0 };
            for (g, v) in gw.iter_mut().zip(x.iter()) {
                *g += err * v;
            }
            gb += err;
        }
        for (g, wi) in gw.iter_mut().zip(w.iter()) {
            *g = *g / n + reg * wi;
        }
        gb /= n;
        grad_norm = (gw.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt();
        if grad_norm < GRAD_TOL {
            break;
        }
        if iterations % 2 == 0 {
            for (wi, g) in w.iter_mut().zip(gw.iter()) {
                *wi -= step_w * g;
            }
        } else {
            b -= step_b * gb;
        }
        iterations += 1;
    }

    let final_loss = logistic_loss(&xs, &ys, &w, b, reg);
    Ok(BinaryClassifier {
        category: String::new(),
        fold: 0,
        seed,
        reg,
        weights: w,
        bias: b,
        feature_mean: mean,
        feature_std: std,
        final_loss,
        final_grad_norm: grad_norm,
        iterations,
    })
}

impl BinaryClassifier {
    /// Affine response on the standardized features; a score of exactly zero
    /// counts as absent.
    pub fn predict(&self, features: &[f32]) -> Result<Prediction> {
        if features.len() != self.weights.len() {
            return Err(Error::ShapeMismatch {
                op: "BinaryClassifier::predict",
                detail: format!(
                    "feature length {} != classifier dimension {}",
                    features.len(),
                    self.weights.len()
                ),
            });
        }
        let mut score = self.bias;
        for ((w, v), (m, s)) in self
            .weights
            .iter()
            .zip(features.iter())
            .zip(self.feature_mean.iter().zip(self.feature_std.iter()))
        {
            score += w * (*v as f64 - m) / s;
        }
        Ok(Prediction { score, present: score > 0.0 })
    }

    /// Text serialization for audit alongside fold seeds.
    pub fn to_text(&self) -> String {
        let nums = |v: &[f64]| -> String {
            v.iter().map(|x| format!("{x:.17e}")).collect::<Vec<_>>().join(" ")
        };
        format!(
            "fba-classifier v1\ncategory {}\nfold {}\nseed {}\nreg {}\nbias {:.17e}\nweights {}\nmean {}\nstd {}\nend\n",
            if self.category.is_empty() { "-" } else { &self.category },
            self.fold,
            self.seed,
            self.reg,
            self.bias,
            nums(&self.weights),
            nums(&self.feature_mean),
            nums(&self.feature_std),
        )
    }
}

/// Per-fold training subsets: which pool ids train the detector.
#[derive(Debug, Clone)]
pub struct FoldPlan {
    pub folds: Vec<FoldSpec>,
}

#[derive(Debug, Clone)]
pub struct FoldSpec {
    pub pos_ids: Vec<String>,
    pub neg_ids: Vec<String>,
    pub seed: u64,
}

impl FoldPlan {
    /// Samples `n_folds` training subsets of `n_pos` positives + `n_neg`
    /// negatives, each fold from its own stream of the master seed.
    pub fn sample(
        pos_pool: &[String],
        neg_pool: &[String],
        n_pos: usize,
        n_neg: usize,
        n_folds: usize,
        master_seed: u64,
    ) -> Result<FoldPlan> {
        if pos_pool.len() < n_pos {
            return Err(Error::InsufficientData {
                detail: format!(
                    "fold plan wants {n_pos} positive training images, pool has {}",
                    pos_pool.len()
                ),
            });
        }
        if neg_pool.len() < n_neg {
            return Err(Error::InsufficientData {
                detail: format!(
                    "fold plan wants {n_neg} negative training images, pool has {}",
                    neg_pool.len()
                ),
            });
        }
        if n_folds == 0 || n_pos == 0 || n_neg == 0 {
            return Err(Error::InvalidArgument {
                op: "FoldPlan::sample",
                detail: "fold count and per-class counts must be >= 1".into(),
            });
        }
        let mut folds = Vec::with_capacity(n_folds);
        for f in 0..n_folds {
            let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
            rng.set_stream(f as u64);
            let pos_ids =
                index_sample(&mut rng, pos_pool.len(), n_pos).iter().map(|i| pos_pool[i].clone()).collect();
            let neg_ids =
                index_sample(&mut rng, neg_pool.len(), n_neg).iter().map(|i| neg_pool[i].clone()).collect();
            folds.push(FoldSpec { pos_ids, neg_ids, seed: master_seed.wrapping_add(f as u64) });
        }
        Ok(FoldPlan { folds })
    }
}

/// One test condition: an attention descriptor (or none for the baseline) and
/// the features the composites produce under it.
pub struct TestCondition<'a> {
    pub attention: Option<AttentionDesc>,
    pub features: &'a FeatureSet,
}

/// Trains one detector per fold of the plan on normal-image features.
pub fn train_fold_classifiers(
    plan: &FoldPlan,
    category: &str,
    train_features: &FeatureSet,
    reg: f64,
) -> Result<Vec<BinaryClassifier>> {
    let mut classifiers = Vec::with_capacity(plan.folds.len());
    for (fold_idx, fold) in plan.folds.iter().enumerate() {
        let mut training: Vec<(Vec<f32>, bool)> =
            Vec::with_capacity(fold.pos_ids.len() + fold.neg_ids.len());
        for id in &fold.pos_ids {
            training.push((train_features.get(id)?.to_vec(), true));
        }
        for id in &fold.neg_ids {
            training.push((train_features.get(id)?.to_vec(), false));
        }
        let mut classifier = train_binary(&training, reg, fold.seed)?;
        classifier.category = category.to_string();
        classifier.fold = fold_idx as u32;
        classifiers.push(classifier);
    }
    Ok(classifiers)
}

/// Scores every test condition with already-fitted fold classifiers,
/// producing one record per (condition, fold).
pub fn score_folds(
    classifiers: &[BinaryClassifier],
    category: &str,
    imageset: ImagesetKind,
    test_labels: &BTreeMap<String, bool>,
    conditions: &[TestCondition<'_>],
) -> Result<Vec<EvalRecord>> {
    if conditions.is_empty() {
        return Err(Error::InvalidArgument {
            op: "score_folds",
            detail: "at least one test condition required".into(),
        });
    }
    if test_labels.is_empty() {
        return Err(Error::InsufficientData { detail: "empty test set".into() });
    }
    let mut records = Vec::with_capacity(conditions.len() * classifiers.len());
    for condition in conditions {
        for (fold_idx, classifier) in classifiers.iter().enumerate() {
            let (mut tp, mut fp, mut tn, mut fn_) = (0u32, 0u32, 0u32, 0u32);
            for (id, &present) in test_labels {
                let pred = classifier.predict(condition.features.get(id)?)?;
                match (present, pred.present) {
                    (true, true) => tp += 1,
                    (true, false) => fn_ += 1,
                    (false, true) => fp += 1,
                    (false, false) => tn += 1,
                }
            }
            records.push(EvalRecord::new(
                category.to_string(),
                imageset,
                condition.attention.clone(),
                fold_idx as u32,
                tp,
                fp,
                tn,
                fn_,
            ));
        }
    }
    Ok(records)
}

/// Trains one detector per fold on normal-image features and scores every
/// test condition with it.
///
/// The same fitted classifier is reused across all conditions of a fold, so
/// attention can only ever change the features, never the detector.
pub fn run_folds(
    plan: &FoldPlan,
    category: &str,
    imageset: ImagesetKind,
    train_features: &FeatureSet,
    test_labels: &BTreeMap<String, bool>,
    conditions: &[TestCondition<'_>],
    reg: f64,
) -> Result<(Vec<EvalRecord>, Vec<BinaryClassifier>)> {
    let classifiers = train_fold_classifiers(plan, category, train_features, reg)?;
    let records = score_folds(&classifiers, category, imageset, test_labels, conditions)?;
    Ok((records, classifiers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn separable_one_dimensional_boundary() {
        let data = vec![(vec![-1.0f32], false), (vec![1.0f32], true)];
        let c = train_binary(&data, 0.01, 0).unwrap();
        assert!(c.predict(&[1.0]).unwrap().present);
        assert!(!c.predict(&[-1.0]).unwrap().present);
        // The raw-space boundary (score = 0) sits strictly between the points.
        let lo = c.predict(&[-1.0]).unwrap().score;
        let hi = c.predict(&[1.0]).unwrap().score;
        assert!(lo < 0.0 && hi > 0.0);
    }

    #[test]
    fn huge_regularization_collapses_to_prior() {
        // 3 positives, 1 negative: with weights forced to ~0 the bias learns
        // the log-odds of the prior, so everything scores positive.
        let data = vec![
            (vec![0.3f32, -1.0], true),
            (vec![-0.5f32, 0.2], true),
            (vec![0.9f32, 0.4], true),
            (vec![0.1f32, -0.2], false),
        ];
        let c = train_binary(&data, 1e9, 1).unwrap();
        assert!(c.weights.iter().all(|w| w.abs() < 1e-6), "weights {:?}", c.weights);
        assert!((c.bias - (3.0f64 / 1.0).ln()).abs() < 0.01, "bias {} vs ln 3", c.bias);
        for (x, _) in &data {
            assert!(c.predict(x).unwrap().present, "prior-dominated prediction is 'present'");
        }
    }

    #[test]
    fn separable_2d_reaches_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut data = Vec::new();
        for _ in 0..40 {
            let x = rng.random_range(-1.0f32..1.0);
            let y = rng.random_range(-1.0f32..1.0);
            data.push((vec![x + 2.0, y], true));
            data.push((vec![x - 2.0, y], false));
        }
        let c = train_binary(&data, 1.0, 7).unwrap();
        let correct = data
            .iter()
            .filter(|(x, y)| c.predict(x).unwrap().present == *y)
            .count();
        assert!(correct as f64 / data.len() as f64 >= 0.99);
        assert!(c.final_grad_norm < GRAD_TOL, "gradient norm {}", c.final_grad_norm);
    }

    #[test]
    fn single_class_rejected() {
        let data = vec![(vec![1.0f32], true), (vec![2.0f32], true)];
        assert!(matches!(train_binary(&data, 1.0, 0), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn convexity_same_loss_from_different_starts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<(Vec<f32>, bool)> = (0..30)
            .map(|i| {
                let v: Vec<f32> = (0..5).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                (v, i % 2 == 0)
            })
            .collect();
        let a = train_binary(&data, 1.0, 11).unwrap();
        let b = train_binary(&data, 1.0, 999).unwrap();
        assert!(
            (a.final_loss - b.final_loss).abs() < 1e-8,
            "losses {} vs {} should agree at the shared optimum",
            a.final_loss,
            b.final_loss
        );
    }

    #[test]
    fn predict_matches_dot_product_oracle() {
        let data = vec![
            (vec![1.0f32, 2.0, -1.0], true),
            (vec![-1.0f32, 0.5, 2.0], false),
            (vec![0.5f32, 1.0, 0.0], true),
            (vec![-0.5f32, -1.0, 1.0], false),
        ];
        let c = train_binary(&data, 1.0, 5).unwrap();
        let x = [0.2f32, -0.3, 0.8];
        let mut want = c.bias;
        for i in 0..3 {
            want += c.weights[i] * (x[i] as f64 - c.feature_mean[i]) / c.feature_std[i];
        }
        let got = c.predict(&x).unwrap();
        assert!((got.score - want).abs() < 1e-12);
        assert_eq!(got.present, want > 0.0);
    }

    #[test]
    fn zero_classifier_scores_absent() {
        let data = vec![(vec![1.0f32], true), (vec![-1.0f32], false)];
        let mut c = train_binary(&data, 1.0, 0).unwrap();
        c.weights = vec![0.0];
        c.bias = 0.0;
        let p = c.predict(&[0.7]).unwrap();
        assert_eq!(p.score, 0.0);
        assert!(!p.present, "ties break toward absent");
    }

    #[test]
    fn predict_dimension_mismatch_rejected() {
        let data = vec![(vec![1.0f32, 0.0], true), (vec![-1.0f32, 0.0], false)];
        let c = train_binary(&data, 1.0, 0).unwrap();
        assert!(c.predict(&[1.0]).is_err());
    }

    fn synthetic_features(
        n_per_class: usize,
        dim: usize,
        shift: f32,
        seed: u64,
    ) -> (FeatureSet, BTreeMap<String, bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = FeatureSet::new(dim);
        let mut labels = BTreeMap::new();
        for i in 0..n_per_class * 2 {
            let positive = i % 2 == 0;
            let id = format!("img-{i:03}");
            let offset = if positive { shift } else { -shift };
            let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0) + offset).collect();
            set.insert(&id, v).unwrap();
            labels.insert(id, positive);
        }
        (set, labels)
    }

    #[test]
    fn run_folds_easy_task_and_count_invariants() {
        let (features, labels) = synthetic_features(30, 6, 1.5, 21);
        let pos: Vec<String> = labels.iter().filter(|(_, &v)| v).map(|(k, _)| k.clone()).collect();
        let neg: Vec<String> = labels.iter().filter(|(_, &v)| !v).map(|(k, _)| k.clone()).collect();
        let plan = FoldPlan::sample(&pos, &neg, 10, 10, 5, 99).unwrap();
        let conditions = [TestCondition { attention: None, features: &features }];
        let (records, classifiers) = run_folds(
            &plan,
            "cat",
            ImagesetKind::Normal,
            &features,
            &labels,
            &conditions,
            1.0,
        )
        .unwrap();
        assert_eq!(records.len(), 5);
        assert_eq!(classifiers.len(), 5);
        let n_pos = labels.values().filter(|&&v| v).count() as u32;
        let n_neg = labels.len() as u32 - n_pos;
        for r in &records {
            assert_eq!(r.true_pos + r.false_neg, n_pos);
            assert_eq!(r.true_neg + r.false_pos, n_neg);
            assert!(r.accuracy > 0.9, "easy separable task, accuracy {}", r.accuracy);
        }
    }

    #[test]
    fn run_folds_deterministic_and_attention_never_touches_classifier() {
        let (features, labels) = synthetic_features(20, 4, 0.4, 22);
        let pos: Vec<String> = labels.iter().filter(|(_, &v)| v).map(|(k, _)| k.clone()).collect();
        let neg: Vec<String> = labels.iter().filter(|(_, &v)| !v).map(|(k, _)| k.clone()).collect();
        let plan = FoldPlan::sample(&pos, &neg, 8, 8, 4, 7).unwrap();

        let zero_beta = AttentionDesc {
            mode: crate::attention::Mode::Multiplicative,
            rectification: crate::attention::Rectification::Bidirectional,
            layers: vec![1],
            beta: 0.0,
        };
        // Identical features under both conditions (a zero-strength pass
        // produces bit-identical features upstream).
        let conditions = [
            TestCondition { attention: None, features: &features },
            TestCondition { attention: Some(zero_beta), features: &features },
        ];
        let run = || {
            run_folds(&plan, "cat", ImagesetKind::Array, &features, &labels, &conditions, 1.0)
                .unwrap()
        };
        let (r1, c1) = run();
        let (r2, c2) = run();

        // Bit-identical reruns.
        for (a, b) in r1.iter().zip(r2.iter()) {
            assert_eq!(a, b);
        }
        for (a, b) in c1.iter().zip(c2.iter()) {
            assert_eq!(a.to_text(), b.to_text());
        }
        // Zero-strength condition reproduces the baseline counts exactly.
        let n = plan.folds.len();
        for fold in 0..n {
            let base = &r1[fold];
            let attended = &r1[n + fold];
            assert_eq!(
                (base.true_pos, base.false_pos, base.true_neg, base.false_neg),
                (attended.true_pos, attended.false_pos, attended.true_neg, attended.false_neg)
            );
        }
    }

    #[test]
    fn fold_plan_shortfall_is_named() {
        let pos: Vec<String> = (0..5).map(|i| format!("p{i}")).collect();
        let neg: Vec<String> = (0..50).map(|i| format!("n{i}")).collect();
        match FoldPlan::sample(&pos, &neg, 10, 10, 3, 0) {
            Err(Error::InsufficientData { detail }) => {
                assert!(detail.contains("10") && detail.contains('5'), "{detail}");
            }
            other => panic!("expected shortfall, got {other:?}"),
        }
    }

    #[test]
    fn missing_feature_id_is_reported() {
        let (features, mut labels) = synthetic_features(10, 3, 1.0, 23);
        labels.insert("ghost".to_string(), true);
        let pos: Vec<String> =
            labels.iter().filter(|(_, &v)| v).map(|(k, _)| k.clone()).take(5).collect();
        let neg: Vec<String> =
            labels.iter().filter(|(_, &v)| !v).map(|(k, _)| k.clone()).take(5).collect();
        let plan = FoldPlan::sample(&pos, &neg, 3, 3, 2, 1).unwrap();
        let conditions = [TestCondition { attention: None, features: &features }];
        let err = run_folds(&plan, "c", ImagesetKind::Normal, &features, &labels, &conditions, 1.0)
            .unwrap_err();
        assert!(err.to_string().contains("ghost"), "{err}");
    }
}
