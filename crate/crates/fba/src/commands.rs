//! Pipeline commands behind the CLI: backbone training, pattern extraction,
//! imageset generation, the evaluation sweep, and analysis export.
//!
//! Every command is a pure function of (config, input artifacts, master
//! seed): reruns produce byte-identical outputs. Artifacts embed the hashes
//! of their inputs and downstream commands validate the chain before doing
//! any work. The evaluation sweep enumerates its cells in a fixed
//! lexicographic order, writes each cell's fold records atomically through a
//! single writer, and skips cells already present in the results file, so an
//! interrupted sweep resumes instead of recomputing.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rayon::prelude::*;

use crate::attention::{
    build_patterns, trace_activities, ActivitySummary, AttentionConfig, FeaturePatternSet, Mode,
    Rectification,
};
use crate::classify::{train_fold_classifiers, score_folds, BinaryClassifier, FeatureSet, FoldPlan, TestCondition};
use crate::config::{OutPaths, RunConfig};
use crate::error::{Error, Result};
use crate::evaluate::{
    self, accuracy_delta, best_beta_deltas, layers_token, perturb_patterns, rate_trajectory,
    roc_by_strength, topk_merged_error, win_histograms, AttentionDesc, ComparisonAxis, EvalRecord,
    ImagesetKind, Perturbation,
};
use crate::imagesets::{
    self, io as image_io, make_array, make_merged, read_manifest, shapes, write_manifest,
    ArrayPolicy, ImageRecord,
};
use crate::network::{forward, format, AttentionContext, NetworkSpec, Weights};
use crate::tensor::Tensor;
use crate::util::{derive_seed, sha256_file, sha256_hex};

fn run_in_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match workers {
        Some(n) if n > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
            .install(f),
        _ => f(),
    }
}

fn ensure_dir(path: &std::path::Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// Pool construction and splits

/// Loads or synthesizes the labeled image pool, sorted by id.
pub fn build_pool(config: &RunConfig) -> Result<Vec<ImageRecord>> {
    let mut pool = match config.dataset.source.as_str() {
        "synthetic" => shapes::synthetic_pool(&shapes::ShapePoolConfig {
            categories: config.categories.clone(),
            per_category: config.pool.total_per_category(),
            size: config.image_size,
            seed: derive_seed(config.master_seed, "pool"),
        })?,
        "directory" => load_directory_pool(config)?,
        other => return Err(Error::Config { detail: format!("unknown dataset source '{other}'") }),
    };
    pool.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(pool)
}

fn load_directory_pool(config: &RunConfig) -> Result<Vec<ImageRecord>> {
    let root = config.dataset.path.as_ref().expect("validated");
    let need = config.pool.total_per_category();
    let mut pool = Vec::new();
    for category in &config.categories {
        let dir = root.join(category);
        if !dir.is_dir() {
            return Err(Error::InsufficientData {
                detail: format!("dataset directory {} missing category '{category}'", root.display()),
            });
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(dir.display().to_string(), e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("ft" | "pgm" | "ppm" | "pnm")
                )
            })
            .collect();
        files.sort();
        if files.len() < need {
            return Err(Error::InsufficientData {
                detail: format!(
                    "category '{category}' has {} images, pool splits need {need}",
                    files.len()
                ),
            });
        }
        for path in files.into_iter().take(need) {
            let raw = if path.extension().and_then(|e| e.to_str()) == Some("ft") {
                image_io::load_tensor(&path)?
            } else {
                image_io::load_pnm(&path)?
            };
            let rgb = to_rgb(&raw)?;
            let sized = imagesets::resize(&rgb, config.image_size, config.image_size)?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("img").to_string();
            pool.push(ImageRecord {
                id: format!("{category}/{stem}"),
                category: category.clone(),
                pixels: sized,
            });
        }
    }
    Ok(pool)
}

fn to_rgb(image: &Tensor) -> Result<Tensor> {
    match image.shape() {
        [3, _, _] => Ok(image.clone()),
        [1, h, w] => {
            let mut data = Vec::with_capacity(3 * h * w);
            for _ in 0..3 {
                data.extend_from_slice(image.data());
            }
            Tensor::new(vec![3, *h, *w], data)
        }
        other => Err(Error::ShapeMismatch {
            op: "to_rgb",
            detail: format!("expected 1- or 3-channel image, got {other:?}"),
        }),
    }
}

/// Content hash over the whole pool (ids, categories, pixels).
pub fn pool_hash(pool: &[ImageRecord]) -> String {
    let mut bytes = Vec::new();
    for r in pool {
        bytes.extend_from_slice(r.id.as_bytes());
        bytes.push(0);
        bytes.extend_from_slice(r.category.as_bytes());
        bytes.push(0);
        for d in r.pixels.shape() {
            bytes.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in r.pixels.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    sha256_hex(&bytes)
}

/// Disjoint per-category splits, as indices into the sorted pool.
#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub backbone: Vec<usize>,
    pub pattern: Vec<usize>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_pool(config: &RunConfig, pool: &[ImageRecord]) -> Result<Splits> {
    let mut splits = Splits::default();
    for category in &config.categories {
        let indices: Vec<usize> = pool
            .iter()
            .enumerate()
            .filter(|(_, r)| &r.category == category)
            .map(|(i, _)| i)
            .collect();
        let need = config.pool.total_per_category();
        if indices.len() < need {
            return Err(Error::InsufficientData {
                detail: format!("category '{category}' has {} pool images, need {need}", indices.len()),
            });
        }
        let mut cursor = indices.into_iter();
        splits.backbone.extend(cursor.by_ref().take(config.pool.backbone_per_category));
        splits.pattern.extend(cursor.by_ref().take(config.pool.pattern_per_category));
        splits.train.extend(cursor.by_ref().take(config.pool.train_per_category));
        splits.test.extend(cursor.by_ref().take(config.pool.test_per_category));
    }
    Ok(splits)
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug)]
pub struct TrainSummary {
    pub weights_path: PathBuf,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub epochs: usize,
}

pub fn cmd_train(config: &RunConfig, paths: &OutPaths) -> Result<TrainSummary> {
    ensure_dir(&paths.root)?;
    let pool = build_pool(config)?;
    let splits = split_pool(config, &pool)?;
    let dataset_hash = pool_hash(&pool);

    let category_index: BTreeMap<&str, usize> =
        config.categories.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let dataset: Vec<(Tensor, usize)> = splits
        .backbone
        .iter()
        .map(|&i| (pool[i].pixels.clone(), category_index[pool[i].category.as_str()]))
        .collect();

    let spec = config.backbone_spec();
    let hyper = crate::network::train::TrainHyper {
        lr: config.backbone.lr,
        momentum: config.backbone.momentum,
        epochs: config.backbone.epochs,
        batch: config.backbone.batch,
        seed: derive_seed(config.master_seed, "backbone-train"),
    };
    let (weights, log) = crate::network::train::train_backbone(&dataset, &spec, &hyper)?;

    let mut meta = BTreeMap::new();
    meta.insert("dataset_hash".to_string(), dataset_hash);
    meta.insert("master_seed".to_string(), config.master_seed.to_string());
    meta.insert("categories".to_string(), config.categories.join(","));
    format::save_weights(&paths.weights(), &spec, &weights, &meta)?;

    let mut log_text = String::from("epoch,loss,accuracy\n");
    for (i, e) in log.epochs.iter().enumerate() {
        log_text.push_str(&format!("{i},{},{}\n", e.loss, e.accuracy));
    }
    std::fs::write(paths.train_log(), log_text)
        .map_err(|e| Error::io(paths.train_log().display().to_string(), e))?;

    let last = log.epochs.last().copied().unwrap_or(crate::network::train::EpochStats {
        loss: f64::NAN,
        accuracy: 0.0,
    });
    Ok(TrainSummary {
        weights_path: paths.weights(),
        final_loss: last.loss,
        final_accuracy: last.accuracy,
        epochs: log.epochs.len(),
    })
}

// ---------------------------------------------------------------------------
// extract-patterns

#[derive(Debug)]
pub struct PatternSummary {
    pub patterns_path: PathBuf,
    pub channels: Vec<usize>,
    pub categories: Vec<String>,
}

fn load_backbone(config: &RunConfig, paths: &OutPaths) -> Result<(NetworkSpec, Weights, String)> {
    let weights_path = paths.weights();
    let (spec, weights, meta) = format::load_weights(&weights_path)?;
    let hash = sha256_file(&weights_path)?;
    if let Some(cats) = meta.get("categories") {
        let expected = config.categories.join(",");
        if cats != &expected {
            return Err(Error::StaleArtifact {
                detail: format!(
                    "weights were trained for categories [{cats}], config asks for [{expected}]"
                ),
            });
        }
    }
    Ok((spec, weights, hash))
}

pub fn cmd_extract_patterns(config: &RunConfig, paths: &OutPaths) -> Result<PatternSummary> {
    let (spec, weights, weights_hash) = load_backbone(config, paths)?;
    let pool = build_pool(config)?;
    let splits = split_pool(config, &pool)?;

    // One forward pass per pattern image, merged in index order so thread
    // scheduling cannot perturb the sums.
    let activities: Vec<(String, Vec<Vec<f64>>)> = splits
        .pattern
        .par_iter()
        .map(|&i| {
            let trace = forward(&spec, &weights, &pool[i].pixels, None)?;
            Ok((pool[i].category.clone(), trace_activities(&trace)))
        })
        .collect::<Result<_>>()?;

    let info = spec.validate()?;
    let mut summary = ActivitySummary::new(info.relu_channels.clone());
    for (category, acts) in &activities {
        summary.add_image(category, acts)?;
    }
    for category in &config.categories {
        if !summary.category_counts().contains_key(category) {
            return Err(Error::InsufficientData {
                detail: format!("category '{category}' contributed zero pattern images"),
            });
        }
    }

    let mut patterns = build_patterns(&summary, Rectification::Bidirectional)?;
    patterns.set_network_hash(&weights_hash);
    crate::attention::save_patterns(&patterns, &paths.patterns())?;

    for (i, c) in info.relu_channels.iter().enumerate() {
        println!("relu layer {}: {c} feature maps", i + 1);
    }
    Ok(PatternSummary {
        patterns_path: paths.patterns(),
        channels: info.relu_channels,
        categories: patterns.categories(),
    })
}

// ---------------------------------------------------------------------------
// make-imagesets

#[derive(Debug)]
pub struct ImagesetSummary {
    pub array_count: usize,
    pub merged_count: usize,
    pub images_dir: PathBuf,
}

pub fn cmd_make_imagesets(config: &RunConfig, paths: &OutPaths) -> Result<ImagesetSummary> {
    let pool = build_pool(config)?;
    let splits = split_pool(config, &pool)?;
    let hash = pool_hash(&pool);

    // Everything outside the test split is excluded from composite sources.
    let mut exclude: BTreeSet<String> = BTreeSet::new();
    for &i in splits.backbone.iter().chain(&splits.pattern).chain(&splits.train) {
        exclude.insert(pool[i].id.clone());
    }

    let array_seed = derive_seed(config.master_seed, "arrays");
    let merged_seed = derive_seed(config.master_seed, "merged");
    let arrays = make_array(
        &pool,
        config.imagesets.array_count,
        array_seed,
        config.image_size,
        &exclude,
        &ArrayPolicy::Unconstrained,
    )?;
    let merged = make_merged(
        &pool,
        config.imagesets.merged_count,
        merged_seed,
        config.imagesets.merged_weight,
        &exclude,
    )?;

    ensure_dir(&paths.images_dir())?;
    for record in arrays.iter().chain(merged.iter()) {
        image_io::save_tensor(&paths.image_file(&record.id), &record.pixels)?;
        if config.imagesets.export_pnm {
            image_io::save_pnm(&paths.image_pnm(&record.id), &record.pixels)?;
        }
    }
    let base_header = |seed: u64, count: usize| {
        vec![
            ("pool_hash".to_string(), hash.clone()),
            ("master_seed".to_string(), config.master_seed.to_string()),
            ("seed".to_string(), seed.to_string()),
            ("count".to_string(), count.to_string()),
        ]
    };
    let mut array_header = base_header(array_seed, arrays.len());
    array_header.push(("target_size".to_string(), config.image_size.to_string()));
    write_manifest(&paths.array_manifest(), &array_header, &arrays)?;
    let mut merged_header = base_header(merged_seed, merged.len());
    merged_header.push(("weight".to_string(), config.imagesets.merged_weight.to_string()));
    write_manifest(&paths.merged_manifest(), &merged_header, &merged)?;

    Ok(ImagesetSummary {
        array_count: arrays.len(),
        merged_count: merged.len(),
        images_dir: paths.images_dir(),
    })
}

// ---------------------------------------------------------------------------
// evaluate

/// One sweep cell: a (images, category, condition) coordinate whose fold
/// records are written atomically.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub imageset: ImagesetKind,
    pub category: String,
    /// None is the unattended baseline.
    pub condition: Option<(Mode, Rectification, Vec<u32>, f32)>,
}

type CellKey = (ImagesetKind, String, String, String, String, u32);

impl Cell {
    fn key(&self) -> CellKey {
        match &self.condition {
            None => (
                self.imageset,
                self.category.clone(),
                "none".into(),
                "none".into(),
                "-".into(),
                0u32,
            ),
            Some((mode, rect, layers, beta)) => (
                self.imageset,
                self.category.clone(),
                mode.to_string(),
                rect.to_string(),
                layers_token(layers),
                beta.to_bits(),
            ),
        }
    }
}

fn record_cell_key(r: &EvalRecord) -> CellKey {
    match &r.attention {
        None => (r.imageset, r.category.clone(), "none".into(), "none".into(), "-".into(), 0u32),
        Some(a) => (
            r.imageset,
            r.category.clone(),
            a.mode.to_string(),
            a.rectification.to_string(),
            a.layers_token(),
            a.beta.to_bits(),
        ),
    }
}

/// The full sweep in lexicographic order: baselines for every imageset and
/// category first, then every attended (imageset, category, option, layer
/// set, beta) cell on the challenge imagesets.
pub fn enumerate_cells(config: &RunConfig) -> Result<Vec<Cell>> {
    let mut cells = Vec::new();
    let kinds = [ImagesetKind::Normal, ImagesetKind::Array, ImagesetKind::Merged];
    for kind in kinds {
        for category in &config.categories {
            cells.push(Cell { imageset: kind, category: category.clone(), condition: None });
        }
    }
    let options = config.parsed_options()?;
    let attended: Vec<ImagesetKind> = config
        .attention
        .attended_imagesets
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_>>()?;
    for kind in attended {
        for category in &config.categories {
            for (mode, rect) in &options {
                for layers in &config.attention.layer_sets {
                    for &beta in config.betas_for(*mode) {
                        cells.push(Cell {
                            imageset: kind,
                            category: category.clone(),
                            condition: Some((*mode, *rect, layers.clone(), beta)),
                        });
                    }
                }
            }
        }
    }
    Ok(cells)
}

struct SweepInputs {
    spec: NetworkSpec,
    weights: Weights,
    patterns: FeaturePatternSet,
    /// (id -> pixels) for composites; normal test images resolve through the pool.
    images: BTreeMap<String, Tensor>,
    /// (kind, category) -> id -> target present.
    test_sets: BTreeMap<(ImagesetKind, String), BTreeMap<String, bool>>,
    /// Unmodulated features per imageset kind, covering that kind's test ids.
    baseline_features: BTreeMap<ImagesetKind, FeatureSet>,
    classifiers: BTreeMap<String, Vec<BinaryClassifier>>,
    meta: Vec<(String, String)>,
    merged_outputs: Vec<(Vec<f32>, (String, String))>,
}

fn balanced_sample(
    pos: &[String],
    neg: &[String],
    n_pos: usize,
    n_neg: usize,
    seed: u64,
    what: &str,
) -> Result<BTreeMap<String, bool>> {
    use rand::seq::index::sample as index_sample;
    use rand::SeedableRng;
    if pos.len() < n_pos || neg.len() < n_neg {
        return Err(Error::InsufficientData {
            detail: format!(
                "{what}: need {n_pos} positives and {n_neg} negatives, have {} and {}",
                pos.len(),
                neg.len()
            ),
        });
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for i in index_sample(&mut rng, pos.len(), n_pos) {
        out.insert(pos[i].clone(), true);
    }
    for i in index_sample(&mut rng, neg.len(), n_neg) {
        out.insert(neg[i].clone(), false);
    }
    Ok(out)
}

fn features_of(
    spec: &NetworkSpec,
    weights: &Weights,
    items: &[(String, &Tensor)],
    attention: Option<&AttentionContext<'_>>,
) -> Result<FeatureSet> {
    let rows: Vec<(String, Vec<f32>)> = items
        .par_iter()
        .map(|(id, pixels)| {
            let trace = forward(spec, weights, pixels, attention)?;
            Ok((id.clone(), trace.features.data().to_vec()))
        })
        .collect::<Result<_>>()?;
    let dim = rows.first().map(|(_, v)| v.len()).unwrap_or(0);
    let mut set = FeatureSet::new(dim);
    for (id, features) in rows {
        set.insert(id, features)?;
    }
    Ok(set)
}

fn prepare_sweep(config: &RunConfig, paths: &OutPaths, control: bool) -> Result<SweepInputs> {
    let (spec, weights, weights_hash) = load_backbone(config, paths)?;
    let patterns_path = paths.patterns();
    let mut patterns = crate::attention::load_patterns(&patterns_path)?;
    match patterns.network_hash() {
        Some(h) if h == weights_hash => {}
        Some(_) => {
            return Err(Error::StaleArtifact {
                detail: "weights changed since patterns were extracted; re-run extract-patterns".into(),
            })
        }
        None => {
            return Err(Error::StaleArtifact {
                detail: "pattern file carries no network hash; re-run extract-patterns".into(),
            })
        }
    }
    let patterns_hash = sha256_file(&patterns_path)?;
    if control {
        patterns = perturb_patterns(&patterns, &Perturbation::Shuffle, config.control.seed);
    }

    let pool = build_pool(config)?;
    let splits = split_pool(config, &pool)?;
    let hash = pool_hash(&pool);

    // Composites, validated against their manifests.
    let mut images: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut manifest_entries = BTreeMap::new();
    for (kind, manifest_path) in
        [(ImagesetKind::Array, paths.array_manifest()), (ImagesetKind::Merged, paths.merged_manifest())]
    {
        let (header, entries) = read_manifest(&manifest_path)?;
        match header.iter().find(|(k, _)| k == "pool_hash") {
            Some((_, h)) if *h == hash => {}
            _ => {
                return Err(Error::StaleArtifact {
                    detail: format!(
                        "{} was generated from a different pool; re-run make-imagesets",
                        manifest_path.display()
                    ),
                })
            }
        }
        for entry in &entries {
            let pixels = image_io::load_tensor(&paths.image_file(&entry.id))?;
            images.insert(entry.id.clone(), pixels);
        }
        manifest_entries.insert(kind, entries);
    }
    let imagesets_hash = {
        let mut bytes = std::fs::read(paths.array_manifest())
            .map_err(|e| Error::io(paths.array_manifest().display().to_string(), e))?;
        bytes.extend(
            std::fs::read(paths.merged_manifest())
                .map_err(|e| Error::io(paths.merged_manifest().display().to_string(), e))?,
        );
        sha256_hex(&bytes)
    };

    // Balanced test subsets per (imageset kind, category).
    let mut test_sets = BTreeMap::new();
    for category in &config.categories {
        let pos: Vec<String> = splits
            .test
            .iter()
            .filter(|&&i| &pool[i].category == category)
            .map(|&i| pool[i].id.clone())
            .collect();
        let neg: Vec<String> = splits
            .test
            .iter()
            .filter(|&&i| &pool[i].category != category)
            .map(|&i| pool[i].id.clone())
            .collect();
        // Normal test sets use the whole held-out split, balanced: every
        // positive plus an equal count of sampled negatives.
        let n = pos.len();
        let labels = balanced_sample(
            &pos,
            &neg,
            n,
            n.min(neg.len()),
            derive_seed(config.master_seed, &format!("test:normal:{category}")),
            &format!("normal test set for '{category}'"),
        )?;
        test_sets.insert((ImagesetKind::Normal, category.clone()), labels);

        for (kind, tag) in [(ImagesetKind::Array, "array"), (ImagesetKind::Merged, "merged")] {
            let entries = &manifest_entries[&kind];
            let pos: Vec<String> = entries
                .iter()
                .filter(|e| e.categories.iter().any(|c| c == category))
                .map(|e| e.id.clone())
                .collect();
            let neg: Vec<String> = entries
                .iter()
                .filter(|e| !e.categories.iter().any(|c| c == category))
                .map(|e| e.id.clone())
                .collect();
            let labels = balanced_sample(
                &pos,
                &neg,
                config.imagesets.test_pos,
                config.imagesets.test_neg,
                derive_seed(config.master_seed, &format!("test:{tag}:{category}")),
                &format!("{tag} test set for '{category}'"),
            )?;
            test_sets.insert((kind, category.clone()), labels);
        }
    }

    // Unmodulated features: train split, and each kind's test ids.
    let train_items: Vec<(String, &Tensor)> =
        splits.train.iter().map(|&i| (pool[i].id.clone(), &pool[i].pixels)).collect();
    let train_features = features_of(&spec, &weights, &train_items, None)?;

    let mut baseline_features = BTreeMap::new();
    for kind in [ImagesetKind::Normal, ImagesetKind::Array, ImagesetKind::Merged] {
        let mut ids: BTreeSet<String> = BTreeSet::new();
        for ((k, _), labels) in &test_sets {
            if *k == kind {
                ids.extend(labels.keys().cloned());
            }
        }
        let items: Vec<(String, &Tensor)> = ids
            .iter()
            .map(|id| -> Result<(String, &Tensor)> {
                let pixels = match kind {
                    ImagesetKind::Normal => {
                        &pool[pool.binary_search_by(|r| r.id.as_str().cmp(id)).map_err(|_| {
                            Error::InsufficientData { detail: format!("pool image '{id}' missing") }
                        })?]
                            .pixels
                    }
                    _ => images.get(id).ok_or_else(|| Error::InsufficientData {
                        detail: format!("composite '{id}' missing from imageset directory"),
                    })?,
                };
                Ok((id.clone(), pixels))
            })
            .collect::<Result<_>>()?;
        baseline_features.insert(kind, features_of(&spec, &weights, &items, None)?);
    }

    // Detector folds, one plan and one classifier set per category; the
    // classifiers never see attention or composites.
    let mut classifiers = BTreeMap::new();
    for category in &config.categories {
        let pos: Vec<String> = splits
            .train
            .iter()
            .filter(|&&i| &pool[i].category == category)
            .map(|&i| pool[i].id.clone())
            .collect();
        let neg: Vec<String> = splits
            .train
            .iter()
            .filter(|&&i| &pool[i].category != category)
            .map(|&i| pool[i].id.clone())
            .collect();
        let plan = FoldPlan::sample(
            &pos,
            &neg,
            config.folds.train_pos,
            config.folds.train_neg,
            config.folds.count,
            derive_seed(config.master_seed, &format!("folds:{category}")),
        )?;
        classifiers.insert(
            category.clone(),
            train_fold_classifiers(&plan, category, &train_features, config.classifier.reg)?,
        );
    }

    // Softmax outputs on every merged composite for the top-k report.
    let merged_outputs: Vec<(Vec<f32>, (String, String))> = manifest_entries[&ImagesetKind::Merged]
        .par_iter()
        .map(|entry| {
            let trace = forward(&spec, &weights, &images[&entry.id], None)?;
            Ok((
                trace.softmax.data().to_vec(),
                (entry.categories[0].clone(), entry.categories[1].clone()),
            ))
        })
        .collect::<Result<_>>()?;

    let mut meta = vec![
        ("weights_hash".to_string(), weights_hash),
        ("patterns_hash".to_string(), patterns_hash),
        ("imagesets_hash".to_string(), imagesets_hash),
        ("master_seed".to_string(), config.master_seed.to_string()),
    ];
    if control {
        meta.push(("control".to_string(), format!("shuffle:{}", config.control.seed)));
    }

    Ok(SweepInputs {
        spec,
        weights,
        patterns,
        images,
        test_sets,
        baseline_features,
        classifiers,
        meta,
        merged_outputs,
    })
}

fn compute_cell(inputs: &SweepInputs, cell: &Cell) -> Result<Vec<EvalRecord>> {
    let labels = &inputs.test_sets[&(cell.imageset, cell.category.clone())];
    let classifiers = &inputs.classifiers[&cell.category];
    match &cell.condition {
        None => {
            let features = &inputs.baseline_features[&cell.imageset];
            let conditions = [TestCondition { attention: None, features }];
            score_folds(classifiers, &cell.category, cell.imageset, labels, &conditions)
        }
        Some((mode, rect, layers, beta)) => {
            let mut config =
                AttentionConfig::new(*mode, *rect, layers.iter().copied(), *beta)?;
            config.clamp_multiplicative = false;
            let ctx = AttentionContext {
                config: &config,
                patterns: &inputs.patterns,
                category: &cell.category,
            };
            let items: Vec<(String, &Tensor)> = labels
                .keys()
                .map(|id| -> Result<(String, &Tensor)> {
                    let pixels = inputs.images.get(id).ok_or_else(|| Error::InsufficientData {
                        detail: format!("composite '{id}' missing from imageset directory"),
                    })?;
                    Ok((id.clone(), pixels))
                })
                .collect::<Result<_>>()?;
            // Sequential forwards within a cell; parallelism lives at the
            // cell level.
            let mut features = FeatureSet::new(0);
            for (pos, (id, pixels)) in items.iter().enumerate() {
                let trace = forward(&inputs.spec, &inputs.weights, pixels, Some(&ctx))?;
                if pos == 0 {
                    features = FeatureSet::new(trace.features.len());
                }
                features.insert(id.clone(), trace.features.data().to_vec())?;
            }
            let desc = AttentionDesc::from_config(&config);
            let conditions = [TestCondition { attention: Some(desc), features: &features }];
            score_folds(classifiers, &cell.category, cell.imageset, labels, &conditions)
        }
    }
}

fn sweep_to_file(
    config: &RunConfig,
    inputs: &SweepInputs,
    results_path: &std::path::Path,
    workers: Option<usize>,
) -> Result<(usize, usize)> {
    let cells = enumerate_cells(config)?;
    let mut done: BTreeSet<CellKey> = BTreeSet::new();
    if results_path.exists() {
        let (meta, records) = evaluate::read_records_csv(results_path)?;
        for (k, v) in &inputs.meta {
            match meta.iter().find(|(mk, _)| mk == k) {
                Some((_, mv)) if mv == v => {}
                _ => {
                    return Err(Error::StaleArtifact {
                        detail: format!(
                            "{} was produced with different inputs ({k} changed); move it aside or regenerate",
                            results_path.display()
                        ),
                    })
                }
            }
        }
        let mut fold_counts: BTreeMap<CellKey, usize> = BTreeMap::new();
        for r in &records {
            *fold_counts.entry(record_cell_key(r)).or_insert(0) += 1;
        }
        for (key, count) in fold_counts {
            if count != config.folds.count {
                return Err(Error::StaleArtifact {
                    detail: format!(
                        "{} holds a partial cell ({count} of {} folds for {key:?}); it cannot be resumed",
                        results_path.display(),
                        config.folds.count
                    ),
                });
            }
            done.insert(key);
        }
    } else {
        evaluate::write_records_csv(results_path, &inputs.meta, &[])?;
    }

    let missing: Vec<&Cell> =
        cells.iter().filter(|c| !done.contains(&c.key())).collect();

    // Cells compute in parallel but flow through one writer that appends
    // them in enumeration order as soon as the prefix is complete: an
    // interrupted sweep leaves a resumable file of whole cells, and the
    // worker count never affects the bytes.
    let (tx, rx) = std::sync::mpsc::channel::<(usize, Result<Vec<EvalRecord>>)>();
    let writer_path = results_path.to_path_buf();
    let writer = std::thread::spawn(move || -> Result<usize> {
        let mut pending: BTreeMap<usize, Vec<EvalRecord>> = BTreeMap::new();
        let mut next = 0usize;
        let mut written = 0usize;
        for (seq, result) in rx {
            pending.insert(seq, result?);
            while let Some(records) = pending.remove(&next) {
                evaluate::append_records_csv(&writer_path, &records)?;
                written += records.len();
                next += 1;
            }
        }
        Ok(written)
    });
    run_in_pool(workers, || {
        missing.par_iter().enumerate().for_each_with(tx, |tx, (seq, cell)| {
            let result = compute_cell(inputs, cell);
            // A closed channel means the writer already failed; workers
            // just drain.
            let _ = tx.send((seq, result));
        });
    });
    let written = writer.join().expect("writer thread")?;
    Ok((written, done.len()))
}

#[derive(Debug)]
pub struct EvaluateSummary {
    pub results_path: PathBuf,
    pub records_written: usize,
    pub cells_skipped: usize,
    pub control_records_written: usize,
    pub topk_path: PathBuf,
}

pub fn cmd_evaluate(
    config: &RunConfig,
    paths: &OutPaths,
    workers: Option<usize>,
    _resume: bool, // resume is automatic; the flag is accepted for clarity
) -> Result<EvaluateSummary> {
    ensure_dir(&paths.root)?;
    let inputs = prepare_sweep(config, paths, false)?;
    let (written, skipped) = sweep_to_file(config, &inputs, &paths.results(), workers)?;

    // Top-k error on merged images, for every k up to the category count.
    let mut topk_text = String::from("k,error\n");
    for k in 1..=config.categories.len() {
        let err = topk_merged_error(&inputs.merged_outputs, &config.categories, k)?;
        topk_text.push_str(&format!("{k},{err}\n"));
    }
    std::fs::write(paths.topk(), topk_text)
        .map_err(|e| Error::io(paths.topk().display().to_string(), e))?;

    let mut control_written = 0;
    if config.control.shuffle {
        let control_inputs = prepare_sweep(config, paths, true)?;
        let (w, _) = sweep_to_file(config, &control_inputs, &paths.control_results(), workers)?;
        control_written = w;
    }

    Ok(EvaluateSummary {
        results_path: paths.results(),
        records_written: written,
        cells_skipped: skipped,
        control_records_written: control_written,
        topk_path: paths.topk(),
    })
}

// ---------------------------------------------------------------------------
// analyze

#[derive(Debug)]
pub struct AnalyzeSummary {
    pub files: Vec<PathBuf>,
}

fn write_csv(path: &PathBuf, text: String, files: &mut Vec<PathBuf>) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    files.push(path.clone());
    Ok(())
}

fn fmt_option(mode: Mode, rect: Rectification) -> String {
    format!("{mode}-{rect}")
}

pub fn cmd_analyze(_config: &RunConfig, paths: &OutPaths) -> Result<AnalyzeSummary> {
    let (_, records) = evaluate::read_records_csv(&paths.results())?;
    if records.is_empty() {
        return Err(Error::InsufficientData {
            detail: format!("no records in {}", paths.results().display()),
        });
    }
    ensure_dir(&paths.analysis_dir())?;
    let mut files = Vec::new();

    // Per-strength and best-strength delta tables.
    let deltas = accuracy_delta(&records)?;
    let mut text = String::from("category,imageset,mode,rectification,layers,beta,delta_points\n");
    for d in &deltas {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            d.category, d.imageset, d.mode, d.rectification, d.layers, d.beta, d.delta_points
        ));
    }
    write_csv(&paths.analysis_dir().join("deltas.csv"), text, &mut files)?;

    let best = best_beta_deltas(&deltas);
    let mut text = String::from("category,imageset,mode,rectification,layers,best_beta,delta_points\n");
    for b in &best {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            b.category, b.imageset, b.mode, b.rectification, b.layers, b.best_beta, b.delta_points
        ));
    }
    write_csv(&paths.analysis_dir().join("best_deltas.csv"), text, &mut files)?;

    // ROC points and rate trajectories per attended condition group.
    let mut groups: BTreeSet<(String, ImagesetKind, Mode, Rectification, String)> = BTreeSet::new();
    for r in &records {
        if let Some(a) = &r.attention {
            groups.insert((
                r.category.clone(),
                r.imageset,
                a.mode,
                a.rectification,
                a.layers_token(),
            ));
        }
    }
    let mut roc_text = String::from("category,imageset,mode,rectification,layers,beta,fpr,tpr\n");
    let mut traj_text =
        String::from("category,imageset,mode,rectification,layers,beta,delta_fpr,delta_fnr\n");
    for (category, imageset, mode, rect, layers) in &groups {
        let layer_ids = evaluate::parse_layers_token(layers)?;
        if let Ok(points) = roc_by_strength(&records, category, *imageset, *mode, *rect, &layer_ids) {
            for p in points {
                roc_text.push_str(&format!(
                    "{category},{imageset},{mode},{rect},{layers},{},{},{}\n",
                    p.beta, p.fpr, p.tpr
                ));
            }
        }
        let points = rate_trajectory(&records, category, *imageset, *mode, *rect, &layer_ids)?;
        for p in points {
            traj_text.push_str(&format!(
                "{category},{imageset},{mode},{rect},{layers},{},{},{}\n",
                p.beta, p.delta_fpr, p.delta_fnr
            ));
        }
    }
    write_csv(&paths.analysis_dir().join("roc_points.csv"), roc_text, &mut files)?;
    write_csv(&paths.analysis_dir().join("rate_trajectories.csv"), traj_text, &mut files)?;

    // Win histograms per imageset kind and comparison axis.
    let axes: Vec<ComparisonAxis> = vec![
        ComparisonAxis::Layers,
        ComparisonAxis::Options,
        ComparisonAxis::ModeWithinRectification(Rectification::Bidirectional),
        ComparisonAxis::ModeWithinRectification(Rectification::Positive),
        ComparisonAxis::RectificationWithinMode(Mode::Additive),
        ComparisonAxis::RectificationWithinMode(Mode::Multiplicative),
    ];
    for kind in [ImagesetKind::Array, ImagesetKind::Merged] {
        let subset: Vec<EvalRecord> =
            records.iter().filter(|r| r.imageset == kind).cloned().collect();
        if !subset.iter().any(|r| r.attention.is_some()) {
            continue;
        }
        for axis in &axes {
            let result = match win_histograms(&subset, axis) {
                Ok(r) => r,
                // A reduced sweep may not populate this comparison.
                Err(Error::InsufficientData { .. }) => continue,
                Err(e) => return Err(e),
            };
            let mut text = String::from("option,wins,significant_wins,p_value\n");
            for option in &result.contenders {
                let mut won_ps: Vec<f64> = result
                    .cells
                    .iter()
                    .filter(|c| &c.winner == option)
                    .map(|c| c.p_value)
                    .collect();
                won_ps.sort_by(f64::total_cmp);
                let median = match won_ps.len() {
                    0 => String::new(),
                    n if n % 2 == 1 => won_ps[n / 2].to_string(),
                    n => ((won_ps[n / 2 - 1] + won_ps[n / 2]) / 2.0).to_string(),
                };
                text.push_str(&format!(
                    "{option},{},{},{median}\n",
                    result.wins[option], result.significant_wins[option]
                ));
            }
            let stem = format!("wins_{kind}_{}", result.axis);
            write_csv(&paths.analysis_dir().join(format!("{stem}.csv")), text, &mut files)?;

            let mut cells_text = String::from("category,context,winner,runner_up,p_value\n");
            for c in &result.cells {
                cells_text.push_str(&format!(
                    "{},{},{},{},{}\n",
                    c.category, c.context, c.winner, c.runner_up, c.p_value
                ));
            }
            write_csv(
                &paths.analysis_dir().join(format!("{stem}_cells.csv")),
                cells_text,
                &mut files,
            )?;
        }
    }

    // Perturbation control: best-strength deltas with true vs shuffled patterns.
    if paths.control_results().exists() {
        let (_, control_records) = evaluate::read_records_csv(&paths.control_results())?;
        let control_best = best_beta_deltas(&accuracy_delta(&control_records)?);
        let indexed: BTreeMap<(String, ImagesetKind, Mode, Rectification, String), f64> = control_best
            .into_iter()
            .map(|b| ((b.category, b.imageset, b.mode, b.rectification, b.layers), b.delta_points))
            .collect();
        let mut text = String::from(
            "category,imageset,mode,rectification,layers,true_delta,control_delta\n",
        );
        for b in &best {
            let key =
                (b.category.clone(), b.imageset, b.mode, b.rectification, b.layers.clone());
            if let Some(control_delta) = indexed.get(&key) {
                text.push_str(&format!(
                    "{},{},{},{},{},{},{control_delta}\n",
                    b.category,
                    b.imageset,
                    fmt_option(b.mode, b.rectification).split('-').next().unwrap(),
                    b.rectification,
                    b.layers,
                    b.delta_points
                ));
            }
        }
        write_csv(&paths.analysis_dir().join("perturbation_control.csv"), text, &mut files)?;
    }

    Ok(AnalyzeSummary { files })
}
