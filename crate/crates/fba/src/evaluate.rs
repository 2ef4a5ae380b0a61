//! Analyses over detection records: accuracy deltas by layer/option/strength,
//! ROC points and confusion-rate trajectories versus strength, top-k error on
//! merged images, option/layer win histograms with paired significance tests,
//! and the random-perturbation control for feature patterns.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, FeaturePatternSet, Mode, Rectification};
use crate::error::{Error, Result};
use crate::stats::wilcoxon_signed_rank;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ImagesetKind {
    Normal,
    Array,
    Merged,
}

impl fmt::Display for ImagesetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ImagesetKind::Normal => "normal",
            ImagesetKind::Array => "array",
            ImagesetKind::Merged => "merged",
        })
    }
}

impl std::str::FromStr for ImagesetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(ImagesetKind::Normal),
            "array" => Ok(ImagesetKind::Array),
            "merged" => Ok(ImagesetKind::Merged),
            _ => Err(Error::InvalidArgument {
                op: "ImagesetKind::from_str",
                detail: format!("unknown imageset '{s}'"),
            }),
        }
    }
}

/// The attention condition a record was measured under, as it appears in the
/// results table.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDesc {
    pub mode: Mode,
    pub rectification: Rectification,
    pub layers: Vec<u32>,
    pub beta: f32,
}

impl AttentionDesc {
    pub fn from_config(config: &AttentionConfig) -> Self {
        AttentionDesc {
            mode: config.mode,
            rectification: config.rectification,
            layers: config.layers.iter().copied().collect(),
            beta: config.beta,
        }
    }

    /// "additive-bidirectional", "multiplicative-positive", ...
    pub fn option_name(&self) -> String {
        format!("{}-{}", self.mode, self.rectification)
    }

    pub fn layers_token(&self) -> String {
        layers_token(&self.layers)
    }
}

pub fn layers_token(layers: &[u32]) -> String {
    let parts: Vec<String> = layers.iter().map(|l| l.to_string()).collect();
    parts.join("+")
}

pub fn parse_layers_token(token: &str) -> Result<Vec<u32>> {
    token
        .split('+')
        .map(|p| {
            p.parse::<u32>().map_err(|_| Error::InvalidArgument {
                op: "parse_layers_token",
                detail: format!("bad layer token '{token}'"),
            })
        })
        .collect()
}

/// One fold's confusion counts for one detection condition.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub category: String,
    pub imageset: ImagesetKind,
    pub attention: Option<AttentionDesc>,
    pub fold: u32,
    pub true_pos: u32,
    pub false_pos: u32,
    pub true_neg: u32,
    pub false_neg: u32,
    pub accuracy: f64,
}

impl EvalRecord {
    pub fn new(
        category: String,
        imageset: ImagesetKind,
        attention: Option<AttentionDesc>,
        fold: u32,
        true_pos: u32,
        false_pos: u32,
        true_neg: u32,
        false_neg: u32,
    ) -> Self {
        let total = true_pos + false_pos + true_neg + false_neg;
        let accuracy = (true_pos + true_neg) as f64 / total as f64;
        EvalRecord { category, imageset, attention, fold, true_pos, false_pos, true_neg, false_neg, accuracy }
    }

    pub fn total(&self) -> u32 {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    pub fn tpr(&self) -> f64 {
        let p = self.true_pos + self.false_neg;
        if p == 0 {
            0.0
        } else {
            self.true_pos as f64 / p as f64
        }
    }

    pub fn fpr(&self) -> f64 {
        let n = self.false_pos + self.true_neg;
        if n == 0 {
            0.0
        } else {
            self.false_pos as f64 / n as f64
        }
    }

    pub fn fnr(&self) -> f64 {
        let p = self.true_pos + self.false_neg;
        if p == 0 {
            0.0
        } else {
            self.false_neg as f64 / p as f64
        }
    }
}

pub const RESULTS_COLUMNS: &str = "category,imageset,mode,rectification,layers,beta,fold,tp,fp,tn,fn,accuracy";

fn record_to_row(r: &EvalRecord) -> String {
    let (mode, rect, layers, beta) = match &r.attention {
        Some(a) => (a.mode.to_string(), a.rectification.to_string(), a.layers_token(), a.beta),
        None => ("none".to_string(), "none".to_string(), "-".to_string(), 0.0),
    };
    format!(
        "{},{},{mode},{rect},{layers},{beta},{},{},{},{},{},{}",
        r.category, r.imageset, r.fold, r.true_pos, r.false_pos, r.true_neg, r.false_neg, r.accuracy
    )
}

fn record_from_row(line: &str, path: &str) -> Result<EvalRecord> {
    let inconsistent = |detail: String| Error::FormatInconsistency { path: path.to_string(), detail };
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 12 {
        return Err(inconsistent(format!("row has {} fields, expected 12", fields.len())));
    }
    let category = fields[0].to_string();
    let imageset: ImagesetKind = fields[1].parse()?;
    let attention = if fields[2] == "none" {
        None
    } else {
        Some(AttentionDesc {
            mode: fields[2].parse()?,
            rectification: fields[3].parse()?,
            layers: parse_layers_token(fields[4])?,
            beta: fields[5]
                .parse()
                .map_err(|_| inconsistent(format!("bad beta '{}'", fields[5])))?,
        })
    };
    let parse_u32 = |s: &str| -> Result<u32> {
        s.parse().map_err(|_| inconsistent(format!("bad count '{s}'")))
    };
    let record = EvalRecord {
        category,
        imageset,
        attention,
        fold: parse_u32(fields[6])?,
        true_pos: parse_u32(fields[7])?,
        false_pos: parse_u32(fields[8])?,
        true_neg: parse_u32(fields[9])?,
        false_neg: parse_u32(fields[10])?,
        accuracy: fields[11]
            .parse()
            .map_err(|_| inconsistent(format!("bad accuracy '{}'", fields[11])))?,
    };
    let recomputed = (record.true_pos + record.true_neg) as f64 / record.total() as f64;
    if (record.accuracy - recomputed).abs() > 1e-9 {
        return Err(inconsistent(format!(
            "accuracy {} disagrees with counts ({recomputed})",
            record.accuracy
        )));
    }
    Ok(record)
}

/// Writes a fresh results file: `# key=value` provenance lines, the column
/// header, then one row per record.
pub fn write_records_csv(
    path: &Path,
    meta: &[(String, String)],
    records: &[EvalRecord],
) -> Result<()> {
    let mut out = String::new();
    for (k, v) in meta {
        out.push_str(&format!("# {k}={v}\n"));
    }
    out.push_str(RESULTS_COLUMNS);
    out.push('\n');
    for r in records {
        out.push_str(&record_to_row(r));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Appends rows to an existing results file.
pub fn append_records_csv(path: &Path, records: &[EvalRecord]) -> Result<()> {
    use std::io::Write;
    let mut out = String::new();
    for r in records {
        out.push_str(&record_to_row(r));
        out.push('\n');
    }
    let mut file = std::fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_records_csv(path: &Path) -> Result<(Vec<(String, String)>, Vec<EvalRecord>)> {
    let pstr = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(pstr.clone(), e))?;
    let mut meta = Vec::new();
    let mut records = Vec::new();
    let mut saw_header = false;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.trim().split_once('=') {
                meta.push((k.to_string(), v.to_string()));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if !saw_header {
            if line != RESULTS_COLUMNS {
                return Err(Error::FormatInconsistency {
                    path: pstr,
                    detail: format!("unexpected column header '{line}'"),
                });
            }
            saw_header = true;
            continue;
        }
        records.push(record_from_row(line, &pstr)?);
    }
    if !saw_header {
        return Err(Error::FormatInconsistency { path: pstr, detail: "missing column header".into() });
    }
    Ok((meta, records))
}

/// Mean-over-folds performance delta (percentage points) for one attended
/// condition against its unattended baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaRow {
    pub category: String,
    pub imageset: ImagesetKind,
    pub mode: Mode,
    pub rectification: Rectification,
    pub layers: String,
    pub beta: f32,
    pub delta_points: f64,
}

type ConditionKey = (String, ImagesetKind, Mode, Rectification, String, u32);

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn baseline_means(records: &[EvalRecord]) -> BTreeMap<(String, ImagesetKind), f64> {
    let mut acc: BTreeMap<(String, ImagesetKind), Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.attention.is_none()) {
        acc.entry((r.category.clone(), r.imageset)).or_default().push(r.accuracy);
    }
    acc.into_iter().map(|(k, v)| (k, mean(&v))).collect()
}

/// Performance with attention minus performance without, in percentage
/// points, per (category, imageset, option, layer set) at each strength.
pub fn accuracy_delta(records: &[EvalRecord]) -> Result<Vec<DeltaRow>> {
    let baselines = baseline_means(records);
    let mut groups: BTreeMap<ConditionKey, Vec<f64>> = BTreeMap::new();
    for r in records.iter() {
        if let Some(a) = &r.attention {
            let key = (
                r.category.clone(),
                r.imageset,
                a.mode,
                a.rectification,
                a.layers_token(),
                a.beta.to_bits(),
            );
            groups.entry(key).or_default().push(r.accuracy);
        }
    }
    let mut rows = Vec::with_capacity(groups.len());
    for ((category, imageset, mode, rectification, layers, beta_bits), accs) in groups {
        let base = baselines.get(&(category.clone(), imageset)).ok_or_else(|| {
            Error::InsufficientData {
                detail: format!("no baseline records for category '{category}' on {imageset} images"),
            }
        })?;
        rows.push(DeltaRow {
            category,
            imageset,
            mode,
            rectification,
            layers,
            beta: f32::from_bits(beta_bits),
            delta_points: (mean(&accs) - base) * 100.0,
        });
    }
    Ok(rows)
}

/// The best strength per condition group: maximum delta, ties broken toward
/// the smaller (weaker) beta.
#[derive(Debug, Clone, PartialEq)]
pub struct BestDeltaRow {
    pub category: String,
    pub imageset: ImagesetKind,
    pub mode: Mode,
    pub rectification: Rectification,
    pub layers: String,
    pub best_beta: f32,
    pub delta_points: f64,
}

pub fn best_beta_deltas(deltas: &[DeltaRow]) -> Vec<BestDeltaRow> {
    let mut best: BTreeMap<(String, ImagesetKind, Mode, Rectification, String), (f32, f64)> =
        BTreeMap::new();
    for d in deltas {
        let key =
            (d.category.clone(), d.imageset, d.mode, d.rectification, d.layers.clone());
        match best.get_mut(&key) {
            None => {
                best.insert(key, (d.beta, d.delta_points));
            }
            Some((beta, delta)) => {
                if d.delta_points > *delta || (d.delta_points == *delta && d.beta < *beta) {
                    *beta = d.beta;
                    *delta = d.delta_points;
                }
            }
        }
    }
    best.into_iter()
        .map(|((category, imageset, mode, rectification, layers), (best_beta, delta_points))| {
            BestDeltaRow { category, imageset, mode, rectification, layers, best_beta, delta_points }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub beta: f32,
    pub fpr: f64,
    pub tpr: f64,
}

fn condition_records<'a>(
    records: &'a [EvalRecord],
    category: &str,
    imageset: ImagesetKind,
    mode: Mode,
    rectification: Rectification,
    layers: &[u32],
) -> Vec<&'a EvalRecord> {
    records
        .iter()
        .filter(|r| {
            r.category == category
                && r.imageset == imageset
                && matches!(&r.attention, Some(a)
                    if a.mode == mode && a.rectification == rectification && a.layers == layers)
        })
        .collect()
}

/// Fold-averaged (FPR, TPR) per strength, ordered by strength.
pub fn roc_by_strength(
    records: &[EvalRecord],
    category: &str,
    imageset: ImagesetKind,
    mode: Mode,
    rectification: Rectification,
    layers: &[u32],
) -> Result<Vec<RocPoint>> {
    let selected = condition_records(records, category, imageset, mode, rectification, layers);
    let mut by_beta: BTreeMap<u32, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in selected {
        let beta = r.attention.as_ref().unwrap().beta;
        let entry = by_beta.entry(beta.to_bits()).or_default();
        entry.0.push(r.fpr());
        entry.1.push(r.tpr());
    }
    if by_beta.len() < 2 {
        return Err(Error::InsufficientData {
            detail: format!("ROC by strength needs >= 2 beta values, found {}", by_beta.len()),
        });
    }
    Ok(by_beta
        .into_iter()
        .map(|(bits, (fprs, tprs))| RocPoint {
            beta: f32::from_bits(bits),
            fpr: mean(&fprs),
            tpr: mean(&tprs),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub beta: f32,
    pub delta_fpr: f64,
    pub delta_fnr: f64,
}

/// Change from baseline in false-positive and false-negative rates as
/// strength increases.
pub fn rate_trajectory(
    records: &[EvalRecord],
    category: &str,
    imageset: ImagesetKind,
    mode: Mode,
    rectification: Rectification,
    layers: &[u32],
) -> Result<Vec<TrajectoryPoint>> {
    let base: Vec<&EvalRecord> = records
        .iter()
        .filter(|r| r.category == category && r.imageset == imageset && r.attention.is_none())
        .collect();
    if base.is_empty() {
        return Err(Error::InsufficientData {
            detail: format!("no baseline records for category '{category}' on {imageset} images"),
        });
    }
    let base_fpr = mean(&base.iter().map(|r| r.fpr()).collect::<Vec<_>>());
    let base_fnr = mean(&base.iter().map(|r| r.fnr()).collect::<Vec<_>>());

    let selected = condition_records(records, category, imageset, mode, rectification, layers);
    let mut by_beta: BTreeMap<u32, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in selected {
        let beta = r.attention.as_ref().unwrap().beta;
        let entry = by_beta.entry(beta.to_bits()).or_default();
        entry.0.push(r.fpr());
        entry.1.push(r.fnr());
    }
    if by_beta.is_empty() {
        return Err(Error::InsufficientData { detail: "no attended records for trajectory".into() });
    }
    Ok(by_beta
        .into_iter()
        .map(|(bits, (fprs, fnrs))| TrajectoryPoint {
            beta: f32::from_bits(bits),
            delta_fpr: mean(&fprs) - base_fpr,
            delta_fnr: mean(&fnrs) - base_fnr,
        })
        .collect())
}

/// Top-k error over merged images: an image counts correct when either of its
/// two source categories lands in the k highest softmax entries.
pub fn topk_merged_error(
    outputs: &[(Vec<f32>, (String, String))],
    categories: &[String],
    k: usize,
) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::InsufficientData { detail: "no softmax outputs supplied".into() });
    }
    if k == 0 {
        return Err(Error::InvalidArgument { op: "topk_merged_error", detail: "k must be >= 1".into() });
    }
    let index: BTreeMap<&str, usize> =
        categories.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut errors = 0usize;
    for (softmax, (cat_a, cat_b)) in outputs {
        if softmax.len() != categories.len() {
            return Err(Error::ShapeMismatch {
                op: "topk_merged_error",
                detail: format!("softmax has {} entries for {} categories", softmax.len(), categories.len()),
            });
        }
        let ia = *index
            .get(cat_a.as_str())
            .ok_or_else(|| Error::UnknownCategory { category: cat_a.clone() })?;
        let ib = *index
            .get(cat_b.as_str())
            .ok_or_else(|| Error::UnknownCategory { category: cat_b.clone() })?;
        let mut order: Vec<usize> = (0..softmax.len()).collect();
        order.sort_by(|&x, &y| softmax[y].partial_cmp(&softmax[x]).unwrap().then(x.cmp(&y)));
        let top = &order[..k.min(order.len())];
        if !top.contains(&ia) && !top.contains(&ib) {
            errors += 1;
        }
    }
    Ok(errors as f64 / outputs.len() as f64)
}

/// What one win-histogram run compares.
#[derive(Debug, Clone, PartialEq)]
pub enum ComparisonAxis {
    /// Best single layer per (category, option).
    Layers,
    /// Best of the four mode/rectification options per (category, layer set).
    Options,
    /// Multiplicative vs additive at fixed rectification.
    ModeWithinRectification(Rectification),
    /// Bidirectional vs positive at fixed mode.
    RectificationWithinMode(Mode),
}

impl fmt::Display for ComparisonAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ComparisonAxis::Layers => write!(f, "layers"),
            ComparisonAxis::Options => write!(f, "options"),
            ComparisonAxis::ModeWithinRectification(r) => write!(f, "mode-within-{r}"),
            ComparisonAxis::RectificationWithinMode(m) => write!(f, "rectification-within-{m}"),
        }
    }
}

/// One directly compared cell and its outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub category: String,
    /// The held-fixed coordinate: layer set for option comparisons, option
    /// name for layer comparisons.
    pub context: String,
    pub winner: String,
    pub runner_up: String,
    pub p_value: f64,
}

#[derive(Debug, Clone)]
pub struct ComparisonResult {
    pub axis: String,
    pub contenders: Vec<String>,
    pub wins: BTreeMap<String, u32>,
    pub significant_wins: BTreeMap<String, u32>,
    pub test: String,
    pub alpha: f64,
    pub cells: Vec<CellOutcome>,
}

pub const SIGNIFICANCE_ALPHA: f64 = 0.05;

/// Best-beta fold accuracy vector per (category, option, layers).
struct BestCondition {
    folds: BTreeMap<u32, f64>,
}

fn best_conditions(
    records: &[EvalRecord],
) -> Result<BTreeMap<(String, String, String), BestCondition>> {
    // (category, option, layers) -> beta -> fold -> accuracy
    let mut table: BTreeMap<(String, String, String), BTreeMap<u32, BTreeMap<u32, f64>>> =
        BTreeMap::new();
    for r in records {
        let Some(a) = &r.attention else { continue };
        let key = (r.category.clone(), a.option_name(), a.layers_token());
        table
            .entry(key)
            .or_default()
            .entry(a.beta.to_bits())
            .or_default()
            .insert(r.fold, r.accuracy);
    }
    let mut out = BTreeMap::new();
    for (key, by_beta) in table {
        let mut best: Option<(u32, f64, BTreeMap<u32, f64>)> = None;
        for (beta_bits, folds) in by_beta {
            if folds.len() < 2 {
                return Err(Error::InsufficientData {
                    detail: format!(
                        "condition {key:?} beta {} has {} folds; significance needs >= 2",
                        f32::from_bits(beta_bits),
                        folds.len()
                    ),
                });
            }
            let m = mean(&folds.values().copied().collect::<Vec<_>>());
            let better = match &best {
                None => true,
                // Strictly better mean wins; equal means keep the smaller
                // beta, which was inserted first (BTreeMap order on bits
                // matches numeric order for non-negative floats).
                Some((_, best_mean, _)) => m > *best_mean,
            };
            if better {
                best = Some((beta_bits, m, folds));
            }
        }
        let (_, _, folds) = best.expect("at least one beta per condition");
        out.insert(key, BestCondition { folds });
    }
    Ok(out)
}

fn aligned_fold_vectors(a: &BestCondition, b: &BestCondition) -> Result<(Vec<f64>, Vec<f64>)> {
    let ka: BTreeSet<u32> = a.folds.keys().copied().collect();
    let kb: BTreeSet<u32> = b.folds.keys().copied().collect();
    if ka != kb {
        return Err(Error::InvalidArgument {
            op: "win_histograms",
            detail: format!("unbalanced fold sets: {ka:?} vs {kb:?}"),
        });
    }
    Ok((a.folds.values().copied().collect(), b.folds.values().copied().collect()))
}

/// Compares contenders within each cell by best-strength mean fold accuracy,
/// counting wins and Wilcoxon-significant wins (winner vs runner-up, paired
/// over folds, two-sided, alpha 0.05).
pub fn win_histograms(records: &[EvalRecord], axis: &ComparisonAxis) -> Result<ComparisonResult> {
    let kinds: BTreeSet<ImagesetKind> = records
        .iter()
        .filter(|r| r.attention.is_some())
        .map(|r| r.imageset)
        .collect();
    if kinds.is_empty() {
        return Err(Error::InsufficientData { detail: "no attended records to compare".into() });
    }
    if kinds.len() > 1 {
        return Err(Error::InvalidArgument {
            op: "win_histograms",
            detail: "records span multiple imageset kinds; filter to one first".into(),
        });
    }
    let best = best_conditions(records)?;

    // cell key -> contender label -> condition
    let mut cells: BTreeMap<(String, String), BTreeMap<String, &BestCondition>> = BTreeMap::new();
    for ((category, option, layers), cond) in &best {
        match axis {
            ComparisonAxis::Layers => {
                // Only single-layer applications compete.
                if !layers.contains('+') {
                    cells
                        .entry((category.clone(), option.clone()))
                        .or_default()
                        .insert(layers.clone(), cond);
                }
            }
            ComparisonAxis::Options => {
                cells
                    .entry((category.clone(), layers.clone()))
                    .or_default()
                    .insert(option.clone(), cond);
            }
            ComparisonAxis::ModeWithinRectification(rect) => {
                if option.ends_with(&format!("-{rect}")) {
                    cells
                        .entry((category.clone(), layers.clone()))
                        .or_default()
                        .insert(option.clone(), cond);
                }
            }
            ComparisonAxis::RectificationWithinMode(mode) => {
                if option.starts_with(&format!("{mode}-")) {
                    cells
                        .entry((category.clone(), layers.clone()))
                        .or_default()
                        .insert(option.clone(), cond);
                }
            }
        }
    }

    let mut contenders: BTreeSet<String> = BTreeSet::new();
    let mut wins: BTreeMap<String, u32> = BTreeMap::new();
    let mut significant: BTreeMap<String, u32> = BTreeMap::new();
    let mut outcomes = Vec::new();
    for ((category, context), conds) in &cells {
        if conds.len() < 2 {
            continue;
        }
        for label in conds.keys() {
            contenders.insert(label.clone());
        }
        // Rank by mean accuracy, deterministic tie-break on label.
        let mut ranked: Vec<(&String, f64)> = conds
            .iter()
            .map(|(label, c)| (label, mean(&c.folds.values().copied().collect::<Vec<_>>())))
            .collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(b.0)));
        let winner = ranked[0].0.clone();
        let runner_up = ranked[1].0.clone();
        let (wv, rv) = aligned_fold_vectors(conds[&winner], conds[&runner_up])?;
        let p = wilcoxon_signed_rank(&wv, &rv)?.p_value;
        *wins.entry(winner.clone()).or_insert(0) += 1;
        if p < SIGNIFICANCE_ALPHA {
            *significant.entry(winner.clone()).or_insert(0) += 1;
        }
        outcomes.push(CellOutcome {
            category: category.clone(),
            context: context.clone(),
            winner,
            runner_up,
            p_value: p,
        });
    }
    if outcomes.is_empty() {
        return Err(Error::InsufficientData {
            detail: format!("axis {axis} has no cell with >= 2 contenders"),
        });
    }
    for label in &contenders {
        wins.entry(label.clone()).or_insert(0);
        significant.entry(label.clone()).or_insert(0);
    }
    Ok(ComparisonResult {
        axis: axis.to_string(),
        contenders: contenders.into_iter().collect(),
        wins,
        significant_wins: significant,
        test: "wilcoxon-signed-rank".to_string(),
        alpha: SIGNIFICANCE_ALPHA,
        cells: outcomes,
    })
}

/// Pattern perturbation for the random-control experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Perturbation {
    /// Add seeded Gaussian noise of this scale elementwise.
    Gaussian { scale: f64 },
    /// Permute elements within each (layer, category) vector.
    Shuffle,
}

pub fn perturb_patterns(
    patterns: &FeaturePatternSet,
    perturbation: &Perturbation,
    seed: u64,
) -> FeaturePatternSet {
    match perturbation {
        Perturbation::Gaussian { scale } if *scale == 0.0 => patterns.clone(),
        Perturbation::Gaussian { scale } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            patterns.map_patterns(|_, _, v| {
                v.iter()
                    .map(|&x| x + (*scale * crate::util::standard_normal(&mut rng)) as f32)
                    .collect()
            })
        }
        Perturbation::Shuffle => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            patterns.map_patterns(|_, _, v| {
                let mut out = v.to_vec();
                for i in (1..out.len()).rev() {
                    let j = rng.random_range(0..=i);
                    out.swap(i, j);
                }
                out
            })
        }
    }
}
