//! Category feature patterns and modulation configurations.
//!
//! A feature pattern is, per ReLU layer and category, the z-scored deviation
//! of that category's mean spatially-averaged feature-map activity from the
//! grand mean over all training images. At runtime the pattern is turned into
//! one scalar per feature map: an additive pre-ReLU offset `beta * f`, or a
//! multiplicative slope `1 + beta * f` on the ReLU output. Stored patterns
//! are always bidirectional; positive rectification (clamping negatives to
//! zero) is applied at use time so one extraction serves both options.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::ForwardTrace;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Mode {
    Additive,
    Multiplicative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Rectification {
    Bidirectional,
    Positive,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Additive => "additive",
            Mode::Multiplicative => "multiplicative",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(Mode::Additive),
            "multiplicative" => Ok(Mode::Multiplicative),
            _ => Err(Error::InvalidArgument { op: "Mode::from_str", detail: format!("unknown mode '{s}'") }),
        }
    }
}

impl fmt::Display for Rectification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rectification::Bidirectional => "bidirectional",
            Rectification::Positive => "positive",
        })
    }
}

impl std::str::FromStr for Rectification {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bidirectional" => Ok(Rectification::Bidirectional),
            "positive" => Ok(Rectification::Positive),
            _ => Err(Error::InvalidArgument {
                op: "Rectification::from_str",
                detail: format!("unknown rectification '{s}'"),
            }),
        }
    }
}

/// How and where attention is applied during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub mode: Mode,
    pub rectification: Rectification,
    /// Targeted ReLU layers, by 1-based relu_index.
    pub layers: BTreeSet<u32>,
    /// Attention strength. Zero means no modulation at all.
    pub beta: f32,
    /// Strength multiplier used when more than one layer is targeted.
    pub multi_layer_scale: f32,
    /// Floor the multiplicative slope `1 + beta*f` at zero instead of letting
    /// strongly negative patterns invert activations. Off by default.
    pub clamp_multiplicative: bool,
}

impl AttentionConfig {
    pub fn new(
        mode: Mode,
        rectification: Rectification,
        layers: impl IntoIterator<Item = u32>,
        beta: f32,
    ) -> Result<Self> {
        let layers: BTreeSet<u32> = layers.into_iter().collect();
        if layers.is_empty() {
            return Err(Error::InvalidArgument {
                op: "AttentionConfig::new",
                detail: "layer set must be nonempty".into(),
            });
        }
        if !(beta >= 0.0) {
            return Err(Error::InvalidArgument {
                op: "AttentionConfig::new",
                detail: format!("beta must be >= 0, got {beta}"),
            });
        }
        Ok(AttentionConfig {
            mode,
            rectification,
            layers,
            beta,
            multi_layer_scale: 0.5,
            clamp_multiplicative: false,
        })
    }

    /// Half strength when applied to multiple layers at once.
    pub fn effective_beta(&self) -> f32 {
        if self.layers.len() > 1 {
            self.beta * self.multi_layer_scale
        } else {
            self.beta
        }
    }
}

/// Running sums of spatially averaged feature-map activity over a training
/// set: per-category sums plus global sum and sum of squares per layer.
/// Merging two summaries is plain addition, so accumulation can be split
/// across workers and combined in any order.
#[derive(Debug, Clone)]
pub struct ActivitySummary {
    /// Channel count per ReLU layer; index 0 is relu_index 1.
    channels: Vec<usize>,
    count: usize,
    sum: Vec<Vec<f64>>,
    sum_sq: Vec<Vec<f64>>,
    per_category: BTreeMap<String, CategoryAccum>,
}

#[derive(Debug, Clone)]
struct CategoryAccum {
    count: usize,
    sum: Vec<Vec<f64>>,
}

impl ActivitySummary {
    pub fn new(channels: Vec<usize>) -> Self {
        let zero: Vec<Vec<f64>> = channels.iter().map(|&c| vec![0.0; c]).collect();
        ActivitySummary { channels, count: 0, sum: zero.clone(), sum_sq: zero, per_category: BTreeMap::new() }
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn image_count(&self) -> usize {
        self.count
    }

    pub fn category_counts(&self) -> BTreeMap<String, usize> {
        self.per_category.iter().map(|(k, v)| (k.clone(), v.count)).collect()
    }

    /// Folds one image's per-layer activity vectors into the summary.
    pub fn add_image(&mut self, category: &str, activities: &[Vec<f64>]) -> Result<()> {
        const OP: &str = "ActivitySummary::add_image";
        if activities.len() != self.channels.len() {
            return Err(Error::ShapeMismatch {
                op: OP,
                detail: format!("{} layer vectors for {} relu layers", activities.len(), self.channels.len()),
            });
        }
        for (l, (v, &c)) in activities.iter().zip(self.channels.iter()).enumerate() {
            if v.len() != c {
                return Err(Error::ShapeMismatch {
                    op: OP,
                    detail: format!("layer {}: vector length {} != {c} maps", l + 1, v.len()),
                });
            }
        }
        let cat = self.per_category.entry(category.to_string()).or_insert_with(|| CategoryAccum {
            count: 0,
            sum: self.channels.iter().map(|&c| vec![0.0; c]).collect(),
        });
        cat.count += 1;
        self.count += 1;
        for (l, v) in activities.iter().enumerate() {
            for (k, &x) in v.iter().enumerate() {
                self.sum[l][k] += x;
                self.sum_sq[l][k] += x * x;
                cat.sum[l][k] += x;
            }
        }
        Ok(())
    }

    /// Adds another summary's sums into this one.
    pub fn merge(&mut self, other: &ActivitySummary) -> Result<()> {
        if self.channels != other.channels {
            return Err(Error::ShapeMismatch {
                op: "ActivitySummary::merge",
                detail: format!("channel layout {:?} != {:?}", self.channels, other.channels),
            });
        }
        self.count += other.count;
        for l in 0..self.channels.len() {
            for k in 0..self.channels[l] {
                self.sum[l][k] += other.sum[l][k];
                self.sum_sq[l][k] += other.sum_sq[l][k];
            }
        }
        for (name, acc) in &other.per_category {
            let cat = self.per_category.entry(name.clone()).or_insert_with(|| CategoryAccum {
                count: 0,
                sum: self.channels.iter().map(|&c| vec![0.0; c]).collect(),
            });
            cat.count += acc.count;
            for l in 0..self.channels.len() {
                for k in 0..self.channels[l] {
                    cat.sum[l][k] += acc.sum[l][k];
                }
            }
        }
        Ok(())
    }

    /// Mean activity over all images, per layer.
    pub fn grand_mean(&self, layer_idx: usize) -> Vec<f64> {
        let n = self.count as f64;
        self.sum[layer_idx].iter().map(|&s| s / n).collect()
    }

    /// Population standard deviation over all images, per layer.
    pub fn std_dev(&self, layer_idx: usize) -> Vec<f64> {
        let n = self.count as f64;
        self.sum[layer_idx]
            .iter()
            .zip(self.sum_sq[layer_idx].iter())
            .map(|(&s, &sq)| {
                let mean = s / n;
                (sq / n - mean * mean).max(0.0).sqrt()
            })
            .collect()
    }

    pub fn category_mean(&self, category: &str, layer_idx: usize) -> Result<Vec<f64>> {
        let acc = self
            .per_category
            .get(category)
            .ok_or_else(|| Error::UnknownCategory { category: category.to_string() })?;
        let n = acc.count as f64;
        Ok(acc.sum[layer_idx].iter().map(|&s| s / n).collect())
    }
}

/// Spatially averages one post-activation tensor: per-map mean over the two
/// spatial dimensions for feature maps, node activity as-is for FC layers.
pub fn spatial_average_tensor(t: &Tensor) -> Vec<f64> {
    match t.rank() {
        3 => {
            let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let area = (h * w) as f64;
            let mut out = Vec::with_capacity(c);
            for k in 0..c {
                let mut acc = 0.0f64;
                for y in 0..h {
                    for x in 0..w {
                        acc += t.at3(k, y, x) as f64;
                    }
                }
                out.push(acc / area);
            }
            out
        }
        _ => t.data().iter().map(|&v| v as f64).collect(),
    }
}

/// Spatially averaged activity of one ReLU layer from a trace.
pub fn spatial_average(trace: &ForwardTrace, relu_index: u32) -> Result<Vec<f64>> {
    let idx = relu_index
        .checked_sub(1)
        .map(|i| i as usize)
        .filter(|&i| i < trace.relu_post.len())
        .ok_or(Error::InvalidArgument {
            op: "spatial_average",
            detail: format!("relu layer {relu_index} not present in trace"),
        })?;
    Ok(spatial_average_tensor(&trace.relu_post[idx]))
}

/// All activity vectors of a trace, ordered by relu_index.
pub fn trace_activities(trace: &ForwardTrace) -> Vec<Vec<f64>> {
    trace.relu_post.iter().map(spatial_average_tensor).collect()
}

/// Per-(layer, category) feature patterns plus extraction metadata.
#[derive(Debug, Clone)]
pub struct FeaturePatternSet {
    rectification: Rectification,
    channels: Vec<usize>,
    patterns: BTreeMap<(u32, String), Vec<f32>>,
    image_counts: BTreeMap<String, usize>,
    network_hash: Option<String>,
}

impl FeaturePatternSet {
    pub fn from_parts(
        rectification: Rectification,
        channels: Vec<usize>,
        patterns: BTreeMap<(u32, String), Vec<f32>>,
        image_counts: BTreeMap<String, usize>,
    ) -> Self {
        FeaturePatternSet { rectification, channels, patterns, image_counts, network_hash: None }
    }

    pub fn rectification(&self) -> Rectification {
        self.rectification
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn categories(&self) -> Vec<String> {
        self.image_counts.keys().cloned().collect()
    }

    pub fn image_counts(&self) -> &BTreeMap<String, usize> {
        &self.image_counts
    }

    pub fn network_hash(&self) -> Option<&str> {
        self.network_hash.as_deref()
    }

    pub fn set_network_hash(&mut self, hash: impl Into<String>) {
        self.network_hash = Some(hash.into());
    }

    pub fn layers(&self) -> Vec<u32> {
        (1..=self.channels.len() as u32).collect()
    }

    /// Stored pattern for one layer and category.
    pub fn get(&self, layer: u32, category: &str) -> Result<&[f32]> {
        self.patterns
            .get(&(layer, category.to_string()))
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::MissingPattern { layer, category: category.to_string() })
    }

    /// Pattern in the requested rectification. Clamping a bidirectional
    /// pattern is always possible; undoing a stored clamp is not.
    pub fn rectified(&self, layer: u32, category: &str, rect: Rectification) -> Result<Vec<f32>> {
        let raw = self.get(layer, category)?;
        match (self.rectification, rect) {
            (Rectification::Positive, Rectification::Bidirectional) => Err(Error::InvalidArgument {
                op: "FeaturePatternSet::rectified",
                detail: "stored patterns are positive-rectified; bidirectional values are gone".into(),
            }),
            (_, Rectification::Positive) => {
                Ok(raw.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect())
            }
            _ => Ok(raw.to_vec()),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(u32, String), &Vec<f32>)> {
        self.patterns.iter()
    }

    /// Rebuilds the set with every pattern vector transformed in place.
    pub fn map_patterns(&self, mut f: impl FnMut(u32, &str, &[f32]) -> Vec<f32>) -> FeaturePatternSet {
        let patterns = self
            .patterns
            .iter()
            .map(|((l, c), v)| {
                let nv = f(*l, c, v);
                assert_eq!(nv.len(), v.len(), "pattern length must be preserved");
                ((*l, c.clone()), nv)
            })
            .collect();
        FeaturePatternSet {
            rectification: self.rectification,
            channels: self.channels.clone(),
            patterns,
            image_counts: self.image_counts.clone(),
            network_hash: self.network_hash.clone(),
        }
    }
}

/// Builds feature patterns from accumulated activity: per layer and category,
/// the category mean minus the grand mean, divided by the per-map standard
/// deviation. Maps with zero deviation get a zero pattern element. Positive
/// rectification clamps negatives to zero.
pub fn build_patterns(summary: &ActivitySummary, rectification: Rectification) -> Result<FeaturePatternSet> {
    if summary.image_count() == 0 {
        return Err(Error::InsufficientData { detail: "activity summary holds no images".into() });
    }
    let mut patterns = BTreeMap::new();
    let categories: Vec<String> = summary.per_category.keys().cloned().collect();
    for (l, _) in summary.channels.iter().enumerate() {
        let grand = summary.grand_mean(l);
        let sigma = summary.std_dev(l);
        for cat in &categories {
            let mean_c = summary.category_mean(cat, l)?;
            let mut f: Vec<f32> = mean_c
                .iter()
                .zip(grand.iter())
                .zip(sigma.iter())
                .map(|((&m, &g), &s)| if s == 0.0 { 0.0 } else { ((m - g) / s) as f32 })
                .collect();
            if rectification == Rectification::Positive {
                for v in &mut f {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            patterns.insert((l as u32 + 1, cat.clone()), f);
        }
    }
    Ok(FeaturePatternSet {
        rectification,
        channels: summary.channels.clone(),
        patterns,
        image_counts: summary.category_counts(),
        network_hash: None,
    })
}

/// Per-map modulation scalars for one targeted layer: `beta_eff * f` for
/// additive mode, `1 + beta_eff * f` for multiplicative, with the pattern
/// rectified per the config first.
pub fn modulation_terms(
    config: &AttentionConfig,
    patterns: &FeaturePatternSet,
    layer: u32,
    category: &str,
) -> Result<Vec<f32>> {
    let f = patterns.rectified(layer, category, config.rectification)?;
    let beta = config.effective_beta();
    let terms = match config.mode {
        Mode::Additive => f.iter().map(|&v| beta * v).collect(),
        Mode::Multiplicative => f
            .iter()
            .map(|&v| {
                let t = 1.0 + beta * v;
                if config.clamp_multiplicative && t < 0.0 {
                    0.0
                } else {
                    t
                }
            })
            .collect(),
    };
    Ok(terms)
}

const PATTERN_MAGIC: &str = "fba-patterns";
const PATTERN_VERSION: u32 = 1;

/// Writes a pattern set as structured text. Floats are printed with 9
/// significant digits so the file round-trips f32 values bit-exactly. Only
/// bidirectional sets are saved; rectification happens at use time.
pub fn save_patterns(set: &FeaturePatternSet, path: &Path) -> Result<()> {
    if set.rectification != Rectification::Bidirectional {
        return Err(Error::InvalidArgument {
            op: "save_patterns",
            detail: "only bidirectional pattern sets are serialized".into(),
        });
    }
    let mut out = String::new();
    out.push_str(&format!("{PATTERN_MAGIC} v{PATTERN_VERSION}\n"));
    out.push_str(&format!("network_hash {}\n", set.network_hash.as_deref().unwrap_or("-")));
    let cats: Vec<String> = set.image_counts.keys().cloned().collect();
    out.push_str(&format!("categories {}\n", cats.join(",")));
    let counts: Vec<String> = set.image_counts.iter().map(|(c, n)| format!("{c}={n}")).collect();
    out.push_str(&format!("images {}\n", counts.join(",")));
    let chans: Vec<String> =
        set.channels.iter().enumerate().map(|(i, c)| format!("{}={c}", i + 1)).collect();
    out.push_str(&format!("channels {}\n", chans.join(",")));
    for ((layer, cat), values) in &set.patterns {
        let vals: Vec<String> = values.iter().map(|v| format!("{v:.8e}")).collect();
        out.push_str(&format!("pattern {layer} {cat} {}\n", vals.join(" ")));
    }
    out.push_str("end\n");
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_patterns(path: &Path) -> Result<FeaturePatternSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let pstr = path.display().to_string();
    let inconsistent = |detail: String| Error::FormatInconsistency { path: pstr.clone(), detail };
    let mut lines = text.lines();

    let header = lines.next().ok_or_else(|| Error::BadMagic { path: pstr.clone() })?;
    let mut hp = header.split_whitespace();
    if hp.next() != Some(PATTERN_MAGIC) {
        return Err(Error::BadMagic { path: pstr.clone() });
    }
    match hp.next().and_then(|v| v.strip_prefix('v')).and_then(|v| v.parse::<u32>().ok()) {
        Some(v) if v == PATTERN_VERSION => {}
        Some(v) => {
            return Err(Error::VersionMismatch { path: pstr.clone(), found: v, expected: PATTERN_VERSION })
        }
        None => return Err(inconsistent("missing version".into())),
    }

    let mut network_hash = None;
    let mut image_counts = BTreeMap::new();
    let mut channels: Vec<usize> = Vec::new();
    let mut patterns = BTreeMap::new();
    let mut saw_end = false;
    for line in lines {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("network_hash") => {
                let h = parts.next().ok_or_else(|| inconsistent("network_hash line without value".into()))?;
                if h != "-" {
                    network_hash = Some(h.to_string());
                }
            }
            Some("categories") => {} // redundant with `images`; kept for readability
            Some("images") => {
                let spec = parts.next().unwrap_or("");
                for item in spec.split(',').filter(|s| !s.is_empty()) {
                    let (cat, n) = item
                        .split_once('=')
                        .ok_or_else(|| inconsistent(format!("bad image count '{item}'")))?;
                    let n: usize =
                        n.parse().map_err(|_| inconsistent(format!("bad image count '{item}'")))?;
                    image_counts.insert(cat.to_string(), n);
                }
            }
            Some("channels") => {
                let spec = parts.next().unwrap_or("");
                for item in spec.split(',').filter(|s| !s.is_empty()) {
                    let (idx, c) = item
                        .split_once('=')
                        .ok_or_else(|| inconsistent(format!("bad channel entry '{item}'")))?;
                    let idx: usize =
                        idx.parse().map_err(|_| inconsistent(format!("bad channel entry '{item}'")))?;
                    let c: usize =
                        c.parse().map_err(|_| inconsistent(format!("bad channel entry '{item}'")))?;
                    if idx != channels.len() + 1 {
                        return Err(inconsistent(format!("channel entries out of order at '{item}'")));
                    }
                    channels.push(c);
                }
            }
            Some("pattern") => {
                let layer: u32 = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| inconsistent("pattern line without layer".into()))?;
                let cat = parts
                    .next()
                    .ok_or_else(|| inconsistent("pattern line without category".into()))?
                    .to_string();
                let values: Vec<f32> = parts
                    .map(|v| v.parse::<f32>().map_err(|_| inconsistent(format!("bad float '{v}'"))))
                    .collect::<Result<_>>()?;
                let want = *channels
                    .get((layer - 1) as usize)
                    .ok_or_else(|| inconsistent(format!("pattern for unknown layer {layer}")))?;
                if values.len() != want {
                    return Err(inconsistent(format!(
                        "pattern layer {layer} category {cat}: {} values, expected {want}",
                        values.len()
                    )));
                }
                patterns.insert((layer, cat), values);
            }
            Some("end") => {
                saw_end = true;
                break;
            }
            Some(other) => return Err(inconsistent(format!("unknown line '{other}'"))),
            None => {}
        }
    }
    if !saw_end {
        return Err(Error::TruncatedPayload { path: pstr, tensor: "pattern table".into() });
    }
    for cat in image_counts.keys() {
        for layer in 1..=channels.len() as u32 {
            if !patterns.contains_key(&(layer, cat.clone())) {
                return Err(inconsistent(format!("missing pattern for layer {layer}, category {cat}")));
            }
        }
    }
    Ok(FeaturePatternSet {
        rectification: Rectification::Bidirectional,
        channels,
        patterns,
        image_counts,
        network_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn summary_from(images: &[(&str, Vec<Vec<f64>>)], channels: Vec<usize>) -> ActivitySummary {
        let mut s = ActivitySummary::new(channels);
        for (cat, acts) in images {
            s.add_image(cat, acts).unwrap();
        }
        s
    }

    #[test]
    fn spatial_average_arithmetic_mean() {
        let t = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(spatial_average_tensor(&t), vec![2.5]);

        let c = Tensor::filled(vec![3, 4, 4], 0.25);
        assert_eq!(spatial_average_tensor(&c), vec![0.25, 0.25, 0.25]);
    }

    #[test]
    fn spatial_average_matches_loop_oracle_exactly() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..3 * 4 * 4).map(|_| r.random_range(-1.0f32..1.0)).collect();
        let t = Tensor::new(vec![3, 4, 4], data).unwrap();
        let got = spatial_average_tensor(&t);
        for k in 0..3 {
            let mut acc = 0.0f64;
            for i in 0..4 {
                for j in 0..4 {
                    acc += t.at3(k, i, j) as f64;
                }
            }
            assert_eq!(got[k], acc / 16.0, "summation order must match the oracle");
        }
    }

    #[test]
    fn spatial_average_fc_passthrough() {
        let t = Tensor::from_vec(vec![0.5, -1.0, 2.0]);
        assert_eq!(spatial_average_tensor(&t), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn accumulate_single_image_zero_sigma() {
        let s = summary_from(&[("a", vec![vec![1.5, -0.5]])], vec![2]);
        assert_eq!(s.grand_mean(0), vec![1.5, -0.5]);
        assert_eq!(s.std_dev(0), vec![0.0, 0.0]);
    }

    #[test]
    fn accumulate_two_image_definition() {
        let s = summary_from(&[("a", vec![vec![0.0]]), ("b", vec![vec![2.0]])], vec![1]);
        assert_eq!(s.grand_mean(0), vec![1.0]);
        assert_eq!(s.std_dev(0), vec![1.0]);
    }

    #[test]
    fn accumulate_matches_two_pass_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let images: Vec<(String, Vec<f64>)> = (0..10)
            .map(|i| {
                let cat = if i % 2 == 0 { "even" } else { "odd" };
                (cat.to_string(), (0..4).map(|_| r.random_range(-3.0..3.0)).collect())
            })
            .collect();
        let mut s = ActivitySummary::new(vec![4]);
        for (cat, v) in &images {
            s.add_image(cat, &[v.clone()]).unwrap();
        }
        // Independent two-pass mean/std.
        for k in 0..4 {
            let vals: Vec<f64> = images.iter().map(|(_, v)| v[k]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!((s.grand_mean(0)[k] - mean).abs() < 1e-6);
            assert!((s.std_dev(0)[k] - var.sqrt()).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_summary_rejected() {
        let s = ActivitySummary::new(vec![2]);
        assert!(build_patterns(&s, Rectification::Bidirectional).is_err());
    }

    #[test]
    fn merge_order_within_reassociation_noise() {
        let mut r = ChaCha8Rng::seed_from_u64(21);
        let images: Vec<Vec<f64>> = (0..12).map(|_| (0..3).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
        let mut forward = ActivitySummary::new(vec![3]);
        let mut backward = ActivitySummary::new(vec![3]);
        for v in &images {
            let mut part = ActivitySummary::new(vec![3]);
            part.add_image("c", &[v.clone()]).unwrap();
            forward.merge(&part).unwrap();
        }
        for v in images.iter().rev() {
            let mut part = ActivitySummary::new(vec![3]);
            part.add_image("c", &[v.clone()]).unwrap();
            backward.merge(&part).unwrap();
        }
        for k in 0..3 {
            assert!((forward.grand_mean(0)[k] - backward.grand_mean(0)[k]).abs() < 1e-5);
            assert!((forward.std_dev(0)[k] - backward.std_dev(0)[k]).abs() < 1e-5);
        }
    }

    #[test]
    fn patterns_zero_when_category_equals_grand_mean() {
        // Two categories with identical activity: every pattern element 0.
        let s = summary_from(
            &[("a", vec![vec![1.0, 2.0]]), ("b", vec![vec![1.0, 2.0]])],
            vec![2],
        );
        let p = build_patterns(&s, Rectification::Bidirectional).unwrap();
        assert_eq!(p.get(1, "a").unwrap(), &[0.0, 0.0]);
        assert_eq!(p.get(1, "b").unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn patterns_balanced_two_category_hand_values() {
        // r_a = [2], r_b = [0]: grand mean 1, population sigma 1,
        // so f_a = +1 and f_b = -1.
        let s = summary_from(&[("a", vec![vec![2.0]]), ("b", vec![vec![0.0]])], vec![1]);
        let p = build_patterns(&s, Rectification::Bidirectional).unwrap();
        assert_eq!(p.get(1, "a").unwrap(), &[1.0]);
        assert_eq!(p.get(1, "b").unwrap(), &[-1.0]);

        let pos = build_patterns(&s, Rectification::Positive).unwrap();
        assert_eq!(pos.get(1, "a").unwrap(), &[1.0]);
        assert_eq!(pos.get(1, "b").unwrap(), &[0.0]);
    }

    #[test]
    fn dead_map_pattern_is_zero_not_nan() {
        let s = summary_from(
            &[("a", vec![vec![0.0, 1.0]]), ("b", vec![vec![0.0, 3.0]])],
            vec![2],
        );
        let p = build_patterns(&s, Rectification::Bidirectional).unwrap();
        assert_eq!(p.get(1, "a").unwrap()[0], 0.0);
        assert_eq!(p.get(1, "b").unwrap()[0], 0.0);
        assert!(p.get(1, "a").unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn unknown_category_rejected() {
        let s = summary_from(&[("a", vec![vec![1.0]]), ("b", vec![vec![0.0]])], vec![1]);
        let p = build_patterns(&s, Rectification::Bidirectional).unwrap();
        assert!(matches!(p.get(1, "zebra"), Err(Error::MissingPattern { .. })));
        assert!(matches!(s.category_mean("zebra", 0), Err(Error::UnknownCategory { .. })));
    }

    #[test]
    fn balanced_categories_center_to_zero() {
        let mut r = ChaCha8Rng::seed_from_u64(33);
        let mut s = ActivitySummary::new(vec![5]);
        for cat in ["a", "b", "c"] {
            for _ in 0..7 {
                let v: Vec<f64> = (0..5).map(|_| r.random_range(0.0..4.0)).collect();
                s.add_image(cat, &[v]).unwrap();
            }
        }
        let p = build_patterns(&s, Rectification::Bidirectional).unwrap();
        for k in 0..5 {
            let total: f64 = ["a", "b", "c"]
                .iter()
                .map(|c| p.get(1, c).unwrap()[k] as f64)
                .sum();
            assert!(total.abs() < 1e-5, "balanced categories must sum to 0, got {total}");
        }
    }

    #[test]
    fn patterns_invariant_to_activity_scale() {
        let mut r = ChaCha8Rng::seed_from_u64(34);
        let images: Vec<(String, Vec<f64>)> = (0..10)
            .map(|i| {
                let cat = if i < 5 { "a" } else { "b" };
                (cat.to_string(), (0..4).map(|_| r.random_range(0.0..2.0)).collect())
            })
            .collect();
        let mut s1 = ActivitySummary::new(vec![4]);
        let mut s2 = ActivitySummary::new(vec![4]);
        for (cat, v) in &images {
            s1.add_image(cat, &[v.clone()]).unwrap();
            let scaled: Vec<f64> = v.iter().map(|x| x * 7.5).collect();
            s2.add_image(cat, &[scaled]).unwrap();
        }
        let p1 = build_patterns(&s1, Rectification::Bidirectional).unwrap();
        let p2 = build_patterns(&s2, Rectification::Bidirectional).unwrap();
        for cat in ["a", "b"] {
            for (x, y) in p1.get(1, cat).unwrap().iter().zip(p2.get(1, cat).unwrap()) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn modulation_identity_at_zero_beta() {
        let s = summary_from(&[("a", vec![vec![2.0]]), ("b", vec![vec![0.0]])], vec![1]);
        let p = build_patterns(&s, Rectification::Bidirectional).unwrap();
        let add = AttentionConfig::new(Mode::Additive, Rectification::Bidirectional, [1], 0.0).unwrap();
        assert_eq!(modulation_terms(&add, &p, 1, "a").unwrap(), vec![0.0]);
        let mul =
            AttentionConfig::new(Mode::Multiplicative, Rectification::Bidirectional, [1], 0.0).unwrap();
        assert_eq!(modulation_terms(&mul, &p, 1, "a").unwrap(), vec![1.0]);
    }

    #[test]
    fn modulation_slope_arithmetic() {
        let mut patterns = BTreeMap::new();
        patterns.insert((1u32, "a".to_string()), vec![0.5f32]);
        patterns.insert((2u32, "a".to_string()), vec![0.5f32]);
        let mut counts = BTreeMap::new();
        counts.insert("a".to_string(), 1);
        let set = FeaturePatternSet::from_parts(Rectification::Bidirectional, vec![1, 1], patterns, counts);

        let single =
            AttentionConfig::new(Mode::Multiplicative, Rectification::Bidirectional, [1], 1.2).unwrap();
        let t = modulation_terms(&single, &set, 1, "a").unwrap();
        assert!((t[0] - 1.6).abs() < 1e-6);

        // Half strength at two layers: slope 1 + 0.6 * 0.5 = 1.3.
        let multi =
            AttentionConfig::new(Mode::Multiplicative, Rectification::Bidirectional, [1, 2], 1.2).unwrap();
        let t = modulation_terms(&multi, &set, 1, "a").unwrap();
        assert!((t[0] - 1.3).abs() < 1e-6);
    }

    #[test]
    fn multiplicative_term_monotone_in_beta() {
        let s = summary_from(&[("a", vec![vec![2.0]]), ("b", vec![vec![0.0]])], vec![1]);
        let p = build_patterns(&s, Rectification::Bidirectional).unwrap();
        let mut last = f32::NEG_INFINITY;
        for beta in [0.0, 0.2, 0.5, 0.9, 1.2, 2.0] {
            let cfg =
                AttentionConfig::new(Mode::Multiplicative, Rectification::Bidirectional, [1], beta).unwrap();
            let t = modulation_terms(&cfg, &p, 1, "a").unwrap()[0];
            assert!(t > last, "term must increase with beta for f > 0");
            last = t;
        }
    }

    #[test]
    fn rectified_patterns_nonnegative_and_match_clamp() {
        let mut r = ChaCha8Rng::seed_from_u64(35);
        let mut s = ActivitySummary::new(vec![6]);
        for cat in ["a", "b"] {
            for _ in 0..5 {
                let v: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..3.0)).collect();
                s.add_image(cat, &[v]).unwrap();
            }
        }
        let bid = build_patterns(&s, Rectification::Bidirectional).unwrap();
        let clamped = bid.rectified(1, "a", Rectification::Positive).unwrap();
        for (c, b) in clamped.iter().zip(bid.get(1, "a").unwrap()) {
            assert!(*c >= 0.0);
            assert_eq!(*c, b.max(0.0));
        }
    }

    #[test]
    fn pattern_file_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(36);
        let mut s = ActivitySummary::new(vec![3, 5]);
        for cat in ["a", "b", "c"] {
            for _ in 0..4 {
                let v1: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
                let v2: Vec<f64> = (0..5).map(|_| r.random_range(-2.0..2.0)).collect();
                s.add_image(cat, &[v1, v2]).unwrap();
            }
        }
        let mut set = build_patterns(&s, Rectification::Bidirectional).unwrap();
        set.set_network_hash("deadbeef");
        let path = dir.path().join("p.fbap");
        save_patterns(&set, &path).unwrap();
        let loaded = load_patterns(&path).unwrap();
        assert_eq!(loaded.network_hash(), Some("deadbeef"));
        assert_eq!(loaded.channels(), set.channels());
        assert_eq!(loaded.image_counts(), set.image_counts());
        for ((key, v), (lkey, lv)) in set.iter().zip(loaded.iter()) {
            assert_eq!(key, lkey);
            assert_eq!(v.len(), lv.len());
            for (a, b) in v.iter().zip(lv.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "decimal round-trip must be bit-exact");
            }
        }
    }

    #[test]
    fn pattern_file_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.fbap");
        std::fs::write(&bad, "not-a-pattern-file v1\nend\n").unwrap();
        assert!(matches!(load_patterns(&bad), Err(Error::BadMagic { .. })));

        let s = summary_from(&[("a", vec![vec![2.0]]), ("b", vec![vec![0.0]])], vec![1]);
        let set = build_patterns(&s, Rectification::Bidirectional).unwrap();
        let path = dir.path().join("p.fbap");
        save_patterns(&set, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let truncated: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
        std::fs::write(&path, truncated).unwrap();
        assert!(matches!(load_patterns(&path), Err(Error::TruncatedPayload { .. })));
    }
}
