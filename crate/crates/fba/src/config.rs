//! Run configuration: a single TOML file validated in full before any
//! compute, plus the fixed output layout under the run directory.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::attention::{Mode, Rectification};
use crate::error::{Error, Result};
use crate::imagesets::shapes::SHAPE_CATEGORIES;
use crate::network::{LayerSpec, NetworkSpec};

fn default_categories() -> Vec<String> {
    SHAPE_CATEGORIES.iter().map(|s| s.to_string()).collect()
}

fn default_image_size() -> usize {
    32
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("fba-run")
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub master_seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_categories")]
    pub categories: Vec<String>,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub pool: PoolSplit,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub imagesets: ImagesetConfig,
    #[serde(default)]
    pub attention: AttentionSweepConfig,
    #[serde(default)]
    pub folds: FoldConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// "synthetic" for the bundled shape generator, "directory" for a tree of
    /// labeled PNM/tensor images (`<path>/<category>/<image>`).
    #[serde(default = "default_source")]
    pub source: String,
    #[serde(default)]
    pub path: Option<PathBuf>,
}

fn default_source() -> String {
    "synthetic".to_string()
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { source: default_source(), path: None }
    }
}

/// Per-category pool split sizes. The splits are disjoint by construction:
/// backbone training, pattern extraction, detector training, and test (the
/// only split composites may draw from).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSplit {
    pub backbone_per_category: usize,
    pub pattern_per_category: usize,
    pub train_per_category: usize,
    pub test_per_category: usize,
}

impl Default for PoolSplit {
    fn default() -> Self {
        PoolSplit {
            backbone_per_category: 80,
            pattern_per_category: 40,
            train_per_category: 60,
            test_per_category: 40,
        }
    }
}

impl PoolSplit {
    pub fn total_per_category(&self) -> usize {
        self.backbone_per_category
            + self.pattern_per_category
            + self.train_per_category
            + self.test_per_category
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub conv_channels: Vec<usize>,
    pub hidden_fc: Vec<usize>,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            conv_channels: vec![8, 16, 24, 32],
            hidden_fc: vec![64, 48],
            lr: 0.05,
            momentum: 0.9,
            epochs: 15,
            batch: 32,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagesetConfig {
    pub array_count: usize,
    pub merged_count: usize,
    pub merged_weight: f32,
    /// Per-category balanced test subset drawn from the composites.
    pub test_pos: usize,
    pub test_neg: usize,
    #[serde(default)]
    pub export_pnm: bool,
}

impl Default for ImagesetConfig {
    fn default() -> Self {
        ImagesetConfig {
            array_count: 360,
            merged_count: 600,
            merged_weight: 0.5,
            test_pos: 100,
            test_neg: 100,
            export_pnm: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionSweepConfig {
    pub additive_betas: Vec<f32>,
    pub multiplicative_betas: Vec<f32>,
    pub layer_sets: Vec<Vec<u32>>,
    /// Option names like "multiplicative-bidirectional".
    pub options: Vec<String>,
    /// Which challenge imagesets receive attended sweep cells. Baselines are
    /// always measured on all three imagesets.
    #[serde(default = "default_attended")]
    pub attended_imagesets: Vec<String>,
}

fn default_attended() -> Vec<String> {
    vec!["array".to_string(), "merged".to_string()]
}

impl Default for AttentionSweepConfig {
    fn default() -> Self {
        AttentionSweepConfig {
            additive_betas: vec![4.0, 8.0, 12.0, 16.0, 20.0, 24.0],
            multiplicative_betas: vec![0.2, 0.4, 0.6, 0.8, 1.0, 1.2],
            layer_sets: vec![vec![1], vec![2], vec![3], vec![4], vec![5], vec![6], vec![4, 5], vec![5, 6]],
            options: vec![
                "additive-bidirectional".to_string(),
                "additive-positive".to_string(),
                "multiplicative-bidirectional".to_string(),
                "multiplicative-positive".to_string(),
            ],
            attended_imagesets: default_attended(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldConfig {
    pub count: usize,
    pub train_pos: usize,
    pub train_neg: usize,
}

impl Default for FoldConfig {
    fn default() -> Self {
        FoldConfig { count: 20, train_pos: 40, train_neg: 40 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub reg: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { reg: 1.0 }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    /// Run the sweep a second time with shuffled feature patterns.
    #[serde(default)]
    pub shuffle: bool,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// k for the top-k merged error report.
    pub topk: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig { topk: 2 }
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config { detail: format!("{}: {e}", path.display()) })?;
    let mut config: RunConfig = toml::from_str(&text)
        .map_err(|e| Error::Config { detail: format!("{}: {e}", path.display()) })?;
    config.normalize();
    config.validate()?;
    Ok(config)
}

impl RunConfig {
    fn normalize(&mut self) {
        self.categories.sort();
        for set in &mut self.attention.layer_sets {
            set.sort_unstable();
            set.dedup();
        }
        // Deterministic sweep order: by size then contents, betas ascending.
        self.attention.layer_sets.sort_by(|a, b| (a.len(), a.clone()).cmp(&(b.len(), b.clone())));
        self.attention.layer_sets.dedup();
        self.attention.options.sort();
        self.attention.options.dedup();
        self.attention.additive_betas.sort_by(f32::total_cmp);
        self.attention.multiplicative_betas.sort_by(f32::total_cmp);
    }

    /// Fail-fast whole-config check; any violation is a usage error.
    pub fn validate(&self) -> Result<()> {
        let fail = |detail: String| Err(Error::Config { detail });
        if self.categories.len() < 2 {
            return fail(format!("need at least 2 categories, got {}", self.categories.len()));
        }
        let distinct: BTreeSet<&String> = self.categories.iter().collect();
        if distinct.len() != self.categories.len() {
            return fail("duplicate categories".into());
        }
        let pools = self.backbone.conv_channels.len().saturating_sub(1);
        if self.backbone.conv_channels.is_empty() || self.backbone.hidden_fc.is_empty() {
            return fail("backbone needs at least one conv and one fc layer".into());
        }
        let divisor = 1usize << pools;
        if self.image_size < 8 || self.image_size % divisor != 0 {
            return fail(format!(
                "image size {} must be >= 8 and divisible by {divisor} (one pool per conv block except the last)",
                self.image_size
            ));
        }
        if self.image_size % 2 != 0 {
            return fail(format!("image size {} must be even for array tiling", self.image_size));
        }
        match self.dataset.source.as_str() {
            "synthetic" => {
                for cat in &self.categories {
                    if !SHAPE_CATEGORIES.contains(&cat.as_str()) {
                        return fail(format!(
                            "category '{cat}' is not a bundled shape (available: {})",
                            SHAPE_CATEGORIES.join(", ")
                        ));
                    }
                }
            }
            "directory" => {
                let Some(path) = &self.dataset.path else {
                    return fail("dataset.source = \"directory\" requires dataset.path".into());
                };
                if !path.is_dir() {
                    return fail(format!("dataset path {} does not exist", path.display()));
                }
            }
            other => return fail(format!("unknown dataset source '{other}'")),
        }
        if self.pool.backbone_per_category == 0
            || self.pool.pattern_per_category == 0
            || self.pool.train_per_category == 0
            || self.pool.test_per_category == 0
        {
            return fail("all pool split sizes must be >= 1".into());
        }
        if self.backbone.epochs == 0 || self.backbone.batch == 0 {
            return fail("backbone epochs and batch must be >= 1".into());
        }
        if !(self.backbone.lr > 0.0) || !(0.0..1.0).contains(&self.backbone.momentum) {
            return fail("backbone lr must be > 0 and momentum in [0,1)".into());
        }
        if !(self.imagesets.merged_weight > 0.0 && self.imagesets.merged_weight < 1.0) {
            return fail(format!(
                "merged weight {} must lie strictly inside (0,1)",
                self.imagesets.merged_weight
            ));
        }
        if self.imagesets.array_count < 4 || self.imagesets.merged_count < 4 {
            return fail("imageset counts must be >= 4".into());
        }
        if self.imagesets.test_pos == 0 || self.imagesets.test_neg == 0 {
            return fail("imageset test subset sizes must be >= 1".into());
        }
        if self.attention.options.is_empty() {
            return fail("attention.options must be nonempty".into());
        }
        if self.attention.attended_imagesets.is_empty() {
            return fail("attention.attended_imagesets must be nonempty".into());
        }
        for kind in &self.attention.attended_imagesets {
            if kind != "array" && kind != "merged" {
                return fail(format!(
                    "attended imageset '{kind}' must be 'array' or 'merged'"
                ));
            }
        }
        let relu_total = (self.backbone.conv_channels.len() + self.backbone.hidden_fc.len()) as u32;
        if self.attention.layer_sets.is_empty()
            || self.attention.layer_sets.iter().any(|s| s.is_empty())
        {
            return fail("attention.layer_sets must be nonempty sets".into());
        }
        for set in &self.attention.layer_sets {
            for &layer in set {
                if layer == 0 || layer > relu_total {
                    return fail(format!(
                        "layer {layer} out of range: backbone has relu layers 1..={relu_total}"
                    ));
                }
            }
        }
        let mut needs_additive = false;
        let mut needs_multiplicative = false;
        for option in &self.attention.options {
            let (mode, _) = parse_option(option)?;
            match mode {
                Mode::Additive => needs_additive = true,
                Mode::Multiplicative => needs_multiplicative = true,
            }
        }
        if needs_additive && self.attention.additive_betas.is_empty() {
            return fail("additive options requested but additive_betas is empty".into());
        }
        if needs_multiplicative && self.attention.multiplicative_betas.is_empty() {
            return fail("multiplicative options requested but multiplicative_betas is empty".into());
        }
        for beta in
            self.attention.additive_betas.iter().chain(&self.attention.multiplicative_betas)
        {
            if !(*beta >= 0.0) || !beta.is_finite() {
                return fail(format!("beta {beta} must be finite and >= 0"));
            }
        }
        if self.folds.count < 2 {
            return fail("folds.count must be >= 2 (significance needs a distribution)".into());
        }
        if self.folds.train_pos == 0 || self.folds.train_neg == 0 {
            return fail("fold training counts must be >= 1".into());
        }
        if self.folds.train_pos > self.pool.train_per_category {
            return fail(format!(
                "folds.train_pos {} exceeds train_per_category {}",
                self.folds.train_pos, self.pool.train_per_category
            ));
        }
        let neg_pool = self.pool.train_per_category * (self.categories.len() - 1);
        if self.folds.train_neg > neg_pool {
            return fail(format!(
                "folds.train_neg {} exceeds the {neg_pool} available negative training images",
                self.folds.train_neg
            ));
        }
        if !(self.classifier.reg > 0.0) {
            return fail("classifier.reg must be > 0".into());
        }
        if self.analysis.topk == 0 || self.analysis.topk > self.categories.len() {
            return fail(format!(
                "analysis.topk {} must lie in 1..={}",
                self.analysis.topk,
                self.categories.len()
            ));
        }
        Ok(())
    }

    /// The desk-scale backbone: conv+relu blocks (pool after each but the
    /// last), then fc+relu hidden layers, then the fc+softmax head.
    pub fn backbone_spec(&self) -> NetworkSpec {
        let mut layers = Vec::new();
        let mut channels = 3usize;
        let mut size = self.image_size;
        let n_conv = self.backbone.conv_channels.len();
        for (i, &out) in self.backbone.conv_channels.iter().enumerate() {
            layers.push(LayerSpec::Conv {
                in_channels: channels,
                out_channels: out,
                kernel: (3, 3),
                stride: 1,
                pad: 1,
            });
            layers.push(LayerSpec::Relu);
            if i + 1 < n_conv {
                layers.push(LayerSpec::MaxPool { k: 2, stride: 2 });
                size /= 2;
            }
            channels = out;
        }
        let mut dim = channels * size * size;
        for &out in &self.backbone.hidden_fc {
            layers.push(LayerSpec::Fc { in_dim: dim, out_dim: out });
            layers.push(LayerSpec::Relu);
            dim = out;
        }
        layers.push(LayerSpec::Fc { in_dim: dim, out_dim: self.categories.len() });
        layers.push(LayerSpec::Softmax);
        NetworkSpec { input_shape: [3, self.image_size, self.image_size], layers }
    }

    pub fn relu_count(&self) -> u32 {
        (self.backbone.conv_channels.len() + self.backbone.hidden_fc.len()) as u32
    }

    /// The sweep's options parsed into (mode, rectification) pairs, in
    /// sorted-name order.
    pub fn parsed_options(&self) -> Result<Vec<(Mode, Rectification)>> {
        self.attention.options.iter().map(|o| parse_option(o)).collect()
    }

    pub fn betas_for(&self, mode: Mode) -> &[f32] {
        match mode {
            Mode::Additive => &self.attention.additive_betas,
            Mode::Multiplicative => &self.attention.multiplicative_betas,
        }
    }
}

pub fn parse_option(name: &str) -> Result<(Mode, Rectification)> {
    let (mode, rect) = name.split_once('-').ok_or_else(|| Error::Config {
        detail: format!("bad option '{name}', expected '<mode>-<rectification>'"),
    })?;
    Ok((mode.parse()?, rect.parse()?))
}

/// Fixed output layout under one run directory.
#[derive(Debug, Clone)]
pub struct OutPaths {
    pub root: PathBuf,
}

impl OutPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        OutPaths { root: root.into() }
    }

    pub fn weights(&self) -> PathBuf {
        self.root.join("weights.fbaw")
    }

    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.csv")
    }

    pub fn patterns(&self) -> PathBuf {
        self.root.join("patterns.fbap")
    }

    pub fn imagesets_dir(&self) -> PathBuf {
        self.root.join("imagesets")
    }

    pub fn images_dir(&self) -> PathBuf {
        self.imagesets_dir().join("images")
    }

    pub fn image_file(&self, id: &str) -> PathBuf {
        self.images_dir().join(format!("{id}.ft"))
    }

    pub fn image_pnm(&self, id: &str) -> PathBuf {
        self.images_dir().join(format!("{id}.ppm"))
    }

    pub fn array_manifest(&self) -> PathBuf {
        self.imagesets_dir().join("array_manifest.txt")
    }

    pub fn merged_manifest(&self) -> PathBuf {
        self.imagesets_dir().join("merged_manifest.txt")
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results.csv")
    }

    pub fn control_results(&self) -> PathBuf {
        self.root.join("results_control.csv")
    }

    pub fn topk(&self) -> PathBuf {
        self.root.join("topk_merged.csv")
    }

    pub fn analysis_dir(&self) -> PathBuf {
        self.root.join("analysis")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml() -> String {
        "master_seed = 7\n".to_string()
    }

    #[test]
    fn defaults_parse_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, minimal_toml()).unwrap();
        let config = load_config(&path).unwrap();
        assert_eq!(config.master_seed, 7);
        assert_eq!(config.categories.len(), 8);
        assert_eq!(config.relu_count(), 6);
        let spec = config.backbone_spec();
        let info = spec.validate().unwrap();
        assert_eq!(info.relu_positions.len(), 6);
        // Detector features come from the last hidden layer.
        assert_eq!(info.feature_dim, 48);
    }

    #[test]
    fn missing_dataset_path_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "master_seed = 1\n[dataset]\nsource = \"directory\"\npath = \"/no/such/dir\"\n",
        )
        .unwrap();
        match load_config(&path) {
            Err(Error::Config { detail }) => {
                assert!(detail.contains("/no/such/dir"), "{detail}");
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn bad_layer_and_beta_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "master_seed = 1\n[attention]\nadditive_betas = [4.0]\nmultiplicative_betas = [0.2]\nlayer_sets = [[9]]\noptions = [\"additive-bidirectional\"]\n",
        )
        .unwrap();
        assert!(matches!(load_config(&path), Err(Error::Config { .. })));

        std::fs::write(
            &path,
            "master_seed = 1\n[attention]\nadditive_betas = []\nmultiplicative_betas = [0.2]\nlayer_sets = [[1]]\noptions = [\"additive-bidirectional\"]\n",
        )
        .unwrap();
        assert!(matches!(load_config(&path), Err(Error::Config { .. })));
    }

    #[test]
    fn layer_sets_normalized_for_deterministic_sweep_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "master_seed = 1\n[attention]\nadditive_betas = [8.0, 4.0]\nmultiplicative_betas = [0.2]\nlayer_sets = [[5,4],[2],[1]]\noptions = [\"additive-bidirectional\"]\n",
        )
        .unwrap();
        let config = load_config(&path).unwrap();
        assert_eq!(config.attention.layer_sets, vec![vec![1], vec![2], vec![4, 5]]);
        assert_eq!(config.attention.additive_betas, vec![4.0, 8.0]);
    }

    #[test]
    fn unknown_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "master_seed = 1\nnot_a_key = true\n").unwrap();
        assert!(matches!(load_config(&path), Err(Error::Config { .. })));
    }
}
