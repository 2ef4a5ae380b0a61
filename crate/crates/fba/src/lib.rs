//! CNN inference/training engine with category-specific feature-based
//! attention (FBA) at ReLU layers, plus the object-detection experiment
//! harness built around it: imageset synthesis, binary detectors,
//! strength/layer/option sweeps and statistics.
//!
//! FBA biases a trained network's activity toward a category's average
//! activity pattern. Patterns are z-scored per feature map from
//! spatially-averaged responses to category images; at runtime each map gets
//! one scalar modulation at the targeted ReLU layers, either added before
//! rectification or multiplied into the rectified output. Detection improves
//! on cluttered and blended images without retraining anything: classifiers
//! always train on clean images, attention only changes the features at test
//! time.
//!
//! ## Modules
//!
//! - [`tensor`] — dense f32 tensors and the conv/pool/relu/affine/softmax
//!   kernels.
//! - [`network`] — layer specs, the forward pass with attention injection,
//!   bit-exact weight serialization, and an SGD trainer.
//! - [`attention`] — activity accumulation, feature patterns, modulation
//!   terms, pattern file I/O.
//! - [`imagesets`] — the bundled synthetic-shapes pool, 2x2 array and
//!   weighted-blend composite generators, manifests, PNM/tensor file I/O.
//! - [`classify`] — logistic-regression presence detectors and fold plans.
//! - [`evaluate`] — detection records, results CSV, deltas, ROC points,
//!   win histograms with Wilcoxon significance, pattern perturbation.
//! - [`stats`] — the Wilcoxon signed-rank test.
//! - [`config`] / [`commands`] — the TOML run configuration and the five
//!   pipeline commands (`train`, `extract-patterns`, `make-imagesets`,
//!   `evaluate`, `analyze`) the thin `fba` binary dispatches to.
//!
//! ## Examples
//!
//! Each major capability has a runnable example:
//!
//! ```text
//! cargo run --example forward_trace          # forward pass + trace anatomy
//! cargo run --example attention_modulation   # additive/multiplicative FBA
//! cargo run --example train_backbone         # desk-scale SGD training
//! cargo run --example extract_patterns       # feature patterns from activity
//! cargo run --example make_imagesets         # array + merged composites
//! cargo run --example detection_folds        # fold-resampled detectors
//! cargo run --example strength_sweep         # ROC / rate trajectories vs beta
//! cargo run --example option_comparison      # win histograms + significance
//! cargo run --example perturbation_control   # true vs shuffled patterns
//! cargo run --example end_to_end             # the full pipeline, miniature
//! ```

pub mod attention;
pub mod classify;
pub mod commands;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod imagesets;
pub mod network;
pub mod stats;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
pub use tensor::Tensor;
