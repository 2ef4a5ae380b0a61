//! The full pipeline in miniature, through the same command functions the
//! CLI dispatches to: train -> extract-patterns -> make-imagesets ->
//! evaluate -> analyze, all inside a temp directory.

use fba::commands;
use fba::config::{load_config, OutPaths};

const CONFIG: &str = r#"
master_seed = 424242
categories = ["box", "checker", "disk", "vstripes"]

[pool]
backbone_per_category = 30
pattern_per_category = 16
train_per_category = 20
test_per_category = 16

[backbone]
conv_channels = [6, 12]
hidden_fc = [24]
lr = 0.02
momentum = 0.9
epochs = 8
batch = 16

[imagesets]
array_count = 60
merged_count = 60
merged_weight = 0.5
test_pos = 20
test_neg = 20

[attention]
additive_betas = [6.0, 12.0]
multiplicative_betas = [0.4, 0.8]
layer_sets = [[2], [3]]
options = ["multiplicative-bidirectional", "additive-bidirectional"]
attended_imagesets = ["array"]

[folds]
count = 4
train_pos = 12
train_neg = 12

[control]
shuffle = true
seed = 3
"#;

fn main() -> fba::Result<()> {
    let dir = std::env::temp_dir().join("fba-end-to-end");
    std::fs::create_dir_all(&dir).expect("temp dir");
    let config_path = dir.join("run.toml");
    std::fs::write(&config_path, CONFIG).expect("write config");

    let config = load_config(&config_path)?;
    let paths = OutPaths::new(dir.join("out"));
    let _ = std::fs::remove_dir_all(&paths.root);

    let trained = commands::cmd_train(&config, &paths)?;
    println!("train: {} epochs, final accuracy {:.3}", trained.epochs, trained.final_accuracy);

    let patterns = commands::cmd_extract_patterns(&config, &paths)?;
    println!("patterns: {} relu layers with channels {:?}", patterns.channels.len(), patterns.channels);

    let sets = commands::cmd_make_imagesets(&config, &paths)?;
    println!("imagesets: {} array + {} merged", sets.array_count, sets.merged_count);

    let eval = commands::cmd_evaluate(&config, &paths, None, false)?;
    println!("evaluate: {} records -> {}", eval.records_written, eval.results_path.display());

    let analysis = commands::cmd_analyze(&config, &paths)?;
    println!("analyze wrote:");
    for f in &analysis.files {
        println!("  {}", f.display());
    }

    // A taste of the outcome: the best strength per condition.
    let best = std::fs::read_to_string(paths.analysis_dir().join("best_deltas.csv")).unwrap();
    println!("\nbest_deltas.csv:\n{best}");
    Ok(())
}
