//! Sweep attention strength and trace what it does to the detector's error
//! profile: ROC points per beta and the change in false-positive /
//! false-negative rates from baseline. Runs on fabricated records so it
//! executes instantly; the full pipeline produces the same tables from real
//! sweeps (`fba analyze`).

use fba::attention::{Mode, Rectification};
use fba::evaluate::{rate_trajectory, roc_by_strength, AttentionDesc, EvalRecord, ImagesetKind};

fn record(attention: Option<AttentionDesc>, fold: u32, tp: u32, fp: u32) -> EvalRecord {
    EvalRecord::new("disk".into(), ImagesetKind::Array, attention, fold, tp, fp, 100 - fp, 100 - tp)
}

fn desc(beta: f32) -> AttentionDesc {
    AttentionDesc {
        mode: Mode::Multiplicative,
        rectification: Rectification::Bidirectional,
        layers: vec![5],
        beta,
    }
}

fn main() -> fba::Result<()> {
    // A plausible strength profile: rising strength first recovers misses
    // (fn drops fast), then starts inventing detections (fp catches up).
    let mut records = Vec::new();
    for fold in 0..5 {
        records.push(record(None, fold, 52 + fold, 9 + fold));
        for (beta, tp, fp) in
            [(0.2, 58, 10), (0.4, 66, 12), (0.6, 74, 15), (0.8, 79, 22), (1.0, 80, 33), (1.2, 78, 45)]
        {
            records.push(record(Some(desc(beta)), fold, tp + fold, fp + fold));
        }
    }

    let points = roc_by_strength(
        &records,
        "disk",
        ImagesetKind::Array,
        Mode::Multiplicative,
        Rectification::Bidirectional,
        &[5],
    )?;
    println!("ROC by strength (fold-averaged):");
    println!("  beta   fpr     tpr");
    for p in &points {
        println!("  {:<5}  {:.3}   {:.3}", p.beta, p.fpr, p.tpr);
    }

    let trajectory = rate_trajectory(
        &records,
        "disk",
        ImagesetKind::Array,
        Mode::Multiplicative,
        Rectification::Bidirectional,
        &[5],
    )?;
    println!("\nchange from baseline:");
    println!("  beta   d_fpr    d_fnr");
    for p in &trajectory {
        println!("  {:<5}  {:+.3}   {:+.3}", p.beta, p.delta_fpr, p.delta_fnr);
    }
    println!("\nthe useful regime is where the fn rate falls faster than the fp rate rises;");
    println!("past it, extra strength only buys false alarms.");
    Ok(())
}
