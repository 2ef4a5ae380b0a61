//! Generate the two challenge imagesets from a synthetic pool and write them
//! to disk: raw tensors, PPM previews for eyeballing, and a manifest with
//! full provenance.

use std::collections::BTreeSet;

use fba::imagesets::io::{save_pnm, save_tensor};
use fba::imagesets::shapes::{synthetic_pool, ShapePoolConfig, SHAPE_CATEGORIES};
use fba::imagesets::{make_array, make_merged, write_manifest, ArrayPolicy, Provenance};

fn main() -> fba::Result<()> {
    let pool = synthetic_pool(&ShapePoolConfig {
        categories: SHAPE_CATEGORIES.iter().map(|s| s.to_string()).collect(),
        per_category: 8,
        size: 32,
        seed: 4,
    })?;

    // Pretend the first image of every category was used for training: the
    // generators must not touch it.
    let exclude: BTreeSet<String> =
        pool.iter().filter(|r| r.id.ends_with("-0000")).map(|r| r.id.clone()).collect();

    let arrays = make_array(&pool, 6, 11, 32, &exclude, &ArrayPolicy::Unconstrained)?;
    let merged = make_merged(&pool, 6, 12, 0.5, &exclude)?;

    let out = std::env::temp_dir().join("fba-imagesets-example");
    std::fs::create_dir_all(&out).expect("create output dir");
    for record in arrays.iter().chain(merged.iter()) {
        save_tensor(&out.join(format!("{}.ft", record.id)), &record.pixels)?;
        save_pnm(&out.join(format!("{}.ppm", record.id)), &record.pixels)?;
        match &record.provenance {
            Provenance::Array { sources } => {
                let desc: Vec<String> =
                    sources.iter().map(|(id, _, q)| format!("{id}@q{q}")).collect();
                println!("{}: 2x2 grid of {}", record.id, desc.join(", "));
            }
            Provenance::Merged { a, b, weight } => {
                println!("{}: {:.2}*{} + {:.2}*{}", record.id, weight, a.0, 1.0 - weight, b.0);
            }
        }
    }
    let mut all = arrays;
    all.extend(merged);
    let manifest = out.join("manifest.txt");
    write_manifest(&manifest, &[("seed".to_string(), "11/12".to_string())], &all)?;
    println!("\nwrote {} composites + manifest under {}", all.len(), out.display());
    Ok(())
}
