//! Challenge imageset synthesis: 2x2 array composites and weighted pixel
//! blends, generated deterministically from a labeled image pool.
//!
//! Every composite draws from its own random stream `(seed, index)`, so a
//! parallel generator produces the same pixels as a sequential one. Manifests
//! record full provenance (source ids, quadrants or blend weights, streams)
//! and the generators refuse source ids on a supplied exclusion list, keeping
//! detector training images disjoint from the test imagesets.

pub mod io;
pub mod shapes;

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One labeled source image with pixel values in [0, 1].
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub id: String,
    pub category: String,
    pub pixels: Tensor,
}

/// Quadrants of an array composite in row-major order.
pub const QUADRANTS: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    /// Source id, category and quadrant (0..4) for each tile.
    Array { sources: Vec<(String, String, u8)> },
    /// Two sources and the weight applied to the first.
    Merged { a: (String, String), b: (String, String), weight: f32 },
}

/// A generated test image plus everything needed to rebuild it.
#[derive(Debug, Clone)]
pub struct CompositeRecord {
    pub id: String,
    pub pixels: Tensor,
    pub categories: Vec<String>,
    pub provenance: Provenance,
    pub stream: u64,
}

impl CompositeRecord {
    pub fn contains_category(&self, category: &str) -> bool {
        self.categories.iter().any(|c| c == category)
    }
}

/// How array quadrants are filled.
#[derive(Debug, Clone, Default)]
pub enum ArrayPolicy {
    /// Four images sampled from distinct records; duplicate categories allowed.
    #[default]
    Unconstrained,
    /// Exactly one quadrant from the named category, three from others.
    ExactlyOne(String),
}

/// Bilinear resize. Same-size requests return the input bit-identically;
/// constant images stay constant.
pub fn resize(image: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor> {
    const OP: &str = "resize";
    if image.rank() != 3 {
        return Err(Error::InvalidArgument {
            op: OP,
            detail: format!("image must be rank 3, got {:?}", image.shape()),
        });
    }
    if new_h == 0 || new_w == 0 {
        return Err(Error::InvalidArgument { op: OP, detail: "target dims must be positive".into() });
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if new_h == h && new_w == w {
        return Ok(image.clone());
    }
    let mut out = Tensor::zeros(vec![c, new_h, new_w]);
    let sy = h as f64 / new_h as f64;
    let sx = w as f64 / new_w as f64;
    for y in 0..new_h {
        let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = src_y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = src_y - y0 as f64;
        for x in 0..new_w {
            let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = src_x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = src_x - x0 as f64;
            for ch in 0..c {
                let v00 = image.at3(ch, y0, x0) as f64;
                let v01 = image.at3(ch, y0, x1) as f64;
                let v10 = image.at3(ch, y1, x0) as f64;
                let v11 = image.at3(ch, y1, x1) as f64;
                let v = (1.0 - wy) * ((1.0 - wx) * v00 + wx * v01)
                    + wy * ((1.0 - wx) * v10 + wx * v11);
                out.set3(ch, y, x, v as f32);
            }
        }
    }
    Ok(out)
}

fn usable<'a>(pool: &'a [ImageRecord], exclude: &BTreeSet<String>) -> Vec<&'a ImageRecord> {
    pool.iter().filter(|r| !exclude.contains(&r.id)).collect()
}

fn check_uniform_channels(pool: &[&ImageRecord], op: &'static str) -> Result<usize> {
    let c = pool[0].pixels.shape()[0];
    for r in pool {
        if r.pixels.shape()[0] != c {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("image '{}' has {} channels, pool has {c}", r.id, r.pixels.shape()[0]),
            });
        }
    }
    Ok(c)
}

/// Generates 2x2 grid composites: four images sampled randomly from distinct
/// records, each resized to half the target size per side.
pub fn make_array(
    pool: &[ImageRecord],
    count: usize,
    seed: u64,
    target_size: usize,
    exclude: &BTreeSet<String>,
    policy: &ArrayPolicy,
) -> Result<Vec<CompositeRecord>> {
    const OP: &str = "make_array";
    if target_size % 2 != 0 || target_size == 0 {
        return Err(Error::InvalidArgument {
            op: OP,
            detail: format!("target size {target_size} must be positive and divisible by 2"),
        });
    }
    let available = usable(pool, exclude);
    match policy {
        ArrayPolicy::Unconstrained => {
            if available.len() < 4 {
                return Err(Error::InsufficientData {
                    detail: format!("array generation needs >= 4 usable images, found {}", available.len()),
                });
            }
        }
        ArrayPolicy::ExactlyOne(cat) => {
            let n_target = available.iter().filter(|r| &r.category == cat).count();
            let n_other = available.len() - n_target;
            if n_target < 1 || n_other < 3 {
                return Err(Error::InsufficientData {
                    detail: format!(
                        "exactly-one policy for '{cat}' needs 1 target + 3 other images, found {n_target} + {n_other}"
                    ),
                });
            }
        }
    }
    let channels = check_uniform_channels(&available, OP)?;
    let half = target_size / 2;

    let mut composites = Vec::with_capacity(count);
    for idx in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(idx as u64);
        let picks: Vec<&ImageRecord> = match policy {
            ArrayPolicy::Unconstrained => index_sample(&mut rng, available.len(), 4)
                .iter()
                .map(|i| available[i])
                .collect(),
            ArrayPolicy::ExactlyOne(cat) => {
                let targets: Vec<&ImageRecord> =
                    available.iter().filter(|r| &r.category == cat).copied().collect();
                let others: Vec<&ImageRecord> =
                    available.iter().filter(|r| &r.category != cat).copied().collect();
                let mut picks = vec![targets[rng.random_range(0..targets.len())]];
                picks.extend(index_sample(&mut rng, others.len(), 3).iter().map(|i| others[i]));
                // Random quadrant for the target too.
                for i in (1..4).rev() {
                    let j = rng.random_range(0..=i);
                    picks.swap(i, j);
                }
                picks
            }
        };

        let mut pixels = Tensor::zeros(vec![channels, target_size, target_size]);
        let mut sources = Vec::with_capacity(4);
        let mut categories = Vec::with_capacity(4);
        for (q, rec) in picks.iter().enumerate() {
            let tile = resize(&rec.pixels, half, half)?;
            let (qy, qx) = QUADRANTS[q];
            for ch in 0..channels {
                for y in 0..half {
                    for x in 0..half {
                        pixels.set3(ch, qy * half + y, qx * half + x, tile.at3(ch, y, x));
                    }
                }
            }
            sources.push((rec.id.clone(), rec.category.clone(), q as u8));
            categories.push(rec.category.clone());
        }
        composites.push(CompositeRecord {
            id: format!("array-{idx:05}"),
            pixels,
            categories,
            provenance: Provenance::Array { sources },
            stream: idx as u64,
        });
    }
    Ok(composites)
}

/// Generates weighted pixel blends of two images from different categories:
/// `weight * a + (1 - weight) * b`.
pub fn make_merged(
    pool: &[ImageRecord],
    count: usize,
    seed: u64,
    weight: f32,
    exclude: &BTreeSet<String>,
) -> Result<Vec<CompositeRecord>> {
    const OP: &str = "make_merged";
    if !(weight > 0.0 && weight < 1.0) {
        return Err(Error::InvalidArgument {
            op: OP,
            detail: format!("blend weight must lie strictly inside (0,1), got {weight}"),
        });
    }
    let available = usable(pool, exclude);
    let distinct: BTreeSet<&str> = available.iter().map(|r| r.category.as_str()).collect();
    if available.len() < 2 || distinct.len() < 2 {
        return Err(Error::InsufficientData {
            detail: format!(
                "merged generation needs >= 2 images from >= 2 categories, found {} images / {} categories",
                available.len(),
                distinct.len()
            ),
        });
    }
    let channels = check_uniform_channels(&available, OP)?;
    let (h, w) = (available[0].pixels.shape()[1], available[0].pixels.shape()[2]);

    let mut composites = Vec::with_capacity(count);
    for idx in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(idx as u64);
        let a = available[rng.random_range(0..available.len())];
        let others: Vec<&ImageRecord> =
            available.iter().filter(|r| r.category != a.category).copied().collect();
        let b = others[rng.random_range(0..others.len())];
        if a.pixels.shape() != [channels, h, w] || b.pixels.shape() != [channels, h, w] {
            return Err(Error::ShapeMismatch {
                op: OP,
                detail: format!("sources '{}' and '{}' must share the pool shape", a.id, b.id),
            });
        }
        let data: Vec<f32> = a
            .pixels
            .data()
            .iter()
            .zip(b.pixels.data().iter())
            .map(|(&pa, &pb)| (weight * pa + (1.0 - weight) * pb).clamp(0.0, 1.0))
            .collect();
        composites.push(CompositeRecord {
            id: format!("merged-{idx:05}"),
            pixels: Tensor::new(vec![channels, h, w], data)?,
            categories: vec![a.category.clone(), b.category.clone()],
            provenance: Provenance::Merged {
                a: (a.id.clone(), a.category.clone()),
                b: (b.id.clone(), b.category.clone()),
                weight,
            },
            stream: idx as u64,
        });
    }
    Ok(composites)
}

const MANIFEST_MAGIC: &str = "fba-imagesets";
const MANIFEST_VERSION: u32 = 1;

/// Writes composite metadata (not pixels) as one record per line, prefixed by
/// `key=value` header lines for provenance (pool hash, seeds, counts).
pub fn write_manifest(
    path: &Path,
    header: &[(String, String)],
    records: &[CompositeRecord],
) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("{MANIFEST_MAGIC} v{MANIFEST_VERSION}\n"));
    for (k, v) in header {
        out.push_str(&format!("# {k}={v}\n"));
    }
    for r in records {
        match &r.provenance {
            Provenance::Array { sources } => {
                let src: Vec<String> =
                    sources.iter().map(|(id, _, q)| format!("{id}@{q}")).collect();
                out.push_str(&format!(
                    "array {} stream={} sources={} categories={}\n",
                    r.id,
                    r.stream,
                    src.join("+"),
                    r.categories.join("+")
                ));
            }
            Provenance::Merged { a, b, weight } => {
                out.push_str(&format!(
                    "merged {} stream={} sources={}+{} categories={} weight={}\n",
                    r.id,
                    r.stream,
                    a.0,
                    b.0,
                    r.categories.join("+"),
                    weight
                ));
            }
        }
    }
    out.push_str("end\n");
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parsed manifest line; pixels are stored separately.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub kind: String,
    pub id: String,
    pub stream: u64,
    pub sources: Vec<(String, Option<u8>)>,
    pub categories: Vec<String>,
    pub weight: Option<f32>,
}

pub fn read_manifest(path: &Path) -> Result<(Vec<(String, String)>, Vec<ManifestEntry>)> {
    let pstr = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(pstr.clone(), e))?;
    let inconsistent =
        |detail: String| Error::FormatInconsistency { path: pstr.clone(), detail };
    let mut lines = text.lines();
    let first = lines.next().ok_or_else(|| Error::BadMagic { path: pstr.clone() })?;
    let mut hp = first.split_whitespace();
    if hp.next() != Some(MANIFEST_MAGIC) {
        return Err(Error::BadMagic { path: pstr.clone() });
    }
    match hp.next().and_then(|v| v.strip_prefix('v')).and_then(|v| v.parse::<u32>().ok()) {
        Some(v) if v == MANIFEST_VERSION => {}
        Some(v) => {
            return Err(Error::VersionMismatch { path: pstr, found: v, expected: MANIFEST_VERSION })
        }
        None => return Err(inconsistent("missing version".into())),
    }

    let mut header = Vec::new();
    let mut entries = Vec::new();
    let mut saw_end = false;
    for line in lines {
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.trim().split_once('=') {
                header.push((k.to_string(), v.to_string()));
            }
            continue;
        }
        if line == "end" {
            saw_end = true;
            break;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let kind = parts.next().unwrap().to_string();
        if kind != "array" && kind != "merged" {
            return Err(inconsistent(format!("unknown record kind '{kind}'")));
        }
        let id = parts.next().ok_or_else(|| inconsistent("record without id".into()))?.to_string();
        let mut stream = None;
        let mut sources = Vec::new();
        let mut categories = Vec::new();
        let mut weight = None;
        for field in parts {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| inconsistent(format!("bad field '{field}' in record {id}")))?;
            match k {
                "stream" => {
                    stream =
                        Some(v.parse().map_err(|_| inconsistent(format!("bad stream '{v}'")))?)
                }
                "sources" => {
                    for s in v.split('+') {
                        match s.split_once('@') {
                            Some((sid, q)) => sources.push((
                                sid.to_string(),
                                Some(q.parse().map_err(|_| {
                                    inconsistent(format!("bad quadrant '{q}' in record {id}"))
                                })?),
                            )),
                            None => sources.push((s.to_string(), None)),
                        }
                    }
                }
                "categories" => categories = v.split('+').map(|s| s.to_string()).collect(),
                "weight" => {
                    weight =
                        Some(v.parse().map_err(|_| inconsistent(format!("bad weight '{v}'")))?)
                }
                other => return Err(inconsistent(format!("unknown field '{other}'"))),
            }
        }
        let expected_sources = if kind == "array" { 4 } else { 2 };
        if sources.len() != expected_sources || categories.len() != expected_sources {
            return Err(inconsistent(format!(
                "record {id}: {} sources / {} categories, expected {expected_sources}",
                sources.len(),
                categories.len()
            )));
        }
        entries.push(ManifestEntry {
            kind,
            id,
            stream: stream.ok_or_else(|| inconsistent("record without stream".into()))?,
            sources,
            categories,
            weight,
        });
    }
    if !saw_end {
        return Err(Error::TruncatedPayload { path: pstr, tensor: "manifest".into() });
    }
    Ok((header, entries))
}
