//! Bundled synthetic-shapes image pool.
//!
//! Eight parametric shape/texture categories rendered as RGB images with
//! randomized position, size, colors and pixel noise. Every image is drawn
//! from its own random stream derived from (seed, pool index), so generation
//! order and threading never change the pixels.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imagesets::ImageRecord;
use crate::tensor::Tensor;

pub const SHAPE_CATEGORIES: [&str; 8] =
    ["box", "checker", "cross", "disk", "hstripes", "ring", "triangle", "vstripes"];

#[derive(Debug, Clone)]
pub struct ShapePoolConfig {
    pub categories: Vec<String>,
    pub per_category: usize,
    pub size: usize,
    pub seed: u64,
}

struct Params {
    cx: f32,
    cy: f32,
    radius: f32,
    thickness: f32,
    period: usize,
    phase: usize,
    fg: [f32; 3],
    bg: [f32; 3],
}

fn draw(category: &str, size: usize, p: &Params, img: &mut Tensor) -> Result<()> {
    let inside = |x: usize, y: usize| -> bool {
        let dx = x as f32 - p.cx;
        let dy = y as f32 - p.cy;
        match category {
            "disk" => dx * dx + dy * dy <= p.radius * p.radius,
            "ring" => {
                let d2 = dx * dx + dy * dy;
                let inner = (p.radius - p.thickness).max(0.0);
                d2 <= p.radius * p.radius && d2 >= inner * inner
            }
            "cross" => {
                (dx.abs() <= p.thickness || dy.abs() <= p.thickness)
                    && dx.abs() <= p.radius
                    && dy.abs() <= p.radius
            }
            "box" => {
                let m = dx.abs().max(dy.abs());
                m <= p.radius && m >= p.radius - p.thickness
            }
            "triangle" => {
                // Filled isoceles triangle pointing up.
                if dy < -p.radius || dy > p.radius {
                    return false;
                }
                let half_width = (dy + p.radius) / (2.0 * p.radius) * p.radius;
                dx.abs() <= half_width
            }
            "hstripes" => (y + p.phase) / p.period % 2 == 0,
            "vstripes" => (x + p.phase) / p.period % 2 == 0,
            "checker" => ((x + p.phase) / p.period + (y + p.phase) / p.period) % 2 == 0,
            _ => false,
        }
    };
    for y in 0..size {
        for x in 0..size {
            let color = if inside(x, y) { &p.fg } else { &p.bg };
            for ch in 0..3 {
                img.set3(ch, y, x, color[ch]);
            }
        }
    }
    Ok(())
}

fn render(category: &str, size: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let s = size as f32;
    let jitter = s / 8.0;
    let params = Params {
        cx: s / 2.0 + rng.random_range(-jitter..jitter),
        cy: s / 2.0 + rng.random_range(-jitter..jitter),
        // Wide scale range so half-size renditions (array quadrants) stay
        // inside the distribution the backbone saw.
        radius: rng.random_range(s / 6.0..s / 2.6),
        thickness: rng.random_range(s / 16.0..s / 9.0),
        period: rng.random_range(3..=6),
        phase: rng.random_range(0..6),
        fg: [
            rng.random_range(0.55f32..0.95),
            rng.random_range(0.55f32..0.95),
            rng.random_range(0.55f32..0.95),
        ],
        bg: [
            rng.random_range(0.05f32..0.35),
            rng.random_range(0.05f32..0.35),
            rng.random_range(0.05f32..0.35),
        ],
    };
    let mut img = Tensor::zeros(vec![3, size, size]);
    draw(category, size, &params, &mut img)?;
    for v in img.data_mut() {
        *v = (*v + rng.random_range(-0.03f32..0.03)).clamp(0.0, 1.0);
    }
    Ok(img)
}

/// Generates the labeled pool. Ids are `<category>-<index>` with the index
/// zero-padded so lexicographic order matches generation order.
pub fn synthetic_pool(cfg: &ShapePoolConfig) -> Result<Vec<ImageRecord>> {
    if cfg.per_category == 0 {
        return Err(Error::InvalidArgument {
            op: "synthetic_pool",
            detail: "per_category must be >= 1".into(),
        });
    }
    if cfg.size < 8 {
        return Err(Error::InvalidArgument {
            op: "synthetic_pool",
            detail: format!("image size {} too small", cfg.size),
        });
    }
    for cat in &cfg.categories {
        if !SHAPE_CATEGORIES.contains(&cat.as_str()) {
            return Err(Error::UnknownCategory { category: cat.clone() });
        }
    }
    let mut pool = Vec::with_capacity(cfg.categories.len() * cfg.per_category);
    for (ci, cat) in cfg.categories.iter().enumerate() {
        for i in 0..cfg.per_category {
            let stream = (ci * cfg.per_category + i) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(stream);
            let pixels = render(cat, cfg.size, &mut rng)?;
            pool.push(ImageRecord {
                id: format!("{cat}-{i:04}"),
                category: cat.clone(),
                pixels,
            });
        }
    }
    Ok(pool)
}
