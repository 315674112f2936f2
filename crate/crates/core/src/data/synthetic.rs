//! Deterministic synthetic segmentation corpora: colored rectangles,
//! ellipses and stripes over a class-0 background. Each region's pixels are
//! its class color plus uniform noise, and the mask is exact by
//! construction.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ClassMap, LegendEntry, LegendMap, SegmentationSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Half-open pixel box.
    Rect {
        top: usize,
        left: usize,
        bottom: usize,
        right: usize,
    },
    /// Axis-aligned ellipse tested at pixel centers.
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    /// Full-length band; `start..start + thickness` rows or columns.
    Stripe {
        vertical: bool,
        start: usize,
        thickness: usize,
    },
}

impl Shape {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        match *self {
            Shape::Rect {
                top,
                left,
                bottom,
                right,
            } => (top..bottom).contains(&row) && (left..right).contains(&col),
            Shape::Ellipse { cy, cx, ry, rx } => {
                let dy = (row as f64 + 0.5 - cy) / ry;
                let dx = (col as f64 + 0.5 - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
            Shape::Stripe {
                vertical,
                start,
                thickness,
            } => {
                let v = if vertical { col } else { row };
                (start..start + thickness).contains(&v)
            }
        }
    }

    /// Row/column bounds `(top, left, bottom, right)` enclosing the shape.
    fn bounds(&self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        match *self {
            Shape::Rect {
                top,
                left,
                bottom,
                right,
            } => (top, left, bottom.min(h), right.min(w)),
            Shape::Ellipse { cy, cx, ry, rx } => (
                (cy - ry).floor().max(0.0) as usize,
                (cx - rx).floor().max(0.0) as usize,
                ((cy + ry).ceil() as usize).min(h),
                ((cx + rx).ceil() as usize).min(w),
            ),
            Shape::Stripe {
                vertical: true,
                start,
                thickness,
            } => (0, start, h, (start + thickness).min(w)),
            Shape::Stripe {
                vertical: false,
                start,
                thickness,
            } => (start, 0, (start + thickness).min(h), w),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Region {
    pub class: u8,
    pub shape: Shape,
}

/// Which foreground classes each sample contains.
#[derive(Clone, Debug, PartialEq)]
pub enum Presence {
    /// Each foreground class independently with this probability.
    Bernoulli(f64),
    /// Exact foreground class sets, cycled over the samples.
    Explicit(Vec<BTreeSet<u8>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub presence: Presence,
    /// Half-width of the uniform per-channel color noise.
    pub noise: f32,
    /// Prefix for sample ids (`<prefix><index>`).
    pub id_prefix: String,
}

impl SyntheticConfig {
    pub fn new(n: usize, classes: usize, (height, width): (usize, usize), seed: u64) -> Self {
        Self {
            n,
            classes,
            height,
            width,
            seed,
            presence: Presence::Bernoulli(0.5),
            noise: 0.15,
            id_prefix: "syn".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub sample: SegmentationSample,
    /// Paint order; later regions cover earlier ones.
    pub regions: Vec<Region>,
    /// Foreground classes visible in the mask (class 0 is the background).
    pub present: BTreeSet<u8>,
}

/// Class color in `[0, 1]³`: dark grey background, evenly spaced hues for
/// the foreground classes.
pub fn class_color(class: u8, classes: usize) -> [f32; 3] {
    if class == 0 {
        return [0.25, 0.25, 0.25];
    }
    let hue = (class as f32 - 1.0) / (classes.max(2) - 1) as f32 * 6.0;
    let (s, v) = (0.85f32, 0.95f32);
    let c = v * s;
    let x = c * (1.0 - ((hue % 2.0) - 1.0).abs());
    let (r, g, b) = match hue as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Legend for exporting synthetic masks: each class's color rounded to
/// 8 bits, nudged in the blue channel where two classes would collide.
pub fn synthetic_legend(classes: usize) -> Result<LegendMap> {
    if !(2..=255).contains(&classes) {
        return Err(Error::InvalidArgument(format!(
            "classes must be in 2..=255, got {classes}"
        )));
    }
    let mut taken = BTreeSet::new();
    let entries = (0..classes as u8)
        .map(|class| {
            let mut color = class_color(class, classes).map(|v| (v * 255.0).round() as u8);
            while !taken.insert(color) {
                color[2] = color[2].wrapping_add(1);
            }
            LegendEntry {
                color,
                class_id: class,
                name: if class == 0 {
                    "background".into()
                } else {
                    format!("class{class}")
                },
            }
        })
        .collect();
    LegendMap::new(entries)
}

fn random_shape(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Shape {
    let span = |rng: &mut ChaCha8Rng, dim: usize| rng.gen_range((dim / 6).max(2)..=(dim * 2 / 5).max(3));
    match rng.gen_range(0..3) {
        0 => {
            let (rh, rw) = (span(rng, h).min(h), span(rng, w).min(w));
            let top = rng.gen_range(0..=h - rh);
            let left = rng.gen_range(0..=w - rw);
            Shape::Rect {
                top,
                left,
                bottom: top + rh,
                right: left + rw,
            }
        }
        1 => {
            let ry = span(rng, h) as f64 / 2.0;
            let rx = span(rng, w) as f64 / 2.0;
            Shape::Ellipse {
                cy: rng.gen_range(ry..=(h as f64 - ry).max(ry)),
                cx: rng.gen_range(rx..=(w as f64 - rx).max(rx)),
                ry,
                rx,
            }
        }
        _ => {
            let vertical = rng.gen_bool(0.5);
            let dim = if vertical { w } else { h };
            let thickness = rng.gen_range((dim / 16).max(1)..=(dim / 6).max(2)).min(dim);
            Shape::Stripe {
                vertical,
                start: rng.gen_range(0..=dim - thickness),
                thickness,
            }
        }
    }
}

fn paint(mask: &mut ClassMap, region: &Region) {
    let (top, left, bottom, right) = region.shape.bounds(mask.height(), mask.width());
    for row in top..bottom {
        for col in left..right {
            if region.shape.contains(row, col) {
                mask.set(row, col, region.class);
            }
        }
    }
}

fn visible(mask: &ClassMap) -> BTreeSet<u8> {
    mask.data().iter().copied().filter(|&c| c != 0).collect()
}

fn generate_one(config: &SyntheticConfig, index: usize) -> Result<SyntheticSample> {
    let (h, w, k) = (config.height, config.width, config.classes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64 + 1);
    let wanted: BTreeSet<u8> = match &config.presence {
        Presence::Bernoulli(p) => (1..k as u8).filter(|_| rng.gen_bool(*p)).collect(),
        Presence::Explicit(sets) => sets[index % sets.len()].clone(),
    };
    let mut regions = Vec::new();
    for &class in &wanted {
        for _ in 0..rng.gen_range(1..=2) {
            regions.push(Region {
                class,
                shape: random_shape(&mut rng, h, w),
            });
        }
    }
    regions.shuffle(&mut rng);
    let mut mask = ClassMap::filled(h, w, 0);
    for r in &regions {
        paint(&mut mask, r);
    }
    // Re-paint any class that ended up fully covered, as a small box on top.
    for _ in 0..4 * k {
        let Some(&missing) = wanted.difference(&visible(&mask)).next() else {
            break;
        };
        let (bh, bw) = ((h / 8).max(2), (w / 8).max(2));
        let top = rng.gen_range(0..=h - bh);
        let left = rng.gen_range(0..=w - bw);
        let r = Region {
            class: missing,
            shape: Shape::Rect {
                top,
                left,
                bottom: top + bh,
                right: left + bw,
            },
        };
        paint(&mut mask, &r);
        regions.push(r);
    }
    let present = visible(&mask);
    if present != wanted {
        return Err(Error::InvalidArgument(format!(
            "sample {index}: could not make classes {wanted:?} visible"
        )));
    }
    let plane = h * w;
    let mut data = vec![0f32; 3 * plane];
    let palette: Vec<[f32; 3]> = (0..k as u8).map(|c| class_color(c, k)).collect();
    for (i, &class) in mask.data().iter().enumerate() {
        for c in 0..3 {
            let noise = if config.noise > 0.0 {
                rng.gen_range(-config.noise..config.noise)
            } else {
                0.0
            };
            data[c * plane + i] = (palette[class as usize][c] + noise).clamp(0.0, 1.0);
        }
    }
    let id = format!("{}{index:05}", config.id_prefix);
    Ok(SyntheticSample {
        sample: SegmentationSample::new(id, Tensor::from_vec(&[3, h, w], data)?, mask)?,
        regions,
        present,
    })
}

/// Generates the corpus together with each sample's region geometry.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Vec<SyntheticSample>> {
    if config.classes < 2 || config.classes > 255 {
        return Err(Error::InvalidArgument(format!(
            "classes must be in 2..=255, got {}",
            config.classes
        )));
    }
    if config.height < 4 || config.width < 4 || !config.height.is_multiple_of(4) || !config.width.is_multiple_of(4) {
        return Err(Error::InvalidArgument(format!(
            "size {}x{} must be positive multiples of 4",
            config.height, config.width
        )));
    }
    match &config.presence {
        Presence::Bernoulli(p) if !(0.0..=1.0).contains(p) => {
            return Err(Error::InvalidArgument(format!(
                "presence probability {p} outside [0, 1]"
            )))
        }
        Presence::Explicit(sets) => {
            if sets.is_empty() && config.n > 0 {
                return Err(Error::InvalidArgument("explicit presence list is empty".into()));
            }
            if sets.iter().flatten().any(|&c| c == 0 || c as usize >= config.classes) {
                return Err(Error::InvalidArgument(
                    "explicit presence sets may only name foreground classes".into(),
                ));
            }
        }
        _ => {}
    }
    (0..config.n).map(|i| generate_one(config, i)).collect()
}

/// `n` samples with `classes` classes at `size = (height, width)`.
pub fn generate_synthetic_corpus(
    n: usize,
    classes: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<Vec<SegmentationSample>> {
    Ok(generate_synthetic(&SyntheticConfig::new(n, classes, size, seed))?
        .into_iter()
        .map(|s| s.sample)
        .collect())
}
