//! On-disk corpora:
//!
//! ```text
//! root/manifest.txt      one sample id per line
//! root/legend.txt        R,G,B,class_id,name per line
//! root/images/<id>.<ext> any readable raster format
//! root/masks/<id>.<ext>  lossless color masks (png, bmp, tif/tiff, ppm)
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use rayon::prelude::*;

use super::{decode_mask, encode_mask, ClassMap, LegendMap, SegmentationSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const LEGEND_FILE: &str = "legend.txt";

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff", "ppm"];
const MASK_EXTENSIONS: &[&str] = &["png", "bmp", "tif", "tiff", "ppm"];
const LOSSY_EXTENSIONS: &[&str] = &["jpg", "jpeg"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Clone, Debug)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub legend: LegendMap,
    pub num_classes: usize,
}

fn find_with_extension(dir: &Path, id: &str, exts: &[&str]) -> Option<PathBuf> {
    exts.iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

impl CorpusManifest {
    /// Reads the manifest and legend under `root` and resolves every file.
    pub fn open(root: &Path) -> Result<Self> {
        let legend = LegendMap::load(&root.join(LEGEND_FILE))?;
        let manifest_path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let mut entries = Vec::new();
        for id in text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
        {
            let image = find_with_extension(&root.join("images"), id, IMAGE_EXTENSIONS).ok_or_else(|| {
                Error::Corpus(format!(
                    "no image file for sample '{id}' under {}",
                    root.join("images").display()
                ))
            })?;
            let masks = root.join("masks");
            let mask = match find_with_extension(&masks, id, MASK_EXTENSIONS) {
                Some(p) => p,
                None => match find_with_extension(&masks, id, LOSSY_EXTENSIONS) {
                    Some(p) => {
                        return Err(Error::Corpus(format!(
                            "{}: masks must be lossless (png, bmp, tiff, ppm)",
                            p.display()
                        )))
                    }
                    None => {
                        return Err(Error::Corpus(format!(
                            "no mask file for sample '{id}' under {}",
                            masks.display()
                        )))
                    }
                },
            };
            entries.push(ManifestEntry {
                id: id.to_owned(),
                image,
                mask,
            });
        }
        let num_classes = legend.num_classes();
        let manifest = Self {
            root: root.to_path_buf(),
            entries,
            legend,
            num_classes,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.id) {
                return Err(Error::Corpus(format!("duplicate sample id '{}'", e.id)));
            }
            for p in [&e.image, &e.mask] {
                if !p.is_file() {
                    return Err(Error::Corpus(format!("missing file {}", p.display())));
                }
            }
            if let Some(ext) = e.mask.extension().and_then(|x| x.to_str()) {
                if LOSSY_EXTENSIONS.contains(&ext.to_ascii_lowercase().as_str()) {
                    return Err(Error::Corpus(format!(
                        "{}: masks must be lossless (png, bmp, tiff, ppm)",
                        e.mask.display()
                    )));
                }
            }
        }
        if self.num_classes != self.legend.num_classes() {
            return Err(Error::Corpus(format!(
                "declared {} classes but legend has {}",
                self.num_classes,
                self.legend.num_classes()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LoadOptions {
    /// Target `(height, width)`; `None` keeps the native size.
    pub resolution: Option<(usize, usize)>,
    /// Both spatial dims must be multiples of this (the network's
    /// `2^stages`).
    pub size_multiple: usize,
    pub strict: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            resolution: None,
            size_multiple: 1,
            strict: true,
        }
    }
}

fn resize_nearest(mask: &ClassMap, h: usize, w: usize) -> ClassMap {
    if mask.height() == h && mask.width() == w {
        return mask.clone();
    }
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = ((y as f64 + 0.5) * mask.height() as f64 / h as f64) as usize;
        for x in 0..w {
            let sx = ((x as f64 + 0.5) * mask.width() as f64 / w as f64) as usize;
            data.push(mask.get(sy.min(mask.height() - 1), sx.min(mask.width() - 1)));
        }
    }
    ClassMap::from_vec(h, w, data).expect("sized above")
}

fn load_one(
    entry: &ManifestEntry,
    legend: &LegendMap,
    num_classes: usize,
    opts: &LoadOptions,
) -> Result<SegmentationSample> {
    let open = |p: &Path| {
        image::open(p).map_err(|source| Error::Image {
            path: p.to_path_buf(),
            source,
        })
    };
    let rgb = open(&entry.image)?.to_rgb8();
    let mask_rgb = open(&entry.mask)?.to_rgb8();
    if rgb.dimensions() != mask_rgb.dimensions() {
        return Err(Error::Corpus(format!(
            "sample '{}': image is {:?} but mask is {:?}",
            entry.id,
            rgb.dimensions(),
            mask_rgb.dimensions()
        )));
    }
    let mask = decode_mask(&mask_rgb, legend, opts.strict).map_err(|e| match e {
        Error::UnknownColor { r, g, b, row, col, .. } => Error::UnknownColor {
            r,
            g,
            b,
            row,
            col,
            file: Some(entry.mask.clone()),
        },
        other => other,
    })?;
    let (h, w) = opts.resolution.unwrap_or((rgb.height() as usize, rgb.width() as usize));
    let m = opts.size_multiple.max(1);
    if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::Corpus(format!(
            "sample '{}': resolution {h}x{w} is not a positive multiple of {m}",
            entry.id
        )));
    }
    let rgb = if (rgb.height() as usize, rgb.width() as usize) == (h, w) {
        rgb
    } else {
        imageops::resize(&rgb, w as u32, h as u32, FilterType::Triangle)
    };
    let mask = resize_nearest(&mask, h, w);
    let plane = h * w;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px.0[c] as f32 / 255.0;
        }
    }
    let sample = SegmentationSample::new(entry.id.clone(), Tensor::from_vec(&[3, h, w], data)?, mask)?;
    sample.check_classes(num_classes)?;
    Ok(sample)
}

/// Decodes and normalizes every sample, ordered by sample id.
pub fn load_corpus(manifest: &CorpusManifest, opts: &LoadOptions) -> Result<Vec<SegmentationSample>> {
    manifest.validate()?;
    let mut samples = manifest
        .entries
        .par_iter()
        .map(|e| load_one(e, &manifest.legend, manifest.num_classes, opts))
        .collect::<Result<Vec<_>>>()?;
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(samples)
}

/// Writes `samples` in the on-disk layout: images as 8-bit PNG, masks as
/// PNG through `legend`. Returns the manifest of the written corpus.
pub fn save_corpus(samples: &[SegmentationSample], legend: &LegendMap, root: &Path) -> Result<CorpusManifest> {
    let (images, masks) = (root.join("images"), root.join("masks"));
    for dir in [&images, &masks] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut ids = String::new();
    for s in samples {
        s.check_classes(legend.num_classes())?;
        let shape = s.image.shape();
        let (h, w) = (shape[1], shape[2]);
        let plane = h * w;
        let data = s.image.data();
        let rgb = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            image::Rgb([0, 1, 2].map(|c| (data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
        });
        let save =
            |img: &image::RgbImage, path: PathBuf| img.save(&path).map_err(|source| Error::Image { path, source });
        save(&rgb, images.join(format!("{}.png", s.id)))?;
        save(&encode_mask(&s.mask, legend)?, masks.join(format!("{}.png", s.id)))?;
        ids.push_str(&s.id);
        ids.push('\n');
    }
    let write = |name: &str, text: &str| {
        let path = root.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write(LEGEND_FILE, &legend.to_text())?;
    write(MANIFEST_FILE, &ids)?;
    CorpusManifest::open(root)
}
