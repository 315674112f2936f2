//! Segmentation samples, color-legend mask coding, on-disk corpora and the
//! synthetic corpus generator.

mod corpus;
mod legend;
mod synthetic;

pub use corpus::{load_corpus, save_corpus, CorpusManifest, LoadOptions, ManifestEntry, LEGEND_FILE, MANIFEST_FILE};
pub use legend::{decode_mask, encode_mask, LegendEntry, LegendMap};
pub use synthetic::{
    class_color, generate_synthetic, generate_synthetic_corpus, synthetic_legend, Presence, Region, Shape,
    SyntheticConfig, SyntheticSample,
};

use crate::error::{Error, Result};
use crate::loss::IGNORE_INDEX;
use crate::tensor::Tensor;

/// Per-pixel class ids in row-major order; [`IGNORE_INDEX`] marks unlabeled
/// pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ClassMap {
    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "class map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, class: u8) {
        self.data[row * self.width + col] = class;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    pub id: String,
    /// `(channels, h, w)`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub mask: ClassMap,
}

impl SegmentationSample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: ClassMap) -> Result<Self> {
        let id = id.into();
        let s = image.shape();
        if s.len() != 3 || s[1] != mask.height() || s[2] != mask.width() {
            return Err(Error::Shape(format!(
                "sample {id}: image {s:?} does not match mask {}x{}",
                mask.height(),
                mask.width()
            )));
        }
        Ok(Self { id, image, mask })
    }

    /// Errors if any mask value is outside `[0, num_classes) ∪ {IGNORE_INDEX}`.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self
            .mask
            .data()
            .iter()
            .find(|&&c| c != IGNORE_INDEX && c as usize >= num_classes)
        {
            Some(c) => Err(Error::Corpus(format!(
                "sample {}: class {c} out of range for {num_classes} classes",
                self.id
            ))),
            None => Ok(()),
        }
    }
}
