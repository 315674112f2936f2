use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use image::RgbImage;

use super::ClassMap;
use crate::error::{Error, Result};
use crate::loss::IGNORE_INDEX;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LegendEntry {
    pub color: [u8; 3],
    pub class_id: u8,
    pub name: String,
}

/// Color ↔ class correspondence used to paint and read annotation masks.
///
/// Class ids are contiguous from 0. At most 255 classes fit, since 255 is
/// the ignore sentinel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LegendMap {
    /// Indexed by class id.
    entries: Vec<LegendEntry>,
    by_color: HashMap<[u8; 3], u8>,
    ignore_color: [u8; 3],
}

impl LegendMap {
    pub fn new(mut entries: Vec<LegendEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Legend("legend is empty".into()));
        }
        if entries.len() > IGNORE_INDEX as usize {
            return Err(Error::Legend(format!(
                "{} classes exceed the limit of {}",
                entries.len(),
                IGNORE_INDEX
            )));
        }
        entries.sort_by_key(|e| e.class_id);
        let mut by_color = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.class_id as usize != i {
                return Err(Error::Legend(format!(
                    "class ids must be contiguous from 0; expected {i}, found {}",
                    e.class_id
                )));
            }
            if by_color.insert(e.color, e.class_id).is_some() {
                return Err(Error::Legend(format!(
                    "color {:?} is assigned to more than one class",
                    e.color
                )));
            }
        }
        let ignore_color = (0u32..1 << 24)
            .map(|v| [(v >> 16) as u8, (v >> 8) as u8, v as u8])
            .find(|c| !by_color.contains_key(c))
            .expect("at most 255 colors are taken");
        Ok(Self {
            entries,
            by_color,
            ignore_color,
        })
    }

    /// Parses one `R,G,B,class_id,name` record per line. Blank lines and
    /// lines starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.splitn(5, ',').map(str::trim).collect();
            if fields.len() != 5 {
                return Err(Error::Legend(format!("line {}: expected R,G,B,class_id,name", n + 1)));
            }
            let num = |s: &str, what: &str| {
                s.parse::<u8>()
                    .map_err(|_| Error::Legend(format!("line {}: bad {what} '{s}'", n + 1)))
            };
            entries.push(LegendEntry {
                color: [
                    num(fields[0], "red")?,
                    num(fields[1], "green")?,
                    num(fields[2], "blue")?,
                ],
                class_id: num(fields[3], "class id")?,
                name: fields[4].to_owned(),
            });
        }
        Self::new(entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Legend(format!("{}: {e}", path.display())))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let [r, g, b] = e.color;
            let _ = writeln!(out, "{r},{g},{b},{},{}", e.class_id, e.name);
        }
        out
    }

    pub fn num_classes(&self) -> usize {
        self.entries.len()
    }

    pub fn entries(&self) -> &[LegendEntry] {
        &self.entries
    }

    pub fn class_of(&self, color: [u8; 3]) -> Option<u8> {
        self.by_color.get(&color).copied()
    }

    pub fn color_of(&self, class_id: u8) -> Option<[u8; 3]> {
        self.entries.get(class_id as usize).map(|e| e.color)
    }

    /// Reserved color painted for ignored pixels; never a legend color.
    pub fn ignore_color(&self) -> [u8; 3] {
        self.ignore_color
    }
}

/// Maps every pixel through the legend. Unknown colors become the ignore
/// sentinel, or an error naming the first offending pixel when `strict`.
/// The legend's reserved ignore color always decodes to the sentinel.
pub fn decode_mask(image: &RgbImage, legend: &LegendMap, strict: bool) -> Result<ClassMap> {
    let (w, h) = image.dimensions();
    let mut data = Vec::with_capacity((w * h) as usize);
    for (x, y, px) in image.enumerate_pixels() {
        let color = px.0;
        let class = match legend.class_of(color) {
            Some(c) => c,
            None if color == legend.ignore_color() || !strict => IGNORE_INDEX,
            None => {
                return Err(Error::UnknownColor {
                    r: color[0],
                    g: color[1],
                    b: color[2],
                    row: y as usize,
                    col: x as usize,
                    file: None,
                })
            }
        };
        data.push(class);
    }
    ClassMap::from_vec(h as usize, w as usize, data)
}

/// Inverse of [`decode_mask`].
pub fn encode_mask(mask: &ClassMap, legend: &LegendMap) -> Result<RgbImage> {
    let mut img = RgbImage::new(mask.width() as u32, mask.height() as u32);
    for (px, &class) in img.pixels_mut().zip(mask.data()) {
        px.0 = if class == IGNORE_INDEX {
            legend.ignore_color()
        } else {
            legend
                .color_of(class)
                .ok_or_else(|| Error::Legend(format!("class {class} is not in the legend")))?
        };
    }
    Ok(img)
}
