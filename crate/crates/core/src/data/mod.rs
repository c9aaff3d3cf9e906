//! Datasets: image-caption pairs, labeled evaluation images, caption
//! processing, augmentation and the synthetic shapes generator.

pub mod augment;
pub mod labels;
pub mod manifest;
pub mod synth;
pub mod text;

use image::RgbImage;

pub use augment::augment;
pub use labels::{LabelMap, IGNORE_VALUE};
pub use manifest::{load_labeled, load_pairs, ManifestRecord};
pub use synth::{synth_dataset, write_dataset, ClassPalette, ClassSpec, ShapeKind, SynthConfig};
pub use text::{extract_words, tokenize, CaptionTokens, Vocab, WordMode};

use crate::{Error, Result};

/// Smallest accepted image side.
pub const MIN_IMAGE_SIDE: u32 = 8;

/// One training sample: an image and its free-text caption.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTextPair {
    pub id: String,
    pub image: RgbImage,
    pub caption: String,
}

impl ImageTextPair {
    pub fn new(id: impl Into<String>, image: RgbImage, caption: impl Into<String>) -> Result<Self> {
        let id = id.into();
        let caption = caption.into();
        if image.width() < MIN_IMAGE_SIDE || image.height() < MIN_IMAGE_SIDE {
            return Err(Error::Record {
                id,
                message: format!(
                    "image is {}x{}, both sides must be at least {MIN_IMAGE_SIDE}",
                    image.width(),
                    image.height()
                ),
            });
        }
        if caption.trim().is_empty() {
            return Err(Error::Record {
                id,
                message: "caption is empty".into(),
            });
        }
        Ok(Self { id, image, caption })
    }
}

/// An image with a dense ground-truth class map.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub image: RgbImage,
    pub labels: LabelMap,
    pub class_names: Vec<String>,
    pub ignore_value: u8,
    /// Index of the background class within `class_names`, if the dataset has one.
    pub background: Option<usize>,
}

impl LabeledImage {
    pub fn new(
        id: impl Into<String>,
        image: RgbImage,
        labels: LabelMap,
        class_names: Vec<String>,
        background: Option<usize>,
    ) -> Result<Self> {
        let id = id.into();
        if labels.width() != image.width() as usize || labels.height() != image.height() as usize {
            return Err(Error::Record {
                id,
                message: format!(
                    "label map {}x{} does not match image {}x{}",
                    labels.width(),
                    labels.height(),
                    image.width(),
                    image.height()
                ),
            });
        }
        if let Some(&bad) = labels
            .distinct()
            .iter()
            .find(|&&v| v != IGNORE_VALUE && v as usize >= class_names.len())
        {
            return Err(Error::Record {
                id,
                message: format!("label {bad} outside {} classes", class_names.len()),
            });
        }
        if background.is_some_and(|b| b >= class_names.len()) {
            return Err(Error::Record {
                id,
                message: "background index outside the class list".into(),
            });
        }
        Ok(Self {
            id,
            image,
            labels,
            class_names,
            ignore_value: IGNORE_VALUE,
            background,
        })
    }
}

/// Reads a class list file: one name per line, blank lines and `#` comments skipped.
pub fn read_class_list(path: &std::path::Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_class_list(&text))
}

pub fn parse_class_list(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn write_class_list(path: &std::path::Path, names: &[String]) -> Result<()> {
    let mut text = names.join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_tiny_images_and_blank_captions() {
        let small = RgbImage::new(4, 16);
        assert!(ImageTextPair::new("a", small, "cat").is_err());
        let ok = RgbImage::new(8, 8);
        assert!(ImageTextPair::new("b", ok.clone(), "   ").is_err());
        assert!(ImageTextPair::new("c", ok, "cat").is_ok());
    }

    #[test]
    fn labeled_image_checks_label_range() {
        let img = RgbImage::new(8, 8);
        let mut labels = LabelMap::filled(8, 8, 0);
        labels.set(1, 1, IGNORE_VALUE);
        let names = vec!["background".to_string(), "cat".to_string()];
        assert!(LabeledImage::new("x", img.clone(), labels.clone(), names.clone(), Some(0)).is_ok());
        labels.set(2, 2, 2);
        assert!(LabeledImage::new("x", img, labels, names, Some(0)).is_err());
    }
}
