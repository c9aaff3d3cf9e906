//! Line-delimited JSON manifests.
//!
//! Each non-blank line is one object:
//!
//! ```text
//! {"id": "img_0001", "image": "images/img_0001.png", "text": "a photo of a cat", "label": "labels/img_0001.png"}
//! ```
//!
//! `image` is required, `text` is required for image-caption datasets, `id`
//! defaults to the image file stem and `label` is only needed for evaluation
//! or supervised data. Relative paths resolve against the manifest's directory.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ImageTextPair, LabelMap, LabeledImage};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl ManifestRecord {
    pub fn resolved_id(&self) -> String {
        self.id.clone().unwrap_or_else(|| {
            Path::new(&self.image)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| self.image.clone())
        })
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Parsed manifest lines, lazily. Yields `(line_number, record)`.
pub fn read_records(path: &Path) -> Result<impl Iterator<Item = Result<(usize, ManifestRecord)>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let owned = path.to_path_buf();
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .filter_map(move |(i, line)| {
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::io(&owned, e))),
            };
            if line.trim().is_empty() {
                return None;
            }
            Some(
                serde_json::from_str::<ManifestRecord>(&line)
                    .map(|r| (i + 1, r))
                    .map_err(|e| Error::Parse {
                        path: owned.clone(),
                        line: i + 1,
                        message: e.to_string(),
                    }),
            )
        }))
}

pub fn load_rgb(id: &str, path: &Path) -> Result<image::RgbImage> {
    image::open(path)
        .map(|img| img.to_rgb8())
        .map_err(|e| Error::Record {
            id: id.to_string(),
            message: format!("{}: {e}", path.display()),
        })
}

/// Streams image-caption pairs in manifest order.
pub fn load_pairs(manifest: &Path) -> Result<impl Iterator<Item = Result<ImageTextPair>>> {
    let base = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let owned = manifest.to_path_buf();
    Ok(read_records(manifest)?.map(move |rec| {
        let (line, rec) = rec?;
        let id = rec.resolved_id();
        let Some(text) = rec.text.as_deref() else {
            return Err(Error::Parse {
                path: owned.clone(),
                line,
                message: format!("record `{id}` has no `text` field"),
            });
        };
        let image = load_rgb(&id, &resolve(&base, &rec.image))?;
        ImageTextPair::new(id, image, text)
    }))
}

/// Loads every record carrying a `label` path.
pub fn load_labeled(
    manifest: &Path,
    class_names: &[String],
    background: Option<usize>,
) -> Result<Vec<LabeledImage>> {
    let base = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut out = Vec::new();
    for rec in read_records(manifest)? {
        let (line, rec) = rec?;
        let id = rec.resolved_id();
        let Some(label) = rec.label.as_deref() else {
            return Err(Error::Parse {
                path: manifest.to_path_buf(),
                line,
                message: format!("record `{id}` has no `label` field"),
            });
        };
        let image = load_rgb(&id, &resolve(&base, &rec.image))?;
        let labels = LabelMap::load_png(&resolve(&base, label)).map_err(|e| Error::Record {
            id: id.clone(),
            message: e.to_string(),
        })?;
        out.push(LabeledImage::new(
            id,
            image,
            labels,
            class_names.to_vec(),
            background,
        )?);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
