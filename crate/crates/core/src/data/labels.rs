use std::path::Path;

use image::GrayImage;

use crate::{Error, Result};

/// Reserved value for unlabeled pixels in label maps on disk.
pub const IGNORE_VALUE: u8 = 255;

/// A dense H×W map of small integer labels (class indices or segment ids).
///
/// Stored row-major. Persisted as single-channel 8-bit PNG, which bounds the
/// label range to `0..=254` plus [`IGNORE_VALUE`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Input(format!(
                "label map {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: u8) {
        self.data[y * self.width + x] = value;
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.data
    }

    /// Pixel counts per value, `counts[v]` for every `v < bins`; larger values are dropped.
    pub fn histogram(&self, bins: usize) -> Vec<usize> {
        let mut counts = vec![0usize; bins];
        for &v in &self.data {
            if (v as usize) < bins {
                counts[v as usize] += 1;
            }
        }
        counts
    }

    /// Sorted distinct values.
    pub fn distinct(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..=255u8).filter(|&v| seen[v as usize]).collect()
    }

    pub fn same_shape(&self, other: &LabelMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Nearest-neighbour resampling; never invents values.
    pub fn resize_nearest(&self, width: usize, height: usize) -> LabelMap {
        let mut out = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = (y * self.height / height).min(self.height - 1);
            for x in 0..width {
                let sx = (x * self.width / width).min(self.width - 1);
                out.push(self.data[sy * self.width + sx]);
            }
        }
        LabelMap {
            width,
            height,
            data: out,
        }
    }

    /// Top-left `width`×`height` window.
    pub fn crop(&self, width: usize, height: usize) -> LabelMap {
        let mut out = Vec::with_capacity(width * height);
        for y in 0..height {
            out.extend_from_slice(&self.data[y * self.width..y * self.width + width]);
        }
        LabelMap {
            width,
            height,
            data: out,
        }
    }

    /// Per-cell majority downsampling by an integer factor (ties go to the lower
    /// label). Cells containing only `ignore` keep `ignore`.
    pub fn downsample_majority(&self, factor: usize, ignore: Option<u8>) -> LabelMap {
        let w = self.width.div_ceil(factor);
        let h = self.height.div_ceil(factor);
        let mut out = Vec::with_capacity(w * h);
        let mut counts = [0u32; 256];
        for cy in 0..h {
            for cx in 0..w {
                counts.fill(0);
                for y in cy * factor..((cy + 1) * factor).min(self.height) {
                    for x in cx * factor..((cx + 1) * factor).min(self.width) {
                        counts[self.data[y * self.width + x] as usize] += 1;
                    }
                }
                let mut best = ignore.unwrap_or(0);
                let mut best_count = 0;
                for (v, &c) in counts.iter().enumerate() {
                    if Some(v as u8) == ignore {
                        continue;
                    }
                    if c > best_count {
                        best = v as u8;
                        best_count = c;
                    }
                }
                out.push(best);
            }
        }
        LabelMap {
            width: w,
            height: h,
            data: out,
        }
    }

    pub fn to_gray_image(&self) -> GrayImage {
        GrayImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("buffer length matches dimensions")
    }

    pub fn from_gray_image(img: &GrayImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().clone(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray_image().save(path)?;
        Ok(())
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save_png_atomic(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension(format!("tmp{}.png", std::process::id()));
        self.save_png(&tmp)?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        match img {
            image::DynamicImage::ImageLuma8(g) => Ok(Self::from_gray_image(&g)),
            other => Err(Error::Input(format!(
                "{}: label maps must be 8-bit single-channel PNG, found {:?}",
                path.display(),
                other.color()
            ))),
        }
    }
}
