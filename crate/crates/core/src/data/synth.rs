//! Deterministic synthetic "shapes with captions" datasets.
//!
//! Every image is a noisy background with one or more filled shapes; each
//! foreground class has its own color and shape kind. Captions name exactly
//! the foreground classes that remain visible after occlusion, wrapped in a
//! randomly chosen phrase so they look like loose web captions.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::manifest::{write_manifest, ManifestRecord};
use super::{write_class_list, ImageTextPair, LabelMap, LabeledImage};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSpec {
    pub name: String,
    pub color: [u8; 3],
    pub shape: ShapeKind,
}

impl ClassSpec {
    pub fn new(name: &str, color: [u8; 3], shape: ShapeKind) -> Self {
        Self {
            name: name.to_string(),
            color,
            shape,
        }
    }
}

/// Class 0 is the background; its shape kind is unused.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPalette {
    classes: Vec<ClassSpec>,
}

impl ClassPalette {
    pub fn new(classes: Vec<ClassSpec>) -> Result<Self> {
        if classes.len() < 2 {
            return Err(Error::Config(
                "palette needs a background and at least one foreground class".into(),
            ));
        }
        if classes.len() > 254 {
            return Err(Error::Config("palette exceeds 254 classes".into()));
        }
        for (i, a) in classes.iter().enumerate() {
            if a.name.trim().is_empty() || a.name.contains(char::is_whitespace) {
                return Err(Error::Config(format!("class name `{}` must be one word", a.name)));
            }
            for b in &classes[i + 1..] {
                if a.name == b.name {
                    return Err(Error::Config(format!("duplicate class name `{}`", a.name)));
                }
                if a.color == b.color {
                    return Err(Error::Config(format!(
                        "classes `{}` and `{}` share a color",
                        a.name, b.name
                    )));
                }
            }
        }
        Ok(Self { classes })
    }

    pub fn classes(&self) -> &[ClassSpec] {
        &self.classes
    }

    pub fn names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn foreground_names(&self) -> Vec<String> {
        self.classes[1..].iter().map(|c| c.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

impl Default for ClassPalette {
    fn default() -> Self {
        use ShapeKind::*;
        Self::new(vec![
            ClassSpec::new("background", [96, 96, 96], Square),
            ClassSpec::new("apple", [220, 40, 40], Circle),
            ClassSpec::new("leaf", [40, 180, 60], Triangle),
            ClassSpec::new("ocean", [40, 70, 220], Square),
            ClassSpec::new("lemon", [235, 215, 40], Circle),
            ClassSpec::new("grape", [150, 50, 180], Square),
            ClassSpec::new("carrot", [245, 135, 25], Triangle),
        ])
        .expect("default palette is valid")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_images: usize,
    pub image_size: u32,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Per-pixel uniform noise amplitude.
    pub noise: u8,
    /// Per-shape (and per-image background) color jitter amplitude.
    pub color_jitter: u8,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_images: 100,
            image_size: 32,
            min_shapes: 1,
            max_shapes: 5,
            noise: 8,
            color_jitter: 12,
        }
    }
}

impl crate::config::KvConfig for SynthConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        use crate::config::parse_value;
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "n_images" => self.n_images = parse_value(key, value)?,
            "image_size" => self.image_size = parse_value(key, value)?,
            "min_shapes" => self.min_shapes = parse_value(key, value)?,
            "max_shapes" => self.max_shapes = parse_value(key, value)?,
            "noise" => self.noise = parse_value(key, value)?,
            "color_jitter" => self.color_jitter = parse_value(key, value)?,
            _ => return Err(crate::config::unknown_key(key, self)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("seed".into(), self.seed.to_string()),
            ("n_images".into(), self.n_images.to_string()),
            ("image_size".into(), self.image_size.to_string()),
            ("min_shapes".into(), self.min_shapes.to_string()),
            ("max_shapes".into(), self.max_shapes.to_string()),
            ("noise".into(), self.noise.to_string()),
            ("color_jitter".into(), self.color_jitter.to_string()),
        ]
    }
}

const TEMPLATES: &[&str] = &[
    "a photo of {}",
    "a picture showing {}",
    "{} in the frame",
    "there is {} here",
    "a drawing with {}",
    "{}",
];

fn join_names(names: &[&str]) -> String {
    match names {
        [] => String::new(),
        [one] => one.to_string(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    }
}

fn inside(shape: ShapeKind, cx: f64, cy: f64, r: f64, px: f64, py: f64) -> bool {
    let dx = px - cx;
    let dy = py - cy;
    match shape {
        ShapeKind::Circle => dx * dx + dy * dy <= r * r,
        ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
        ShapeKind::Triangle => {
            // apex up, base at cy + r, half-width r at the base
            if dy < -r || dy > r {
                return false;
            }
            let half = r * (dy + r) / (2.0 * r);
            dx.abs() <= half
        }
    }
}

fn jitter(rng: &mut ChaCha8Rng, color: [u8; 3], amp: u8) -> [f64; 3] {
    let a = amp as f64;
    color.map(|c| c as f64 + if amp > 0 { rng.random_range(-a..=a) } else { 0.0 })
}

impl SynthConfig {
    pub fn generate(&self, palette: &ClassPalette) -> Result<(Vec<ImageTextPair>, Vec<LabeledImage>)> {
        if self.n_images == 0 {
            return Err(Error::Config("n_images must be positive".into()));
        }
        if self.image_size < super::MIN_IMAGE_SIDE {
            return Err(Error::Config(format!(
                "image_size must be at least {}",
                super::MIN_IMAGE_SIDE
            )));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(Error::Config("need 1 <= min_shapes <= max_shapes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let size = self.image_size as usize;
        let n_fg = palette.len() - 1;
        let width = (self.n_images - 1).to_string().len().max(4);
        let mut pairs = Vec::with_capacity(self.n_images);
        let mut labeled = Vec::with_capacity(self.n_images);

        for idx in 0..self.n_images {
            let id = format!("synth_{idx:0width$}");
            let n_shapes = rng.random_range(self.min_shapes..=self.max_shapes);
            // shape index per pixel, 0 = background
            let mut owner = vec![0usize; size * size];
            let mut shape_class = vec![0usize];
            let mut shape_color = vec![jitter(&mut rng, palette.classes[0].color, self.color_jitter)];
            let r_min = (size as f64 / 8.0).max(2.0);
            let r_max = (size as f64 / 4.0).max(r_min);
            for s in 1..=n_shapes {
                let class = rng.random_range(1..=n_fg);
                let spec = &palette.classes[class];
                let r = rng.random_range(r_min..=r_max);
                let cx = rng.random_range(0.0..size as f64);
                let cy = rng.random_range(0.0..size as f64);
                shape_class.push(class);
                shape_color.push(jitter(&mut rng, spec.color, self.color_jitter));
                for y in 0..size {
                    for x in 0..size {
                        if inside(spec.shape, cx, cy, r, x as f64 + 0.5, y as f64 + 0.5) {
                            owner[y * size + x] = s;
                        }
                    }
                }
            }

            let labels: Vec<u8> = owner.iter().map(|&s| shape_class[s] as u8).collect();
            let mut image = RgbImage::new(self.image_size, self.image_size);
            let amp = self.noise as f64;
            for (i, px) in image.pixels_mut().enumerate() {
                let base = shape_color[owner[i]];
                *px = Rgb(base.map(|c| {
                    let n = if self.noise > 0 { rng.random_range(-amp..=amp) } else { 0.0 };
                    (c + n).round().clamp(0.0, 255.0) as u8
                }));
            }

            let labels = LabelMap::from_vec(size, size, labels)?;
            let hist = labels.histogram(palette.len());
            let mut present: Vec<&str> = (1..palette.len())
                .filter(|&c| hist[c] > 0)
                .map(|c| palette.classes[c].name.as_str())
                .collect();
            present.shuffle(&mut rng);
            let template = TEMPLATES[rng.random_range(0..TEMPLATES.len())];
            let caption = if present.is_empty() {
                // every shape ended up hidden; still a valid, non-empty caption
                "an empty scene".to_string()
            } else {
                template.replace("{}", &join_names(&present))
            };

            pairs.push(ImageTextPair::new(id.clone(), image.clone(), caption)?);
            labeled.push(LabeledImage::new(id, image, labels, palette.names(), Some(0))?);
        }
        Ok((pairs, labeled))
    }
}

/// Generates `n_images` square images of side `image_size` with the default
/// shape-count and noise settings.
pub fn synth_dataset(
    seed: u64,
    n_images: usize,
    image_size: u32,
    palette: &ClassPalette,
) -> Result<(Vec<ImageTextPair>, Vec<LabeledImage>)> {
    SynthConfig {
        seed,
        n_images,
        image_size,
        ..SynthConfig::default()
    }
    .generate(palette)
}

/// Writes `images/`, `labels/`, `manifest.jsonl` and `classes.txt` under `dir`.
pub fn write_dataset(dir: &Path, pairs: &[ImageTextPair], labeled: &[LabeledImage]) -> Result<()> {
    let images = dir.join("images");
    let labels = dir.join("labels");
    for d in [dir, &images, &labels] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut records = Vec::with_capacity(pairs.len());
    for (pair, lab) in pairs.iter().zip(labeled) {
        let img_rel = format!("images/{}.png", pair.id);
        let lab_rel = format!("labels/{}.png", pair.id);
        pair.image.save(dir.join(&img_rel))?;
        lab.labels.save_png(&dir.join(&lab_rel))?;
        records.push(ManifestRecord {
            id: Some(pair.id.clone()),
            image: img_rel,
            text: Some(pair.caption.clone()),
            label: Some(lab_rel),
        });
    }
    write_manifest(&dir.join("manifest.jsonl"), &records)?;
    if let Some(first) = labeled.first() {
        write_class_list(&dir.join("classes.txt"), &first.class_names)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::text::{extract_words, WordMode};

    #[test]
    fn deterministic() {
        let p = ClassPalette::default();
        let a = synth_dataset(5, 10, 32, &p).unwrap();
        let b = synth_dataset(5, 10, 32, &p).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(6, 10, 32, &p).unwrap();
        assert_ne!(a.0[0].image, c.0[0].image);
    }

    #[test]
    fn captions_name_exactly_the_visible_classes() {
        let p = ClassPalette::default();
        let (pairs, labeled) = synth_dataset(1, 40, 32, &p).unwrap();
        for (pair, lab) in pairs.iter().zip(&labeled) {
            let words = extract_words(&pair.caption, WordMode::KeepAll);
            let hist = lab.labels.histogram(p.len());
            assert!(lab.labels.distinct().iter().all(|&v| (v as usize) < p.len()));
            for (c, spec) in p.classes().iter().enumerate().skip(1) {
                assert_eq!(words.contains(&spec.name), hist[c] > 0, "{}", pair.caption);
            }
            assert!(!words.contains(&"background".to_string()));
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let p = ClassPalette::default();
        assert!(matches!(synth_dataset(0, 0, 32, &p), Err(Error::Config(_))));
        let one = vec![ClassSpec::new("background", [0, 0, 0], ShapeKind::Square)];
        assert!(ClassPalette::new(one).is_err());
        let dup_color = vec![
            ClassSpec::new("background", [0, 0, 0], ShapeKind::Square),
            ClassSpec::new("x", [0, 0, 0], ShapeKind::Circle),
        ];
        assert!(ClassPalette::new(dup_color).is_err());
    }

    #[test]
    fn written_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let p = ClassPalette::default();
        let (pairs, labeled) = synth_dataset(2, 3, 16, &p).unwrap();
        write_dataset(dir.path(), &pairs, &labeled).unwrap();
        let m = dir.path().join("manifest.jsonl");
        let loaded: Vec<_> = crate::data::load_pairs(&m).unwrap().collect::<Result<_>>().unwrap();
        assert_eq!(loaded, pairs);
        let names = crate::data::read_class_list(&dir.path().join("classes.txt")).unwrap();
        let lab = crate::data::load_labeled(&m, &names, Some(0)).unwrap();
        assert_eq!(lab, labeled);
    }
}
