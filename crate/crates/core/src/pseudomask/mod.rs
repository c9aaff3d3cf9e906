//! Class-agnostic pseudo-masks from clustered feature tokens.
//!
//! An image is turned into a token grid by a [`FeatureBackbone`], the tokens
//! are clustered with K-means, and the token labels are reshaped into a map
//! and upsampled back to the image resolution.

pub mod features;
pub mod kmeans;

use std::path::{Path, PathBuf};

use image::RgbImage;
use ndarray::Array2;

pub use features::{
    extract_features, ColorPositionExtractor, FeatureBackbone, FeatureTokens, VitExtractor,
};
pub use kmeans::{kmeans, KMeansResult};

use crate::data::{LabelMap, LabeledImage};
use crate::evalmod::{EvalReport, Protocol};
use crate::{Error, Result};

/// A label map whose values are exactly `0..k`, each used at least once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoMaskSet {
    pub label_map: LabelMap,
    pub k: usize,
}

impl PseudoMaskSet {
    /// Validates the non-empty-segment invariant.
    pub fn new(label_map: LabelMap, k: usize) -> Result<Self> {
        let hist = label_map.histogram(256);
        if hist[k..].iter().any(|&c| c > 0) || hist[..k].iter().any(|&c| c == 0) {
            return Err(Error::Input(format!(
                "pseudo-mask must use every label in 0..{k} and nothing else"
            )));
        }
        Ok(Self { label_map, k })
    }
}

/// Default number of segments per image.
pub const DEFAULT_K: usize = 8;

/// Nearest-neighbour upsampling of a label map; values are copied, never mixed.
pub fn upsample_labels(labels: &LabelMap, target_h: usize, target_w: usize) -> Result<LabelMap> {
    if target_h < labels.height() || target_w < labels.width() {
        return Err(Error::Input(format!(
            "cannot upsample {}x{} to smaller {}x{}",
            labels.width(),
            labels.height(),
            target_w,
            target_h
        )));
    }
    Ok(labels.resize_nearest(target_w, target_h))
}

/// Renumbers labels by order of first appearance in a row-major scan.
pub fn canonical_relabel(labels: &LabelMap) -> LabelMap {
    let mut map = [u8::MAX; 256];
    let mut next = 0u8;
    let mut out = labels.clone();
    for v in out.as_mut_slice() {
        if map[*v as usize] == u8::MAX {
            map[*v as usize] = next;
            next = next.wrapping_add(1);
        }
        *v = map[*v as usize];
    }
    out
}

/// Clusters the image's feature tokens into `k` segments at full resolution.
pub fn generate_pseudo_masks(
    id: &str,
    image: &RgbImage,
    backbone: &dyn FeatureBackbone,
    k: usize,
    seed: u64,
) -> Result<PseudoMaskSet> {
    if k == 0 || k > 255 {
        return Err(Error::Input(format!("k = {k} outside 1..=255")));
    }
    let tokens = extract_features(id, image, backbone)?;
    let (h, w, d) = tokens.grid.dim();
    if h * w < k {
        return Err(Error::Input(format!(
            "image `{id}` yields {} tokens, fewer than k = {k}",
            h * w
        )));
    }
    let points = tokens
        .grid
        .into_shape_with_order((h * w, d))
        .map_err(|e| Error::Input(e.to_string()))?;
    let points: Array2<f64> = points.to_owned();
    let clusters = kmeans(
        points.view(),
        k,
        seed,
        kmeans::DEFAULT_MAX_ITERS,
        kmeans::DEFAULT_TOL,
    )
    .map_err(|e| Error::Record {
        id: id.to_string(),
        message: e.to_string(),
    })?;
    let token_map = LabelMap::from_vec(
        w,
        h,
        clusters.assignments.iter().map(|&a| a as u8).collect(),
    )?;
    let stride = tokens.stride;
    let full = upsample_labels(&token_map, h * stride, w * stride)?;
    let cropped = full.crop(image.width() as usize, image.height() as usize);
    PseudoMaskSet::new(canonical_relabel(&cropped), k)
}

/// Oracle quality of a pseudo-mask: each segment takes its majority
/// ground-truth class (ties to the lower index, ignore pixels excluded) and the
/// relabeled map is scored with background counted as an ordinary class.
pub fn oracle_miou(pseudo: &PseudoMaskSet, gt: &LabeledImage) -> Result<f64> {
    let relabeled = oracle_relabel(pseudo, gt)?;
    let mut report = EvalReport::new(gt.class_names.clone(), None, Protocol::WithBackground, None)?;
    report.accumulate_labels(&relabeled, &gt.labels, gt.ignore_value)?;
    report.miou()
}

/// The majority-vote relabeling used by [`oracle_miou`].
pub fn oracle_relabel(pseudo: &PseudoMaskSet, gt: &LabeledImage) -> Result<LabelMap> {
    if !pseudo.label_map.same_shape(&gt.labels) {
        return Err(Error::Input(format!(
            "pseudo-mask {}x{} vs ground truth {}x{}",
            pseudo.label_map.width(),
            pseudo.label_map.height(),
            gt.labels.width(),
            gt.labels.height()
        )));
    }
    let n_classes = gt.class_names.len();
    let mut votes = vec![vec![0usize; n_classes]; pseudo.k];
    for (&s, &g) in pseudo.label_map.as_slice().iter().zip(gt.labels.as_slice()) {
        if g != gt.ignore_value {
            votes[s as usize][g as usize] += 1;
        }
    }
    let winner: Vec<u8> = votes
        .iter()
        .map(|v| {
            let mut best = 0;
            for c in 1..v.len() {
                if v[c] > v[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    let data = pseudo
        .label_map
        .as_slice()
        .iter()
        .map(|&s| winner[s as usize])
        .collect();
    LabelMap::from_vec(pseudo.label_map.width(), pseudo.label_map.height(), data)
}

/// On-disk pseudo-mask cache laid out as
/// `<root>/<backbone_id>/k<k>/<image_id>.png`. The clustering seed is stored
/// in `<root>/<backbone_id>/k<k>/seed`; opening with a different seed fails.
#[derive(Debug, Clone)]
pub struct PseudoMaskCache {
    dir: PathBuf,
    k: usize,
}

impl PseudoMaskCache {
    pub fn open(root: &Path, backbone_id: &str, k: usize, seed: u64) -> Result<Self> {
        let dir = root.join(backbone_id).join(format!("k{k}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let marker = dir.join("seed");
        match std::fs::read_to_string(&marker) {
            Ok(s) if s.trim() == seed.to_string() => {}
            Ok(s) => {
                return Err(Error::Config(format!(
                    "{} holds pseudo-masks clustered with seed {}, requested {seed}",
                    dir.display(),
                    s.trim()
                )))
            }
            Err(_) => {
                let tmp = dir.join(format!("seed.tmp{}", std::process::id()));
                std::fs::write(&tmp, format!("{seed}\n")).map_err(|e| Error::io(&tmp, e))?;
                std::fs::rename(&tmp, &marker).map_err(|e| Error::io(&marker, e))?;
            }
        }
        Ok(Self { dir, k })
    }

    pub fn path(&self, image_id: &str) -> PathBuf {
        self.dir.join(format!("{image_id}.png"))
    }

    pub fn get(&self, image_id: &str) -> Result<Option<PseudoMaskSet>> {
        let p = self.path(image_id);
        if !p.exists() {
            return Ok(None);
        }
        Ok(Some(PseudoMaskSet::new(LabelMap::load_png(&p)?, self.k)?))
    }

    pub fn put(&self, image_id: &str, masks: &PseudoMaskSet) -> Result<()> {
        masks.label_map.save_png_atomic(&self.path(image_id))
    }

    /// Cached value if present, otherwise generate and store.
    pub fn get_or_generate(
        &self,
        image_id: &str,
        image: &RgbImage,
        backbone: &dyn FeatureBackbone,
        seed: u64,
    ) -> Result<PseudoMaskSet> {
        if let Some(m) = self.get(image_id)? {
            return Ok(m);
        }
        let m = generate_pseudo_masks(image_id, image, backbone, self.k, seed)?;
        self.put(image_id, &m)?;
        Ok(m)
    }
}

/// Builds a backbone from its textual form: `color` (desk-scale extractor) or
/// `vit:<weights.safetensors>`.
pub fn backbone_from_spec(
    spec: &str,
    stride: usize,
    position_weight: f64,
) -> Result<Box<dyn FeatureBackbone>> {
    if spec == "color" {
        return Ok(Box::new(ColorPositionExtractor::new(stride, position_weight)?));
    }
    if let Some(path) = spec.strip_prefix("vit:") {
        return Ok(Box::new(VitExtractor::load(Path::new(path), None)?));
    }
    Err(Error::Config(format!(
        "unknown feature backbone `{spec}` (expected `color` or `vit:<path>`)"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn two_halves(w: u32, h: u32, split: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, _| {
            if x < split {
                Rgb([220, 30, 30])
            } else {
                Rgb([30, 30, 220])
            }
        })
    }

    #[test]
    fn upsample_nearest_blocks() {
        let m = LabelMap::from_vec(2, 2, vec![0, 1, 2, 3]).unwrap();
        let up = upsample_labels(&m, 4, 4).unwrap();
        assert_eq!(
            up.as_slice(),
            &[0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]
        );
        assert_eq!(up.distinct(), m.distinct());
        let c = LabelMap::filled(3, 2, 5);
        assert_eq!(upsample_labels(&c, 7, 9).unwrap(), LabelMap::filled(9, 7, 5));
        assert!(upsample_labels(&m, 1, 4).is_err());
    }

    #[test]
    fn two_color_halves_split_on_boundary() {
        // Stride 4 and a boundary at x = 10 falls inside token column 2: the
        // token there mixes 2 red and 2 blue columns and is still closer to
        // one side, so at most one token column (4 px) can disagree.
        let img = two_halves(32, 32, 10);
        let ext = ColorPositionExtractor::new(4, 0.1).unwrap();
        let pm = generate_pseudo_masks("halves", &img, &ext, 2, 0).unwrap();
        assert_eq!(pm.label_map.get(0, 0), 0);
        for y in 0..32 {
            for x in 0..32 {
                let expect = if x < 10 { 0 } else { 1 };
                if !(8..12).contains(&x) {
                    assert_eq!(pm.label_map.get(x, y), expect, "({x},{y})");
                }
            }
        }
        // aligned boundary: exact
        let img = two_halves(32, 32, 16);
        let pm = generate_pseudo_masks("halves", &img, &ext, 2, 0).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(pm.label_map.get(x, y), u8::from(x >= 16));
            }
        }
    }

    #[test]
    fn k_one_is_all_zero_and_histogram_has_k_bins() {
        let img = RgbImage::from_fn(24, 20, |x, y| Rgb([(x * 10) as u8, (y * 12) as u8, 40]));
        let ext = ColorPositionExtractor::new(4, 0.1).unwrap();
        let pm = generate_pseudo_masks("g", &img, &ext, 1, 0).unwrap();
        assert!(pm.label_map.as_slice().iter().all(|&v| v == 0));
        for k in [2, 5, 8] {
            let pm = generate_pseudo_masks("g", &img, &ext, k, 3).unwrap();
            let hist = pm.label_map.histogram(256);
            assert_eq!(hist.iter().filter(|&&c| c > 0).count(), k);
            assert_eq!((pm.label_map.width(), pm.label_map.height()), (24, 20));
        }
        assert!(generate_pseudo_masks("g", &img, &ext, 31, 0).is_err());
    }

    #[test]
    fn canonical_relabel_is_permutation_invariant() {
        let a = LabelMap::from_vec(3, 2, vec![2, 2, 0, 1, 0, 2]).unwrap();
        let b = LabelMap::from_vec(3, 2, vec![5, 5, 1, 0, 1, 5]).unwrap();
        assert_eq!(canonical_relabel(&a), canonical_relabel(&b));
        assert_eq!(canonical_relabel(&a).as_slice(), &[0, 0, 1, 2, 1, 0]);
    }

    fn gt_2x2(labels: Vec<u8>, names: &[&str]) -> LabeledImage {
        LabeledImage::new(
            "gt",
            RgbImage::new(2, 2),
            LabelMap::from_vec(2, 2, labels).unwrap(),
            names.iter().map(|s| s.to_string()).collect(),
            Some(0),
        )
        .unwrap()
    }

    #[test]
    fn oracle_exact_partition_scores_one() {
        let gt = gt_2x2(vec![0, 0, 1, 2], &["bg", "a", "b"]);
        let pseudo = PseudoMaskSet::new(LabelMap::from_vec(2, 2, vec![2, 2, 0, 1]).unwrap(), 3).unwrap();
        assert_eq!(oracle_miou(&pseudo, &gt).unwrap(), 1.0);
    }

    #[test]
    fn oracle_single_segment_two_classes() {
        let gt = gt_2x2(vec![0, 0, 1, 1], &["bg", "a"]);
        let pseudo = PseudoMaskSet::new(LabelMap::filled(2, 2, 0), 1).unwrap();
        assert_eq!(oracle_miou(&pseudo, &gt).unwrap(), 0.25);
    }

    #[test]
    fn refining_never_lowers_oracle() {
        let gt = LabeledImage::new(
            "gt",
            RgbImage::new(4, 1),
            LabelMap::from_vec(4, 1, vec![0, 1, 1, 2]).unwrap(),
            vec!["x".into(), "y".into(), "z".into()],
            None,
        )
        .unwrap();
        let coarse = PseudoMaskSet::new(LabelMap::from_vec(4, 1, vec![0, 0, 1, 1]).unwrap(), 2).unwrap();
        let fine = PseudoMaskSet::new(LabelMap::from_vec(4, 1, vec![0, 1, 2, 2]).unwrap(), 3).unwrap();
        assert!(oracle_miou(&fine, &gt).unwrap() >= oracle_miou(&coarse, &gt).unwrap());
    }

    #[test]
    fn oracle_rejects_shape_mismatch() {
        let gt = gt_2x2(vec![0, 0, 1, 1], &["bg", "a"]);
        let pseudo = PseudoMaskSet::new(LabelMap::filled(3, 2, 0), 1).unwrap();
        assert!(matches!(oracle_miou(&pseudo, &gt), Err(Error::Input(_))));
    }

    #[test]
    fn cache_round_trip_and_seed_guard() {
        let dir = tempfile::tempdir().unwrap();
        let ext = ColorPositionExtractor::new(4, 0.1).unwrap();
        let img = two_halves(16, 16, 8);
        let cache = PseudoMaskCache::open(dir.path(), &ext.id(), 2, 0).unwrap();
        assert!(cache.get("a").unwrap().is_none());
        let m = cache.get_or_generate("a", &img, &ext, 0).unwrap();
        assert!(cache.path("a").ends_with(format!("{}/k2/a.png", ext.id())));
        assert_eq!(cache.get("a").unwrap().unwrap(), m);
        assert!(PseudoMaskCache::open(dir.path(), &ext.id(), 2, 1).is_err());
    }
}
