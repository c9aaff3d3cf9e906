//! Open-vocabulary prediction: class-name embeddings, per-mask classification,
//! mask/class combination, background thresholding and rendering.

use std::path::{Path, PathBuf};

use candle_core::{IndexOp, Tensor};
use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::data::{extract_words, tokenize, LabelMap, Vocab, WordMode};
use crate::losses::sigmoid;
use crate::pseudomask::features::pad_to_multiple;
use crate::segmodel::nn::softmax_last;
use crate::segmodel::{image_to_tensor, SegModel};
use crate::{Error, Result};

pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_TEMPLATE: &str = "{}";
/// Name written for the background entry of legends.
pub const BACKGROUND_NAME: &str = "background";
/// Label maps are 8-bit and 255 is reserved for ignore, so the background
/// index `|C|` must stay below it.
pub const MAX_CLASSES: usize = 254;

/// Candidate class names plus the prompt they are wrapped in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassVocabulary {
    pub names: Vec<String>,
    pub prompt_template: String,
}

impl ClassVocabulary {
    pub fn new(names: Vec<String>, prompt_template: &str) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Input("class vocabulary is empty".into()));
        }
        if names.len() > MAX_CLASSES {
            return Err(Error::Input(format!("at most {MAX_CLASSES} classes are supported")));
        }
        for (i, n) in names.iter().enumerate() {
            if n.trim().is_empty() {
                return Err(Error::Input(format!("class {i} has an empty name")));
            }
            if names[..i].contains(n) {
                return Err(Error::Input(format!("duplicate class name `{n}`")));
            }
        }
        if prompt_template.matches("{}").count() != 1 {
            return Err(Error::Input(format!(
                "prompt template `{prompt_template}` must contain exactly one `{{}}`"
            )));
        }
        Ok(Self {
            names,
            prompt_template: prompt_template.to_string(),
        })
    }

    /// Accepts `a,b,c` or a path to a class-list file.
    pub fn parse_arg(arg: &str, prompt_template: &str) -> Result<Self> {
        let path = Path::new(arg);
        let names = if path.is_file() {
            crate::data::read_class_list(path)?
        } else {
            arg.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect()
        };
        Self::new(names, prompt_template)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn prompt(&self, index: usize) -> String {
        self.prompt_template.replacen("{}", &self.names[index], 1)
    }
}

/// A per-pixel label map with the vocabulary that gives its indices meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationMap {
    pub labels: LabelMap,
    pub legend: ClassVocabulary,
    /// Label used for background pixels; `legend.len()` when present.
    pub background_index: Option<usize>,
}

impl SegmentationMap {
    pub fn new(labels: LabelMap, legend: ClassVocabulary, background_index: Option<usize>) -> Result<Self> {
        let limit = legend.len();
        for &v in labels.as_slice() {
            let v = v as usize;
            if v >= limit && Some(v) != background_index {
                return Err(Error::Input(format!(
                    "label {v} is neither a class of {limit} nor the background index"
                )));
            }
        }
        Ok(Self {
            labels,
            legend,
            background_index,
        })
    }
}

/// Unit-norm text embeddings of every class prompt, `(|C|, proj_dim)`.
pub fn encode_classes(
    model: &SegModel,
    vocab: &ClassVocabulary,
    text_vocab: &Vocab,
    word_mode: WordMode,
) -> Result<Tensor> {
    let mut tokens = Vec::with_capacity(vocab.len());
    for i in 0..vocab.len() {
        let prompt = vocab.prompt(i);
        let words = extract_words(&prompt, word_mode);
        if words.iter().all(|w| !text_vocab.contains(w)) {
            log::warn!("class prompt `{prompt}` has no known word; its embedding is uninformative");
        }
        tokens.push(tokenize(&words, text_vocab, model.config().context_length)?);
    }
    model.project_text(&model.forward_text(&tokens)?)
}

/// Softmax over classes of `cos(mask feature, class) / σ`, one row per mask.
/// Each feature goes through the visual projection on its own.
pub fn classify_masks(model: &SegModel, mask_features: &Tensor, class_embs: &Tensor) -> Result<Tensor> {
    let v = model.project_visual_each(mask_features)?;
    let sim = v.matmul(&class_embs.t()?)?;
    softmax_last(&(sim / model.temperature()?)?)
}

/// Per-pixel class scores, `(H, W, |C|)` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub scores: Array3<f64>,
}

impl ScoreMap {
    pub fn height(&self) -> usize {
        self.scores.dim().0
    }

    pub fn width(&self) -> usize {
        self.scores.dim().1
    }

    pub fn classes(&self) -> usize {
        self.scores.dim().2
    }

    /// Highest-scoring class per pixel, ties to the lower index.
    pub fn argmax(&self) -> LabelMap {
        self.argmax_over(self.classes())
    }

    /// Like [`argmax`](Self::argmax) but only over the first `limit` classes.
    pub fn argmax_over(&self, limit: usize) -> LabelMap {
        let (h, w, _) = self.scores.dim();
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let mut best = 0;
                for c in 1..limit {
                    if self.scores[[y, x, c]] > self.scores[[y, x, best]] {
                        best = c;
                    }
                }
                data.push(best as u8);
            }
        }
        LabelMap::from_vec(w, h, data).expect("shape matches")
    }

    /// Bilinear resampling with pixel centers aligned (`align_corners = false`).
    pub fn upsample_bilinear(&self, out_w: usize, out_h: usize) -> ScoreMap {
        let (h, w, c) = self.scores.dim();
        if (h, w) == (out_h, out_w) {
            return self.clone();
        }
        let coord = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f64) {
            let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src_len - 1);
            let i1 = (i0 + 1).min(src_len - 1);
            (i0, i1, s - i0 as f64)
        };
        let mut out = Array3::zeros((out_h, out_w, c));
        for y in 0..out_h {
            let (y0, y1, fy) = coord(y, h, out_h);
            for x in 0..out_w {
                let (x0, x1, fx) = coord(x, w, out_w);
                for k in 0..c {
                    let top = self.scores[[y0, x0, k]] * (1.0 - fx) + self.scores[[y0, x1, k]] * fx;
                    let bot = self.scores[[y1, x0, k]] * (1.0 - fx) + self.scores[[y1, x1, k]] * fx;
                    out[[y, x, k]] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        ScoreMap { scores: out }
    }

    /// Keeps the top-left `w × h` window.
    pub fn crop(&self, w: usize, h: usize) -> ScoreMap {
        ScoreMap {
            scores: self.scores.slice(ndarray::s![..h, ..w, ..]).to_owned(),
        }
    }

    /// Scores divided by their per-pixel sum (all-zero pixels stay zero).
    pub fn renormalized(&self) -> ScoreMap {
        let mut out = self.scores.clone();
        for mut px in out.lanes_mut(ndarray::Axis(2)) {
            let s: f64 = px.sum();
            if s > 0.0 {
                px.mapv_inplace(|v| v / s);
            }
        }
        ScoreMap { scores: out }
    }
}

/// `score[y, x, c] = Σ_n sigmoid(mask_logits[n, y, x]) · class_probs[n, c]`,
/// accumulated in increasing `n`.
pub fn combine(mask_logits: ArrayView3<f64>, class_probs: ArrayView2<f64>) -> Result<ScoreMap> {
    let (n, h, w) = mask_logits.dim();
    let (n2, c) = class_probs.dim();
    if n != n2 {
        return Err(Error::Input(format!(
            "{n} masks but {n2} class-probability rows"
        )));
    }
    let mut scores = Array3::<f64>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for q in 0..n {
                let m = sigmoid(mask_logits[[q, y, x]]);
                for k in 0..c {
                    scores[[y, x, k]] += m * class_probs[[q, k]];
                }
            }
        }
    }
    Ok(ScoreMap { scores })
}

/// Argmax after per-pixel renormalization; pixels whose top probability is
/// below `tau` get `background_index = |C|`.
pub fn background_threshold(scores: &ScoreMap, tau: f64) -> Result<(LabelMap, usize)> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Input(format!("tau must lie in [0, 1], got {tau}")));
    }
    let bg = scores.classes();
    if bg > MAX_CLASSES {
        return Err(Error::Input(format!("at most {MAX_CLASSES} classes are supported")));
    }
    let norm = scores.renormalized();
    let mut labels = norm.argmax();
    let (h, w, _) = norm.scores.dim();
    for y in 0..h {
        for x in 0..w {
            let best = labels.get(x, y) as usize;
            if norm.scores[[y, x, best]] < tau {
                labels.set(x, y, bg as u8);
            }
        }
    }
    Ok((labels, bg))
}

fn tensor_to_array3(t: &Tensor) -> Result<Array3<f64>> {
    let (a, b, c) = t.dims3()?;
    let v = t.flatten_all()?.to_vec1::<f64>()?;
    Ok(Array3::from_shape_vec((a, b, c), v).expect("element count matches"))
}

fn tensor_to_array2(t: &Tensor) -> Result<Array2<f64>> {
    let (a, b) = t.dims2()?;
    let v = t.flatten_all()?.to_vec1::<f64>()?;
    Ok(Array2::from_shape_vec((a, b), v).expect("element count matches"))
}

/// A trained model with the text vocabulary and word filtering it was trained with.
pub struct Predictor {
    pub model: SegModel,
    pub text_vocab: Vocab,
    pub word_mode: WordMode,
}

impl Predictor {
    pub fn load(checkpoint: &Path) -> Result<Self> {
        let (model, text_vocab, word_mode) = crate::train::load_model(checkpoint)?;
        Ok(Self {
            model,
            text_vocab,
            word_mode,
        })
    }

    pub fn encode_classes(&self, vocab: &ClassVocabulary) -> Result<Tensor> {
        encode_classes(&self.model, vocab, &self.text_vocab, self.word_mode)
    }

    /// Class scores at the input resolution. The image is edge-padded to the
    /// model's stride, combined at mask resolution, upsampled, then cropped.
    pub fn scores(&self, image: &RgbImage, class_embs: &Tensor) -> Result<ScoreMap> {
        let (w, h) = (image.width() as usize, image.height() as usize);
        let padded = pad_to_multiple(image, self.model.config().total_stride());
        let input = image_to_tensor(&padded)?.unsqueeze(0)?;
        let out = self.model.forward_image(&input)?;
        let probs = classify_masks(&self.model, &out.mask_features.i(0)?, class_embs)?;
        let logits = tensor_to_array3(&out.mask_logits.i(0)?)?;
        let probs = tensor_to_array2(&probs)?;
        let scores = combine(logits.view(), probs.view())?;
        Ok(scores
            .upsample_bilinear(padded.width() as usize, padded.height() as usize)
            .crop(w, h))
    }

    /// `tau = None` labels every pixel with a class; `Some(tau)` adds background.
    pub fn predict(&self, image: &RgbImage, vocab: &ClassVocabulary, class_embs: &Tensor, tau: Option<f64>) -> Result<SegmentationMap> {
        let scores = self.scores(image, class_embs)?;
        match tau {
            None => SegmentationMap::new(scores.argmax(), vocab.clone(), None),
            Some(t) => {
                let (labels, bg) = background_threshold(&scores, t)?;
                SegmentationMap::new(labels, vocab.clone(), Some(bg))
            }
        }
    }
}

/// Index-to-color table; background has its own color.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    pub colors: Vec<[u8; 3]>,
    pub background: [u8; 3],
}

impl Palette {
    /// `n` distinct, non-black colors spaced around the hue circle.
    pub fn generate(n: usize) -> Self {
        let mut colors: Vec<[u8; 3]> = Vec::with_capacity(n);
        let mut i = 0usize;
        while colors.len() < n {
            let hue = (i as f64 * 0.618_033_988_749_895).fract();
            let light = [0.55, 0.35, 0.75][(i / 7) % 3];
            let c = hsl_to_rgb(hue, 0.75, light);
            if c != [0, 0, 0] && !colors.contains(&c) {
                colors.push(c);
            }
            i += 1;
        }
        Self {
            colors,
            background: [0, 0, 0],
        }
    }

    fn color(&self, index: usize, background_index: Option<usize>) -> Option<[u8; 3]> {
        if Some(index) == background_index {
            Some(self.background)
        } else {
            self.colors.get(index).copied()
        }
    }
}

fn hsl_to_rgb(h: f64, s: f64, l: f64) -> [u8; 3] {
    let c = (1.0 - (2.0 * l - 1.0).abs()) * s;
    let hp = h * 6.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = l - c / 2.0;
    let to = |v: f64| ((v + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [to(r), to(g), to(b)]
}

fn hex(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Color image plus legend text (`index<TAB>name<TAB>#rrggbb` per line).
pub fn render(seg: &SegmentationMap, palette: &Palette) -> Result<(RgbImage, String)> {
    let mut present: Vec<usize> = seg.labels.distinct().into_iter().map(usize::from).collect();
    present.sort_unstable();
    let missing: Vec<usize> = present
        .iter()
        .copied()
        .filter(|&i| palette.color(i, seg.background_index).is_none())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Input(format!("palette has no color for indices {missing:?}")));
    }
    let colors: Vec<[u8; 3]> = (0..seg.legend.len())
        .map(|i| palette.color(i, seg.background_index).ok_or(i))
        .collect::<std::result::Result<_, _>>()
        .map_err(|i| Error::Input(format!("palette has no color for indices [{i}]")))?;
    let mut all = colors.clone();
    if seg.background_index.is_some() {
        all.push(palette.background);
    }
    for (i, c) in all.iter().enumerate() {
        if all[..i].contains(c) {
            return Err(Error::Input(format!("palette color {} is used twice", hex(*c))));
        }
    }
    let (w, h) = (seg.labels.width(), seg.labels.height());
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let l = seg.labels.get(x, y) as usize;
            let c = palette.color(l, seg.background_index).expect("checked above");
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }
    let mut legend = String::new();
    for (i, name) in seg.legend.names.iter().enumerate() {
        legend.push_str(&format!("{i}\t{name}\t{}\n", hex(colors[i])));
    }
    if let Some(bg) = seg.background_index {
        legend.push_str(&format!("{bg}\t{BACKGROUND_NAME}\t{}\n", hex(palette.background)));
    }
    Ok((img, legend))
}

/// Parsed legend: `(index, name, color)` per line.
pub fn parse_legend(text: &str) -> Result<Vec<(usize, String, [u8; 3])>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Input(format!("legend line {}: expected `index<TAB>name<TAB>#rrggbb`", n + 1));
        let mut parts = line.split('\t');
        let (Some(i), Some(name), Some(col), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad());
        };
        let i: usize = i.parse().map_err(|_| bad())?;
        let col = col.strip_prefix('#').filter(|c| c.len() == 6).ok_or_else(bad)?;
        let byte = |k: usize| u8::from_str_radix(&col[k..k + 2], 16).map_err(|_| bad());
        out.push((i, name.to_string(), [byte(0)?, byte(2)?, byte(4)?]));
    }
    Ok(out)
}

/// Inverse of [`render`].
pub fn decode_render(image: &RgbImage, legend: &str) -> Result<LabelMap> {
    let entries = parse_legend(legend)?;
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut data = Vec::with_capacity(w * h);
    for p in image.pixels() {
        let (i, _, _) = entries
            .iter()
            .find(|(_, _, c)| *c == p.0)
            .ok_or_else(|| Error::Input(format!("color {} is not in the legend", hex(p.0))))?;
        data.push(*i as u8);
    }
    LabelMap::from_vec(w, h, data)
}

/// Where [`write_prediction`] puts its three files.
#[derive(Debug, Clone)]
pub struct PredictionFiles {
    pub labels: PathBuf,
    pub color: PathBuf,
    pub legend: PathBuf,
}

impl PredictionFiles {
    pub fn for_stem(dir: &Path, stem: &str) -> Self {
        Self {
            labels: dir.join(format!("{stem}.png")),
            color: dir.join(format!("{stem}.color.png")),
            legend: dir.join(format!("{stem}.legend.tsv")),
        }
    }
}

/// Writes the label PNG, the color rendering and its legend.
pub fn write_prediction(seg: &SegmentationMap, palette: &Palette, files: &PredictionFiles) -> Result<()> {
    let (img, legend) = render(seg, palette)?;
    seg.labels.save_png_atomic(&files.labels)?;
    img.save(&files.color)?;
    std::fs::write(&files.legend, legend).map_err(|e| Error::io(&files.legend, e))?;
    Ok(())
}
