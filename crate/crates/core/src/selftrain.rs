//! Self-training: the open-vocabulary model labels unlabeled images over a
//! fixed class list, then a closed-set student is trained on those labels
//! with per-pixel cross-entropy.
//!
//! Label files use class indices `0..C` for the vocabulary and `C` for
//! background, so `classes.txt` is the vocabulary followed by `background`.

use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use image::RgbImage;
use serde::Serialize;

use crate::config::{format_f64, parse_value, unknown_key, KvConfig};
use crate::data::manifest::{load_rgb, read_records, write_manifest, ManifestRecord};
use crate::data::{write_class_list, LabelMap, IGNORE_VALUE};
use crate::evalmod::EvalReport;
use crate::inference::{ClassVocabulary, Predictor, ScoreMap, SegmentationMap, BACKGROUND_NAME};
use crate::pseudomask::features::pad_to_multiple;
use crate::segmodel::checkpoint::Checkpoint;
use crate::segmodel::nn::{log_softmax_last, softmax_last, Conv2d, ModelParams, ParamBuilder};
use crate::segmodel::{images_to_batch, image_to_tensor, PixelEncoder};
use crate::train::{epoch_batches, global_grad_norm, AdamW, Moments};
use crate::{Error, Result};

pub const STUDENT_KIND: &str = "sseg-student";
pub const LABELS_MANIFEST: &str = "manifest.jsonl";
pub const LABELS_CLASSES: &str = "classes.txt";
pub const STUDENT_CHECKPOINT: &str = "student.safetensors";
pub const STUDENT_LOG: &str = "student_log.jsonl";

/// Result of [`generate_labels`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGenSummary {
    pub written: usize,
    /// `(image id, message)` for every skipped image.
    pub failures: Vec<(String, String)>,
    pub manifest: PathBuf,
}

/// Class list of generated labels: the vocabulary, then background.
pub fn label_class_names(vocab: &ClassVocabulary) -> Vec<String> {
    let mut names = vocab.names.clone();
    names.push(BACKGROUND_NAME.to_string());
    names
}

/// Labels every image with the teacher (background thresholding at `tau`)
/// and writes `labels/<id>.png`, `manifest.jsonl` and `classes.txt` under
/// `out_dir`. Manifest `image` entries are the given image paths, made absolute.
/// Failed images are logged, skipped and reported.
pub fn generate_labels(
    teacher: &Predictor,
    images: &[(String, PathBuf)],
    vocab: &ClassVocabulary,
    tau: f64,
    out_dir: &Path,
) -> Result<LabelGenSummary> {
    if vocab.names.iter().any(|n| n == BACKGROUND_NAME) {
        return Err(Error::Input(format!(
            "`{BACKGROUND_NAME}` is added by thresholding and must not be in the class list"
        )));
    }
    let labels_dir = out_dir.join("labels");
    std::fs::create_dir_all(&labels_dir).map_err(|e| Error::io(&labels_dir, e))?;
    let class_embs = teacher.encode_classes(vocab)?;
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (id, path) in images {
        let outcome = load_rgb(id, path).and_then(|img| {
            let seg = teacher.predict(&img, vocab, &class_embs, Some(tau))?;
            let rel = format!("labels/{id}.png");
            seg.labels.save_png_atomic(&out_dir.join(&rel))?;
            Ok(rel)
        });
        match outcome {
            Ok(rel) => records.push(ManifestRecord {
                id: Some(id.clone()),
                image: std::path::absolute(path)
                    .unwrap_or_else(|_| path.clone())
                    .display()
                    .to_string(),
                text: None,
                label: Some(rel),
            }),
            Err(e) => {
                log::warn!("skipping `{id}`: {e}");
                failures.push((id.clone(), e.to_string()));
            }
        }
    }
    let manifest = out_dir.join(LABELS_MANIFEST);
    write_manifest(&manifest, &records)?;
    write_class_list(&out_dir.join(LABELS_CLASSES), &label_class_names(vocab))?;
    if !failures.is_empty() {
        log::warn!("{} of {} images failed", failures.len(), images.len());
    }
    Ok(LabelGenSummary {
        written: records.len(),
        failures,
        manifest,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudentConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: f64,
    /// Exponent of the polynomial decay after warmup.
    pub poly_power: f64,
    pub grad_clip: f64,
    pub backbone_channels: Vec<usize>,
    pub embed_dim: usize,
    pub mask_stride: usize,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 40,
            batch_size: 8,
            base_lr: 1e-4,
            weight_decay: 0.05,
            warmup_epochs: 1.0,
            poly_power: 1.0,
            grad_clip: 1.0,
            backbone_channels: vec![32, 64],
            embed_dim: 64,
            mask_stride: 2,
        }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("student epochs and batch_size must be positive".into()));
        }
        if !(self.base_lr > 0.0) || self.weight_decay < 0.0 || self.warmup_epochs < 0.0 || self.poly_power < 0.0 {
            return Err(Error::Config("student optimizer settings out of range".into()));
        }
        let stride = 1usize << self.backbone_channels.len();
        if self.backbone_channels.is_empty()
            || self.embed_dim == 0
            || !self.mask_stride.is_power_of_two()
            || self.mask_stride < 2
            || self.mask_stride > stride
        {
            return Err(Error::Config(format!(
                "student mask_stride {} must be a power of two in [2, {stride}]",
                self.mask_stride
            )));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        1 << self.backbone_channels.len()
    }
}

impl KvConfig for StudentConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "base_lr" => self.base_lr = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse_value(key, value)?,
            "poly_power" => self.poly_power = parse_value(key, value)?,
            "grad_clip" => self.grad_clip = parse_value(key, value)?,
            "backbone_channels" => self.backbone_channels = crate::config::parse_list(key, value)?,
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "mask_stride" => self.mask_stride = parse_value(key, value)?,
            _ => return Err(unknown_key(key, self)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("seed".into(), self.seed.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("base_lr".into(), format_f64(self.base_lr)),
            ("weight_decay".into(), format_f64(self.weight_decay)),
            ("warmup_epochs".into(), format_f64(self.warmup_epochs)),
            ("poly_power".into(), format_f64(self.poly_power)),
            ("grad_clip".into(), format_f64(self.grad_clip)),
            (
                "backbone_channels".into(),
                crate::config::format_list(&self.backbone_channels),
            ),
            ("embed_dim".into(), self.embed_dim.to_string()),
            ("mask_stride".into(), self.mask_stride.to_string()),
        ]
    }
}

/// Linear warmup to `base_lr`, then `base_lr · (1 − progress)^power`.
pub fn poly_learning_rate(step: u64, base_lr: f64, warmup: u64, total: u64, power: f64) -> f64 {
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    base_lr * (1.0 - progress).powf(power)
}

/// Pixel encoder plus a `1×1` classifier over a closed class list.
pub struct Student {
    pub config: StudentConfig,
    pub class_names: Vec<String>,
    /// Index of the background class in `class_names`, when there is one.
    pub background: Option<usize>,
    pub params: ModelParams,
    encoder: PixelEncoder,
    classifier: Conv2d,
}

impl Student {
    pub fn init(config: StudentConfig, class_names: Vec<String>, background: Option<usize>) -> Result<Self> {
        config.validate()?;
        let pb = ParamBuilder::init(config.seed);
        let (encoder, classifier) = Self::build(&config, class_names.len(), &pb)?;
        let params = pb.finish();
        Self::check(&class_names, background)?;
        Ok(Self {
            config,
            class_names,
            background,
            params,
            encoder,
            classifier,
        })
    }

    fn check(class_names: &[String], background: Option<usize>) -> Result<()> {
        if class_names.is_empty() || class_names.len() > 255 {
            return Err(Error::Input("student needs 1..=255 classes".into()));
        }
        if background.is_some_and(|b| b >= class_names.len()) {
            return Err(Error::Input("background index outside the class list".into()));
        }
        Ok(())
    }

    fn build(config: &StudentConfig, classes: usize, pb: &ParamBuilder) -> Result<(PixelEncoder, Conv2d)> {
        let encoder = PixelEncoder::new(pb, &config.backbone_channels, config.embed_dim, config.mask_stride)?;
        let classifier = Conv2d::new(&pb.pp("classifier"), config.embed_dim, classes, 1, 1, 0)?;
        Ok((encoder, classifier))
    }

    /// Class logits `(B, C, H/mask_stride, W/mask_stride)`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let feats = self.encoder.forward(images)?;
        self.classifier.forward(&feats.per_pixel.relu()?)
    }

    /// Per-pixel class probabilities at the input resolution.
    pub fn scores(&self, image: &RgbImage) -> Result<ScoreMap> {
        let (w, h) = (image.width() as usize, image.height() as usize);
        let padded = pad_to_multiple(image, self.config.total_stride());
        let logits = self.forward(&image_to_tensor(&padded)?.unsqueeze(0)?)?.squeeze(0)?;
        let (c, lh, lw) = logits.dims3()?;
        let probs = softmax_last(&logits.permute((1, 2, 0))?.contiguous()?)?;
        let v = probs.flatten_all()?.to_vec1::<f64>()?;
        let scores = ndarray::Array3::from_shape_vec((lh, lw, c), v).expect("element count matches");
        Ok(ScoreMap { scores }
            .upsample_bilinear(padded.width() as usize, padded.height() as usize)
            .crop(w, h))
    }

    /// Labels in student class space. With `foreground_only` the background
    /// class is excluded from the argmax.
    pub fn predict_labels(&self, image: &RgbImage, foreground_only: bool) -> Result<LabelMap> {
        let scores = self.scores(image)?;
        match (foreground_only, self.background) {
            (true, Some(bg)) => {
                let mut s = scores.scores;
                s.index_axis_mut(ndarray::Axis(2), bg).fill(f64::NEG_INFINITY);
                Ok(ScoreMap { scores: s }.argmax())
            }
            _ => Ok(scores.argmax()),
        }
    }

    /// Prediction as a [`SegmentationMap`] whose legend excludes background.
    pub fn predict(&self, image: &RgbImage, foreground_only: bool) -> Result<SegmentationMap> {
        let labels = self.predict_labels(image, foreground_only)?;
        let Some(bg) = self.background else {
            let legend = ClassVocabulary::new(self.class_names.clone(), crate::inference::DEFAULT_TEMPLATE)?;
            return SegmentationMap::new(labels, legend, None);
        };
        // Legend indices are the foreground classes in order; background goes last.
        let fg: Vec<String> = self
            .class_names
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != bg)
            .map(|(_, n)| n.clone())
            .collect();
        let n_fg = fg.len() as u8;
        let remap: Vec<u8> = labels
            .as_slice()
            .iter()
            .map(|&v| match (v as usize).cmp(&bg) {
                std::cmp::Ordering::Less => v,
                std::cmp::Ordering::Equal => n_fg,
                std::cmp::Ordering::Greater => v - 1,
            })
            .collect();
        let labels = LabelMap::from_vec(labels.width(), labels.height(), remap)?;
        let legend = ClassVocabulary::new(fg, crate::inference::DEFAULT_TEMPLATE)?;
        let bg_index = (!foreground_only).then_some(n_fg as usize);
        SegmentationMap::new(labels, legend, bg_index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new(STUDENT_KIND);
        ck.set_meta("student_config", self.config.to_kv_string());
        ck.set_meta("class_names", self.class_names.join("\n"));
        ck.set_meta(
            "background",
            self.background.map_or("none".to_string(), |b| b.to_string()),
        );
        for (name, var) in self.params.iter() {
            ck.insert(format!("param.{name}"), var.as_tensor())?;
        }
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        if ck.kind() != STUDENT_KIND {
            return Err(Error::Checkpoint(format!(
                "{}: expected a `{STUDENT_KIND}` checkpoint, found `{}`",
                path.display(),
                ck.kind()
            )));
        }
        let mut config = StudentConfig::default();
        config.apply_text(ck.meta("student_config")?, path)?;
        let class_names: Vec<String> = ck.meta("class_names")?.split('\n').map(String::from).collect();
        let background = match ck.meta("background")? {
            "none" => None,
            s => Some(
                s.parse::<usize>()
                    .map_err(|_| Error::Checkpoint(format!("bad background index `{s}`")))?,
            ),
        };
        Self::check(&class_names, background)?;
        // Rebuild with fresh parameters, then overwrite every one from the file.
        let student = Self::init(config, class_names, background)?;
        let saved = ck.with_prefix("param.");
        if saved.len() != student.params.len() {
            return Err(Error::Checkpoint(format!(
                "{}: {} parameter arrays, student uses {}",
                path.display(),
                saved.len(),
                student.params.len()
            )));
        }
        student.params.load(&saved)?;
        Ok(student)
    }
}

/// An image with a label map in student class space (`IGNORE_VALUE` skipped).
#[derive(Debug, Clone)]
pub struct StudentSample {
    pub id: String,
    pub image: RgbImage,
    pub labels: LabelMap,
}

/// Reads a label manifest written by [`generate_labels`] (or any manifest
/// with `label` entries) together with its `classes.txt`.
pub fn load_label_set(manifest: &Path) -> Result<(Vec<StudentSample>, Vec<String>)> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let classes = crate::data::read_class_list(&base.join(LABELS_CLASSES))?;
    let mut out = Vec::new();
    for rec in read_records(manifest)? {
        let (line, rec) = rec?;
        let id = rec.resolved_id();
        let label = rec.label.as_deref().ok_or_else(|| Error::Parse {
            path: manifest.to_path_buf(),
            line,
            message: format!("record `{id}` has no `label` field"),
        })?;
        let resolve = |p: &str| {
            let p = Path::new(p);
            if p.is_absolute() { p.to_path_buf() } else { base.join(p) }
        };
        let image = load_rgb(&id, &resolve(&rec.image))?;
        let labels = LabelMap::load_png(&resolve(label))?;
        if labels.width() != image.width() as usize || labels.height() != image.height() as usize {
            return Err(Error::Record {
                id,
                message: "label map and image sizes differ".into(),
            });
        }
        if let Some(&bad) = labels.distinct().iter().find(|&&v| v != IGNORE_VALUE && v as usize >= classes.len()) {
            return Err(Error::Record {
                id,
                message: format!("label {bad} outside {} classes", classes.len()),
            });
        }
        out.push(StudentSample { id, image, labels });
    }
    Ok((out, classes))
}

/// Mean cross-entropy over non-ignored pixels. `labels` holds one map per
/// batch image at logit resolution. Returns `None` when every pixel is ignored.
pub fn cross_entropy(logits: &Tensor, labels: &[LabelMap]) -> Result<Option<Tensor>> {
    let (b, c, h, w) = logits.dims4()?;
    if labels.len() != b || labels.iter().any(|l| l.width() != w || l.height() != h) {
        return Err(Error::Input("label maps do not match the logits".into()));
    }
    let mut onehot = vec![0.0f64; b * h * w * c];
    let mut valid = 0usize;
    for (i, l) in labels.iter().enumerate() {
        for (p, &v) in l.as_slice().iter().enumerate() {
            if v == IGNORE_VALUE {
                continue;
            }
            if v as usize >= c {
                return Err(Error::Input(format!("label {v} outside {c} classes")));
            }
            onehot[(i * h * w + p) * c + v as usize] = 1.0;
            valid += 1;
        }
    }
    if valid == 0 {
        return Ok(None);
    }
    let logp = log_softmax_last(&logits.permute((0, 2, 3, 1))?.contiguous()?)?;
    let target = Tensor::from_vec(onehot, (b, h, w, c), logits.device())?.to_dtype(DType::F64)?;
    let nll = (logp * target)?.sum_all()?.neg()?;
    Ok(Some((nll / valid as f64)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StudentStep {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Trains a student on the samples. The background class, when given, is an
/// ordinary class during training.
pub fn train_student(
    samples: &[StudentSample],
    class_names: Vec<String>,
    background: Option<usize>,
    config: StudentConfig,
) -> Result<(Student, Vec<StudentStep>)> {
    if samples.is_empty() {
        return Err(Error::Input("student training needs at least one labeled image".into()));
    }
    let student = Student::init(config, class_names, background)?;
    let cfg = student.config.clone();
    let s = cfg.total_stride();
    let views: Vec<(RgbImage, LabelMap)> = samples
        .iter()
        .map(|x| {
            let img = pad_to_multiple(&x.image, s);
            let (pw, ph) = (img.width() as usize, img.height() as usize);
            // Padding rows/columns carry no supervision.
            let mut lab = LabelMap::filled(pw, ph, IGNORE_VALUE);
            for y in 0..x.labels.height() {
                for xx in 0..x.labels.width() {
                    lab.set(xx, y, x.labels.get(xx, y));
                }
            }
            (img, lab.downsample_majority(cfg.mask_stride, Some(IGNORE_VALUE)))
        })
        .collect();
    let first = views[0].0.dimensions();
    if views.iter().any(|(im, _)| im.dimensions() != first) {
        return Err(Error::Input("student training expects images of one size".into()));
    }
    let spe = epoch_batches(samples.len(), cfg.batch_size, cfg.seed, 0).len() as u64;
    let total = spe * cfg.epochs as u64;
    let warmup = (cfg.warmup_epochs * spe as f64).round() as u64;
    let opt = AdamW {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: cfg.weight_decay,
    };
    let mut moments = Moments::default();
    let mut log = Vec::with_capacity(total as usize);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs as u64 {
        for batch in epoch_batches(samples.len(), cfg.batch_size, cfg.seed, epoch) {
            let imgs: Vec<&RgbImage> = batch.iter().map(|&i| &views[i].0).collect();
            let labs: Vec<LabelMap> = batch.iter().map(|&i| views[i].1.clone()).collect();
            let lr = poly_learning_rate(step, cfg.base_lr, warmup, total, cfg.poly_power);
            let logits = student.forward(&images_to_batch(&imgs)?)?;
            if let Some(loss) = cross_entropy(&logits, &labs)? {
                let value = loss.to_scalar::<f64>()?;
                if !value.is_finite() {
                    return Err(Error::NonFinite {
                        step,
                        lr,
                        report: format!("student cross-entropy {value}"),
                    });
                }
                let grads = loss.backward()?;
                let norm = global_grad_norm(&student.params, &grads)?;
                let scale = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
                    cfg.grad_clip / norm
                } else {
                    1.0
                };
                opt.update(&student.params, &mut moments, &grads, scale, lr, step + 1)?;
                log.push(StudentStep {
                    step,
                    lr,
                    loss: value,
                    grad_norm: norm,
                });
            }
            step += 1;
        }
    }
    Ok((student, log))
}

/// Per-class and mean IoU differences `student − teacher`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub protocol: String,
    pub teacher_miou: f64,
    pub student_miou: f64,
    pub miou_delta: f64,
    /// `(class, delta)`; `None` where either side has no IoU for the class.
    pub per_class: Vec<(String, Option<f64>)>,
}

pub fn compare(teacher: &EvalReport, student: &EvalReport) -> Result<Comparison> {
    if teacher.protocol != student.protocol {
        return Err(Error::Input(format!(
            "cannot compare a {} report with a {} report",
            teacher.protocol, student.protocol
        )));
    }
    if teacher.class_names != student.class_names {
        return Err(Error::Input("reports use different class lists".into()));
    }
    let (t, s) = (teacher.miou()?, student.miou()?);
    let per_class = teacher
        .class_names
        .iter()
        .zip(teacher.iou_per_class().into_iter().zip(student.iou_per_class()))
        .map(|(name, (a, b))| (name.clone(), a.zip(b).map(|(a, b)| b - a)))
        .collect();
    Ok(Comparison {
        protocol: teacher.protocol.to_string(),
        teacher_miou: t,
        student_miou: s,
        miou_delta: s - t,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, ClassPalette};
    use crate::evalmod::Protocol;

    fn tiny_config() -> StudentConfig {
        StudentConfig {
            epochs: 60,
            batch_size: 4,
            base_lr: 1e-2,
            backbone_channels: vec![8, 16],
            embed_dim: 16,
            ..StudentConfig::default()
        }
    }

    fn samples(n: usize, size: u32) -> (Vec<StudentSample>, Vec<String>) {
        let (_, labeled) = synth_dataset(5, n, size, &ClassPalette::default()).unwrap();
        let names = labeled[0].class_names.clone();
        let s = labeled
            .into_iter()
            .map(|l| StudentSample {
                id: l.id,
                image: l.image,
                labels: l.labels,
            })
            .collect();
        (s, names)
    }

    #[test]
    fn poly_schedule_endpoints() {
        assert_eq!(poly_learning_rate(0, 1.0, 4, 20, 1.0), 0.0);
        assert_eq!(poly_learning_rate(4, 1.0, 4, 20, 1.0), 1.0);
        assert!((poly_learning_rate(12, 1.0, 4, 20, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(poly_learning_rate(20, 1.0, 4, 20, 0.9), 0.0);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_c() {
        let logits = Tensor::zeros((1, 5, 2, 2), DType::F64, &crate::segmodel::nn::device()).unwrap();
        let labels = vec![LabelMap::from_vec(2, 2, vec![0, 4, IGNORE_VALUE, 2]).unwrap()];
        let l = cross_entropy(&logits, &labels).unwrap().unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
        let all_ignored = vec![LabelMap::filled(2, 2, IGNORE_VALUE)];
        assert!(cross_entropy(&logits, &all_ignored).unwrap().is_none());
    }

    #[test]
    fn student_overfits_a_few_images() {
        let (s, names) = samples(8, 32);
        let (student, log) = train_student(&s, names.clone(), Some(0), tiny_config()).unwrap();
        let tenth = (log.len() / 10).max(1);
        let median = |v: &[StudentStep]| {
            let mut x: Vec<f64> = v.iter().map(|s| s.loss).collect();
            x.sort_by(f64::total_cmp);
            x[x.len() / 2]
        };
        assert!(median(&log[log.len() - tenth..]) < median(&log[..tenth]));
        let (mut hit, mut total) = (0usize, 0usize);
        for x in &s {
            let pred = student.predict_labels(&x.image, false).unwrap();
            assert!(pred.distinct().iter().all(|&v| (v as usize) < names.len()));
            for (a, b) in pred.as_slice().iter().zip(x.labels.as_slice()) {
                hit += (a == b) as usize;
                total += 1;
            }
        }
        let acc = hit as f64 / total as f64;
        assert!(acc >= 0.95, "pixel accuracy {acc}");

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.safetensors");
        student.save(&p).unwrap();
        let back = Student::load(&p).unwrap();
        assert_eq!(
            back.predict_labels(&s[0].image, false).unwrap(),
            student.predict_labels(&s[0].image, false).unwrap()
        );
    }

    #[test]
    fn foreground_only_never_predicts_background() {
        let (s, names) = samples(2, 16);
        let cfg = StudentConfig { epochs: 1, ..tiny_config() };
        let (student, _) = train_student(&s, names, Some(0), cfg).unwrap();
        let seg = student.predict(&s[0].image, true).unwrap();
        assert!(seg.background_index.is_none());
        assert!(seg.labels.distinct().iter().all(|&v| (v as usize) < seg.legend.len()));
    }

    #[test]
    fn empty_training_set_is_an_error() {
        assert!(train_student(&[], vec!["a".into()], None, tiny_config()).is_err());
    }

    fn report(diag: u64, off: u64, protocol: Protocol) -> EvalReport {
        let mut r = EvalReport::new(vec!["a".into(), "b".into()], None, protocol, None).unwrap();
        r.confusion = vec![vec![diag, off], vec![off, diag]];
        r
    }

    #[test]
    fn compare_is_zero_on_identical_and_antisymmetric() {
        let a = report(5, 1, Protocol::WithoutBackground);
        let b = report(3, 3, Protocol::WithoutBackground);
        let same = compare(&a, &a).unwrap();
        assert_eq!(same.miou_delta, 0.0);
        assert!(same.per_class.iter().all(|(_, d)| *d == Some(0.0)));
        let ab = compare(&a, &b).unwrap();
        let ba = compare(&b, &a).unwrap();
        assert_eq!(ab.miou_delta, -ba.miou_delta);
        for ((_, x), (_, y)) in ab.per_class.iter().zip(&ba.per_class) {
            assert_eq!(x.unwrap(), -y.unwrap());
        }
        assert!(compare(&a, &report(5, 1, Protocol::WithBackground)).is_err());
    }
}
