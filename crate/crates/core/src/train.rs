//! The optimization loop: per batch, pseudo-masks for the augmented views,
//! image and caption forward passes, per-image matching, the weighted loss,
//! and an AdamW update.
//!
//! All randomness is derived from `(seed, epoch)` for the data order and
//! `(seed, step, slot)` for augmentation, so a run resumed from a checkpoint
//! at step `s` replays exactly what the uninterrupted run would have done.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{IndexOp, Tensor};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{format_f64, format_list, parse_list, parse_value, unknown_key, KvConfig};
use crate::data::augment::{random_resized_crop, resize};
use crate::data::{extract_words, tokenize, CaptionTokens, ImageTextPair, LabelMap, Vocab, WordMode};
use crate::losses::{contrastive_loss, mask_loss, total_loss, LossReport, LossWeights};
use crate::matching::{cost_matrix_from_labels, hungarian};
use crate::pseudomask::{
    backbone_from_spec, canonical_relabel, generate_pseudo_masks, FeatureBackbone, PseudoMaskCache,
    PseudoMaskSet,
};
use crate::segmodel::checkpoint::Checkpoint;
use crate::segmodel::nn::ModelParams;
use crate::segmodel::{images_to_batch, init_params, ModelConfig, SegModel};
use crate::{Error, Result};

pub const CHECKPOINT_KIND: &str = "sseg";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CONFIG_SNAPSHOT: &str = "config.cfg";
pub const FINAL_CHECKPOINT: &str = "model.safetensors";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    /// Linear warmup length in epochs (fractional values allowed).
    pub warmup_epochs: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    /// Side of the square training view.
    pub image_size: u32,
    /// Random resized crops; when off, images are only resized.
    pub augment: bool,
    pub crop_scale_min: f64,
    pub word_mode: WordMode,
    pub pseudo_k: usize,
    /// `color` or `vit:<weights>`.
    pub pseudo_backbone: String,
    pub pseudo_stride: usize,
    pub pseudo_position_weight: f64,
    /// Only consulted when `augment` is off: the views are then fixed per image.
    pub pseudo_cache: Option<PathBuf>,
    /// Write an intermediate checkpoint every this many steps (0: final only).
    pub checkpoint_every: u64,
    pub loss: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 32,
            base_lr: 5e-4,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            warmup_epochs: 2.0,
            grad_clip: 1.0,
            image_size: 32,
            augment: true,
            crop_scale_min: crate::data::augment::DEFAULT_CROP_SCALE.0,
            word_mode: WordMode::ContentWords,
            pseudo_k: crate::pseudomask::DEFAULT_K,
            pseudo_backbone: "color".into(),
            pseudo_stride: 4,
            pseudo_position_weight: 0.1,
            pseudo_cache: None,
            checkpoint_every: 0,
            loss: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults with the small model.
    pub fn tiny() -> Self {
        Self {
            model: ModelConfig::tiny(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(
                "batch_size must be at least 2 (the contrastive loss needs negatives)".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 || self.warmup_epochs < 0.0 || self.grad_clip < 0.0 || self.adam_eps <= 0.0 {
            return Err(Error::Config(
                "weight_decay, warmup_epochs and grad_clip must be >= 0, adam_eps > 0".into(),
            ));
        }
        if self.image_size == 0 || self.image_size as usize % self.model.total_stride() != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of the model stride {}",
                self.image_size,
                self.model.total_stride()
            )));
        }
        if !(self.crop_scale_min > 0.0 && self.crop_scale_min <= 1.0) {
            return Err(Error::Config("crop_scale_min must lie in (0, 1]".into()));
        }
        if self.pseudo_k == 0 || self.pseudo_k > self.model.n_queries {
            return Err(Error::Config(format!(
                "pseudo.k = {} must lie in 1..={} (model.n_queries)",
                self.pseudo_k, self.model.n_queries
            )));
        }
        Ok(())
    }
}

impl KvConfig for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(k) = key.strip_prefix("model.") {
            return self.model.set(k, value);
        }
        if let Some(k) = key.strip_prefix("loss.") {
            return self.loss.set(k, value);
        }
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "optimizer" => {
                if value != "adamw" {
                    return Err(Error::Config(format!("optimizer `{value}`: only adamw is available")));
                }
            }
            "schedule" => {
                if value != "cosine" {
                    return Err(Error::Config(format!("schedule `{value}`: only cosine is available")));
                }
            }
            "base_lr" => self.base_lr = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "betas" => {
                let b: Vec<f64> = parse_list(key, value)?;
                let [b1, b2] = b[..] else {
                    return Err(Error::Config("betas takes two values, e.g. `0.9,0.999`".into()));
                };
                self.betas = (b1, b2);
            }
            "adam_eps" => self.adam_eps = parse_value(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse_value(key, value)?,
            "grad_clip" => self.grad_clip = parse_value(key, value)?,
            "image_size" => self.image_size = parse_value(key, value)?,
            "augment" => self.augment = parse_value(key, value)?,
            "crop_scale_min" => self.crop_scale_min = parse_value(key, value)?,
            "word_mode" => self.word_mode = parse_value(key, value)?,
            "pseudo.k" => self.pseudo_k = parse_value(key, value)?,
            "pseudo.backbone" => self.pseudo_backbone = value.to_string(),
            "pseudo.stride" => self.pseudo_stride = parse_value(key, value)?,
            "pseudo.position_weight" => self.pseudo_position_weight = parse_value(key, value)?,
            "pseudo.cache_dir" => {
                self.pseudo_cache = (value != "none").then(|| PathBuf::from(value));
            }
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            _ => return Err(unknown_key(key, self)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("optimizer".into(), "adamw".into()),
            ("schedule".into(), "cosine".into()),
            ("base_lr".into(), format_f64(self.base_lr)),
            ("weight_decay".into(), format_f64(self.weight_decay)),
            ("betas".into(), format_list(&[format_f64(self.betas.0), format_f64(self.betas.1)])),
            ("adam_eps".into(), format_f64(self.adam_eps)),
            ("warmup_epochs".into(), format_f64(self.warmup_epochs)),
            ("grad_clip".into(), format_f64(self.grad_clip)),
            ("image_size".into(), self.image_size.to_string()),
            ("augment".into(), self.augment.to_string()),
            ("crop_scale_min".into(), format_f64(self.crop_scale_min)),
            ("word_mode".into(), self.word_mode.to_string()),
            ("pseudo.k".into(), self.pseudo_k.to_string()),
            ("pseudo.backbone".into(), self.pseudo_backbone.clone()),
            ("pseudo.stride".into(), self.pseudo_stride.to_string()),
            ("pseudo.position_weight".into(), format_f64(self.pseudo_position_weight)),
            (
                "pseudo.cache_dir".into(),
                self.pseudo_cache
                    .as_ref()
                    .map_or("none".into(), |p| p.display().to_string()),
            ),
            ("checkpoint_every".into(), self.checkpoint_every.to_string()),
        ];
        out.extend(self.loss.entries().into_iter().map(|(k, v)| (format!("loss.{k}"), v)));
        out.extend(self.model.entries().into_iter().map(|(k, v)| (format!("model.{k}"), v)));
        out
    }
}

/// Mixes a sequence of integers into one seed (SplitMix64 finalizer per part).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

const EPOCH_STREAM: u64 = 1;
const VIEW_STREAM: u64 = 2;

/// Shuffled index batches of one epoch. A trailing batch of one image is
/// merged into the previous batch so every step has in-batch negatives.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, EPOCH_STREAM, epoch])));
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

/// Linear warmup from 0 to `base_lr` over `warmup` steps, then cosine decay
/// to 0 at `total`.
pub fn learning_rate(step: u64, base_lr: f64, warmup: u64, total: u64) -> f64 {
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW with decoupled weight decay applied to parameters of rank ≥ 2.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moment estimates per parameter name.
#[derive(Debug, Clone, Default)]
pub struct Moments {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    /// One update with already-scaled gradients. `t` is the 1-based update count.
    /// Parameters without a gradient are treated as having gradient zero.
    pub fn update(
        &self,
        params: &ModelParams,
        moments: &mut Moments,
        grads: &GradStore,
        grad_scale: f64,
        lr: f64,
        t: u64,
    ) -> Result<()> {
        let c1 = 1.0 - self.beta1.powi(t as i32);
        let c2 = 1.0 - self.beta2.powi(t as i32);
        for (name, var) in params.iter() {
            let p = var.as_tensor();
            let g = match grads.get(p) {
                // Detached so stored moments never keep autograd history alive.
                Some(g) => (g.detach() * grad_scale)?,
                None => p.zeros_like()?,
            };
            let m = match moments.m.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match moments.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let (m, v) = (m.detach(), v.detach());
            let mut step = ((&m / c1)? / ((&v / c2)?.sqrt()? + self.eps)?)?;
            if self.weight_decay > 0.0 && p.rank() >= 2 {
                step = (step + (p.detach() * self.weight_decay)?)?;
            }
            var.set(&(p - (step * lr)?)?)?;
            moments.m.insert(name.clone(), m);
            moments.v.insert(name.clone(), v);
        }
        Ok(())
    }
}

/// `sqrt(Σ‖g‖²)` over all parameters that received a gradient.
pub fn global_grad_norm(params: &ModelParams, grads: &GradStore) -> Result<f64> {
    let mut sq = 0.0;
    for (_, var) in params.iter() {
        if let Some(g) = grads.get(var.as_tensor()) {
            sq += g.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
    }
    Ok(sq.sqrt())
}

/// Everything a run needs to continue: parameters, optimizer moments and the
/// number of completed steps. Randomness is a pure function of `(seed, step)`.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub moments: Moments,
    pub step: u64,
}

/// One training example after caption processing.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub image: RgbImage,
    pub tokens: CaptionTokens,
}

/// Builds the word vocabulary from the captions (at most `model.vocab_size`
/// entries) and tokenizes every caption.
pub fn prepare_samples(pairs: &[ImageTextPair], config: &TrainConfig) -> Result<(Vec<TrainSample>, Vocab)> {
    let words: Vec<Vec<String>> = pairs
        .iter()
        .map(|p| extract_words(&p.caption, config.word_mode))
        .collect();
    let vocab = Vocab::build(words.iter().map(Vec::as_slice), config.model.vocab_size)?;
    let samples = tokenize_samples(pairs, &words, &vocab, config)?;
    Ok((samples, vocab))
}

fn tokenize_samples(
    pairs: &[ImageTextPair],
    words: &[Vec<String>],
    vocab: &Vocab,
    config: &TrainConfig,
) -> Result<Vec<TrainSample>> {
    pairs
        .iter()
        .zip(words)
        .map(|(p, w)| {
            Ok(TrainSample {
                id: p.id.clone(),
                image: p.image.clone(),
                tokens: tokenize(w, vocab, config.model.context_length)?,
            })
        })
        .collect()
}

/// A prepared batch: image tensor, caption tokens and pseudo-masks at mask resolution.
pub struct Batch {
    pub images: Tensor,
    pub tokens: Vec<CaptionTokens>,
    pub pseudo: Vec<PseudoMaskSet>,
}

/// Majority-pools a pseudo-mask by `factor`; segments that vanish are dropped
/// and the rest renumbered.
pub fn downsample_pseudo(pseudo: &PseudoMaskSet, factor: usize) -> Result<PseudoMaskSet> {
    if factor == 1 {
        return Ok(pseudo.clone());
    }
    let pooled: LabelMap = canonical_relabel(&pseudo.label_map.downsample_majority(factor, None));
    let k = pooled.distinct().len();
    PseudoMaskSet::new(pooled, k)
}

/// Loss terms for one batch. The returned tensor carries the graph.
pub fn batch_loss(model: &SegModel, batch: &Batch, weights: &LossWeights) -> Result<(Tensor, LossReport)> {
    let out = model.forward_image(&batch.images)?;
    let (b, n, h, w) = out.mask_logits.dims4()?;
    if batch.pseudo.len() != b || batch.tokens.len() != b {
        return Err(Error::Input(format!(
            "batch of {b} images has {} pseudo-mask sets and {} captions",
            batch.pseudo.len(),
            batch.tokens.len()
        )));
    }
    let values = out.mask_logits.reshape((b, n, h * w))?.to_vec3::<f64>()?;
    let mut mask = Vec::with_capacity(b);
    let mut dice = Vec::with_capacity(b);
    let mut focal = Vec::with_capacity(b);
    for (i, pseudo) in batch.pseudo.iter().enumerate() {
        let costs = cost_matrix_from_labels(pseudo.label_map.as_slice(), pseudo.k, &values[i], weights)?;
        let assignment = hungarian(&costs)?;
        let (m, d, f) = mask_loss(&out.mask_logits.i(i)?, pseudo, &assignment, weights)?;
        mask.push(m);
        dice.push(d);
        focal.push(f);
    }
    let mean = |v: Vec<Tensor>| -> Result<Tensor> { Ok(Tensor::stack(&v, 0)?.mean_all()?) };
    let (mask, dice, focal) = (mean(mask)?, mean(dice)?, mean(focal)?);

    let visual = model.project_visual(&out.mask_features)?;
    let text = model.project_text(&model.forward_text(&batch.tokens)?)?;
    let sigma = model.log_temperature().exp()?;
    let c = contrastive_loss(&visual, &text, &sigma)?;
    let total = total_loss(&mask, &c.contrastive, weights)?;
    let s = |t: &Tensor| -> Result<f64> { Ok(t.to_scalar::<f64>()?) };
    let report = LossReport {
        mask: s(&mask)?,
        dice: s(&dice)?,
        focal: s(&focal)?,
        i2t: s(&c.i2t)?,
        t2i: s(&c.t2i)?,
        contrastive: s(&c.contrastive)?,
        total: s(&total)?,
    };
    Ok((total, report))
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub grad_norm: f64,
    pub temperature: f64,
    #[serde(flatten)]
    pub loss: LossReport,
}

/// Gradient step on one batch; leaves the state untouched on a non-finite loss.
pub fn train_step(
    model: &SegModel,
    state: &mut TrainState,
    batch: &Batch,
    config: &TrainConfig,
    lr: f64,
) -> Result<(LossReport, f64)> {
    let (total, report) = batch_loss(model, batch, &config.loss)?;
    if !report.is_finite() {
        return Err(Error::NonFinite {
            step: state.step,
            lr,
            report: report.to_string(),
        });
    }
    let grads = total.backward()?;
    let norm = global_grad_norm(&state.params, &grads)?;
    if !norm.is_finite() {
        return Err(Error::NonFinite {
            step: state.step,
            lr,
            report: format!("{report}; gradient norm {norm}"),
        });
    }
    let scale = if config.grad_clip > 0.0 && norm > config.grad_clip {
        config.grad_clip / norm
    } else {
        1.0
    };
    let opt = AdamW {
        beta1: config.betas.0,
        beta2: config.betas.1,
        eps: config.adam_eps,
        weight_decay: config.weight_decay,
    };
    opt.update(&state.params, &mut state.moments, &grads, scale, lr, state.step + 1)?;
    model.clamp_temperature()?;
    state.step += 1;
    Ok((report, norm))
}

/// The training view of one image for a given step and batch slot.
pub fn training_view(image: &RgbImage, config: &TrainConfig, step: u64, slot: usize) -> RgbImage {
    let s = config.image_size;
    if config.augment {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, VIEW_STREAM, step, slot as u64]));
        random_resized_crop(image, s, (config.crop_scale_min, 1.0), &mut rng)
    } else if image.dimensions() == (s, s) {
        image.clone()
    } else {
        resize(image, s, s)
    }
}

/// Owns everything needed to run steps: data, model, optimizer state, and
/// the pseudo-mask source.
pub struct Trainer {
    pub config: TrainConfig,
    pub samples: Vec<TrainSample>,
    pub vocab: Vocab,
    pub model: SegModel,
    pub state: TrainState,
    backbone: Box<dyn FeatureBackbone>,
    cache: Option<PseudoMaskCache>,
}

impl Trainer {
    /// Fresh parameters from `config.seed`.
    pub fn new(config: TrainConfig, pairs: &[ImageTextPair]) -> Result<Self> {
        config.validate()?;
        let (samples, vocab) = prepare_samples(pairs, &config)?;
        let params = init_params(&config.model, config.seed)?;
        let state = TrainState {
            params,
            moments: Moments::default(),
            step: 0,
        };
        Self::assemble(config, samples, vocab, state)
    }

    /// Continues from a checkpoint; its model configuration and vocabulary win
    /// over what `config` and `pairs` would produce.
    pub fn resume(config: TrainConfig, pairs: &[ImageTextPair], checkpoint: &Path) -> Result<Self> {
        let ck = Checkpoint::load(checkpoint)?;
        let saved = CheckpointContents::read(&ck)?;
        if saved.model_config != config.model {
            return Err(Error::Config(
                "model configuration differs from the checkpoint being resumed".into(),
            ));
        }
        config.validate()?;
        let words: Vec<Vec<String>> = pairs
            .iter()
            .map(|p| extract_words(&p.caption, config.word_mode))
            .collect();
        let samples = tokenize_samples(pairs, &words, &saved.vocab, &config)?;
        let state = saved.state;
        Self::assemble(config, samples, saved.vocab, state)
    }

    fn assemble(config: TrainConfig, samples: Vec<TrainSample>, vocab: Vocab, state: TrainState) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::Input("training needs at least two image-caption pairs".into()));
        }
        let backbone = backbone_from_spec(
            &config.pseudo_backbone,
            config.pseudo_stride,
            config.pseudo_position_weight,
        )?;
        let cache = match (&config.pseudo_cache, config.augment) {
            (Some(root), false) => Some(PseudoMaskCache::open(root, &backbone.id(), config.pseudo_k, config.seed)?),
            (Some(_), true) => {
                log::warn!("pseudo-mask cache ignored: augmented views change every step");
                None
            }
            _ => None,
        };
        let model = SegModel::new(config.model.clone(), state.params.clone())?;
        Ok(Self {
            config,
            samples,
            vocab,
            model,
            state,
            backbone,
            cache,
        })
    }

    pub fn steps_per_epoch(&self) -> u64 {
        epoch_batches(self.samples.len(), self.config.batch_size, self.config.seed, 0).len() as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.config.epochs as u64
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.config.warmup_epochs * self.steps_per_epoch() as f64).round() as u64
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        learning_rate(step, self.config.base_lr, self.warmup_steps(), self.total_steps())
    }

    /// Image indices of the batch at `step`.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let epoch = step / spe;
        let batches = epoch_batches(self.samples.len(), self.config.batch_size, self.config.seed, epoch);
        batches[(step % spe) as usize].clone()
    }

    fn pseudo_for(&self, sample: &TrainSample, view: &RgbImage, step: u64, slot: usize) -> Result<PseudoMaskSet> {
        if !self.config.augment {
            // Fixed view per image: clustering seed is the run seed, as in the cache.
            return match &self.cache {
                Some(c) => c.get_or_generate(&sample.id, view, self.backbone.as_ref(), self.config.seed),
                None => generate_pseudo_masks(&sample.id, view, self.backbone.as_ref(), self.config.pseudo_k, self.config.seed),
            };
        }
        let seed = derive_seed(&[self.config.seed, VIEW_STREAM, step, slot as u64, 1]);
        generate_pseudo_masks(&sample.id, view, self.backbone.as_ref(), self.config.pseudo_k, seed)
    }

    /// Materializes the batch for `step`.
    pub fn batch_at(&self, step: u64) -> Result<Batch> {
        let idx = self.batch_indices(step);
        let mut views = Vec::with_capacity(idx.len());
        let mut pseudo = Vec::with_capacity(idx.len());
        let mut tokens = Vec::with_capacity(idx.len());
        for (slot, &i) in idx.iter().enumerate() {
            let s = &self.samples[i];
            let view = training_view(&s.image, &self.config, step, slot);
            let p = self.pseudo_for(s, &view, step, slot)?;
            pseudo.push(downsample_pseudo(&p, self.config.model.mask_stride)?);
            tokens.push(s.tokens.clone());
            views.push(view);
        }
        let refs: Vec<&RgbImage> = views.iter().collect();
        Ok(Batch {
            images: images_to_batch(&refs)?,
            tokens,
            pseudo,
        })
    }

    /// Runs the next step and returns its log record.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.state.step;
        let lr = self.lr_at(step);
        let batch = self.batch_at(step)?;
        let (loss, grad_norm) = train_step(&self.model, &mut self.state, &batch, &self.config, lr)?;
        Ok(StepRecord {
            step,
            epoch: step / self.steps_per_epoch(),
            lr,
            grad_norm,
            temperature: self.model.temperature()?,
            loss,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND);
        ck.set_meta("model_config", self.config.model.to_kv_string());
        ck.set_meta("train_config", self.config.to_kv_string());
        ck.set_meta("vocab", self.vocab.tokens().join("\n"));
        ck.set_meta("word_mode", self.config.word_mode.to_string());
        ck.set_meta("step", self.state.step.to_string());
        for (name, var) in self.state.params.iter() {
            ck.insert(format!("param.{name}"), var.as_tensor())?;
        }
        for (name, t) in &self.state.moments.m {
            ck.insert(format!("adam.m.{name}"), t)?;
        }
        for (name, t) in &self.state.moments.v {
            ck.insert(format!("adam.v.{name}"), t)?;
        }
        Ok(ck)
    }

    /// Runs the remaining steps, writing the log, periodic checkpoints, the
    /// config snapshot and the final checkpoint under `out_dir`.
    pub fn run(&mut self, out_dir: &Path) -> Result<TrainOutcome> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let snapshot = out_dir.join(CONFIG_SNAPSHOT);
        std::fs::write(&snapshot, self.config.to_kv_string()).map_err(|e| Error::io(&snapshot, e))?;
        let log_path = out_dir.join(LOG_FILE);
        let mut records = read_log(&log_path).unwrap_or_default();
        records.retain(|r| r.step < self.state.step);
        rewrite_log(&log_path, &records)?;
        let mut log = std::fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let total = self.total_steps();
        while self.state.step < total {
            let rec = self.step()?;
            let line = serde_json::to_string(&rec).expect("records serialize");
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
            log::debug!("step {} lr {:.3e} {}", rec.step, rec.lr, rec.loss);
            if self.config.checkpoint_every > 0 && self.state.step % self.config.checkpoint_every == 0 && self.state.step < total {
                let p = out_dir
                    .join(CHECKPOINT_DIR)
                    .join(format!("step_{:06}.safetensors", self.state.step));
                self.checkpoint()?.save(&p)?;
            }
            records.push(rec);
        }
        let final_path = out_dir.join(FINAL_CHECKPOINT);
        self.checkpoint()?.save(&final_path)?;
        Ok(TrainOutcome {
            checkpoint: final_path,
            records,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    /// Every step of the run, including steps before a resume.
    pub records: Vec<StepRecord>,
}

/// Trains from scratch, or from `resume` when given.
pub fn train(config: TrainConfig, pairs: &[ImageTextPair], out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = match resume {
        Some(ck) => Trainer::resume(config, pairs, ck)?,
        None => Trainer::new(config, pairs)?,
    };
    trainer.run(out_dir)
}

pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn rewrite_log(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("records serialize"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Decoded contents of a training checkpoint.
pub struct CheckpointContents {
    pub model_config: ModelConfig,
    pub train_config_text: String,
    pub vocab: Vocab,
    pub word_mode: WordMode,
    pub state: TrainState,
}

impl CheckpointContents {
    pub fn read(ck: &Checkpoint) -> Result<Self> {
        if ck.kind() != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a `{CHECKPOINT_KIND}` checkpoint, found `{}`",
                ck.kind()
            )));
        }
        let origin = Path::new("<checkpoint model_config>");
        let mut model_config = ModelConfig::default();
        model_config.apply_text(ck.meta("model_config")?, origin)?;
        let vocab = Vocab::from_tokens(ck.meta("vocab")?.split('\n').map(String::from).collect())?;
        let word_mode: WordMode = ck
            .meta("word_mode")?
            .parse()
            .map_err(|e: String| Error::Checkpoint(e))?;
        let step: u64 = ck
            .meta("step")?
            .parse()
            .map_err(|_| Error::Checkpoint("unreadable step".into()))?;
        let params = init_params(&model_config, 0)?;
        params.load(&ck.with_prefix("param."))?;
        let moments = Moments {
            m: ck.with_prefix("adam.m."),
            v: ck.with_prefix("adam.v."),
        };
        Ok(Self {
            model_config,
            train_config_text: ck.meta("train_config").unwrap_or_default().to_string(),
            vocab,
            word_mode,
            state: TrainState { params, moments, step },
        })
    }
}

/// Loads a trained model for inference.
pub fn load_model(path: &Path) -> Result<(SegModel, Vocab, WordMode)> {
    let c = CheckpointContents::read(&Checkpoint::load(path)?)?;
    let model = SegModel::new(c.model_config, c.state.params)?;
    Ok((model, c.vocab, c.word_mode))
}
