//! The segmentation network: a strided convolutional pyramid, a top-down
//! per-pixel decoder, a query transformer that emits N masks with one feature
//! per mask, a causal text transformer, and the two projection heads that map
//! both sides into a shared unit-norm embedding space.
//!
//! Tensor layouts: images are `(B, 3, H, W)`, mask logits `(B, N, H/s, W/s)`
//! with `s = mask_stride`, mask features `(B, N, embed_dim)`.

pub mod checkpoint;
pub mod nn;

use candle_core::{IndexOp, Tensor, D};
use image::RgbImage;

use crate::config::{format_f64, format_list, parse_list, parse_value, unknown_key, KvConfig};
use crate::data::CaptionTokens;
use crate::{Error, Result};
use nn::{
    causal_mask, device, l2_normalize, sine_position_encoding, Conv2d, Init, LayerNorm,
    Mlp, ModelParams, MultiHeadAttention, ParamBuilder,
};

pub use checkpoint::Checkpoint;

/// Temperature at initialization.
pub const INIT_TEMPERATURE: f64 = 0.07;
/// Guard used by every L2 normalization in the model.
pub const NORM_EPS: f64 = 1e-8;
pub const LOG_TEMPERATURE: &str = "log_temperature";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_queries: usize,
    pub embed_dim: usize,
    pub decoder_layers: usize,
    pub text_layers: usize,
    pub context_length: usize,
    pub vocab_size: usize,
    /// Output channels of each backbone stage; every stage halves the resolution.
    pub backbone_channels: Vec<usize>,
    pub mask_stride: usize,
    pub proj_dim: usize,
    pub heads: usize,
    /// Hidden width of transformer feed-forward blocks, as a multiple of `embed_dim`.
    pub ffn_mult: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_queries: 64,
            embed_dim: 256,
            decoder_layers: 6,
            text_layers: 12,
            context_length: 77,
            vocab_size: 8192,
            backbone_channels: vec![64, 128, 256],
            mask_stride: 4,
            proj_dim: 256,
            heads: 8,
            ffn_mult: 4,
            sigma_min: 0.01,
            sigma_max: 100.0,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for CPU experiments and tests.
    pub fn tiny() -> Self {
        Self {
            n_queries: 16,
            embed_dim: 64,
            decoder_layers: 2,
            text_layers: 2,
            context_length: 16,
            vocab_size: 64,
            backbone_channels: vec![32, 64],
            mask_stride: 2,
            proj_dim: 64,
            heads: 4,
            ffn_mult: 2,
            sigma_min: 0.01,
            sigma_max: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_queries", self.n_queries),
            ("embed_dim", self.embed_dim),
            ("decoder_layers", self.decoder_layers),
            ("text_layers", self.text_layers),
            ("vocab_size", self.vocab_size),
            ("mask_stride", self.mask_stride),
            ("proj_dim", self.proj_dim),
            ("heads", self.heads),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be at least 1")));
            }
        }
        if self.context_length < 3 {
            return Err(Error::Config("model.context_length must be at least 3".into()));
        }
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return Err(Error::Config(
                "model.backbone_channels needs at least one positive entry".into(),
            ));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.embed_dim {} is not divisible by model.heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !self.mask_stride.is_power_of_two()
            || self.mask_stride < 2
            || self.mask_stride > self.total_stride()
        {
            return Err(Error::Config(format!(
                "model.mask_stride must be a power of two between 2 and {}",
                self.total_stride()
            )));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min <= INIT_TEMPERATURE && INIT_TEMPERATURE <= self.sigma_max) {
            return Err(Error::Config(format!(
                "temperature bounds must satisfy 0 < sigma_min <= {INIT_TEMPERATURE} <= sigma_max"
            )));
        }
        Ok(())
    }

    /// Input sides must be multiples of this.
    pub fn total_stride(&self) -> usize {
        1 << self.backbone_channels.len()
    }

}

impl KvConfig for ModelConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "n_queries" => self.n_queries = parse_value(key, value)?,
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "decoder_layers" => self.decoder_layers = parse_value(key, value)?,
            "text_layers" => self.text_layers = parse_value(key, value)?,
            "context_length" => self.context_length = parse_value(key, value)?,
            "vocab_size" => self.vocab_size = parse_value(key, value)?,
            "backbone_channels" => self.backbone_channels = parse_list(key, value)?,
            "mask_stride" => self.mask_stride = parse_value(key, value)?,
            "proj_dim" => self.proj_dim = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "ffn_mult" => self.ffn_mult = parse_value(key, value)?,
            "sigma_min" => self.sigma_min = parse_value(key, value)?,
            "sigma_max" => self.sigma_max = parse_value(key, value)?,
            _ => return Err(unknown_key(key, self)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        vec![
            ("n_queries".into(), self.n_queries.to_string()),
            ("embed_dim".into(), self.embed_dim.to_string()),
            ("decoder_layers".into(), self.decoder_layers.to_string()),
            ("text_layers".into(), self.text_layers.to_string()),
            ("context_length".into(), self.context_length.to_string()),
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("backbone_channels".into(), format_list(&self.backbone_channels)),
            ("mask_stride".into(), self.mask_stride.to_string()),
            ("proj_dim".into(), self.proj_dim.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("ffn_mult".into(), self.ffn_mult.to_string()),
            ("sigma_min".into(), format_f64(self.sigma_min)),
            ("sigma_max".into(), format_f64(self.sigma_max)),
        ]
    }
}

/// Output of [`SegModel::forward_image`].
#[derive(Debug, Clone)]
pub struct MaskOutputs {
    /// `(B, N, H', W')`, pre-sigmoid.
    pub mask_logits: Tensor,
    /// `(B, N, embed_dim)`.
    pub mask_features: Tensor,
}

pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let pb = ParamBuilder::init(seed);
    build(config, &pb)?;
    Ok(pb.finish())
}

/// Converts 8-bit RGB into the `(3, H, W)` input layout, scaled to `[-1, 1]`.
pub fn image_to_tensor(image: &RgbImage) -> Result<Tensor> {
    let (w, h) = image.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0f64; 3 * h * w];
    for (x, y, p) in image.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p[c] as f64 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (3, h, w), &device())?)
}

/// Stacks images of one size into a `(B, 3, H, W)` batch.
pub fn images_to_batch(images: &[&RgbImage]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::Input("empty image batch".into()));
    }
    let t = images
        .iter()
        .map(|im| image_to_tensor(im))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&t, 0)?)
}

struct Stage {
    down: Conv2d,
    conv: Conv2d,
}

/// Strided convolutional pyramid followed by top-down aggregation.
///
/// Each stage is a `3×3` stride-2 convolution then a `3×3` stride-1
/// convolution, each followed by ReLU. Every stage gets a `1×1` lateral projection to `dim`; from the
/// coarsest level down to the mask level each lateral is added to the
/// nearest-upsampled level above it, and a final `1×1` convolution yields the
/// per-pixel features.
pub struct PixelEncoder {
    stages: Vec<Stage>,
    laterals: Vec<Conv2d>,
    out: Conv2d,
    mask_level: usize,
}

/// Output of [`PixelEncoder::forward`].
pub struct PixelFeatures {
    /// `(B, dim, H/mask_stride, W/mask_stride)`.
    pub per_pixel: Tensor,
    /// Lateral projection of the coarsest stage, `(B, dim, H/s, W/s)` with `s` the total stride.
    pub coarse: Tensor,
}

impl PixelEncoder {
    /// Parameters live under `backbone.stage{i}` and `pixel_decoder.*`.
    pub fn new(pb: &ParamBuilder, channels: &[usize], dim: usize, mask_stride: usize) -> Result<Self> {
        if channels.is_empty()
            || !mask_stride.is_power_of_two()
            || mask_stride < 2
            || mask_stride > 1 << channels.len()
        {
            return Err(Error::Config(format!(
                "mask stride {mask_stride} does not fit a {}-stage pyramid",
                channels.len()
            )));
        }
        let mut stages = Vec::new();
        let mut laterals = Vec::new();
        let mut in_ch = 3;
        for (i, &ch) in channels.iter().enumerate() {
            let sp = pb.pp(format!("backbone.stage{i}"));
            stages.push(Stage {
                down: Conv2d::new(&sp.pp("down"), in_ch, ch, 3, 2, 1)?,
                conv: Conv2d::new(&sp.pp("conv"), ch, ch, 3, 1, 1)?,
            });
            laterals.push(Conv2d::new(&pb.pp(format!("pixel_decoder.lateral{i}")), ch, dim, 1, 1, 0)?);
            in_ch = ch;
        }
        Ok(Self {
            stages,
            laterals,
            out: Conv2d::new(&pb.pp("pixel_decoder.out"), dim, dim, 1, 1, 0)?,
            mask_level: mask_stride.trailing_zeros() as usize - 1,
        })
    }

    pub fn total_stride(&self) -> usize {
        1 << self.stages.len()
    }

    /// `images` is `(B, 3, H, W)` with sides divisible by the total stride.
    pub fn forward(&self, images: &Tensor) -> Result<PixelFeatures> {
        let (_, ch, h, w) = images
            .dims4()
            .map_err(|_| Error::Input(format!("expected a (B, 3, H, W) batch, got {:?}", images.dims())))?;
        let s = self.total_stride();
        if ch != 3 || h % s != 0 || w % s != 0 || h == 0 || w == 0 {
            return Err(Error::Input(format!(
                "input {:?} must have 3 channels and sides divisible by {s}",
                images.dims()
            )));
        }
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut x = images.clone();
        for stage in &self.stages {
            x = stage.down.forward(&x)?.relu()?;
            x = stage.conv.forward(&x)?.relu()?;
            feats.push(x.clone());
        }
        let last = feats.len() - 1;
        let coarse = self.laterals[last].forward(&feats[last])?;
        let mut top = coarse.clone();
        for level in (self.mask_level..last).rev() {
            let (_, _, lh, lw) = feats[level].dims4()?;
            top = self.laterals[level]
                .forward(&feats[level])?
                .add(&top.upsample_nearest2d(lh, lw)?)?;
        }
        Ok(PixelFeatures {
            per_pixel: self.out.forward(&top)?,
            coarse,
        })
    }
}

struct DecoderLayer {
    norm_self: LayerNorm,
    self_attn: MultiHeadAttention,
    norm_cross: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn: Mlp,
}

struct TextLayer {
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    norm_ffn: LayerNorm,
    ffn: Mlp,
}

struct Parts {
    encoder: PixelEncoder,
    query_feat: Tensor,
    query_pos: Tensor,
    decoder: Vec<DecoderLayer>,
    decoder_norm: LayerNorm,
    mask_embed: Mlp,
    token_embedding: Tensor,
    text_pos: Tensor,
    text: Vec<TextLayer>,
    text_norm: LayerNorm,
    visual_proj: Mlp,
    text_proj: Mlp,
    log_temperature: Tensor,
}

fn build(c: &ModelConfig, pb: &ParamBuilder) -> Result<Parts> {
    let d = c.embed_dim;
    let hidden = d * c.ffn_mult;
    let encoder = PixelEncoder::new(pb, &c.backbone_channels, d, c.mask_stride)?;
    let query_feat = pb.var("query.feat", &[c.n_queries, d], Init::Normal(1.0))?;
    let query_pos = pb.var("query.pos", &[c.n_queries, d], Init::Normal(1.0))?;
    let mut decoder = Vec::new();
    for i in 0..c.decoder_layers {
        let lp = pb.pp(format!("decoder.layer{i}"));
        decoder.push(DecoderLayer {
            norm_self: LayerNorm::new(&lp.pp("norm_self"), d)?,
            self_attn: MultiHeadAttention::new(&lp.pp("self_attn"), d, c.heads)?,
            norm_cross: LayerNorm::new(&lp.pp("norm_cross"), d)?,
            cross_attn: MultiHeadAttention::new(&lp.pp("cross_attn"), d, c.heads)?,
            norm_ffn: LayerNorm::new(&lp.pp("norm_ffn"), d)?,
            ffn: Mlp::new(&lp.pp("ffn"), d, hidden, d)?,
        });
    }
    let decoder_norm = LayerNorm::new(&pb.pp("decoder.norm"), d)?;
    let mask_embed = Mlp::new(&pb.pp("mask_embed"), d, d, d)?;
    let token_embedding = pb.var("text.token_embedding", &[c.vocab_size, d], Init::Normal(0.02))?;
    let text_pos = pb.var("text.pos_embedding", &[c.context_length, d], Init::Normal(0.01))?;
    let mut text = Vec::new();
    for i in 0..c.text_layers {
        let lp = pb.pp(format!("text.layer{i}"));
        text.push(TextLayer {
            norm_attn: LayerNorm::new(&lp.pp("norm_attn"), d)?,
            attn: MultiHeadAttention::new(&lp.pp("attn"), d, c.heads)?,
            norm_ffn: LayerNorm::new(&lp.pp("norm_ffn"), d)?,
            ffn: Mlp::new(&lp.pp("ffn"), d, hidden, d)?,
        });
    }
    let text_norm = LayerNorm::new(&pb.pp("text.norm"), d)?;
    let visual_proj = Mlp::new(&pb.pp("visual_proj"), d, d, c.proj_dim)?;
    let text_proj = Mlp::new(&pb.pp("text_proj"), d, d, c.proj_dim)?;
    let log_temperature = pb.var(LOG_TEMPERATURE, &[], Init::Const(INIT_TEMPERATURE.ln()))?;
    Ok(Parts {
        encoder,
        query_feat,
        query_pos,
        decoder,
        decoder_norm,
        mask_embed,
        token_embedding,
        text_pos,
        text,
        text_norm,
        visual_proj,
        text_proj,
        log_temperature,
    })
}

/// The network bound to a parameter set. Parameter updates made through the
/// [`ModelParams`] handles are visible to an existing `SegModel`.
pub struct SegModel {
    config: ModelConfig,
    params: ModelParams,
    parts: Parts,
    causal: Tensor,
}

impl SegModel {
    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        let pb = ParamBuilder::fetch(params.clone());
        let parts = build(&config, &pb)?;
        if pb.requested() != params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter set has {} arrays, model uses {}",
                params.len(),
                pb.requested()
            )));
        }
        let causal = causal_mask(config.context_length)?;
        Ok(Self {
            config,
            params,
            parts,
            causal,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// σ = exp(log_temperature).
    pub fn temperature(&self) -> Result<f64> {
        Ok(self.parts.log_temperature.to_scalar::<f64>()?.exp())
    }

    pub fn log_temperature(&self) -> &Tensor {
        &self.parts.log_temperature
    }

    /// Masks and mask features for a `(B, 3, H, W)` batch.
    pub fn forward_image(&self, images: &Tensor) -> Result<MaskOutputs> {
        let b = images.dims4().map(|d| d.0).unwrap_or(0);
        let p = &self.parts;
        let d = self.config.embed_dim;
        let PixelFeatures {
            per_pixel: pixel,
            coarse,
        } = p.encoder.forward(images)?;

        let (_, _, ch_, cw_) = coarse.dims4()?;
        let memory = coarse.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let pos = sine_position_encoding(ch_, cw_, d)?.unsqueeze(0)?;
        let memory_pos = memory.broadcast_add(&pos)?;

        let n = self.config.n_queries;
        let qpos = p.query_pos.unsqueeze(0)?.broadcast_as((b, n, d))?;
        let mut q = p.query_feat.unsqueeze(0)?.broadcast_as((b, n, d))?.contiguous()?;
        for layer in &p.decoder {
            let t = layer.norm_self.forward(&q)?;
            let tq = (&t + &qpos)?;
            q = (&q + layer.self_attn.forward(&tq, &tq, &t, None)?)?;
            let t = layer.norm_cross.forward(&q)?;
            let tq = (&t + &qpos)?;
            q = (&q + layer.cross_attn.forward(&tq, &memory_pos, &memory, None)?)?;
            let t = layer.norm_ffn.forward(&q)?;
            q = (&q + layer.ffn.forward(&t)?)?;
        }
        let mask_features = p.decoder_norm.forward(&q)?;
        let embed = p.mask_embed.forward(&mask_features)?;
        let (_, _, ph, pw) = pixel.dims4()?;
        let mask_logits = embed
            .matmul(&pixel.flatten_from(2)?)?
            .reshape((b, n, ph, pw))?;
        Ok(MaskOutputs {
            mask_logits,
            mask_features,
        })
    }

    /// Stacks caption tokens into `(B, context_length)` ids plus flat read-out indices.
    fn token_batch(&self, tokens: &[CaptionTokens]) -> Result<(Tensor, Tensor)> {
        let l = self.config.context_length;
        let mut ids = Vec::with_capacity(tokens.len() * l);
        let mut eos = Vec::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.ids.len() != l || t.eos_index >= l {
                return Err(Error::Input(format!(
                    "caption {i} has {} tokens (eos at {}), model context is {l}",
                    t.ids.len(),
                    t.eos_index
                )));
            }
            if let Some(&bad) = t.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
                return Err(Error::Input(format!(
                    "token id {bad} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            ids.extend(t.ids.iter().map(|&x| x as u32));
            eos.push((i * l + t.eos_index) as u32);
        }
        let ids = Tensor::from_vec(ids, (tokens.len(), l), &device())?;
        let eos = Tensor::new(eos, &device())?;
        Ok((ids, eos))
    }

    /// Text features `(B, embed_dim)` read out at each caption's end token.
    pub fn forward_text(&self, tokens: &[CaptionTokens]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::Input("no captions".into()));
        }
        let p = &self.parts;
        let (b, l, d) = (tokens.len(), self.config.context_length, self.config.embed_dim);
        let (ids, eos) = self.token_batch(tokens)?;
        let mut x = p
            .token_embedding
            .embedding(&ids.flatten_all()?)?
            .reshape((b, l, d))?
            .broadcast_add(&p.text_pos)?;
        for layer in &p.text {
            let t = layer.norm_attn.forward(&x)?;
            x = (&x + layer.attn.forward(&t, &t, &t, Some(&self.causal))?)?;
            let t = layer.norm_ffn.forward(&x)?;
            x = (&x + layer.ffn.forward(&t)?)?;
        }
        let x = p.text_norm.forward(&x)?;
        Ok(x.reshape((b * l, d))?.index_select(&eos, 0)?)
    }

    /// Mean over the N mask features of each image, projected and normalized: `(B, proj_dim)`.
    pub fn project_visual(&self, mask_features: &Tensor) -> Result<Tensor> {
        let mean = mask_features.mean(D::Minus2)?;
        l2_normalize(&self.parts.visual_proj.forward(&mean)?, NORM_EPS)
    }

    /// Each mask feature projected and normalized on its own; keeps the input's leading dims.
    pub fn project_visual_each(&self, mask_features: &Tensor) -> Result<Tensor> {
        l2_normalize(&self.parts.visual_proj.forward(mask_features)?, NORM_EPS)
    }

    pub fn project_text(&self, text_features: &Tensor) -> Result<Tensor> {
        l2_normalize(&self.parts.text_proj.forward(text_features)?, NORM_EPS)
    }

    /// Clamps σ into `[sigma_min, sigma_max]` in place.
    pub fn clamp_temperature(&self) -> Result<()> {
        let lo = self.config.sigma_min.ln();
        let hi = self.config.sigma_max.ln();
        let v = self.parts.log_temperature.to_scalar::<f64>()?;
        if v < lo || v > hi || !v.is_finite() {
            let c = if v.is_nan() { INIT_TEMPERATURE.ln() } else { v.clamp(lo, hi) };
            self.params
                .set(LOG_TEMPERATURE, &Tensor::new(c, &device())?)?;
        }
        Ok(())
    }
}

/// Read-only view of a single image's outputs as plain arrays.
pub fn outputs_for(outputs: &MaskOutputs, index: usize) -> Result<(Tensor, Tensor)> {
    Ok((
        outputs.mask_logits.i(index)?,
        outputs.mask_features.i(index)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{tokenize, Vocab};

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_queries: 4,
            embed_dim: 8,
            decoder_layers: 1,
            text_layers: 1,
            context_length: 6,
            vocab_size: 10,
            backbone_channels: vec![4, 8],
            mask_stride: 2,
            proj_dim: 6,
            heads: 2,
            ffn_mult: 2,
            ..ModelConfig::tiny()
        }
    }

    fn random_images(b: usize, h: usize, w: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..b * 3 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(data, (b, 3, h, w), &device()).unwrap()
    }

    fn tokens(words: &[&str], cfg: &ModelConfig) -> CaptionTokens {
        let corpus = [vec!["red".to_string(), "blue".into(), "apple".into(), "leaf".into()]];
        let vocab = Vocab::build(corpus.iter().map(|v| v.as_slice()), 10).unwrap();
        let w: Vec<String> = words.iter().map(|s| s.to_string()).collect();
        tokenize(&w, &vocab, cfg.context_length).unwrap()
    }

    #[test]
    fn init_is_deterministic_with_temperature() {
        let cfg = tiny();
        let a = init_params(&cfg, 5).unwrap();
        let b = init_params(&cfg, 5).unwrap();
        for ((na, va), (nb, vb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(
                va.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap(),
                vb.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap()
            );
        }
        let m = SegModel::new(cfg, a).unwrap();
        assert_eq!(m.temperature().unwrap(), INIT_TEMPERATURE.ln().exp());
        assert!((m.temperature().unwrap() - 0.07).abs() < 1e-15);
        assert!(m.params().all_finite().unwrap());
    }

    #[test]
    fn shape_contract() {
        let cfg = ModelConfig {
            n_queries: 16,
            mask_stride: 4,
            backbone_channels: vec![4, 8, 8],
            ..tiny()
        };
        let m = SegModel::new(cfg.clone(), init_params(&cfg, 0).unwrap()).unwrap();
        let out = m.forward_image(&random_images(1, 64, 64, 0)).unwrap();
        assert_eq!(out.mask_logits.dims(), &[1, 16, 16, 16]);
        assert_eq!(out.mask_features.dims(), &[1, 16, 8]);
        assert!(m.forward_image(&random_images(1, 60, 64, 0)).is_err());
    }

    #[test]
    fn batch_equals_single_image() {
        let cfg = tiny();
        let m = SegModel::new(cfg.clone(), init_params(&cfg, 1).unwrap()).unwrap();
        let x = random_images(2, 16, 16, 3);
        let both = m.forward_image(&x).unwrap();
        for i in 0..2 {
            let one = m.forward_image(&x.narrow(0, i, 1).unwrap()).unwrap();
            let a = both.mask_logits.i(i).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let b = one.mask_logits.i(0).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn query_permutation_moves_outputs_together() {
        let cfg = tiny();
        let params = init_params(&cfg, 2).unwrap();
        let m = SegModel::new(cfg.clone(), params.clone()).unwrap();
        let x = random_images(1, 16, 16, 4);
        let before = m.forward_image(&x).unwrap();
        let perm: Vec<u32> = vec![2, 0, 3, 1];
        let idx = Tensor::new(perm.as_slice(), &device()).unwrap();
        for name in ["query.feat", "query.pos"] {
            let t = params.get(name).unwrap().as_tensor().index_select(&idx, 0).unwrap();
            params.set(name, &t).unwrap();
        }
        let after = m.forward_image(&x).unwrap();
        for (j, &src) in perm.iter().enumerate() {
            let a = after.mask_logits.i((0, j)).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let b = before.mask_logits.i((0, src as usize)).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-10);
            }
            let a = after.mask_features.i((0, j)).unwrap().to_vec1::<f64>().unwrap();
            let b = before.mask_features.i((0, src as usize)).unwrap().to_vec1::<f64>().unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn text_ignores_padding_after_eos() {
        let cfg = tiny();
        let m = SegModel::new(cfg.clone(), init_params(&cfg, 3).unwrap()).unwrap();
        let t = tokens(&["red", "apple"], &cfg);
        let mut altered = t.clone();
        for id in altered.ids.iter_mut().skip(t.eos_index + 1) {
            *id = 7;
        }
        let out = m.forward_text(&[t.clone(), altered]).unwrap();
        assert_eq!(out.dims(), &[2, cfg.embed_dim]);
        let rows = out.to_vec2::<f64>().unwrap();
        assert_eq!(rows[0], rows[1]);
        let other = m.forward_text(&[tokens(&["blue", "leaf"], &cfg)]).unwrap().to_vec2::<f64>().unwrap();
        assert_ne!(rows[0], other[0]);
    }

    #[test]
    fn projections_are_unit_and_mean_symmetric() {
        let cfg = tiny();
        let m = SegModel::new(cfg.clone(), init_params(&cfg, 4).unwrap()).unwrap();
        let v = Tensor::new(&[[0.3f64, -1.0, 0.5, 2.0, 0.0, 1.0, -0.2, 0.7]], &device()).unwrap();
        let single = m.project_visual(&v.unsqueeze(0).unwrap()).unwrap().to_vec2::<f64>().unwrap();
        let repeated = v.repeat((3, 1)).unwrap().unsqueeze(0).unwrap();
        let many = m.project_visual(&repeated).unwrap().to_vec2::<f64>().unwrap();
        for (a, b) in single[0].iter().zip(&many[0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let norm: f64 = single[0].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        let t = m.project_text(&v).unwrap().to_vec2::<f64>().unwrap();
        assert!((t[0].iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn temperature_clamp() {
        let cfg = tiny();
        let m = SegModel::new(cfg.clone(), init_params(&cfg, 0).unwrap()).unwrap();
        m.params().set(LOG_TEMPERATURE, &Tensor::new(-20.0f64, &device()).unwrap()).unwrap();
        m.clamp_temperature().unwrap();
        assert!((m.temperature().unwrap() - 0.01).abs() < 1e-12);
        m.params().set(LOG_TEMPERATURE, &Tensor::new(20.0f64, &device()).unwrap()).unwrap();
        m.clamp_temperature().unwrap();
        assert!((m.temperature().unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = ModelConfig::tiny();
        let mut back = ModelConfig::default();
        back.apply_text(&cfg.to_kv_string(), std::path::Path::new("m.cfg")).unwrap();
        assert_eq!(back, cfg);
        assert!(back.set("nope", "1").is_err());
        let bad = ModelConfig { mask_stride: 8, ..ModelConfig::tiny() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { heads: 3, ..ModelConfig::tiny() };
        assert!(bad.validate().is_err());
    }
}
