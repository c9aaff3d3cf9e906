//! Token-grid feature extractors feeding the pseudo-mask clustering.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Tensor, D};
use image::RgbImage;
use ndarray::Array3;

use crate::segmodel::nn::{device, softmax_last, DTYPE};
use crate::{Error, Result};

/// An `h × w × d` grid of token features; token `(r, c)` covers input pixels
/// `[r*stride, (r+1)*stride) × [c*stride, (c+1)*stride)` of the padded image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTokens {
    pub grid: Array3<f64>,
    pub stride: usize,
}

impl FeatureTokens {
    pub fn height(&self) -> usize {
        self.grid.dim().0
    }

    pub fn width(&self) -> usize {
        self.grid.dim().1
    }

    pub fn dim(&self) -> usize {
        self.grid.dim().2
    }
}

/// Anything that turns an image into a token grid.
pub trait FeatureBackbone: Send + Sync {
    /// Stable identifier, used as a cache key.
    fn id(&self) -> String;
    fn stride(&self) -> usize;
    /// Must accept any image size; padding to a stride multiple happens inside.
    fn features(&self, image: &RgbImage) -> Result<FeatureTokens>;
}

/// Runs `backbone`, attributing failures to image `id`.
pub fn extract_features(
    id: &str,
    image: &RgbImage,
    backbone: &dyn FeatureBackbone,
) -> Result<FeatureTokens> {
    backbone.features(image).map_err(|e| Error::Record {
        id: id.to_string(),
        message: format!("feature backbone `{}` failed: {e}", backbone.id()),
    })
}

/// Pads right and bottom by edge replication up to multiples of `stride`.
pub fn pad_to_multiple(image: &RgbImage, stride: usize) -> RgbImage {
    let (w, h) = image.dimensions();
    let s = stride as u32;
    let pw = w.div_ceil(s) * s;
    let ph = h.div_ceil(s) * s;
    if (pw, ph) == (w, h) {
        return image.clone();
    }
    RgbImage::from_fn(pw, ph, |x, y| *image.get_pixel(x.min(w - 1), y.min(h - 1)))
}

/// Desk-scale extractor: per token the mean RGB, the RGB standard deviation
/// (both on a 0..1 scale) and the token's normalized (row, col) centre times
/// `position_weight`. Eight channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorPositionExtractor {
    pub stride: usize,
    pub position_weight: f64,
}

impl ColorPositionExtractor {
    pub const DIM: usize = 8;

    pub fn new(stride: usize, position_weight: f64) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("feature stride must be positive".into()));
        }
        Ok(Self {
            stride,
            position_weight,
        })
    }
}

impl Default for ColorPositionExtractor {
    fn default() -> Self {
        Self {
            stride: 4,
            position_weight: 0.1,
        }
    }
}

impl FeatureBackbone for ColorPositionExtractor {
    fn id(&self) -> String {
        format!("color-s{}-p{}", self.stride, self.position_weight)
    }

    fn stride(&self) -> usize {
        self.stride
    }

    fn features(&self, image: &RgbImage) -> Result<FeatureTokens> {
        let s = self.stride;
        let padded = pad_to_multiple(image, s);
        let h = padded.height() as usize / s;
        let w = padded.width() as usize / s;
        let mut grid = Array3::<f64>::zeros((h, w, Self::DIM));
        let n = (s * s) as f64;
        for ty in 0..h {
            for tx in 0..w {
                let mut sum = [0.0f64; 3];
                let mut sq = [0.0f64; 3];
                for y in ty * s..(ty + 1) * s {
                    for x in tx * s..(tx + 1) * s {
                        let p = padded.get_pixel(x as u32, y as u32).0;
                        for c in 0..3 {
                            let v = p[c] as f64 / 255.0;
                            sum[c] += v;
                            sq[c] += v * v;
                        }
                    }
                }
                for c in 0..3 {
                    let mean = sum[c] / n;
                    grid[[ty, tx, c]] = mean;
                    grid[[ty, tx, 3 + c]] = (sq[c] / n - mean * mean).max(0.0).sqrt();
                }
                grid[[ty, tx, 6]] = self.position_weight * (ty as f64 + 0.5) / h as f64;
                grid[[ty, tx, 7]] = self.position_weight * (tx as f64 + 0.5) / w as f64;
            }
        }
        Ok(FeatureTokens { grid, stride: s })
    }
}

/// Adapter for externally supplied self-supervised ViT weights (DINO layout:
/// `patch_embed.proj.*`, `cls_token`, `pos_embed`, `blocks.{i}.{norm1,attn.qkv,
/// attn.proj,norm2,mlp.fc1,mlp.fc2}.*`, `norm.*`) in a safetensors file.
/// Features are the final-layer patch tokens.
pub struct VitExtractor {
    name: String,
    patch: usize,
    dim: usize,
    heads: usize,
    depth: usize,
    weights: HashMap<String, Tensor>,
}

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

impl VitExtractor {
    /// `heads` defaults to `dim / 64` when `None`.
    pub fn load(path: &Path, heads: Option<usize>) -> Result<Self> {
        let raw = candle_core::safetensors::load(path, &device())?;
        let mut weights = HashMap::with_capacity(raw.len());
        for (k, v) in raw {
            weights.insert(k, v.to_dtype(DTYPE)?);
        }
        let get = |k: &str| {
            weights
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("{}: missing `{k}`", path.display())))
        };
        let (dim, _, patch, patch2) = get("patch_embed.proj.weight")?.dims4()?;
        if patch != patch2 {
            return Err(Error::Checkpoint("non-square patches are not supported".into()));
        }
        get("cls_token")?;
        get("pos_embed")?;
        let depth = (0..)
            .take_while(|i| weights.contains_key(&format!("blocks.{i}.attn.qkv.weight")))
            .count();
        let heads = heads.unwrap_or((dim / 64).max(1));
        if dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} not divisible by {heads} heads")));
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "vit".into());
        Ok(Self {
            name,
            patch,
            dim,
            heads,
            depth,
            weights,
        })
    }

    fn w(&self, k: &str) -> Result<&Tensor> {
        self.weights
            .get(k)
            .ok_or_else(|| Error::Checkpoint(format!("missing `{k}`")))
    }

    fn linear(&self, prefix: &str, x: &Tensor) -> Result<Tensor> {
        let w = self.w(&format!("{prefix}.weight"))?;
        let b = self.w(&format!("{prefix}.bias"))?;
        Ok(x.broadcast_matmul(&w.t()?)?.broadcast_add(b)?)
    }

    fn layer_norm(&self, prefix: &str, x: &Tensor) -> Result<Tensor> {
        let g = self.w(&format!("{prefix}.weight"))?;
        let b = self.w(&format!("{prefix}.bias"))?;
        let mean = x.mean_keepdim(D::Minus1)?;
        let c = x.broadcast_sub(&mean)?;
        let var = c.sqr()?.mean_keepdim(D::Minus1)?;
        Ok(c.broadcast_div(&(var + 1e-6)?.sqrt()?)?
            .broadcast_mul(g)?
            .broadcast_add(b)?)
    }

    /// Bilinearly resamples the patch part of `pos_embed` to `gh × gw`.
    fn position_embedding(&self, gh: usize, gw: usize) -> Result<Tensor> {
        let pe = self.w("pos_embed")?.squeeze(0)?; // (1 + G, D)
        let n = pe.dim(0)? - 1;
        let g = (n as f64).sqrt().round() as usize;
        if g * g != n {
            return Err(Error::Checkpoint("pos_embed patch grid is not square".into()));
        }
        let cls = pe.narrow(0, 0, 1)?;
        if (gh, gw) == (g, g) {
            return Ok(pe);
        }
        let src = pe.narrow(0, 1, n)?.to_vec2::<f64>()?;
        let mut out = Vec::with_capacity(gh * gw * self.dim);
        for y in 0..gh {
            let fy = ((y as f64 + 0.5) * g as f64 / gh as f64 - 0.5).clamp(0.0, (g - 1) as f64);
            let (y0, wy) = (fy.floor() as usize, fy - fy.floor());
            let y1 = (y0 + 1).min(g - 1);
            for x in 0..gw {
                let fx = ((x as f64 + 0.5) * g as f64 / gw as f64 - 0.5).clamp(0.0, (g - 1) as f64);
                let (x0, wx) = (fx.floor() as usize, fx - fx.floor());
                let x1 = (x0 + 1).min(g - 1);
                for d in 0..self.dim {
                    let v = (1.0 - wy) * ((1.0 - wx) * src[y0 * g + x0][d] + wx * src[y0 * g + x1][d])
                        + wy * ((1.0 - wx) * src[y1 * g + x0][d] + wx * src[y1 * g + x1][d]);
                    out.push(v);
                }
            }
        }
        let patches = Tensor::from_vec(out, (gh * gw, self.dim), &device())?;
        Ok(Tensor::cat(&[&cls, &patches], 0)?)
    }

    fn block(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        let p = format!("blocks.{i}");
        let (b, l, d) = x.dims3()?;
        let hd = d / self.heads;
        let h = self.layer_norm(&format!("{p}.norm1"), x)?;
        let qkv = self
            .linear(&format!("{p}.attn.qkv"), &h)?
            .reshape((b, l, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?
            .contiguous()?;
        let q = qkv.get(0)?;
        let k = qkv.get(1)?;
        let v = qkv.get(2)?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (hd as f64).sqrt())?;
        let ctx = softmax_last(&scores)?
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, l, d))?;
        let x = (x + self.linear(&format!("{p}.attn.proj"), &ctx)?)?;
        let h = self.layer_norm(&format!("{p}.norm2"), &x)?;
        let h = self.linear(&format!("{p}.mlp.fc1"), &h)?.gelu_erf()?;
        let h = self.linear(&format!("{p}.mlp.fc2"), &h)?;
        Ok((x + h)?)
    }
}

impl FeatureBackbone for VitExtractor {
    fn id(&self) -> String {
        format!("vit-{}", self.name)
    }

    fn stride(&self) -> usize {
        self.patch
    }

    fn features(&self, image: &RgbImage) -> Result<FeatureTokens> {
        let padded = pad_to_multiple(image, self.patch);
        let (w, h) = (padded.width() as usize, padded.height() as usize);
        let mut data = vec![0.0f64; 3 * h * w];
        for (x, y, p) in padded.enumerate_pixels() {
            for c in 0..3 {
                data[c * h * w + y as usize * w + x as usize] =
                    (p.0[c] as f64 / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
            }
        }
        let input = Tensor::from_vec(data, (1, 3, h, w), &device())?;
        let emb = input.conv2d(self.w("patch_embed.proj.weight")?, 0, self.patch, 1, 1)?;
        let emb = emb.broadcast_add(&self.w("patch_embed.proj.bias")?.reshape((1, self.dim, 1, 1))?)?;
        let (gh, gw) = (h / self.patch, w / self.patch);
        let tokens = emb.flatten_from(2)?.transpose(1, 2)?; // (1, G, D)
        let cls = self.w("cls_token")?.reshape((1, 1, self.dim))?;
        let mut x = Tensor::cat(&[&cls, &tokens], 1)?;
        x = x.broadcast_add(&self.position_embedding(gh, gw)?.unsqueeze(0)?)?;
        for i in 0..self.depth {
            x = self.block(i, &x)?;
        }
        let x = self.layer_norm("norm", &x)?;
        let patches = x.squeeze(0)?.narrow(0, 1, gh * gw)?.flatten_all()?.to_vec1::<f64>()?;
        let grid = Array3::from_shape_vec((gh, gw, self.dim), patches)
            .map_err(|e| Error::Input(e.to_string()))?;
        Ok(FeatureTokens {
            grid,
            stride: self.patch,
        })
    }
}
