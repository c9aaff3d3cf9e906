//! Parameter store and the small set of layers the models are built from.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

/// All tensors are f64 on the CPU.
pub const DTYPE: DType = DType::F64;

pub fn device() -> Device {
    Device::Cpu
}

/// Named trainable arrays, ordered by name.
#[derive(Debug, Clone, Default)]
pub struct ModelParams {
    vars: BTreeMap<String, Var>,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Copies the values into fresh variables that share nothing with `self`.
    pub fn deep_clone(&self) -> Result<ModelParams> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(ModelParams { vars })
    }

    /// Overwrites a variable's value in place (shape must match).
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::Input(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(DTYPE)?)?;
        Ok(())
    }

    /// Replaces every value from `tensors`, which must cover exactly this parameter set.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for name in self.vars.keys() {
            if !tensors.contains_key(name) {
                return Err(Error::Checkpoint(format!("missing parameter `{name}`")));
            }
        }
        for (name, t) in tensors {
            if !self.vars.contains_key(name) {
                return Err(Error::Checkpoint(format!("unexpected parameter `{name}`")));
            }
            self.set(name, t)?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> Result<bool> {
        for v in self.vars.values() {
            let s = v.as_tensor().abs()?.sum_all()?.to_scalar::<f64>()?;
            if !s.is_finite() {
                return Ok(false);
            }
        }
        Ok(true)
    }

    fn insert(&mut self, name: String, var: Var) -> Result<()> {
        if self.vars.insert(name.clone(), var).is_some() {
            return Err(Error::Input(format!("parameter `{name}` declared twice")));
        }
        Ok(())
    }
}

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Normal(f64),
}

struct BuilderState {
    params: ModelParams,
    // `None` means fetch-only: every requested name must already exist.
    rng: Option<ChaCha8Rng>,
    requested: usize,
}

/// Hands out parameters by hierarchical name, either creating them from a
/// seeded generator or looking them up in an existing [`ModelParams`].
#[derive(Clone)]
pub struct ParamBuilder {
    state: Rc<RefCell<BuilderState>>,
    prefix: String,
}

impl ParamBuilder {
    pub fn init(seed: u64) -> Self {
        Self {
            state: Rc::new(RefCell::new(BuilderState {
                params: ModelParams::default(),
                rng: Some(ChaCha8Rng::seed_from_u64(seed)),
                requested: 0,
            })),
            prefix: String::new(),
        }
    }

    pub fn fetch(params: ModelParams) -> Self {
        Self {
            state: Rc::new(RefCell::new(BuilderState {
                params,
                rng: None,
                requested: 0,
            })),
            prefix: String::new(),
        }
    }

    pub fn pp(&self, name: impl std::fmt::Display) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Self {
            state: self.state.clone(),
            prefix,
        }
    }

    pub fn var(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let mut st = self.state.borrow_mut();
        st.requested += 1;
        if let Some(rng) = st.rng.as_mut() {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Const(c) => vec![c; n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                    (0..n).map(|_| dist.sample(rng)).collect()
                }
            };
            let var = Var::from_tensor(&Tensor::from_vec(data, shape, &device())?)?;
            let t = var.as_tensor().clone();
            st.params.insert(full, var)?;
            Ok(t)
        } else {
            let var = st
                .params
                .get(&full)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{full}`")))?;
            if var.dims() != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{full}` has shape {:?}, model expects {shape:?}",
                    var.dims()
                )));
            }
            Ok(var.as_tensor().clone())
        }
    }

    /// Number of `var` calls made through this builder and its clones.
    pub fn requested(&self) -> usize {
        self.state.borrow().requested
    }

    /// Returns the accumulated parameters. Other clones of this builder become unusable.
    pub fn finish(self) -> ModelParams {
        std::mem::take(&mut self.state.borrow_mut().params)
    }
}

/// Numerically stable softmax along the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Numerically stable log-softmax along the last dimension.
pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&m)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// `x / max(‖x‖, eps)` row-wise along the last dimension.
pub fn l2_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let norm = norm.maximum(eps)?;
    Ok(x.broadcast_div(&norm)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    /// LeCun-normal weights (`gain` scales the std), zero bias.
    pub fn new(pb: &ParamBuilder, in_dim: usize, out_dim: usize, gain: f64) -> Result<Self> {
        let std = gain / (in_dim as f64).sqrt();
        Ok(Self {
            weight: pb.var("weight", &[out_dim, in_dim], Init::Normal(std))?,
            bias: pb.var("bias", &[out_dim], Init::Zeros)?,
        })
    }

    /// Accepts `(.., in_dim)` inputs of rank 2 or 3.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let wt = self.weight.t()?;
        let y = match x.rank() {
            2 => x.matmul(&wt)?,
            _ => x.broadcast_matmul(&wt)?,
        };
        Ok(y.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// He-normal weights, zero bias.
    pub fn new(
        pb: &ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = (in_ch * kernel * kernel) as f64;
        Ok(Self {
            weight: pb.var(
                "weight",
                &[out_ch, in_ch, kernel, kernel],
                Init::Normal((2.0 / fan_in).sqrt()),
            )?,
            bias: pb.var("bias", &[out_ch], Init::Zeros)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let out_ch = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, out_ch, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.var("weight", &[dim], Init::Ones)?,
            beta: pb.var("bias", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Two linear layers with a ReLU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(pb: &ParamBuilder, in_dim: usize, hidden: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&pb.pp("fc1"), in_dim, hidden, 2f64.sqrt())?,
            fc2: Linear::new(&pb.pp("fc2"), hidden, out_dim, 1.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.relu()?)
    }
}

/// Multi-head scaled dot-product attention over `(batch, len, dim)` inputs.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(&pb.pp("q"), dim, dim, 1.0)?,
            k: Linear::new(&pb.pp("k"), dim, dim, 1.0)?,
            v: Linear::new(&pb.pp("v"), dim, dim, 1.0)?,
            out: Linear::new(&pb.pp("out"), dim, dim, 1.0)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        Ok(x
            .reshape((b, l, self.heads, d / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `mask` is added to the `(q_len, k_len)` score matrix, e.g. `-inf` above the diagonal.
    pub fn forward(
        &self,
        query: &Tensor,
        key: &Tensor,
        value: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        let (b, lq, d) = query.dims3()?;
        let q = self.split(&self.q.forward(query)?)?;
        let k = self.split(&self.k.forward(key)?)?;
        let v = self.split(&self.v.forward(value)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let mut scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let attn = softmax_last(&scores)?;
        let ctx = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, lq, d))?;
        self.out.forward(&ctx)
    }
}

/// Fixed 2-D sine/cosine encodings, `(h*w, dim)` in row-major token order.
pub fn sine_position_encoding(h: usize, w: usize, dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = vec![0.0f64; h * w * dim];
    let two_pi = 2.0 * std::f64::consts::PI;
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * dim;
            let coords = [(y as f64 + 0.5) / h as f64, (x as f64 + 0.5) / w as f64];
            for (axis, &c) in coords.iter().enumerate() {
                let width = if axis == 0 { half } else { dim - half };
                let offset = if axis == 0 { 0 } else { half };
                for i in 0..width {
                    let freq = 10000f64.powf((2 * (i / 2)) as f64 / width.max(1) as f64);
                    let arg = c * two_pi / freq;
                    data[base + offset + i] = if i % 2 == 0 { arg.sin() } else { arg.cos() };
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (h * w, dim), &device())?)
}

/// `0` on and below the diagonal, a large negative value above it.
pub fn causal_mask(len: usize) -> Result<Tensor> {
    let data: Vec<f64> = (0..len)
        .flat_map(|i| (0..len).map(move |j| if j > i { -1e9 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(data, (len, len), &device())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_init_then_fetch() {
        let pb = ParamBuilder::init(3);
        let a = Linear::new(&pb.pp("layer"), 4, 2, 1.0).unwrap();
        let params = pb.finish();
        assert_eq!(
            params.names().cloned().collect::<Vec<_>>(),
            vec!["layer.bias".to_string(), "layer.weight".to_string()]
        );
        let pb2 = ParamBuilder::fetch(params.clone());
        let b = Linear::new(&pb2.pp("layer"), 4, 2, 1.0).unwrap();
        let x = Tensor::ones((3, 4), DTYPE, &device()).unwrap();
        let ya = a.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let yb = b.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(ya, yb);
        assert!(Linear::new(&pb2.pp("other"), 4, 2, 1.0).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1000.0f64, 0.0, -1000.0], [1.0, 2.0, 3.0]], &device()).unwrap();
        let s = softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        for row in s {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let ls = log_softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        assert!(ls[0][0].abs() < 1e-12);
    }

    #[test]
    fn normalize_handles_zero() {
        let x = Tensor::zeros((2, 3), DTYPE, &device()).unwrap();
        let y = l2_normalize(&x, 1e-8).unwrap().to_vec2::<f64>().unwrap();
        assert!(y.iter().flatten().all(|v| *v == 0.0));
    }
}
