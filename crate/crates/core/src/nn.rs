//! Differentiable building blocks shared by the tokenizer and the multimodal model.
//!
//! Every trainable array lives in a [`ParamStore`] under a dotted name
//! (`enc.blocks.3.mlp.fc2.weight`). Layers hold clones of the stored
//! [`Var`]s, so in-place optimizer updates are visible to every layer and
//! reverse-mode gradients are keyed by the same tensor ids.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Named collection of trainable arrays.
#[derive(Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    dtype: DType,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("params", &self.params.len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self { params: BTreeMap::new(), dtype }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &'static Device {
        &Device::Cpu
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        self.params
            .get(name)
            .map(|v| v.as_tensor().clone())
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn insert(&mut self, name: impl Into<String>, value: &Tensor) -> Result<Var> {
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        self.params.insert(name.into(), var.clone());
        Ok(var)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Parameters whose name starts with any of `prefixes`.
    pub fn with_prefixes<'a>(
        &'a self,
        prefixes: &'a [&'a str],
    ) -> impl Iterator<Item = (&'a String, &'a Var)> + 'a {
        self.params.iter().filter(move |(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// FNV-1a over the raw little-endian bytes of the selected parameters.
    pub fn fingerprint(&self, prefixes: &[&str]) -> Result<u64> {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for (name, var) in self.with_prefixes(prefixes) {
            name.bytes().for_each(&mut eat);
            for x in tensor_to_f64(var.as_tensor())? {
                x.to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        Ok(h)
    }

    /// Deep copy with independent storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = ParamStore::new(self.dtype);
        for (n, v) in &self.params {
            out.insert(n.clone(), &v.as_tensor().copy()?)?;
        }
        Ok(out)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut out = ParamStore::new(dtype);
        for (n, v) in &self.params {
            out.insert(n.clone(), v.as_tensor())?;
        }
        Ok(out)
    }
}

pub(crate) fn tensor_to_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Either draws fresh parameters or requires them to already exist in the store.
pub enum Init<'a> {
    Random(&'a mut ChaCha8Rng),
    Existing,
}

/// Parameter factory scoped to a name prefix.
pub struct Builder<'a, 'r> {
    store: &'a mut ParamStore,
    init: Init<'r>,
    prefix: String,
}

#[derive(Debug, Clone, Copy)]
pub enum Fill {
    Normal(f64),
    Const(f64),
}

impl<'a, 'r> Builder<'a, 'r> {
    pub fn new(store: &'a mut ParamStore, init: Init<'r>) -> Self {
        Self { store, init, prefix: String::new() }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn push(&mut self, part: &str) -> String {
        let old = self.prefix.clone();
        self.prefix = if old.is_empty() { part.to_string() } else { format!("{old}.{part}") };
        old
    }

    pub fn pop(&mut self, old: String) {
        self.prefix = old;
    }

    /// Run `f` with `part` appended to the current prefix.
    pub fn scoped<T>(&mut self, part: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let old = self.push(part);
        let out = f(self);
        self.pop(old);
        out
    }

    pub fn param(&mut self, name: &str, shape: &[usize], fill: Fill) -> Result<Tensor> {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        match &mut self.init {
            Init::Existing => {
                let t = self.store.tensor(&full)?;
                if t.dims() != shape {
                    return Err(Error::shape(format!("{full} {shape:?}"), format!("{:?}", t.dims())));
                }
                Ok(t)
            }
            Init::Random(rng) => {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = match fill {
                    Fill::Const(c) => vec![c; n],
                    Fill::Normal(std) => {
                        let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
                        (0..n).map(|_| dist.sample(*rng)).collect()
                    }
                };
                let t = Tensor::from_vec(data, shape, &Device::Cpu)?;
                Ok(self.store.insert(full, &t)?.as_tensor().clone())
            }
        }
    }

    pub fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        match &mut self.init {
            Init::Random(r) => Some(r),
            Init::Existing => None,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }
}

/// Affine map `x W + b` applied over the last axis. `W` is stored as (in, out).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, fan_in: usize, fan_out: usize, bias: bool, gain: f64) -> Result<Self> {
        b.scoped(name, |b| {
            let std = gain / (fan_in as f64).sqrt();
            let weight = b.param("weight", &[fan_in, fan_out], Fill::Normal(std))?;
            let bias = if bias { Some(b.param("bias", &[fan_out], Fill::Const(0.0))?) } else { None };
            Ok(Linear { weight, bias })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let fan_in = *dims.last().ok_or_else(|| Error::invalid("linear on a scalar"))?;
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((rows, fan_in))?.matmul(&self.weight)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(1)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(LayerNorm {
                gain: b.param("gain", &[dim], Fill::Const(1.0))?,
                bias: b.param("bias", &[dim], Fill::Const(0.0))?,
                eps: 1e-5,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&var.affine(1.0, self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gain)?.broadcast_add(&self.bias)?)
    }
}

/// Two-layer perceptron with a SiLU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(b: &mut Builder, name: &str, dim_in: usize, hidden: usize, dim_out: usize, out_gain: f64) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Mlp {
                fc1: Linear::new(b, "fc1", dim_in, hidden, true, 1.0)?,
                fc2: Linear::new(b, "fc2", hidden, dim_out, true, out_gain)?,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.silu()?)
    }
}

/// Per-head RMS normalization of queries and keys with a learned scalar gain per head.
#[derive(Debug, Clone)]
pub struct QkNorm {
    pub q_gain: Tensor,
    pub k_gain: Tensor,
}

pub(crate) const QK_NORM_EPS: f64 = 1e-12;

/// `x / rms(x)` over the last axis.
pub fn rms_normalize(x: &Tensor) -> Result<Tensor> {
    let ms = x.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(x.broadcast_div(&ms.affine(1.0, QK_NORM_EPS)?.sqrt()?)?)
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub qk_norm: Option<QkNorm>,
}

impl Attention {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize, qk_norm: bool, out_gain: f64) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::invalid(format!("dim {dim} not divisible by {heads} heads")));
        }
        b.scoped(name, |b| {
            let qk_norm = if qk_norm {
                Some(QkNorm {
                    q_gain: b.param("q_gain", &[heads], Fill::Const(1.0))?,
                    k_gain: b.param("k_gain", &[heads], Fill::Const(1.0))?,
                })
            } else {
                None
            };
            Ok(Attention {
                q: Linear::new(b, "q", dim, dim, true, 1.0)?,
                k: Linear::new(b, "k", dim, dim, true, 1.0)?,
                v: Linear::new(b, "v", dim, dim, true, 1.0)?,
                o: Linear::new(b, "o", dim, dim, true, out_gain)?,
                heads,
                qk_norm,
            })
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        Ok(x.reshape((b, t, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// Queries and keys after the optional QK normalization, shaped (B, H, T, hd).
    pub fn queries_keys(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let q = self.split_heads(&self.q.forward(x)?)?;
        let k = self.split_heads(&self.k.forward(x)?)?;
        match &self.qk_norm {
            None => Ok((q, k)),
            Some(n) => {
                let h = self.heads;
                let qg = n.q_gain.reshape((1, h, 1, 1))?;
                let kg = n.k_gain.reshape((1, h, 1, 1))?;
                Ok((rms_normalize(&q)?.broadcast_mul(&qg)?, rms_normalize(&k)?.broadcast_mul(&kg)?))
            }
        }
    }

    /// Attention weights for already split and normalized heads.
    pub fn weights(q: &Tensor, k: &Tensor, causal: bool) -> Result<Tensor> {
        let hd = q.dim(D::Minus1)?;
        let t = q.dim(2)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (hd as f64).sqrt()))?;
        let scores = if causal { scores.broadcast_add(&causal_mask(t, q.dtype())?)? } else { scores };
        softmax_last(&scores)
    }

    pub fn forward(&self, x: &Tensor, causal: bool) -> Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let (q, k) = self.queries_keys(x)?;
        let v = self.split_heads(&self.v.forward(x)?)?;
        let att = Self::weights(&q, &k, causal)?;
        let y = att.matmul(&v)?.transpose(1, 2)?.reshape((b, t, d))?;
        self.o.forward(&y)
    }
}

/// Additive mask with `-1e9` above the diagonal.
pub fn causal_mask(t: usize, dtype: DType) -> Result<Tensor> {
    let data: Vec<f64> = (0..t * t).map(|i| if i % t > i / t { -1e9 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(data, (t, t), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Pre-norm transformer block.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize, depth: usize, qk_norm: bool) -> Result<Self> {
        let out_gain = 1.0 / (2.0 * depth.max(1) as f64).sqrt();
        b.scoped(name, |b| {
            Ok(Block {
                ln1: LayerNorm::new(b, "ln1", dim)?,
                attn: Attention::new(b, "attn", dim, heads, qk_norm, out_gain)?,
                ln2: LayerNorm::new(b, "ln2", dim)?,
                mlp: Mlp::new(b, "mlp", dim, 4 * dim, dim, out_gain)?,
            })
        })
    }

    pub fn forward(&self, x: &Tensor, causal: bool) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?, causal)?)?;
        Ok((&x + self.mlp.forward(&self.ln2.forward(&x)?)?)?)
    }
}

/// Fixed sinusoidal position table of shape (len, dim).
pub fn sinusoidal(len: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    let mut data = vec![0.0f64; len * dim];
    for pos in 0..len {
        for i in 0..dim / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + 2 * i] = (pos as f64 * freq).sin();
            data[pos * dim + 2 * i + 1] = (pos as f64 * freq).cos();
        }
    }
    Ok(Tensor::from_vec(data, (len, dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Numerically stable logistic function, `(1 + tanh(x/2)) / 2`.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Row-wise l2 normalization over the last axis; rejects rows with zero norm.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let min = norm.flatten_all()?.min(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !(min > 0.0) {
        return Err(Error::Degenerate("cannot normalize a zero vector".into()));
    }
    Ok(x.broadcast_div(&norm)?)
}

/// Seeded standard-normal vector, for tests and synthetic inputs.
pub fn randn_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let dist = Normal::new(0.0, 1.0).unwrap();
    (0..n).map(|_| dist.sample(rng)).collect()
}
