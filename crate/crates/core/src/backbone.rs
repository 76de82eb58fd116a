//! Vision encoder, text encoder, projection head and pixel decoder.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::{l2_normalize, sigmoid, sinusoidal, Block, Builder, Fill, LayerNorm, Linear};
use crate::syndata::ImageTensor;

/// Latent grid produced by the vision encoder for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    /// `(H/p · W/p) × d`, row-major.
    pub grid: Vec<f32>,
    pub cls: Vec<f32>,
    pub dim: usize,
}

impl LatentGrid {
    pub fn tokens(&self) -> usize {
        self.grid.len() / self.dim
    }
}

/// Cut images into non-overlapping `p×p` patches: (B, H/p·W/p, p·p·3).
pub fn patchify(images: &[&ImageTensor], patch: usize, dtype: DType) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
    let (h, w) = (first.height, first.width);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!("dims divisible by patch {patch}"), format!("{h}x{w}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pdim = patch * patch * 3;
    let mut out = Vec::with_capacity(images.len() * h * w * 3);
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::shape(format!("{h}x{w}"), format!("{}x{}", img.height, img.width)));
        }
        for gr in 0..gh {
            for gc in 0..gw {
                for r in 0..patch {
                    let row = gr * patch + r;
                    let start = (row * w + gc * patch) * 3;
                    out.extend_from_slice(&img.data[start..start + patch * 3]);
                }
            }
        }
    }
    Ok(Tensor::from_vec(out, (images.len(), gh * gw, pdim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Inverse of [`patchify`] for one image given as `(N, p·p·3)` values.
pub fn unpatchify(patches: &[f32], height: usize, width: usize, patch: usize) -> Result<ImageTensor> {
    if patches.len() != height * width * 3 {
        return Err(Error::shape(height * width * 3, patches.len()));
    }
    let gw = width / patch;
    let mut data = vec![0f32; height * width * 3];
    for (n, chunk) in patches.chunks_exact(patch * patch * 3).enumerate() {
        let (gr, gc) = (n / gw, n % gw);
        for r in 0..patch {
            let dst = ((gr * patch + r) * width + gc * patch) * 3;
            data[dst..dst + patch * 3].copy_from_slice(&chunk[r * patch * 3..(r + 1) * patch * 3]);
        }
    }
    ImageTensor::new(height, width, data)
}

/// ViT-style encoder with a learnable classification token in slot 0.
#[derive(Debug, Clone)]
pub struct VisionEncoder {
    pub patch_embed: Linear,
    pub cls_token: Tensor,
    pub blocks: Vec<Block>,
    pub ln_out: LayerNorm,
    pos: Tensor,
    pub patch: usize,
    pub dim: usize,
}

impl VisionEncoder {
    pub fn new(b: &mut Builder, image_size: usize, patch: usize, dim: usize, layers: usize, heads: usize) -> Result<Self> {
        let tokens = (image_size / patch).pow(2);
        let pos = sinusoidal(tokens + 1, dim, b.dtype())?;
        b.scoped("enc", |b| {
            let patch_embed = Linear::new(b, "patch_embed", patch * patch * 3, dim, true, 1.0)?;
            let cls_token = b.param("cls_token", &[dim], Fill::Normal(0.02))?;
            let blocks = (0..layers)
                .map(|i| Block::new(b, &format!("blocks.{i}"), dim, heads, layers, false))
                .collect::<Result<Vec<_>>>()?;
            let ln_out = LayerNorm::new(b, "ln_out", dim)?;
            Ok(VisionEncoder { patch_embed, cls_token, blocks, ln_out, pos, patch, dim })
        })
    }

    /// Name of the output linear of the last block's MLP.
    pub fn probe_param_name(&self) -> String {
        format!("enc.blocks.{}.mlp.fc2.weight", self.blocks.len() - 1)
    }

    /// Patches (B, N, p·p·3) to `(grid (B, N, d), cls (B, d))`.
    pub fn forward(&self, patches: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, n, _) = patches.dims3()?;
        if n + 1 != self.pos.dim(0)? {
            return Err(Error::shape(self.pos.dim(0)? - 1, n));
        }
        let x = self.patch_embed.forward(patches)?;
        let cls = self.cls_token.reshape((1, 1, self.dim))?.broadcast_as((b, 1, self.dim))?;
        let mut x = Tensor::cat(&[&cls, &x], 1)?.broadcast_add(&self.pos)?;
        for blk in &self.blocks {
            x = blk.forward(&x, false)?;
        }
        let x = self.ln_out.forward(&x)?;
        let cls = x.narrow(1, 0, 1)?.squeeze(1)?;
        let grid = x.narrow(1, 1, n)?;
        Ok((grid, cls))
    }
}

/// Causal text transformer pooled at the last real token.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub embed: Tensor,
    pub blocks: Vec<Block>,
    pub ln_out: LayerNorm,
    pub proj: Linear,
    pos: Tensor,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl TextEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        vocab_size: usize,
        max_len: usize,
        dim: usize,
        layers: usize,
        heads: usize,
        embed_dim: usize,
    ) -> Result<Self> {
        let pos = sinusoidal(max_len, dim, b.dtype())?;
        b.scoped("txt", |b| {
            let embed = b.param("embed", &[vocab_size, dim], Fill::Normal(0.5))?;
            let blocks = (0..layers)
                .map(|i| Block::new(b, &format!("blocks.{i}"), dim, heads, layers, false))
                .collect::<Result<Vec<_>>>()?;
            let ln_out = LayerNorm::new(b, "ln_out", dim)?;
            let proj = Linear::new(b, "proj", dim, embed_dim, false, 1.0)?;
            Ok(TextEncoder { embed, blocks, ln_out, proj, pos, vocab_size, max_len })
        })
    }

    /// Unnormalized text features, one row per sequence.
    pub fn features(&self, seqs: &[Vec<u32>]) -> Result<Tensor> {
        if seqs.is_empty() {
            return Err(Error::invalid("empty text batch"));
        }
        let t = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if seqs.iter().any(Vec::is_empty) {
            return Err(Error::invalid("empty token sequence"));
        }
        if t > self.max_len {
            return Err(Error::invalid(format!("sequence length {t} exceeds context {}", self.max_len)));
        }
        let mut ids = Vec::with_capacity(seqs.len() * t);
        let mut last = Vec::with_capacity(seqs.len());
        for (i, s) in seqs.iter().enumerate() {
            for &id in s {
                if id as usize >= self.vocab_size {
                    return Err(Error::OutOfVocab { id, size: self.vocab_size });
                }
            }
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(0u32, t - s.len()));
            last.push((i * t + s.len() - 1) as u32);
        }
        let b = seqs.len();
        let d = self.embed.dim(1)?;
        let ids = Tensor::from_vec(ids, b * t, &Device::Cpu)?;
        let mut x = self
            .embed
            .index_select(&ids, 0)?
            .reshape((b, t, d))?
            .broadcast_add(&self.pos.narrow(0, 0, t)?)?;
        for blk in &self.blocks {
            x = blk.forward(&x, true)?;
        }
        let x = self.ln_out.forward(&x)?.reshape((b * t, d))?;
        let pooled = x.index_select(&Tensor::from_vec(last, b, &Device::Cpu)?, 0)?;
        self.proj.forward(&pooled)
    }

    /// Unit-norm text embeddings.
    pub fn forward(&self, seqs: &[Vec<u32>]) -> Result<Tensor> {
        l2_normalize(&self.features(seqs)?)
    }
}

/// Bias-free linear head from the classification latent to the shared embedding space.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub linear: Linear,
}

impl ProjectionHead {
    pub fn new(b: &mut Builder, dim: usize, embed_dim: usize) -> Result<Self> {
        Ok(ProjectionHead { linear: Linear::new(b, "head", dim, embed_dim, false, 1.0)? })
    }

    /// `h(z_cls) / ‖h(z_cls)‖`; rejects a zero projection.
    pub fn forward(&self, cls: &Tensor) -> Result<Tensor> {
        l2_normalize(&self.linear.forward(cls)?)
    }
}

/// Transformer decoder from quantized latents back to patches in [0, 1].
#[derive(Debug, Clone)]
pub struct Decoder {
    pub input: Linear,
    pub blocks: Vec<Block>,
    pub ln_out: LayerNorm,
    pub output: Linear,
    pos: Tensor,
    pub patch: usize,
}

impl Decoder {
    pub fn new(b: &mut Builder, image_size: usize, patch: usize, dim: usize, layers: usize, heads: usize) -> Result<Self> {
        let tokens = (image_size / patch).pow(2);
        let pos = sinusoidal(tokens, dim, b.dtype())?;
        b.scoped("dec", |b| {
            let input = Linear::new(b, "input", dim, dim, true, 1.0)?;
            let blocks = (0..layers)
                .map(|i| Block::new(b, &format!("blocks.{i}"), dim, heads, layers, false))
                .collect::<Result<Vec<_>>>()?;
            let ln_out = LayerNorm::new(b, "ln_out", dim)?;
            let output = Linear::new(b, "output", dim, patch * patch * 3, true, 1.0)?;
            Ok(Decoder { input, blocks, ln_out, output, pos, patch })
        })
    }

    /// Quantized grid (B, N, d) to patches (B, N, p·p·3).
    pub fn forward(&self, zq: &Tensor) -> Result<Tensor> {
        let (_, n, _) = zq.dims3()?;
        if n != self.pos.dim(0)? {
            return Err(Error::shape(self.pos.dim(0)?, n));
        }
        let mut x = self.input.forward(zq)?.broadcast_add(&self.pos)?;
        for blk in &self.blocks {
            x = blk.forward(&x, false)?;
        }
        sigmoid(&self.output.forward(&self.ln_out.forward(&x)?)?)
    }
}

/// Pull a `(B, …)` tensor's rows back to host memory as f32.
pub(crate) fn rows_f32(t: &Tensor) -> Result<Vec<Vec<f32>>> {
    let b = t.dim(0)?;
    let flat = t.to_dtype(DType::F32)?.reshape((b, ()))?;
    Ok(flat.to_vec2::<f32>()?)
}


