//! The full tokenizer: vision encoder, quantization bottleneck, decoder and
//! the contrastive text branch.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{patchify, rows_f32, unpatchify, Decoder, LatentGrid, ProjectionHead, TextEncoder, VisionEncoder};
use crate::bsq::{self, Bottleneck};
use crate::config::{parse_bool, parse_num, KvConfig};
use crate::error::{Error, Result};
use crate::nn::{Builder, Fill, Init, ParamStore};
use crate::syndata::ImageTensor;

/// How latents pass through the bottleneck.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizerKind {
    /// Binarize with straight-through gradients.
    Bsq,
    /// Skip binarization (`û = u`); the auto-encoder is uncompressed.
    Identity,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub text_dim: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub embed_dim: usize,
    pub max_text_len: usize,
    pub vocab_size: usize,
    pub code_bits: usize,
    pub bottleneck_hidden: usize,
    pub quantizer: QuantizerKind,
    pub dtype: DType,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let dim = 64;
        let code_bits = 12;
        Self {
            image_size: 32,
            patch: 4,
            dim,
            enc_layers: 4,
            dec_layers: 4,
            heads: 4,
            text_dim: 64,
            text_layers: 2,
            text_heads: 4,
            embed_dim: 64,
            max_text_len: 16,
            vocab_size: crate::syndata::Vocab::standard().len(),
            code_bits,
            bottleneck_hidden: bsq::default_hidden(dim, code_bits),
            quantizer: QuantizerKind::Bsq,
            dtype: DType::F32,
        }
    }
}

/// Initial log-temperature of the contrastive loss, `ln(1/0.07)`.
pub const INIT_LOGIT_SCALE: f64 = 2.659_260_036_932_778_4;
/// Upper bound of the log-temperature, `ln(100)`.
pub const MAX_LOGIT_SCALE: f64 = 4.605_170_185_988_092;

impl ModelConfig {
    /// Reduced preset for single-core test runs: 16×16 canvas, d = 32, two blocks per stack.
    pub fn small() -> Self {
        let dim = 32;
        Self {
            image_size: 16,
            dim,
            enc_layers: 2,
            dec_layers: 2,
            heads: 2,
            text_dim: 32,
            text_layers: 1,
            text_heads: 2,
            embed_dim: 32,
            bottleneck_hidden: bsq::default_hidden(dim, 12),
            ..Self::default()
        }
    }

    /// Minimal preset for finite-difference checks.
    pub fn tiny_f64() -> Self {
        Self {
            image_size: 16,
            patch: 8,
            dim: 8,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            text_dim: 8,
            text_layers: 1,
            text_heads: 2,
            embed_dim: 6,
            max_text_len: 16,
            code_bits: 4,
            bottleneck_hidden: 16,
            dtype: DType::F64,
            ..Self::default()
        }
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens_per_image(&self) -> usize {
        self.grid_side().pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::Config(format!("image_size {} not divisible by patch {}", self.image_size, self.patch)));
        }
        if !self.dim.is_multiple_of(self.heads) || !self.text_dim.is_multiple_of(self.text_heads) {
            return Err(Error::Config("width not divisible by head count".into()));
        }
        if self.code_bits == 0 || self.code_bits > 24 {
            return Err(Error::Config(format!("code_bits {} outside 1..=24", self.code_bits)));
        }
        if self.bottleneck_hidden < self.dim.max(self.code_bits) {
            return Err(Error::Config("bottleneck_hidden below max(dim, code_bits)".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("image_size", self.image_size.to_string());
        put("patch", self.patch.to_string());
        put("dim", self.dim.to_string());
        put("enc_layers", self.enc_layers.to_string());
        put("dec_layers", self.dec_layers.to_string());
        put("heads", self.heads.to_string());
        put("text_dim", self.text_dim.to_string());
        put("text_layers", self.text_layers.to_string());
        put("text_heads", self.text_heads.to_string());
        put("embed_dim", self.embed_dim.to_string());
        put("max_text_len", self.max_text_len.to_string());
        put("vocab_size", self.vocab_size.to_string());
        put("code_bits", self.code_bits.to_string());
        put("bottleneck_hidden", self.bottleneck_hidden.to_string());
        put("identity_quantizer", (self.quantizer == QuantizerKind::Identity).to_string());
        put("f64", (self.dtype == DType::F64).to_string());
        KvConfig::from_map(m)
    }

    /// Apply `model.*`-style overrides; unknown keys are rejected.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "image_size" => self.image_size = parse_num(key, value)?,
            "patch" => self.patch = parse_num(key, value)?,
            "dim" => self.dim = parse_num(key, value)?,
            "enc_layers" => self.enc_layers = parse_num(key, value)?,
            "dec_layers" => self.dec_layers = parse_num(key, value)?,
            "heads" => self.heads = parse_num(key, value)?,
            "text_dim" => self.text_dim = parse_num(key, value)?,
            "text_layers" => self.text_layers = parse_num(key, value)?,
            "text_heads" => self.text_heads = parse_num(key, value)?,
            "embed_dim" => self.embed_dim = parse_num(key, value)?,
            "max_text_len" => self.max_text_len = parse_num(key, value)?,
            "vocab_size" => self.vocab_size = parse_num(key, value)?,
            "code_bits" => self.code_bits = parse_num(key, value)?,
            "bottleneck_hidden" => self.bottleneck_hidden = parse_num(key, value)?,
            "identity_quantizer" => {
                self.quantizer = if parse_bool(key, value)? { QuantizerKind::Identity } else { QuantizerKind::Bsq }
            }
            "f64" => self.dtype = if parse_bool(key, value)? { DType::F64 } else { DType::F32 },
            _ => return Err(Error::Config(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in kv.iter() {
            cfg.apply_kv(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parameter-name prefixes of each trainable branch.
pub mod groups {
    pub const ENCODER: &str = "enc.";
    pub const HEAD: &str = "head.";
    pub const TEXT: &str = "txt.";
    pub const LOGIT_SCALE: &str = "logit_scale";
    pub const BOTTLENECK: &str = "bsq.";
    pub const DECODER: &str = "dec.";
    /// Everything stage two must leave untouched.
    pub const FROZEN_IN_STAGE2: [&str; 4] = [ENCODER, HEAD, TEXT, LOGIT_SCALE];
}

/// Intermediate values of one tokenizer pass over a batch.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Target patches (B, N, P).
    pub target: Tensor,
    /// Reconstructed patches (B, N, P).
    pub recon: Tensor,
    /// Encoder latents flattened to (B·N, d).
    pub z: Tensor,
    /// Sphere points (B·N, L).
    pub u: Tensor,
    /// Bottleneck output (B·N, d).
    pub z_hat: Tensor,
    /// Classification latents (B, d).
    pub cls: Tensor,
}

#[derive(Debug, Clone)]
pub struct QlipModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: VisionEncoder,
    pub head: ProjectionHead,
    pub text: TextEncoder,
    pub logit_scale: Tensor,
    pub bottleneck: Bottleneck,
    pub decoder: Decoder,
}

impl QlipModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(cfg, &mut store, Init::Random(&mut rng))
    }

    /// Rebuild from a populated store (e.g. a loaded checkpoint).
    pub fn from_store(cfg: ModelConfig, mut store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        if store.dtype() != cfg.dtype {
            store = store.to_dtype(cfg.dtype)?;
        }
        Self::build(cfg, &mut store, Init::Existing)
    }

    fn build(cfg: ModelConfig, store: &mut ParamStore, init: Init) -> Result<Self> {
        let mut b = Builder::new(store, init);
        let encoder = VisionEncoder::new(&mut b, cfg.image_size, cfg.patch, cfg.dim, cfg.enc_layers, cfg.heads)?;
        let head = ProjectionHead::new(&mut b, cfg.dim, cfg.embed_dim)?;
        let text = TextEncoder::new(
            &mut b,
            cfg.vocab_size,
            cfg.max_text_len,
            cfg.text_dim,
            cfg.text_layers,
            cfg.text_heads,
            cfg.embed_dim,
        )?;
        let logit_scale = b.param("logit_scale", &[], Fill::Const(INIT_LOGIT_SCALE))?;
        let bottleneck = Bottleneck::new(&mut b, cfg.dim, cfg.code_bits, cfg.bottleneck_hidden)?;
        let decoder = Decoder::new(&mut b, cfg.image_size, cfg.patch, cfg.dim, cfg.dec_layers, cfg.heads)?;
        Ok(QlipModel { cfg, store: store.clone(), encoder, head, text, logit_scale, bottleneck, decoder })
    }

    pub fn patches(&self, images: &[&ImageTensor]) -> Result<Tensor> {
        for img in images {
            if img.height != self.cfg.image_size || img.width != self.cfg.image_size {
                return Err(Error::shape(
                    format!("{0}x{0}", self.cfg.image_size),
                    format!("{}x{}", img.height, img.width),
                ));
            }
        }
        patchify(images, self.cfg.patch, self.cfg.dtype)
    }

    /// Contrastive temperature `t = exp(logit_scale)`.
    pub fn temperature(&self) -> Result<Tensor> {
        Ok(self.logit_scale.exp()?)
    }

    /// Keep the temperature at or below 100.
    pub fn clamp_logit_scale(&self) -> Result<()> {
        let var = self.store.get("logit_scale").expect("logit_scale is always registered");
        let v = var.as_tensor().to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if v > MAX_LOGIT_SCALE {
            var.set(&Tensor::new(MAX_LOGIT_SCALE, var.device())?.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }

    pub fn quantize_latents(&self, u: &Tensor) -> Result<Tensor> {
        match self.cfg.quantizer {
            QuantizerKind::Bsq => bsq::quantize_ste(u),
            QuantizerKind::Identity => Ok(u.clone()),
        }
    }

    /// Encoder, bottleneck and decoder over a patch batch. With
    /// `freeze_encoder` the encoder outputs are detached.
    pub fn forward(&self, patches: &Tensor, freeze_encoder: bool) -> Result<Forward> {
        let (b, n, _) = patches.dims3()?;
        let (grid, cls) = self.encoder.forward(patches)?;
        let (grid, cls) = if freeze_encoder { (grid.detach(), cls.detach()) } else { (grid, cls) };
        let z = grid.reshape((b * n, self.cfg.dim))?;
        let u = self.bottleneck.project_down(&z)?;
        let u_hat = self.quantize_latents(&u)?;
        let z_hat = self.bottleneck.project_up(&u_hat)?;
        let recon = self.decoder.forward(&z_hat.reshape((b, n, self.cfg.dim))?)?;
        Ok(Forward { target: patches.clone(), recon, z, u, z_hat, cls })
    }

    /// Unit image embeddings for a batch of images.
    pub fn image_embeddings(&self, images: &[&ImageTensor]) -> Result<Tensor> {
        let (_, cls) = self.encoder.forward(&self.patches(images)?)?;
        self.head.forward(&cls)
    }

    pub fn text_embeddings(&self, seqs: &[Vec<u32>]) -> Result<Tensor> {
        self.text.forward(seqs)
    }

    /// Latent grid and classification latent of one image.
    pub fn encode_image(&self, image: &ImageTensor) -> Result<LatentGrid> {
        let (grid, cls) = self.encoder.forward(&self.patches(&[image])?)?;
        Ok(LatentGrid {
            grid: rows_f32(&grid)?.remove(0),
            cls: rows_f32(&cls)?.remove(0),
            dim: self.cfg.dim,
        })
    }

    /// Decode bottleneck outputs `(N × d)` for one image.
    pub fn decode(&self, z_hat: &[f32]) -> Result<ImageTensor> {
        let n = self.cfg.tokens_per_image();
        if z_hat.len() != n * self.cfg.dim {
            return Err(Error::shape(n * self.cfg.dim, z_hat.len()));
        }
        let t = Tensor::from_slice(z_hat, (1, n, self.cfg.dim), &candle_core::Device::Cpu)?.to_dtype(self.cfg.dtype)?;
        let patches = rows_f32(&self.decoder.forward(&t)?)?.remove(0);
        unpatchify(&patches, self.cfg.image_size, self.cfg.image_size, self.cfg.patch)
    }

    /// Token ids per image, row-major over the latent grid.
    pub fn tokenize(&self, images: &[&ImageTensor]) -> Result<Vec<Vec<u64>>> {
        let patches = self.patches(images)?;
        let (b, n, _) = patches.dims3()?;
        let (grid, _) = self.encoder.forward(&patches)?;
        let u = self.bottleneck.project_down(&grid.reshape((b * n, self.cfg.dim))?)?;
        let ids = bsq::indices(&u)?;
        Ok(ids.chunks(n).map(<[u64]>::to_vec).collect())
    }

    /// Images from token ids (one row-major grid per image).
    pub fn detokenize(&self, grids: &[Vec<u64>]) -> Result<Vec<ImageTensor>> {
        let n = self.cfg.tokens_per_image();
        if grids.iter().any(|g| g.len() != n) {
            return Err(Error::shape(n, "token grid of different length"));
        }
        let flat: Vec<u64> = grids.concat();
        let codes = self.bottleneck.codes(&flat, self.cfg.dtype)?;
        let z_hat = self.bottleneck.project_up(&codes)?.reshape((grids.len(), n, self.cfg.dim))?;
        let patches = rows_f32(&self.decoder.forward(&z_hat)?)?;
        patches
            .iter()
            .map(|p| unpatchify(p, self.cfg.image_size, self.cfg.image_size, self.cfg.patch))
            .collect()
    }

    /// Reconstruct images through the quantized bottleneck.
    pub fn reconstruct(&self, images: &[&ImageTensor]) -> Result<Vec<ImageTensor>> {
        let fwd = self.forward(&self.patches(images)?, false)?;
        rows_f32(&fwd.recon)?
            .iter()
            .map(|p| unpatchify(p, self.cfg.image_size, self.cfg.image_size, self.cfg.patch))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::syndata::{gen_pair_corpus, Vocab};

    #[test]
    fn latent_grid_shape_default_config() {
        let m = QlipModel::new(ModelConfig::default(), 0).unwrap();
        let c = gen_pair_corpus(2, 32, 0).unwrap();
        let g = m.encode_image(&c.pairs[0].image).unwrap();
        assert_eq!(g.grid.len(), 64 * 64);
        assert_eq!(g.cls.len(), 64);
        assert_eq!(g.tokens() + 1, 65);
        assert_eq!(g, m.encode_image(&c.pairs[0].image).unwrap());
    }

    #[test]
    fn one_pixel_changes_the_latents() {
        let m = QlipModel::new(ModelConfig::small(), 1).unwrap();
        let c = gen_pair_corpus(1, 16, 0).unwrap();
        let mut img = c.pairs[0].image.clone();
        let a = m.encode_image(&img).unwrap();
        img.data[0] += 0.25;
        let b = m.encode_image(&img).unwrap();
        assert_ne!(a.grid, b.grid);
    }

    #[test]
    fn rejects_wrong_image_dims() {
        let m = QlipModel::new(ModelConfig::small(), 1).unwrap();
        assert!(m.encode_image(&ImageTensor::filled(32, 32, 0.5)).is_err());
        let odd = ImageTensor::filled(18, 18, 0.5);
        assert!(patchify(&[&odd], 4, DType::F32).is_err());
    }

    #[test]
    fn text_embeddings_are_unit_and_order_sensitive() {
        let m = QlipModel::new(ModelConfig::small(), 2).unwrap();
        let v = Vocab::standard();
        let a = v.encode("a photo of a red circle").unwrap();
        let mut b = a.clone();
        b.reverse();
        let e = m.text_embeddings(&[a, b]).unwrap().to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap();
        for row in &e {
            assert!((row.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        }
        assert_ne!(e[0], e[1]);
        assert!(m.text_embeddings(&[vec![]]).is_err());
        assert!(matches!(m.text_embeddings(&[vec![9999]]), Err(Error::OutOfVocab { .. })));
    }

    #[test]
    fn head_is_scale_invariant() {
        let m = QlipModel::new(ModelConfig::tiny_f64(), 3).unwrap();
        let cls = Tensor::new(&[[0.3f64, -1.0, 0.2, 0.5, 0.9, -0.4, 0.1, 0.7]], &candle_core::Device::Cpu).unwrap();
        let a = m.head.forward(&cls).unwrap().to_vec2::<f64>().unwrap();
        let b = m.head.forward(&(cls * 7.5).unwrap()).unwrap().to_vec2::<f64>().unwrap();
        for (x, y) in a[0].iter().zip(&b[0]) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((a[0].iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        let zero = Tensor::zeros((1, 8), DType::F64, &candle_core::Device::Cpu).unwrap();
        assert!(matches!(m.head.forward(&zero), Err(Error::Degenerate(_))));
    }

    #[test]
    fn decoder_range_and_bias_only_output() {
        let m = QlipModel::new(ModelConfig::small(), 4).unwrap();
        let n = m.cfg.tokens_per_image() * m.cfg.dim;
        let zero = vec![0f32; n];
        let img = m.decode(&zero).unwrap();
        assert_eq!(img, m.decode(&zero).unwrap());
        assert!(img.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
        // With the output projection zeroed only its (constant) bias reaches the pixels.
        let w = m.store.get("dec.output.weight").unwrap();
        w.set(&w.as_tensor().zeros_like().unwrap()).unwrap();
        let b = m.store.get("dec.output.bias").unwrap();
        b.set(&b.as_tensor().ones_like().unwrap().affine(0.3, 0.0).unwrap()).unwrap();
        let img = m.decode(&zero).unwrap();
        let expect = 1.0 / (1.0 + (-0.3f32).exp());
        assert!(img.data.iter().all(|&x| (x - expect).abs() < 1e-6));
        assert!(m.decode(&zero[1..]).is_err());
    }

    #[test]
    fn tokenize_shapes() {
        let m = QlipModel::new(ModelConfig::default(), 5).unwrap();
        let c = gen_pair_corpus(2, 32, 0).unwrap();
        let ids = m.tokenize(&[&c.pairs[0].image, &c.pairs[1].image]).unwrap();
        assert_eq!(ids.len(), 2);
        assert_eq!(ids[0].len(), 64);
        assert!(ids.iter().flatten().all(|&k| k < 1 << 12));
        assert_eq!(ids, m.tokenize(&[&c.pairs[0].image, &c.pairs[1].image]).unwrap());
    }

    #[test]
    fn config_roundtrips_through_kv() {
        let cfg = ModelConfig::small();
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        let mut bad = cfg.clone();
        assert!(bad.apply_kv("widht", "3").is_err());
    }
}
