//! Decoder-only transformer over a joint text + visual vocabulary.

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{parse_num, KvConfig};
use crate::error::{Error, Result};
use crate::nn::{log_softmax_last, sinusoidal, Block, Builder, Fill, Init, LayerNorm, ParamStore};

use super::VocabLayout;

#[derive(Debug, Clone, PartialEq)]
pub struct LmConfig {
    pub vocab: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dtype: DType,
}

impl LmConfig {
    /// Base text model over `vocab` words.
    pub fn small(vocab: usize) -> Self {
        Self { vocab, dim: 64, layers: 2, heads: 4, max_len: 48, dtype: DType::F32 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.dim == 0 || self.layers == 0 || self.max_len < 2 {
            return Err(Error::Config("vocab, dim, layers must be positive and max_len at least 2".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("vocab", self.vocab);
        kv.set("dim", self.dim);
        kv.set("layers", self.layers);
        kv.set("heads", self.heads);
        kv.set("max_len", self.max_len);
        kv.set("dtype", if self.dtype == DType::F64 { "f64" } else { "f32" });
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut kv = kv.clone();
        let mut num = |k: &str| -> Result<usize> {
            let v = kv.take(k).ok_or_else(|| Error::Config(format!("missing `{k}`")))?;
            parse_num(k, &v)
        };
        let cfg = Self {
            vocab: num("vocab")?,
            dim: num("dim")?,
            layers: num("layers")?,
            heads: num("heads")?,
            max_len: num("max_len")?,
            dtype: match kv.take("dtype").as_deref() {
                Some("f32") | None => DType::F32,
                Some("f64") => DType::F64,
                Some(o) => return Err(Error::Config(format!("unknown dtype `{o}`"))),
            },
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Token embedding and output tables are untied, each with one row per vocabulary entry.
#[derive(Debug, Clone)]
pub struct Lm {
    pub cfg: LmConfig,
    pub store: ParamStore,
    pub embed: Tensor,
    pub blocks: Vec<Block>,
    pub ln_out: LayerNorm,
    pub out: Tensor,
    positions: Tensor,
}

impl Lm {
    pub fn new(cfg: LmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(cfg, &mut store, Init::Random(&mut rng))
    }

    pub fn from_store(cfg: LmConfig, mut store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        if store.dtype() != cfg.dtype {
            store = store.to_dtype(cfg.dtype)?;
        }
        Self::build(cfg, &mut store, Init::Existing)
    }

    fn build(cfg: LmConfig, store: &mut ParamStore, init: Init) -> Result<Self> {
        let mut b = Builder::new(store, init);
        let (embed, blocks, ln_out, out) = b.scoped("lm", |b| {
            let embed = b.param("embed", &[cfg.vocab, cfg.dim], Fill::Normal(0.5))?;
            let blocks = (0..cfg.layers)
                .map(|i| Block::new(b, &format!("blocks.{i}"), cfg.dim, cfg.heads, cfg.layers, true))
                .collect::<Result<Vec<_>>>()?;
            let ln_out = LayerNorm::new(b, "ln_out", cfg.dim)?;
            let out = b.param("out", &[cfg.vocab, cfg.dim], Fill::Normal(1.0 / (cfg.dim as f64).sqrt()))?;
            Ok((embed, blocks, ln_out, out))
        })?;
        let positions = sinusoidal(cfg.max_len, cfg.dim, cfg.dtype)?;
        Ok(Lm { cfg, store: store.clone(), embed, blocks, ln_out, out, positions })
    }

    /// Logits `(B, T, V)` for right-padded sequences of equal length.
    pub fn logits(&self, inputs: &[Vec<u32>]) -> Result<Tensor> {
        let b = inputs.len();
        let t = inputs.first().map(Vec::len).unwrap_or(0);
        if b == 0 || t == 0 {
            return Err(Error::invalid("empty input batch"));
        }
        if inputs.iter().any(|s| s.len() != t) {
            return Err(Error::invalid("input rows must have equal length"));
        }
        if t > self.cfg.max_len {
            return Err(Error::invalid(format!("sequence length {t} exceeds context {}", self.cfg.max_len)));
        }
        let flat: Vec<u32> = inputs.concat();
        if let Some(&bad) = flat.iter().find(|&&id| id as usize >= self.cfg.vocab) {
            return Err(Error::OutOfVocab { id: bad, size: self.cfg.vocab });
        }
        let ids = Tensor::from_vec(flat, b * t, &Device::Cpu)?;
        let x = self.embed.index_select(&ids, 0)?.reshape((b, t, self.cfg.dim))?;
        let mut x = x.broadcast_add(&self.positions.narrow(0, 0, t)?)?;
        for blk in &self.blocks {
            x = blk.forward(&x, true)?;
        }
        let h = self.ln_out.forward(&x)?.reshape((b * t, self.cfg.dim))?;
        Ok(h.matmul(&self.out.t()?)?.reshape((b, t, self.cfg.vocab))?)
    }

    pub fn save(&self, path: &std::path::Path, layout: Option<&VocabLayout>) -> Result<()> {
        let mut kv = KvConfig::default();
        kv.set("kind", "lm");
        for (k, v) in self.cfg.to_kv().iter() {
            kv.set(&format!("lm.{k}"), v);
        }
        if let Some(l) = layout {
            kv.set("layout.text", l.text);
            kv.set("layout.visual", l.visual);
        }
        checkpoint::save(path, &kv, &self.store)
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, Option<VocabLayout>)> {
        let (mut kv, store) = checkpoint::load(path)?;
        if kv.take("kind").as_deref() != Some("lm") {
            return Err(Error::Format { context: path.display().to_string(), detail: "not a language-model checkpoint".into() });
        }
        let cfg = LmConfig::from_kv(&kv.take_prefixed("lm"))?;
        let mut lk = kv.take_prefixed("layout");
        let layout = match (lk.take("text"), lk.take("visual")) {
            (Some(t), Some(v)) => Some(VocabLayout::new(parse_num("layout.text", &t)?, parse_num("layout.visual", &v)?)?),
            (None, None) => None,
            _ => return Err(Error::Config("layout needs both text and visual sizes".into())),
        };
        lk.finish()?;
        kv.finish()?;
        if let Some(l) = &layout {
            if l.total() != cfg.vocab {
                return Err(Error::Config(format!("layout covers {} ids, model has {}", l.total(), cfg.vocab)));
            }
        }
        Ok((Self::from_store(cfg, store)?, layout))
    }
}

/// Grow a text-only model to `layout`, initializing every new row of both
/// tables with the mean of the existing rows.
pub fn extend_vocab(base: &Lm, layout: &VocabLayout) -> Result<Lm> {
    if base.cfg.vocab != layout.text {
        return Err(Error::Config(format!(
            "base model has {} rows, layout expects {} text tokens",
            base.cfg.vocab, layout.text
        )));
    }
    let mut store = base.store.deep_clone()?;
    for name in ["lm.embed", "lm.out"] {
        let rows = base.store.tensor(name)?.detach();
        let mean = rows.mean_keepdim(0)?;
        let extra = mean.broadcast_as((layout.visual, base.cfg.dim))?.contiguous()?;
        let grown = Tensor::cat(&[&rows, &extra], 0)?;
        store.insert(name, &grown)?;
    }
    let cfg = LmConfig { vocab: layout.total(), ..base.cfg.clone() };
    Lm::from_store(cfg, store)
}

/// Log-probabilities with each segment normalized on its own, `(M, V)`.
pub fn split_log_softmax(logits: &Tensor, layout: &VocabLayout) -> Result<Tensor> {
    let v = logits.dim(D::Minus1)?;
    if v != layout.total() {
        return Err(Error::shape(layout.total(), v));
    }
    if layout.visual == 0 {
        return log_softmax_last(logits);
    }
    let text = log_softmax_last(&logits.narrow(D::Minus1, 0, layout.text)?)?;
    let vis = log_softmax_last(&logits.narrow(D::Minus1, layout.text, layout.visual)?)?;
    Ok(Tensor::cat(&[&text, &vis], D::Minus1)?)
}

/// Per-row NLL of `targets` under the split softmax, `(M,)`.
pub fn split_softmax_nll_rows(logits: &Tensor, targets: &[u32], layout: &VocabLayout) -> Result<Tensor> {
    let (m, _) = logits.dims2()?;
    if targets.len() != m {
        return Err(Error::shape(m, targets.len()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= layout.total()) {
        return Err(Error::OutOfVocab { id: bad, size: layout.total() });
    }
    let logp = split_log_softmax(logits, layout)?;
    let idx = Tensor::from_slice(targets, (m, 1), &Device::Cpu)?;
    Ok(logp.gather(&idx, 1)?.squeeze(1)?.neg()?)
}

/// Batch-mean NLL where each target is scored within its own segment only.
pub fn split_softmax_nll(logits: &Tensor, targets: &[u32], layout: &VocabLayout) -> Result<Tensor> {
    Ok(split_softmax_nll_rows(logits, targets, layout)?.mean_all()?)
}

/// Plain cross-entropy over the whole vocabulary, `(M,)`.
pub fn full_softmax_nll_rows(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    let (m, v) = logits.dims2()?;
    if targets.len() != m {
        return Err(Error::shape(m, targets.len()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(Error::OutOfVocab { id: bad, size: v });
    }
    let idx = Tensor::from_slice(targets, (m, 1), &Device::Cpu)?;
    Ok(log_softmax_last(logits)?.gather(&idx, 1)?.squeeze(1)?.neg()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> VocabLayout {
        VocabLayout::new(5, 8).unwrap()
    }

    #[test]
    fn uniform_logits_give_segment_entropy() {
        let l = layout();
        let logits = Tensor::zeros((2, l.total()), DType::F64, &Device::Cpu).unwrap();
        let nll = split_softmax_nll(&logits, &[1, 7], &l).unwrap().to_scalar::<f64>().unwrap();
        assert!((nll - (5f64.ln() + 8f64.ln()) / 2.0).abs() < 1e-12);
        let text_only = split_softmax_nll(&logits, &[3, 3], &l).unwrap().to_scalar::<f64>().unwrap();
        assert!((text_only - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn visual_shift_does_not_touch_text_targets() {
        let l = layout();
        let logits = Tensor::randn(0f64, 1.0, (3, l.total()), &Device::Cpu).unwrap();
        let mut shift = vec![0.0f64; l.total()];
        shift[l.text..].iter_mut().for_each(|s| *s = 7.5);
        let shifted = logits.broadcast_add(&Tensor::new(shift.as_slice(), &Device::Cpu).unwrap()).unwrap();
        let a = split_softmax_nll(&logits, &[0, 2, 4], &l).unwrap().to_scalar::<f64>().unwrap();
        let b = split_softmax_nll(&shifted, &[0, 2, 4], &l).unwrap().to_scalar::<f64>().unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn segments_each_sum_to_one() {
        let l = layout();
        let logits = Tensor::randn(0f32, 3.0, (4, l.total()), &Device::Cpu).unwrap();
        let p = split_log_softmax(&logits, &l).unwrap().exp().unwrap();
        let t = p.narrow(1, 0, l.text).unwrap().sum(1).unwrap().to_vec1::<f32>().unwrap();
        let v = p.narrow(1, l.text, l.visual).unwrap().sum(1).unwrap().to_vec1::<f32>().unwrap();
        assert!(t.iter().chain(&v).all(|s| (s - 1.0).abs() < 1e-6));
    }

    #[test]
    fn out_of_range_target_is_rejected() {
        let l = layout();
        let logits = Tensor::zeros((1, l.total()), DType::F32, &Device::Cpu).unwrap();
        assert!(split_softmax_nll(&logits, &[13], &l).is_err());
    }

    #[test]
    fn extension_copies_base_and_mean_inits_new_rows() {
        let base = Lm::new(LmConfig { vocab: 5, dim: 8, layers: 1, heads: 2, max_len: 8, dtype: DType::F64 }, 1).unwrap();
        let l = layout();
        let ext = extend_vocab(&base, &l).unwrap();
        for name in ["lm.embed", "lm.out"] {
            let b = base.store.tensor(name).unwrap().to_vec2::<f64>().unwrap();
            let e = ext.store.tensor(name).unwrap().to_vec2::<f64>().unwrap();
            assert_eq!(&e[..5], &b[..]);
            for j in 0..8 {
                let mean: f64 = b.iter().map(|r| r[j]).sum::<f64>() / 5.0;
                for row in &e[5..] {
                    assert!((row[j] - mean).abs() < 1e-12);
                }
            }
        }
        assert!(extend_vocab(&ext, &l).is_err());
    }

    #[test]
    fn equal_base_rows_give_equal_new_rows() {
        let mut base = Lm::new(LmConfig { vocab: 5, dim: 4, layers: 1, heads: 1, max_len: 4, dtype: DType::F64 }, 2).unwrap();
        let e = Tensor::new(&[0.5f64, -1.0, 2.0, 0.25], &Device::Cpu).unwrap().broadcast_as((5, 4)).unwrap().contiguous().unwrap();
        base.store.insert("lm.embed", &e).unwrap();
        base = Lm::from_store(base.cfg.clone(), base.store).unwrap();
        let ext = extend_vocab(&base, &layout()).unwrap();
        let rows = ext.store.tensor("lm.embed").unwrap().to_vec2::<f64>().unwrap();
        assert!(rows.iter().all(|r| r == &vec![0.5, -1.0, 2.0, 0.25]));
    }

    #[test]
    fn checkpoint_roundtrip_with_layout() {
        let base = Lm::new(LmConfig { vocab: 5, dim: 8, layers: 1, heads: 2, max_len: 8, dtype: DType::F32 }, 3).unwrap();
        let ext = extend_vocab(&base, &layout()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lm.ckpt");
        ext.save(&p, Some(&layout())).unwrap();
        let (back, l) = Lm::load(&p).unwrap();
        assert_eq!(l, Some(layout()));
        assert_eq!(back.store.fingerprint(&[""]).unwrap(), ext.store.fingerprint(&[""]).unwrap());
    }
}
