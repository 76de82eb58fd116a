//! Unified multimodal model: one autoregressive transformer over text and
//! visual tokens, trained on a calm-down mixture of text-only, image-to-text
//! and text-to-image sequences.

pub mod lm;
pub mod sample;

use std::path::PathBuf;

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_bool, parse_num, KvConfig};
use crate::error::{Error, Result};
use crate::model::QlipModel;
use crate::syndata::{sentences, Corpus, Vocab, BOS, EOI, EOS, PAD, SOI};
use crate::trainer::{lr_schedule, AdamW, MetricsLog};

pub use lm::{extend_vocab, split_log_softmax, split_softmax_nll, split_softmax_nll_rows, Lm, LmConfig};
pub use sample::{generate, visual_spans, GenConfig};

/// Text ids occupy `[0, text)`, visual ids `[text, text + visual)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabLayout {
    pub text: usize,
    pub visual: usize,
}

impl VocabLayout {
    pub fn new(text: usize, visual: usize) -> Result<Self> {
        if text == 0 {
            return Err(Error::invalid("text vocabulary must be nonempty"));
        }
        if (text + visual) as u64 > u32::MAX as u64 {
            return Err(Error::invalid("vocabulary exceeds u32 ids"));
        }
        Ok(Self { text, visual })
    }

    /// Text words plus `2^bits` visual codes.
    pub fn for_codes(text: usize, bits: usize) -> Result<Self> {
        if bits == 0 || bits > 24 {
            return Err(Error::invalid(format!("code bits {bits} outside 1..=24")));
        }
        Self::new(text, 1 << bits)
    }

    pub fn offset(&self) -> usize {
        self.text
    }

    pub fn total(&self) -> usize {
        self.text + self.visual
    }

    pub fn is_visual(&self, id: u32) -> bool {
        (id as usize) >= self.text && (id as usize) < self.total()
    }

    pub fn visual_id(&self, code: u64) -> Result<u32> {
        if code as usize >= self.visual {
            return Err(Error::OutOfVocab { id: code as u32, size: self.visual });
        }
        Ok((self.text as u64 + code) as u32)
    }
}

/// Ids of the grammar tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Specials {
    pub pad: u32,
    pub bos: u32,
    pub eos: u32,
    pub soi: u32,
    pub eoi: u32,
}

impl Specials {
    pub fn from_vocab(v: &Vocab) -> Self {
        Self { pad: v.special(PAD), bos: v.special(BOS), eos: v.special(EOS), soi: v.special(SOI), eoi: v.special(EOI) }
    }
}

/// Text-only fraction decays linearly from `r0` to `r_t` over `calm_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixSchedule {
    pub r0: f64,
    pub r_t: f64,
    pub calm_steps: usize,
    /// Share of image-to-text among the paired draws.
    pub i2t_share: f64,
}

impl MixSchedule {
    /// From `text:i2t:t2i` weights at the start and at the end of the calm-down.
    pub fn from_ratios(start: [f64; 3], end: [f64; 3], calm_steps: usize) -> Result<Self> {
        let norm = |r: [f64; 3]| r[0] / (r[0] + r[1] + r[2]);
        if start[1] * end[2] != end[1] * start[2] {
            return Err(Error::Config("i2t:t2i ratio must stay fixed".into()));
        }
        let s = Self { r0: norm(start), r_t: norm(end), calm_steps, i2t_share: start[1] / (start[1] + start[2]) };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.r_t && self.r_t < self.r0 && self.r0 <= 1.0) {
            return Err(Error::Config(format!("need 0 < r_T < r_0 <= 1, got r_0={} r_T={}", self.r0, self.r_t)));
        }
        if self.calm_steps == 0 || !(0.0..=1.0).contains(&self.i2t_share) {
            return Err(Error::Config("calm_steps must be positive and i2t_share in [0, 1]".into()));
        }
        Ok(())
    }

    /// Same ratios, different calm-down length.
    pub fn with_calm_steps(self, calm_steps: usize) -> Self {
        Self { calm_steps, ..self }
    }
}

impl Default for MixSchedule {
    /// 60:1:3 decaying to 12:1:3 over 10k steps.
    fn default() -> Self {
        Self::from_ratios([60.0, 1.0, 3.0], [12.0, 1.0, 3.0], 10_000).expect("default ratios are valid")
    }
}

/// `r(t) = (r_T − r_0)/T · (t − T) + r_T` for `t ≤ T`, then `r_T`.
pub fn mix_ratio(t: usize, s: &MixSchedule) -> f64 {
    if t >= s.calm_steps {
        return s.r_t;
    }
    let big_t = s.calm_steps as f64;
    (s.r_t - s.r0) / big_t * (t as f64 - big_t) + s.r_t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SeqKind {
    Text,
    ImageToText,
    TextToImage,
}

impl SeqKind {
    pub fn name(self) -> &'static str {
        match self {
            SeqKind::Text => "text",
            SeqKind::ImageToText => "i2t",
            SeqKind::TextToImage => "t2i",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixedSeq {
    pub kind: SeqKind,
    pub ids: Vec<u32>,
}

/// `<bos> sentence <eos>`.
pub fn text_sequence(sp: &Specials, sentence: &[u32]) -> Vec<u32> {
    [&[sp.bos][..], sentence, &[sp.eos]].concat()
}

fn visual_ids(layout: &VocabLayout, codes: &[u64]) -> Result<Vec<u32>> {
    codes.iter().map(|&c| layout.visual_id(c)).collect()
}

/// `<bos> <soi> v₁…v_N <eoi> caption <eos>`.
pub fn i2t_sequence(sp: &Specials, layout: &VocabLayout, caption: &[u32], codes: &[u64]) -> Result<Vec<u32>> {
    Ok([&[sp.bos, sp.soi][..], &visual_ids(layout, codes)?, &[sp.eoi], caption, &[sp.eos]].concat())
}

/// `<bos> caption <soi> v₁…v_N <eoi>`.
pub fn t2i_sequence(sp: &Specials, layout: &VocabLayout, caption: &[u32], codes: &[u64]) -> Result<Vec<u32>> {
    Ok([&[sp.bos][..], caption, &[sp.soi], &visual_ids(layout, codes)?, &[sp.eoi]].concat())
}

/// Text sentences and tokenized image-caption pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Um3Sources {
    pub text: Vec<Vec<u32>>,
    /// `(caption, visual codes)` with codes in `[0, 2^L)`.
    pub pairs: Vec<(Vec<u32>, Vec<u64>)>,
    pub layout: VocabLayout,
    pub specials: Specials,
    pub n_visual: usize,
}

impl Um3Sources {
    /// Tokenize every corpus image with the frozen tokenizer.
    pub fn build(tokenizer: &QlipModel, corpus: &Corpus, text_stream: &[u32]) -> Result<Self> {
        let layout = VocabLayout::for_codes(corpus.vocab.len(), tokenizer.cfg.code_bits)?;
        let mut pairs = Vec::with_capacity(corpus.len());
        for chunk in corpus.pairs.chunks(256) {
            let images: Vec<_> = chunk.iter().map(|p| &p.image).collect();
            for (p, codes) in chunk.iter().zip(tokenizer.tokenize(&images)?) {
                pairs.push((p.tokens.clone(), codes));
            }
        }
        Self::from_parts(sentences(&corpus.vocab, text_stream), pairs, layout, Specials::from_vocab(&corpus.vocab))
    }

    pub fn from_parts(
        text: Vec<Vec<u32>>,
        pairs: Vec<(Vec<u32>, Vec<u64>)>,
        layout: VocabLayout,
        specials: Specials,
    ) -> Result<Self> {
        if text.is_empty() || pairs.is_empty() {
            return Err(Error::invalid("both the text and the paired source must be nonempty"));
        }
        let n_visual = pairs[0].1.len();
        if n_visual == 0 || pairs.iter().any(|(_, c)| c.len() != n_visual) {
            return Err(Error::invalid("every image must have the same nonzero number of tokens"));
        }
        Ok(Self { text, pairs, layout, specials, n_visual })
    }

    pub fn draw(&self, kind: SeqKind, rng: &mut impl Rng) -> Result<MixedSeq> {
        let ids = match kind {
            SeqKind::Text => text_sequence(&self.specials, &self.text[rng.random_range(0..self.text.len())]),
            SeqKind::ImageToText => {
                let (c, v) = &self.pairs[rng.random_range(0..self.pairs.len())];
                i2t_sequence(&self.specials, &self.layout, c, v)?
            }
            SeqKind::TextToImage => {
                let (c, v) = &self.pairs[rng.random_range(0..self.pairs.len())];
                t2i_sequence(&self.specials, &self.layout, c, v)?
            }
        };
        Ok(MixedSeq { kind, ids })
    }
}

/// Draw the kind of one sequence at step `t`.
pub fn draw_kind(t: usize, s: &MixSchedule, rng: &mut impl Rng) -> SeqKind {
    if rng.random::<f64>() < mix_ratio(t, s) {
        SeqKind::Text
    } else if rng.random::<f64>() < s.i2t_share {
        SeqKind::ImageToText
    } else {
        SeqKind::TextToImage
    }
}

pub fn sample_mixed_batch(
    sources: &Um3Sources,
    t: usize,
    schedule: &MixSchedule,
    batch: usize,
    rng: &mut impl Rng,
) -> Result<Vec<MixedSeq>> {
    (0..batch).map(|_| sources.draw(draw_kind(t, schedule, rng), rng)).collect()
}

/// Flattened next-token rows of a batch plus the targets they predict.
struct Prepared {
    inputs: Vec<Vec<u32>>,
    /// Indices into the flattened `(B·T)` rows that carry a loss.
    rows: Vec<u32>,
    targets: Vec<u32>,
    kinds: Vec<SeqKind>,
}

fn prepare(seqs: &[MixedSeq], sp: &Specials, all_positions: bool) -> Result<Prepared> {
    let t = seqs.iter().map(|s| s.ids.len()).max().unwrap_or(0).saturating_sub(1);
    if t == 0 {
        return Err(Error::invalid("sequences need at least two tokens"));
    }
    let mut p = Prepared { inputs: Vec::new(), rows: Vec::new(), targets: Vec::new(), kinds: Vec::new() };
    for (b, s) in seqs.iter().enumerate() {
        let mut input = s.ids[..s.ids.len() - 1].to_vec();
        input.resize(t, sp.pad);
        p.inputs.push(input);
        let mut in_image = false;
        for (i, &target) in s.ids[1..].iter().enumerate() {
            let prev = s.ids[i];
            if prev == sp.soi {
                in_image = true;
            }
            if prev == sp.eoi {
                in_image = false;
            }
            let is_image_target = in_image || target == sp.soi;
            let keep = all_positions
                || match s.kind {
                    SeqKind::Text => true,
                    SeqKind::ImageToText => !is_image_target,
                    SeqKind::TextToImage => is_image_target || target == sp.eoi,
                };
            if keep {
                p.rows.push((b * t + i) as u32);
                p.targets.push(target);
                p.kinds.push(s.kind);
            }
        }
    }
    Ok(p)
}

/// Per-target NLL rows for a batch of sequences.
fn batch_nll(lm: &Lm, layout: &VocabLayout, sp: &Specials, seqs: &[MixedSeq], all_positions: bool) -> Result<(Tensor, Vec<SeqKind>)> {
    let p = prepare(seqs, sp, all_positions)?;
    let logits = lm.logits(&p.inputs)?;
    let (b, t, v) = logits.dims3()?;
    let flat = logits.reshape((b * t, v))?;
    let idx = Tensor::from_vec(p.rows, p.targets.len(), &candle_core::Device::Cpu)?;
    let picked = flat.index_select(&idx, 0)?;
    Ok((split_softmax_nll_rows(&picked, &p.targets, layout)?, p.kinds))
}

/// Mean per-token NLL of `seqs`, evaluated in chunks.
pub fn mean_nll(lm: &Lm, layout: &VocabLayout, sp: &Specials, seqs: &[MixedSeq]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in seqs.chunks(64) {
        let (rows, _) = batch_nll(lm, layout, sp, chunk, true)?;
        let v = rows.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        total += v.iter().sum::<f64>();
        count += v.len();
    }
    if count == 0 {
        return Err(Error::invalid("no tokens to score"));
    }
    Ok(total / count as f64)
}

/// Held-out sequences scored during training.
#[derive(Debug, Clone, Default)]
pub struct EvalSets {
    pub text: Vec<MixedSeq>,
    pub t2i: Vec<MixedSeq>,
}

impl EvalSets {
    pub fn build(sources: &Um3Sources, heldout_text: &[Vec<u32>], n_t2i: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe7a1);
        let text = heldout_text.iter().map(|s| MixedSeq { kind: SeqKind::Text, ids: text_sequence(&sources.specials, s) }).collect();
        let t2i = (0..n_t2i).map(|_| sources.draw(SeqKind::TextToImage, &mut rng)).collect::<Result<_>>()?;
        Ok(Self { text, t2i })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Um3Config {
    pub peak_lr: f64,
    pub warmup: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub schedule: MixSchedule,
    /// Loss on every position; when false only on the generated modality.
    pub loss_all_positions: bool,
    pub temperature: f64,
    pub top_p: f64,
    pub log_every: usize,
    /// Score the eval sets every this many steps (and at both ends).
    pub eval_every: usize,
    pub snapshot_dir: Option<PathBuf>,
    /// Halt after this many steps without changing the schedule.
    pub stop_after: Option<usize>,
}

impl Default for Um3Config {
    fn default() -> Self {
        Self {
            peak_lr: 1e-4,
            warmup: 100,
            total_steps: 5000,
            batch_size: 32,
            seed: 0,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            grad_clip: 1.0,
            schedule: MixSchedule::default(),
            loss_all_positions: true,
            temperature: 1.0,
            top_p: 0.95,
            log_every: 1,
            eval_every: 1000,
            snapshot_dir: None,
            stop_after: None,
        }
    }
}

impl Um3Config {
    /// Desk-scale mixed run: 10× the paper's peak rate and a calm-down of half the run.
    pub fn toy() -> Self {
        Self {
            peak_lr: 1e-3,
            total_steps: 5000,
            schedule: MixSchedule::default().with_calm_steps(2500),
            eval_every: 500,
            ..Self::default()
        }
    }

    /// Base text-model pretraining at desk scale.
    pub fn toy_pretrain() -> Self {
        Self { peak_lr: 2e-3, total_steps: 1500, weight_decay: 0.1, eval_every: 500, ..Self::toy() }
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let ratios = |v: &str| -> Result<[f64; 3]> {
            let parts: Vec<f64> = v.split(':').map(|x| parse_num(key, x.trim())).collect::<Result<_>>()?;
            parts.try_into().map_err(|_| Error::Config(format!("`{key}` expects text:i2t:t2i")))
        };
        match key {
            "peak_lr" => self.peak_lr = parse_num(key, value)?,
            "warmup" => self.warmup = parse_num(key, value)?,
            "total_steps" => self.total_steps = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "grad_clip" => self.grad_clip = parse_num(key, value)?,
            "mix.r0" => self.schedule.r0 = parse_num(key, value)?,
            "mix.r_t" => self.schedule.r_t = parse_num(key, value)?,
            "mix.i2t_share" => self.schedule.i2t_share = parse_num(key, value)?,
            "mix.calm_steps" => self.schedule.calm_steps = parse_num(key, value)?,
            "mix.start" | "mix.end" => {
                let r = ratios(value)?;
                let total = r[0] + r[1] + r[2];
                if key == "mix.start" {
                    self.schedule.r0 = r[0] / total;
                } else {
                    self.schedule.r_t = r[0] / total;
                }
                self.schedule.i2t_share = r[1] / (r[1] + r[2]);
            }
            "loss_all_positions" => self.loss_all_positions = parse_bool(key, value)?,
            "temperature" => self.temperature = parse_num(key, value)?,
            "top_p" => self.top_p = parse_num(key, value)?,
            "log_every" => self.log_every = parse_num(key, value)?,
            "eval_every" => self.eval_every = parse_num(key, value)?,
            "snapshot_dir" => self.snapshot_dir = Some(PathBuf::from(value)),
            "stop_after" => self.stop_after = Some(parse_num(key, value)?),
            _ => return Err(Error::Config(format!("unknown multimodal training key `{key}`"))),
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("peak_lr", self.peak_lr);
        kv.set("warmup", self.warmup);
        kv.set("total_steps", self.total_steps);
        kv.set("batch_size", self.batch_size);
        kv.set("seed", self.seed);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("weight_decay", self.weight_decay);
        kv.set("grad_clip", self.grad_clip);
        kv.set("mix.r0", self.schedule.r0);
        kv.set("mix.r_t", self.schedule.r_t);
        kv.set("mix.i2t_share", self.schedule.i2t_share);
        kv.set("mix.calm_steps", self.schedule.calm_steps);
        kv.set("loss_all_positions", self.loss_all_positions);
        kv.set("temperature", self.temperature);
        kv.set("top_p", self.top_p);
        kv.set("log_every", self.log_every);
        kv.set("eval_every", self.eval_every);
        if let Some(d) = &self.snapshot_dir {
            kv.set("snapshot_dir", d.display());
        }
        if let Some(n) = self.stop_after {
            kv.set("stop_after", n);
        }
        kv
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.total_steps == 0 || self.batch_size == 0 || self.log_every == 0 || self.eval_every == 0 {
            return Err(Error::Config("steps, batch size and intervals must be positive".into()));
        }
        if self.warmup > self.total_steps {
            return Err(Error::Config("warmup exceeds total_steps".into()));
        }
        if !(self.peak_lr > 0.0) || !(self.grad_clip > 0.0) || !(self.temperature > 0.0) {
            return Err(Error::Config("peak_lr, grad_clip and temperature must be positive".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config("top_p must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Shared optimization loop; `draw` produces the batch for a step.
fn train_loop(
    lm: Lm,
    layout: &VocabLayout,
    sp: &Specials,
    cfg: &Um3Config,
    mut draw: impl FnMut(usize, &mut ChaCha8Rng) -> Result<Vec<MixedSeq>>,
    mut evaluate: impl FnMut(usize, &Lm, &mut MetricsLog) -> Result<()>,
) -> Result<(Lm, MetricsLog)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0a37);
    let mut opt = AdamW::new(cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut log = MetricsLog::default();
    evaluate(0, &lm, &mut log)?;
    let steps = cfg.stop_after.map_or(cfg.total_steps, |n| n.min(cfg.total_steps));
    for step in 0..steps {
        let seqs = draw(step, &mut rng)?;
        let (rows, kinds) = batch_nll(&lm, layout, sp, &seqs, cfg.loss_all_positions)?;
        let loss = rows.mean_all()?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            let snapshot = cfg.snapshot_dir.as_ref().and_then(|d| {
                std::fs::create_dir_all(d).ok()?;
                let p = d.join(format!("um3_nonfinite_step{step}.ckpt"));
                lm.save(&p, Some(layout)).ok().map(|_| p)
            });
            return Err(Error::NonFinite { step, name: "um3_loss".into(), snapshot });
        }
        let lr = lr_schedule(step, cfg.warmup, cfg.total_steps, cfg.peak_lr)?;
        let grads = loss.backward()?;
        let stats = opt.step(&lm.store, &grads, |_| lr, Some(cfg.grad_clip))?;
        if step % cfg.log_every == 0 || step + 1 == cfg.total_steps {
            log.push(step, "loss", value);
            let per_row = rows.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for kind in [SeqKind::Text, SeqKind::ImageToText, SeqKind::TextToImage] {
                let v: Vec<f64> = per_row.iter().zip(&kinds).filter(|(_, k)| **k == kind).map(|(x, _)| *x).collect();
                if !v.is_empty() {
                    log.push(step, &format!("loss_{}", kind.name()), v.iter().sum::<f64>() / v.len() as f64);
                }
            }
            log.push(step, "lr", lr);
            log.push(step, "grad_norm", stats.grad_norm);
            log.push(step, "mix_ratio", mix_ratio(step, &cfg.schedule));
        }
        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.total_steps {
            evaluate(step + 1, &lm, &mut log)?;
        }
    }
    Ok((lm, log))
}

/// Train the text-only base model on sentences.
pub fn pretrain_lm(lm_cfg: LmConfig, cfg: &Um3Config, sentences: &[Vec<u32>], sp: &Specials, heldout: &[Vec<u32>]) -> Result<(Lm, MetricsLog)> {
    if sentences.is_empty() {
        return Err(Error::invalid("empty text corpus"));
    }
    let layout = VocabLayout::new(lm_cfg.vocab, 0)?;
    let lm = Lm::new(lm_cfg, cfg.seed)?;
    let eval: Vec<MixedSeq> = heldout.iter().map(|s| MixedSeq { kind: SeqKind::Text, ids: text_sequence(sp, s) }).collect();
    train_loop(
        lm,
        &layout,
        sp,
        cfg,
        |_, rng| {
            Ok((0..cfg.batch_size)
                .map(|_| MixedSeq { kind: SeqKind::Text, ids: text_sequence(sp, &sentences[rng.random_range(0..sentences.len())]) })
                .collect())
        },
        |step, lm, log| {
            if !eval.is_empty() {
                log.push(step, "eval_text_nll", mean_nll(lm, &layout, sp, &eval)?);
            }
            Ok(())
        },
    )
}

/// Mixed-modality training of an extended model.
pub fn train_um3(cfg: &Um3Config, model: Lm, sources: &Um3Sources, eval: &EvalSets) -> Result<(Lm, MetricsLog)> {
    if model.cfg.vocab != sources.layout.total() {
        return Err(Error::Config(format!(
            "model has {} ids, sources need {}",
            model.cfg.vocab,
            sources.layout.total()
        )));
    }
    let (layout, sp) = (sources.layout, sources.specials);
    train_loop(
        model,
        &layout,
        &sp,
        cfg,
        |step, rng| sample_mixed_batch(sources, step, &cfg.schedule, cfg.batch_size, rng),
        |step, lm, log| {
            if !eval.text.is_empty() {
                log.push(step, "eval_text_nll", mean_nll(lm, &layout, &sp, &eval.text)?);
            }
            if !eval.t2i.is_empty() {
                log.push(step, "eval_t2i_nll", mean_nll(lm, &layout, &sp, &eval.t2i)?);
            }
            Ok(())
        },
    )
}

/// Text-to-image prompt `<bos> caption <soi>`.
pub fn t2i_prompt(sp: &Specials, caption: &[u32]) -> Vec<u32> {
    [&[sp.bos][..], caption, &[sp.soi]].concat()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = MixSchedule::default();
        assert!((s.r0 - 60.0 / 64.0).abs() < 1e-15);
        assert!((s.r_t - 12.0 / 16.0).abs() < 1e-15);
        assert!((s.i2t_share - 0.25).abs() < 1e-15);
        assert!((mix_ratio(0, &s) - s.r0).abs() < 1e-15);
        assert!((mix_ratio(s.calm_steps, &s) - s.r_t).abs() < 1e-15);
        assert!((mix_ratio(3 * s.calm_steps, &s) - s.r_t).abs() < 1e-15);
        assert!((mix_ratio(s.calm_steps / 2, &s) - (s.r0 + s.r_t) / 2.0).abs() < 1e-12);
        let mut prev = 2.0;
        for t in (0..12_000).step_by(250) {
            let r = mix_ratio(t, &s);
            assert!(r <= prev);
            prev = r;
        }
    }

    #[test]
    fn config_kv_roundtrip() {
        let c = Um3Config::toy();
        let mut back = Um3Config::default();
        for (k, v) in c.to_kv().iter() {
            back.apply_kv(k, v).unwrap();
        }
        assert_eq!(back, c);
        let mut r = Um3Config::default();
        r.apply_kv("mix.start", "60:1:3").unwrap();
        assert!((r.schedule.r0 - 60.0 / 64.0).abs() < 1e-15);
        assert!(r.apply_kv("mix.start", "60:1").is_err());
        assert!(r.apply_kv("lr", "1").is_err());
    }

    #[test]
    fn schedule_validation() {
        assert!(MixSchedule::from_ratios([1.0, 1.0, 3.0], [12.0, 1.0, 3.0], 10).is_err());
        assert!(MixSchedule::from_ratios([60.0, 1.0, 3.0], [12.0, 2.0, 3.0], 10).is_err());
        assert!(MixSchedule::from_ratios([60.0, 1.0, 3.0], [12.0, 1.0, 3.0], 0).is_err());
    }

    fn toy_sources() -> Um3Sources {
        let v = Vocab::standard();
        let layout = VocabLayout::for_codes(v.len(), 4).unwrap();
        let text = vec![v.encode("the cat eats bread .").unwrap(), v.encode("a dog sees the ball .").unwrap()];
        let pairs = (0..5).map(|i| (v.encode("a red square").unwrap(), (0..4).map(|k| (k * 3 + i) % 16).collect())).collect();
        Um3Sources::from_parts(text, pairs, layout, Specials::from_vocab(&v)).unwrap()
    }

    #[test]
    fn batches_respect_layout_and_grammar() {
        let src = toy_sources();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = MixSchedule::default();
        let batch = sample_mixed_batch(&src, 10_000, &s, 400, &mut rng).unwrap();
        for seq in &batch {
            let spans = visual_spans(&seq.ids, &src.layout, &src.specials, src.n_visual).unwrap();
            let expect = if seq.kind == SeqKind::Text { 0 } else { 1 };
            assert_eq!(spans.len(), expect);
            assert!(seq.ids.iter().all(|&id| (id as usize) < src.layout.total()));
            assert_eq!(seq.ids[0], src.specials.bos);
        }
        let i2t = batch.iter().filter(|s| s.kind == SeqKind::ImageToText).count() as f64;
        let t2i = batch.iter().filter(|s| s.kind == SeqKind::TextToImage).count() as f64;
        assert!(t2i > i2t);
    }

    #[test]
    fn empty_sources_rejected() {
        let v = Vocab::standard();
        let layout = VocabLayout::for_codes(v.len(), 4).unwrap();
        assert!(Um3Sources::from_parts(vec![], vec![(vec![1], vec![0])], layout, Specials::from_vocab(&v)).is_err());
    }

    #[test]
    fn loss_masking_keeps_only_generated_modality() {
        let src = toy_sources();
        let sp = src.specials;
        let seq = MixedSeq { kind: SeqKind::TextToImage, ids: t2i_sequence(&sp, &src.layout, &[20, 21], &[1, 2, 3, 4]).unwrap() };
        let all = prepare(std::slice::from_ref(&seq), &sp, true).unwrap();
        let masked = prepare(&[seq], &sp, false).unwrap();
        assert_eq!(all.targets.len(), 8);
        assert_eq!(masked.targets, vec![sp.soi, 1 + src.layout.text as u32, 2 + src.layout.text as u32, 3 + src.layout.text as u32, 4 + src.layout.text as u32, sp.eoi]);
    }
}
