//! Two-stage tokenizer training.
//!
//! Stage one optimizes every branch on the weighted sum of reconstruction,
//! entropy, alignment and commitment terms. Stage two freezes the encoder,
//! drops the text branch and fine-tunes only the bottleneck and decoder on
//! reconstruction. Both stages share one AdamW optimizer with per-branch
//! learning-rate multipliers, linear warm-up and cosine annealing.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{parse_bool, parse_num, KvConfig};
use crate::error::{Error, Result};
use crate::model::{groups, ModelConfig, QlipModel};
use crate::nn::ParamStore;
use crate::objectives::{
    probe_gradients, stage1_loss, stage2_loss, Batch, ExtraLoss, FreezeFlags, LossWeights, QuantLossConfig,
};
use crate::syndata::Corpus;

/// Learning rate at `step`: linear warm-up from 0 to `peak`, then cosine decay to 0 at `total`.
pub fn lr_schedule(step: usize, warmup: usize, total: usize, peak: f64) -> Result<f64> {
    if step > total {
        return Err(Error::invalid(format!("step {step} beyond schedule end {total}")));
    }
    if warmup > total {
        return Err(Error::invalid(format!("warm-up {warmup} longer than schedule {total}")));
    }
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    if total == warmup {
        return Ok(peak);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: usize,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2, eps: 1e-8, weight_decay, step: 0, moments: BTreeMap::new() }
    }

    /// One update of every parameter whose learning rate is positive.
    ///
    /// Gradients are first rescaled so their global l2 norm is at most `clip`.
    /// Weight decay applies to matrices only. Parameters with a zero learning
    /// rate are not touched at all.
    pub fn step(
        &mut self,
        store: &ParamStore,
        grads: &GradStore,
        lr_of: impl Fn(&str) -> f64,
        clip: Option<f64>,
    ) -> Result<StepStats> {
        let mut active = Vec::new();
        let mut sq = 0.0f64;
        for (name, var) in store.iter() {
            let lr = lr_of(name);
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            if lr <= 0.0 {
                continue;
            }
            sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            active.push((name, var, g, lr));
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::invalid("non-finite gradient"));
        }
        let scale = match clip {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var, g, lr) in active {
            let p = var.as_tensor();
            let g = g.detach();
            let g = if scale != 1.0 { g.affine(scale, 0.0)? } else { g };
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (p.zeros_like()?, p.zeros_like()?),
            };
            let m = ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let update = (&m * (1.0 / bc1))?.div(&(&v * (1.0 / bc2))?.sqrt()?.affine(1.0, self.eps)?)?;
            let decay = if p.rank() >= 2 { self.weight_decay } else { 0.0 };
            let next = (p.detach().affine(1.0 - lr * decay, 0.0)? - (update * lr)?)?;
            var.set(&next)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(StepStats { grad_norm, clipped: scale < 1.0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

/// Learning-rate multipliers per branch, relative to the peak rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchLr {
    pub encoder: f64,
    pub head: f64,
    pub text: f64,
    pub logit_scale: f64,
    pub bottleneck: f64,
    pub decoder: f64,
}

impl BranchLr {
    /// Encoder 2e-4, text 2e-5, decoder 2e-3 against a 5e-4 peak.
    pub fn stage1() -> Self {
        Self { encoder: 0.4, head: 1.0, text: 0.04, logit_scale: 1.0, bottleneck: 1.0, decoder: 4.0 }
    }

    /// Frozen encoder and text branch, decoder 1e-4 against a 5e-4 peak.
    pub fn stage2() -> Self {
        Self { encoder: 0.0, head: 0.0, text: 0.0, logit_scale: 0.0, bottleneck: 1.0, decoder: 0.2 }
    }

    pub fn multiplier(&self, name: &str) -> f64 {
        if name.starts_with(groups::ENCODER) {
            self.encoder
        } else if name.starts_with(groups::HEAD) {
            self.head
        } else if name.starts_with(groups::TEXT) {
            self.text
        } else if name.starts_with(groups::LOGIT_SCALE) {
            self.logit_scale
        } else if name.starts_with(groups::BOTTLENECK) {
            self.bottleneck
        } else if name.starts_with(groups::DECODER) {
            self.decoder
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub model: ModelConfig,
    pub peak_lr: f64,
    pub lr_mult: BranchLr,
    pub warmup: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub quant: QuantLossConfig,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub freeze: FreezeFlags,
    /// Emit metrics every this many steps.
    pub log_every: usize,
    /// Where to write a snapshot when a loss turns non-finite.
    pub snapshot_dir: Option<PathBuf>,
    /// Log unweighted per-loss probe-layer gradient norms every this many
    /// steps (stage one only; 0 disables).
    pub probe_every: usize,
    /// Halt after this many steps without changing the schedule.
    pub stop_after: Option<usize>,
}

impl TrainConfig {
    pub fn stage1() -> Self {
        Self {
            stage: Stage::One,
            model: ModelConfig::default(),
            peak_lr: 5e-4,
            lr_mult: BranchLr::stage1(),
            warmup: 100,
            total_steps: 2000,
            batch_size: 64,
            seed: 0,
            weights: LossWeights::default(),
            quant: QuantLossConfig::default(),
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.05,
            grad_clip: 5.0,
            freeze: FreezeFlags { encoder: false, text: false },
            log_every: 1,
            snapshot_dir: None,
            probe_every: 0,
            stop_after: None,
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: Stage::Two,
            lr_mult: BranchLr::stage2(),
            grad_clip: 1.0,
            batch_size: 32,
            freeze: FreezeFlags::stage2(),
            ..Self::stage1()
        }
    }

    /// Desk-scale stage one: 16×16 model, doubled peak rate, and a text rate
    /// equal to the peak because the toy text encoder starts from scratch.
    pub fn toy_stage1() -> Self {
        Self {
            model: ModelConfig::small(),
            peak_lr: 1e-3,
            lr_mult: BranchLr { text: 1.0, ..BranchLr::stage1() },
            warmup: 200,
            total_steps: 4000,
            ..Self::stage1()
        }
    }

    pub fn toy_stage2() -> Self {
        Self { model: ModelConfig::small(), peak_lr: 1e-3, warmup: 50, total_steps: 1000, ..Self::stage2() }
    }

    pub fn preset(name: &str, stage: Stage) -> Result<Self> {
        Ok(match (name, stage) {
            ("paper", Stage::One) => Self::stage1(),
            ("paper", Stage::Two) => Self::stage2(),
            ("toy", Stage::One) => Self::toy_stage1(),
            ("toy", Stage::Two) => Self::toy_stage2(),
            _ => return Err(Error::Config(format!("unknown preset `{name}` (expected paper or toy)"))),
        })
    }

    /// Steps actually executed: `total_steps`, or fewer with `stop_after`.
    pub fn steps_to_run(&self) -> usize {
        self.stop_after.map_or(self.total_steps, |n| n.min(self.total_steps))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if self.warmup > self.total_steps {
            return Err(Error::Config(format!("warmup {} exceeds total_steps {}", self.warmup, self.total_steps)));
        }
        if self.total_steps == 0 || self.batch_size < 2 || self.log_every == 0 {
            return Err(Error::Config("total_steps, log_every must be positive and batch_size at least 2".into()));
        }
        if !(self.peak_lr > 0.0) || !(self.grad_clip > 0.0) || !(self.quant.tau > 0.0) || !(self.quant.gamma >= 0.0) {
            return Err(Error::Config("peak_lr, grad_clip, tau must be positive and gamma nonnegative".into()));
        }
        if self.stage == Stage::Two {
            let m = self.lr_mult;
            if m.encoder != 0.0 || m.text != 0.0 || m.head != 0.0 || m.logit_scale != 0.0 {
                return Err(Error::Config("stage two requires zero encoder, head and text learning rates".into()));
            }
            if !self.freeze.encoder || !self.freeze.text {
                return Err(Error::Config("stage two requires frozen encoder and text branch".into()));
            }
        }
        Ok(())
    }

    /// Parse a config file. Keys absent from the file keep the values of
    /// `preset` (`paper` unless given) for the file's `stage` (1 unless given).
    pub fn from_kv(mut kv: KvConfig) -> Result<Self> {
        let stage = match kv.take("stage").as_deref() {
            None | Some("1") => Stage::One,
            Some("2") => Stage::Two,
            Some(s) => return Err(Error::Config(format!("stage must be 1 or 2, got `{s}`"))),
        };
        let preset = kv.take("preset").unwrap_or_else(|| "paper".into());
        let mut c = Self::preset(&preset, stage)?;
        for (k, v) in kv.take_prefixed("model").iter() {
            c.model.apply_kv(k, v)?;
        }
        let keys: Vec<(String, String)> = kv.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        for (k, v) in keys {
            kv.take(&k);
            let (k, v) = (k.as_str(), v.as_str());
            match k {
                "peak_lr" => c.peak_lr = parse_num(k, v)?,
                "lr.encoder" => c.lr_mult.encoder = parse_num(k, v)?,
                "lr.head" => c.lr_mult.head = parse_num(k, v)?,
                "lr.text" => c.lr_mult.text = parse_num(k, v)?,
                "lr.logit_scale" => c.lr_mult.logit_scale = parse_num(k, v)?,
                "lr.bottleneck" => c.lr_mult.bottleneck = parse_num(k, v)?,
                "lr.decoder" => c.lr_mult.decoder = parse_num(k, v)?,
                "warmup" => c.warmup = parse_num(k, v)?,
                "total_steps" => c.total_steps = parse_num(k, v)?,
                "batch_size" => c.batch_size = parse_num(k, v)?,
                "seed" => c.seed = parse_num(k, v)?,
                "alpha_r" => c.weights.stage1.recon = parse_num(k, v)?,
                "alpha_q" => c.weights.stage1.quant = parse_num(k, v)?,
                "alpha_a" => c.weights.stage1.align = parse_num(k, v)?,
                "alpha_z" => c.weights.stage1.commit = parse_num(k, v)?,
                "alpha_r2" => c.weights.stage2.recon = parse_num(k, v)?,
                "alpha_q2" => c.weights.stage2.quant = parse_num(k, v)?,
                "alpha_p2" => c.weights.stage2.perceptual = parse_num(k, v)?,
                "alpha_g2" => c.weights.stage2.adversarial = parse_num(k, v)?,
                "tau" => c.quant.tau = parse_num(k, v)?,
                "gamma" => c.quant.gamma = parse_num(k, v)?,
                "commit_squared" => c.quant.commit_squared = parse_bool(k, v)?,
                "beta1" => c.beta1 = parse_num(k, v)?,
                "beta2" => c.beta2 = parse_num(k, v)?,
                "weight_decay" => c.weight_decay = parse_num(k, v)?,
                "grad_clip" => c.grad_clip = parse_num(k, v)?,
                "freeze_encoder" => c.freeze.encoder = parse_bool(k, v)?,
                "freeze_text" => c.freeze.text = parse_bool(k, v)?,
                "log_every" => c.log_every = parse_num(k, v)?,
                "snapshot_dir" => c.snapshot_dir = Some(PathBuf::from(v)),
                "probe_every" => c.probe_every = parse_num(k, v)?,
                "stop_after" => c.stop_after = Some(parse_num(k, v)?),
                _ => return Err(Error::Config(format!("unknown training key `{k}`"))),
            }
        }
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("stage", if self.stage == Stage::One { 1 } else { 2 });
        for (k, v) in self.model.to_kv().iter() {
            kv.set(&format!("model.{k}"), v);
        }
        kv.set("peak_lr", self.peak_lr);
        let m = self.lr_mult;
        kv.set("lr.encoder", m.encoder);
        kv.set("lr.head", m.head);
        kv.set("lr.text", m.text);
        kv.set("lr.logit_scale", m.logit_scale);
        kv.set("lr.bottleneck", m.bottleneck);
        kv.set("lr.decoder", m.decoder);
        kv.set("warmup", self.warmup);
        kv.set("total_steps", self.total_steps);
        kv.set("batch_size", self.batch_size);
        kv.set("seed", self.seed);
        let w = self.weights;
        kv.set("alpha_r", w.stage1.recon);
        kv.set("alpha_q", w.stage1.quant);
        kv.set("alpha_a", w.stage1.align);
        kv.set("alpha_z", w.stage1.commit);
        kv.set("alpha_r2", w.stage2.recon);
        kv.set("alpha_q2", w.stage2.quant);
        kv.set("alpha_p2", w.stage2.perceptual);
        kv.set("alpha_g2", w.stage2.adversarial);
        kv.set("tau", self.quant.tau);
        kv.set("gamma", self.quant.gamma);
        kv.set("commit_squared", self.quant.commit_squared);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("weight_decay", self.weight_decay);
        kv.set("grad_clip", self.grad_clip);
        kv.set("freeze_encoder", self.freeze.encoder);
        kv.set("freeze_text", self.freeze.text);
        kv.set("log_every", self.log_every);
        if let Some(d) = &self.snapshot_dir {
            kv.set("snapshot_dir", d.display());
        }
        kv.set("probe_every", self.probe_every);
        if let Some(n) = self.stop_after {
            kv.set("stop_after", n);
        }
        kv
    }
}

/// One `(step, name, value)` entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Metric {
    pub step: usize,
    pub name: String,
    pub value: f64,
}

/// In-memory metrics with the `step<TAB>name<TAB>value` line format.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<Metric>,
}

impl MetricsLog {
    pub fn push(&mut self, step: usize, name: &str, value: f64) {
        self.records.push(Metric { step, name: name.to_string(), value });
    }

    pub fn series(&self, name: &str) -> Vec<(usize, f64)> {
        self.records.iter().filter(|m| m.name == name).map(|m| (m.step, m.value)).collect()
    }

    pub fn last(&self, name: &str) -> Option<f64> {
        self.records.iter().rev().find(|m| m.name == name).map(|m| m.value)
    }

    /// Mean of `name` over steps in `[from, to)`.
    pub fn mean_between(&self, name: &str, from: usize, to: usize) -> Option<f64> {
        let v: Vec<f64> =
            self.records.iter().filter(|m| m.name == name && m.step >= from && m.step < to).map(|m| m.value).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn names(&self) -> Vec<String> {
        let mut seen: Vec<String> = Vec::new();
        for m in &self.records {
            if !seen.contains(&m.name) {
                seen.push(m.name.clone());
            }
        }
        seen
    }

    pub fn to_tsv(&self) -> String {
        self.records.iter().map(|m| format!("{}\t{}\t{:e}\n", m.step, m.name, m.value)).collect()
    }

    pub fn append_to(&self, path: &Path) -> Result<()> {
        let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(self.to_tsv().as_bytes())?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut out = MetricsLog::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split('\t');
            let (Some(s), Some(n), Some(v), None) = (it.next(), it.next(), it.next(), it.next()) else {
                return Err(Error::Format { context: "metrics log".into(), detail: format!("line {}: expected 3 fields", i + 1) });
            };
            let step = s.parse().map_err(|_| Error::Format { context: "metrics log".into(), detail: format!("line {}: bad step", i + 1) })?;
            let value = v.parse().map_err(|_| Error::Format { context: "metrics log".into(), detail: format!("line {}: bad value", i + 1) })?;
            out.push(step, n, value);
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Largest per-entry absolute difference, or `None` if the logs differ in shape.
    pub fn max_abs_diff(&self, other: &MetricsLog) -> Option<f64> {
        if self.records.len() != other.records.len() {
            return None;
        }
        let mut worst = 0.0f64;
        for (a, b) in self.records.iter().zip(&other.records) {
            if a.step != b.step || a.name != b.name {
                return None;
            }
            let d = (a.value - b.value).abs();
            if d.is_nan() {
                return None;
            }
            worst = worst.max(d);
        }
        Some(worst)
    }
}

/// Seeded epoch-shuffled batch indices.
pub struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 || n < batch {
            return Err(Error::invalid(format!("cannot draw batches of {batch} from {n} items")));
        }
        Ok(Self { rng: ChaCha8Rng::seed_from_u64(seed ^ 0xba7c_4e55), order: (0..n).collect(), cursor: n, batch })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        out
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn snapshot(cfg: &TrainConfig, model: &QlipModel, step: usize) -> Option<PathBuf> {
    let dir = cfg.snapshot_dir.as_ref()?;
    fs::create_dir_all(dir).ok()?;
    let path = dir.join(format!("nonfinite_step{step}.ckpt"));
    checkpoint::save_qlip(&path, model).ok().map(|_| path)
}

/// Losses whose probe norms `probe_every` records.
pub const PROBED: [&str; 4] = ["mse", "bsq", "align", "commit"];

/// Stage one from a fresh model initialized with `cfg.seed`.
pub fn run_stage1(cfg: &TrainConfig, corpus: &Corpus) -> Result<(QlipModel, MetricsLog)> {
    let model = QlipModel::new(cfg.model.clone(), cfg.seed)?;
    run_stage1_from(cfg, model, corpus)
}

/// Stage one starting from an existing model.
pub fn run_stage1_from(cfg: &TrainConfig, model: QlipModel, corpus: &Corpus) -> Result<(QlipModel, MetricsLog)> {
    if cfg.stage != Stage::One {
        return Err(Error::Config("run_stage1 needs a stage-1 config".into()));
    }
    cfg.validate()?;
    check_corpus(&model, corpus)?;
    let mut opt = AdamW::new(cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut sampler = BatchSampler::new(corpus.len(), cfg.batch_size, cfg.seed)?;
    let mut log = MetricsLog::default();
    for step in 0..cfg.steps_to_run() {
        let idx = sampler.next_batch();
        let pairs: Vec<_> = idx.iter().map(|&i| &corpus.pairs[i]).collect();
        let batch = Batch::from_pairs(&model, &pairs)?;
        if cfg.probe_every > 0 && step % cfg.probe_every == 0 {
            let unit: Vec<(&str, f64)> = PROBED.iter().map(|&n| (n, 1.0)).collect();
            let report = probe_gradients(&model, &batch, &cfg.quant, &unit, step)?;
            for (name, norm) in &report.norms {
                log.push(step, &format!("probe_{name}"), *norm);
            }
        }
        let out = stage1_loss(&model, &batch, &cfg.weights.stage1, &cfg.quant)?;
        let total = scalar(&out.total)?;
        if !total.is_finite() {
            let snap = snapshot(cfg, &model, step);
            return Err(Error::NonFinite { step, name: "stage1_total".into(), snapshot: snap });
        }
        let lr = lr_schedule(step, cfg.warmup, cfg.total_steps, cfg.peak_lr)?;
        let grads = out.total.backward()?;
        let stats = opt.step(&model.store, &grads, |n| lr * cfg.lr_mult.multiplier(n), Some(cfg.grad_clip))?;
        model.clamp_logit_scale()?;
        if step % cfg.log_every == 0 || step + 1 == cfg.total_steps {
            for (name, v) in out.components.values()? {
                log.push(step, name, v);
            }
            log.push(step, "total", total);
            log.push(step, "lr", lr);
            log.push(step, "grad_norm", stats.grad_norm);
            log.push(step, "temperature", scalar(&model.temperature()?)?);
        }
    }
    Ok((model, log))
}

fn check_corpus(model: &QlipModel, corpus: &Corpus) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    if corpus.image_size != model.cfg.image_size {
        return Err(Error::Config(format!(
            "corpus images are {}px, model expects {}px",
            corpus.image_size, model.cfg.image_size
        )));
    }
    Ok(())
}

/// Stage two on a copy of `stage1`; the stage-one model is left untouched.
pub fn run_stage2(
    cfg: &TrainConfig,
    stage1: &QlipModel,
    corpus: &Corpus,
    extras: &[Box<dyn ExtraLoss>],
) -> Result<(QlipModel, MetricsLog)> {
    if cfg.stage != Stage::Two {
        return Err(Error::Config("run_stage2 needs a stage-2 config".into()));
    }
    cfg.validate()?;
    let model = QlipModel::from_store(stage1.cfg.clone(), stage1.store.deep_clone()?)?;
    check_corpus(&model, corpus)?;
    let frozen = groups::FROZEN_IN_STAGE2;
    let before = model.store.fingerprint(&frozen)?;
    let mut opt = AdamW::new(cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut sampler = BatchSampler::new(corpus.len(), cfg.batch_size, cfg.seed)?;
    let mut log = MetricsLog::default();
    for step in 0..cfg.steps_to_run() {
        let idx = sampler.next_batch();
        let pairs: Vec<_> = idx.iter().map(|&i| &corpus.pairs[i]).collect();
        let batch = Batch::from_pairs(&model, &pairs)?;
        let out = stage2_loss(&model, &batch, &cfg.weights.stage2, &cfg.quant, extras, cfg.freeze)?;
        let total = scalar(&out.total)?;
        if !total.is_finite() {
            let snap = snapshot(cfg, &model, step);
            return Err(Error::NonFinite { step, name: "stage2_total".into(), snapshot: snap });
        }
        let lr = lr_schedule(step, cfg.warmup, cfg.total_steps, cfg.peak_lr)?;
        let grads = out.total.backward()?;
        let stats = opt.step(&model.store, &grads, |n| lr * cfg.lr_mult.multiplier(n), Some(cfg.grad_clip))?;
        if step % cfg.log_every == 0 || step + 1 == cfg.total_steps {
            log.push(step, "mse", scalar(&out.mse)?);
            log.push(step, "bsq", scalar(&out.bsq.loss)?);
            for (name, l) in &out.extras {
                log.push(step, name, scalar(l)?);
            }
            log.push(step, "total", total);
            log.push(step, "lr", lr);
            log.push(step, "grad_norm", stats.grad_norm);
        }
        if (step + 1) % 100 == 0 || step + 1 == cfg.steps_to_run() {
            let now = model.store.fingerprint(&frozen)?;
            if now != before {
                return Err(Error::FrozenViolation(format!("frozen parameters changed by step {step}")));
            }
        }
    }
    Ok((model, log))
}
