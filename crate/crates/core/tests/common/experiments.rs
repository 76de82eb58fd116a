//! Toy-scale training pipelines shared by the acceptance harness and the
//! pilot-baseline example.

use std::time::Instant;

use qlip::evalkit::{heldout_align, reconstruction_metrics, zero_shot_classify};
use qlip::model::QlipModel;
use qlip::syndata::{class_prompts, gen_pair_corpus_split, gen_text_corpus, sentences, Corpus, Split};
use qlip::trainer::{run_stage1, run_stage2, MetricsLog, TrainConfig};
use qlip::um3::{extend_vocab, mean_nll, pretrain_lm, train_um3, EvalSets, Lm, LmConfig, MixedSeq, SeqKind, Um3Config, Um3Sources, VocabLayout};
use qlip::Result;

pub const TRAIN_PAIRS: usize = 2000;
pub const HELDOUT_PAIRS: usize = 2560;
pub const TEXT_TOKENS: usize = 60_000;
pub const IMAGE_SIZE: usize = 16;
pub const EVAL_T2I: usize = 64;
/// Stage-one runs log probe norms this often.
pub const PROBE_EVERY: usize = 250;

/// `(label, α_a, α_r)` for the loss-balance ablation. Dropping alignment keeps
/// α_r at its balanced value so reconstruction is not also down-weighted
/// against the quantizer terms.
pub const RATIOS: [(&str, f64, f64); 4] =
    [("1:0", 1.0, 0.0), ("1:1", 1.0, 1.0), ("1:1000", 1.0, 1000.0), ("0:1", 0.0, 1000.0)];
pub const BALANCED: &str = "1:1000";

pub struct Corpora {
    pub train: Corpus,
    pub heldout: Corpus,
    pub text: Vec<u32>,
}

pub fn corpora(seed: u64) -> Result<Corpora> {
    Ok(Corpora {
        train: gen_pair_corpus_split(TRAIN_PAIRS, IMAGE_SIZE, seed, Split::Train)?,
        heldout: gen_pair_corpus_split(HELDOUT_PAIRS, IMAGE_SIZE, seed, Split::Val)?,
        text: gen_text_corpus(TEXT_TOKENS, seed)?,
    })
}

pub fn ablation_config(align: f64, recon: f64, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::toy_stage1();
    c.seed = seed;
    c.weights.stage1.align = align;
    c.weights.stage1.recon = recon;
    c.probe_every = PROBE_EVERY;
    c
}

/// Held-out zero-shot accuracy, reconstruction and alignment of a tokenizer.
#[derive(Debug, Clone, Copy)]
pub struct HeldoutMetrics {
    pub zs: f64,
    pub mse: f64,
    pub psnr: f64,
    pub align: f64,
}

pub fn heldout_metrics(model: &QlipModel, heldout: &Corpus) -> Result<HeldoutMetrics> {
    let images: Vec<_> = heldout.pairs.iter().map(|p| &p.image).collect();
    let labels: Vec<_> = heldout.pairs.iter().map(|p| p.label).collect();
    let zs = zero_shot_classify(model, &class_prompts(&heldout.vocab)?, &images, &labels)?.accuracy;
    let rec = reconstruction_metrics(model, &images)?;
    Ok(HeldoutMetrics { zs, mse: rec.mse, psnr: rec.psnr, align: heldout_align(model, heldout, 64)? })
}

pub struct AblationRun {
    pub label: &'static str,
    pub cfg: TrainConfig,
    pub model: QlipModel,
    pub log: MetricsLog,
    pub train_secs: f64,
    pub metrics: HeldoutMetrics,
}

pub fn run_ablation(label: &'static str, align: f64, recon: f64, c: &Corpora, seed: u64) -> Result<AblationRun> {
    let cfg = ablation_config(align, recon, seed);
    let t = Instant::now();
    let (model, log) = run_stage1(&cfg, &c.train)?;
    let train_secs = t.elapsed().as_secs_f64();
    let metrics = heldout_metrics(&model, &c.heldout)?;
    Ok(AblationRun { label, cfg, model, log, train_secs, metrics })
}

pub fn stage2_config(seed: u64) -> TrainConfig {
    TrainConfig { seed, ..TrainConfig::toy_stage2() }
}

pub fn run_finetune(stage1: &QlipModel, c: &Corpora, seed: u64) -> Result<(QlipModel, MetricsLog)> {
    run_stage2(&stage2_config(seed), stage1, &c.train, &[])
}

pub fn pretrain_config(seed: u64) -> Um3Config {
    Um3Config { seed, ..Um3Config::toy_pretrain() }
}

pub fn mixed_config(seed: u64) -> Um3Config {
    Um3Config { seed, ..Um3Config::toy() }
}

/// Tokenized sources with the last 5% of sentences held out for scoring.
pub struct Um3Data {
    pub sources: Um3Sources,
    pub heldout_text: Vec<Vec<u32>>,
    pub eval: EvalSets,
}

pub fn um3_data(tokenizer: &QlipModel, c: &Corpora, seed: u64) -> Result<Um3Data> {
    let mut all = sentences(&c.train.vocab, &c.text);
    let heldout_text = all.split_off(all.len() - all.len() / 20);
    let sources = Um3Sources { text: all, ..Um3Sources::build(tokenizer, &c.train, &c.text)? };
    let eval = EvalSets::build(&sources, &heldout_text, EVAL_T2I, seed)?;
    Ok(Um3Data { sources, heldout_text, eval })
}

pub fn pretrain(data: &Um3Data, seed: u64) -> Result<(Lm, MetricsLog)> {
    let vocab = data.sources.layout.text;
    pretrain_lm(LmConfig::small(vocab), &pretrain_config(seed), &data.sources.text, &data.sources.specials, &data.heldout_text)
}

/// Held-out text NLL of the base model under its own (text-only) layout.
pub fn base_text_nll(base: &Lm, data: &Um3Data) -> Result<f64> {
    let layout = VocabLayout::new(base.cfg.vocab, 0)?;
    mean_nll(base, &layout, &data.sources.specials, &data.eval.text)
}

pub fn run_mixed(base: &Lm, data: &Um3Data, seed: u64) -> Result<(Lm, MetricsLog)> {
    let model = extend_vocab(base, &data.sources.layout)?;
    train_um3(&mixed_config(seed), model, &data.sources, &data.eval)
}

pub fn text_only(seqs: &[MixedSeq]) -> bool {
    seqs.iter().all(|s| s.kind == SeqKind::Text)
}

/// Mean of the first and last `n` logged values of `name`.
pub fn head_tail_means(log: &MetricsLog, name: &str, n: usize) -> (f64, f64) {
    let s = log.series(name);
    let mean = |v: &[(usize, f64)]| v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64;
    let k = n.min(s.len());
    (mean(&s[..k]), mean(&s[s.len() - k..]))
}
