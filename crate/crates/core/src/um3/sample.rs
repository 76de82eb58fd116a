//! Segment-constrained nucleus sampling.

use candle_core::{DType, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::lm::Lm;
use super::{Specials, VocabLayout};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenConfig {
    pub temperature: f64,
    pub top_p: f64,
    /// Total sequence length limit, prompt included.
    pub max_tokens: usize,
    pub seed: u64,
    /// Stop right after the first `<eoi>`.
    pub stop_after_image: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self { temperature: 1.0, top_p: 0.95, max_tokens: 48, seed: 0, stop_after_image: false }
    }
}

/// Where the decoder is in the `<soi> v₁…v_N <eoi>` grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Text,
    Visual(usize),
}

fn mode_after(prompt: &[u32], sp: &Specials, layout: &VocabLayout, n_visual: usize) -> Result<Mode> {
    let mut mode = Mode::Text;
    for &id in prompt {
        mode = match mode {
            Mode::Text if id == sp.soi => Mode::Visual(0),
            Mode::Text if layout.is_visual(id) || id == sp.eoi => {
                return Err(Error::invalid("prompt has visual tokens outside an image span"))
            }
            Mode::Text => Mode::Text,
            Mode::Visual(k) if k == n_visual && id == sp.eoi => Mode::Text,
            Mode::Visual(k) if k < n_visual && layout.is_visual(id) => Mode::Visual(k + 1),
            Mode::Visual(_) => return Err(Error::invalid("prompt breaks the image span grammar")),
        };
    }
    Ok(mode)
}

/// Draw from `probs` restricted to the smallest top set with mass ≥ `top_p`.
pub fn nucleus_sample(probs: &[f64], top_p: f64, rng: &mut impl Rng) -> usize {
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut keep = 0;
    let mut mass = 0.0;
    for &i in &order {
        keep += 1;
        mass += probs[i];
        if mass >= top_p {
            break;
        }
    }
    let r = rng.random::<f64>() * mass;
    let mut acc = 0.0;
    for &i in &order[..keep] {
        acc += probs[i];
        if r < acc {
            return i;
        }
    }
    order[keep - 1]
}

/// Tempered softmax over `logits`, treating `None` entries as excluded.
fn tempered(logits: &[Option<f64>], temperature: f64) -> Vec<f64> {
    let max = logits.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| l.map_or(0.0, |x| ((x - max) / temperature).exp())).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Continue `prompt` until `<eos>`, the length limit, or (optionally) a closed image span.
pub fn generate(
    lm: &Lm,
    layout: &VocabLayout,
    sp: &Specials,
    n_visual: usize,
    prompt: &[u32],
    cfg: &GenConfig,
) -> Result<Vec<u32>> {
    if !(cfg.temperature > 0.0) {
        return Err(Error::invalid("temperature must be positive"));
    }
    if !(cfg.top_p > 0.0 && cfg.top_p <= 1.0) {
        return Err(Error::invalid("top_p must lie in (0, 1]"));
    }
    if prompt.is_empty() {
        return Err(Error::invalid("empty prompt"));
    }
    if lm.cfg.vocab != layout.total() {
        return Err(Error::Config("model vocabulary does not match layout".into()));
    }
    let limit = cfg.max_tokens.min(lm.cfg.max_len);
    let mut mode = mode_after(prompt, sp, layout, n_visual)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seq = prompt.to_vec();
    while seq.len() < limit {
        let next = match mode {
            Mode::Visual(k) if k == n_visual => sp.eoi,
            _ => {
                let logits = lm.logits(&[seq.clone()])?;
                let last = logits.narrow(1, seq.len() - 1, 1)?.flatten_all()?.to_dtype(DType::F64)?;
                let last = last.to_vec1::<f64>()?;
                let allowed: Vec<Option<f64>> = match mode {
                    Mode::Visual(_) => (0..layout.total()).map(|i| layout.is_visual(i as u32).then_some(last[i])).collect(),
                    Mode::Text => {
                        let room = limit - seq.len();
                        (0..layout.total())
                            .map(|i| {
                                let id = i as u32;
                                let ok = !layout.is_visual(id)
                                    && id != sp.eoi
                                    && id != sp.pad
                                    && id != sp.bos
                                    && (id != sp.soi || room >= n_visual + 2);
                                ok.then_some(last[i])
                            })
                            .collect()
                    }
                };
                let probs = tempered(&allowed, cfg.temperature);
                nucleus_sample(&probs, cfg.top_p, &mut rng) as u32
            }
        };
        seq.push(next);
        mode = match mode {
            Mode::Text if next == sp.soi => Mode::Visual(0),
            Mode::Text => Mode::Text,
            Mode::Visual(k) if k == n_visual => Mode::Text,
            Mode::Visual(k) => Mode::Visual(k + 1),
        };
        if next == sp.eos || (cfg.stop_after_image && next == sp.eoi) {
            break;
        }
    }
    Ok(seq)
}

/// Visual spans of `seq` as token indices in `[0, 2^L)`, each checked against the grammar.
pub fn visual_spans(seq: &[u32], layout: &VocabLayout, sp: &Specials, n_visual: usize) -> Result<Vec<Vec<u64>>> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < seq.len() {
        if seq[i] == sp.soi {
            let end = i + 1 + n_visual;
            if end >= seq.len() || seq[end] != sp.eoi {
                return Err(Error::invalid(format!("image span at {i} is not closed after {n_visual} tokens")));
            }
            let span = &seq[i + 1..end];
            if !span.iter().all(|&t| layout.is_visual(t)) {
                return Err(Error::invalid("non-visual token inside an image span"));
            }
            spans.push(span.iter().map(|&t| (t - layout.text as u32) as u64).collect());
            i = end + 1;
        } else if layout.is_visual(seq[i]) || seq[i] == sp.eoi {
            return Err(Error::invalid(format!("stray visual token at {i}")));
        } else {
            i += 1;
        }
    }
    Ok(spans)
}

/// Arg-max index along the last axis of a `(1, V)` row, for greedy checks.
pub fn greedy_next(lm: &Lm, seq: &[u32]) -> Result<u32> {
    let logits = lm.logits(&[seq.to_vec()])?;
    let last = logits.narrow(1, seq.len() - 1, 1)?.flatten_all()?;
    Ok(last.argmax(D::Minus1)?.to_scalar::<u32>()?)
}
