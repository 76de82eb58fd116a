//! Zero-shot classification, linear probing and reconstruction metrics.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::DType;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::model::QlipModel;
use crate::syndata::{class_prompts, Corpus, ImageTensor};

/// Images per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 256;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

fn cosine_argmax(v: &[f64], classes: &[(usize, Vec<f64>)]) -> usize {
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut best = (f64::NEG_INFINITY, classes[0].0);
    for (label, w) in classes {
        let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let dot: f64 = v.iter().zip(w).map(|(a, b)| a * b).sum();
        let cos = dot / (nv * nw);
        if cos > best.0 {
            best = (cos, *label);
        }
    }
    best.1
}

/// Predicted label per image embedding: argmax of cosine similarity.
pub fn zero_shot_predict(image_emb: &[Vec<f64>], class_emb: &[(usize, Vec<f64>)]) -> Result<Vec<usize>> {
    if class_emb.is_empty() {
        return Err(Error::invalid("no class embeddings"));
    }
    Ok(image_emb.iter().map(|v| cosine_argmax(v, class_emb)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShot {
    pub accuracy: f64,
    pub predictions: Vec<usize>,
}

/// Zero-shot accuracy of `model` given one prompt per class.
pub fn zero_shot_classify(
    model: &QlipModel,
    prompts: &[(usize, Vec<u32>)],
    images: &[&ImageTensor],
    labels: &[usize],
) -> Result<ZeroShot> {
    if images.len() != labels.len() {
        return Err(Error::shape(images.len(), labels.len()));
    }
    if images.is_empty() {
        return Err(Error::invalid("no images to classify"));
    }
    if let Some(missing) = labels.iter().find(|l| !prompts.iter().any(|(p, _)| p == *l)) {
        return Err(Error::invalid(format!("no prompt for class {missing}")));
    }
    let seqs: Vec<Vec<u32>> = prompts.iter().map(|(_, s)| s.clone()).collect();
    let text = f64_rows(&model.text_embeddings(&seqs)?)?;
    let class_emb: Vec<(usize, Vec<f64>)> = prompts.iter().map(|(l, _)| *l).zip(text).collect();
    let mut predictions = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        let emb = f64_rows(&model.image_embeddings(chunk)?)?;
        predictions.extend(zero_shot_predict(&emb, &class_emb)?);
    }
    Ok(ZeroShot { accuracy: accuracy(&predictions, labels), predictions })
}

fn f64_rows(t: &candle_core::Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

/// Which frozen encoder output feeds the linear probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeFeature {
    Cls,
    MeanTokens,
    Concat,
}

impl ProbeFeature {
    pub fn name(self) -> &'static str {
        match self {
            ProbeFeature::Cls => "cls",
            ProbeFeature::MeanTokens => "mean",
            ProbeFeature::Concat => "concat",
        }
    }
}

/// Frozen encoder features, one row per image.
pub fn encoder_features(model: &QlipModel, images: &[&ImageTensor], kind: ProbeFeature) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        let (grid, cls) = model.encoder.forward(&model.patches(chunk)?)?;
        let cls = f64_rows(&cls)?;
        let mean = f64_rows(&grid.mean(1)?)?;
        for (c, m) in cls.into_iter().zip(mean) {
            out.push(match kind {
                ProbeFeature::Cls => c,
                ProbeFeature::MeanTokens => m,
                ProbeFeature::Concat => [c, m].concat(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub l2: f64,
    pub lr: f64,
    pub max_iters: usize,
    /// Stop once the gradient norm falls below this.
    pub tol: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { l2: 1e-4, lr: 0.05, max_iters: 1000, tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    pub iters: usize,
}

/// Multinomial logistic regression on standardized features, full-batch Adam.
pub fn linear_probe(
    train: &[Vec<f64>],
    train_labels: &[usize],
    heldout: &[Vec<f64>],
    heldout_labels: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if train.len() != train_labels.len() || heldout.len() != heldout_labels.len() {
        return Err(Error::invalid("features and labels differ in length"));
    }
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::invalid("empty probe split"));
    }
    let dim = train[0].len();
    if train.iter().chain(heldout).any(|r| r.len() != dim) {
        return Err(Error::invalid("ragged feature rows"));
    }
    if train_labels.iter().all(|&l| l == train_labels[0]) {
        return Err(Error::Degenerate("linear probe needs at least two classes".into()));
    }
    let classes = train_labels.iter().chain(heldout_labels).max().unwrap() + 1;
    let n = train.len() as f64;

    let mut mean = vec![0.0; dim];
    for r in train {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n;
        }
    }
    let mut std = vec![0.0; dim];
    for r in train {
        for ((s, x), m) in std.iter_mut().zip(r).zip(&mean) {
            *s += (x - m).powi(2) / n;
        }
    }
    let std: Vec<f64> = std.iter().map(|v| v.sqrt().max(1e-8)).collect();
    let standardize = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter().map(|r| r.iter().zip(&mean).zip(&std).map(|((x, m), s)| (x - m) / s).collect()).collect()
    };
    let xs = standardize(train);
    let hs = standardize(heldout);

    let cols = dim + 1;
    let mut w = vec![0.0f64; classes * cols];
    let mut m1 = vec![0.0f64; w.len()];
    let mut m2 = vec![0.0f64; w.len()];
    let (b1, b2) = (0.9f64, 0.999f64);
    let mut grad = vec![0.0f64; w.len()];
    let mut probs = vec![0.0f64; classes];
    let mut iters = 0;
    for it in 1..=cfg.max_iters {
        iters = it;
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (x, &y) in xs.iter().zip(train_labels) {
            logits_into(&w, x, cols, &mut probs);
            softmax_in_place(&mut probs);
            probs[y] -= 1.0;
            for (c, &p) in probs.iter().enumerate() {
                let row = &mut grad[c * cols..(c + 1) * cols];
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += p * xi / n;
                }
                row[dim] += p / n;
            }
        }
        for (c, g) in grad.chunks_mut(cols).enumerate() {
            for (j, gj) in g.iter_mut().take(dim).enumerate() {
                *gj += cfg.l2 * w[c * cols + j];
            }
        }
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < cfg.tol {
            break;
        }
        let bc1 = 1.0 - b1.powi(it as i32);
        let bc2 = 1.0 - b2.powi(it as i32);
        for i in 0..w.len() {
            m1[i] = b1 * m1[i] + (1.0 - b1) * grad[i];
            m2[i] = b2 * m2[i] + (1.0 - b2) * grad[i] * grad[i];
            w[i] -= cfg.lr * (m1[i] / bc1) / ((m2[i] / bc2).sqrt() + 1e-8);
        }
    }
    let predict = |rows: &[Vec<f64>]| -> Vec<usize> {
        let mut buf = vec![0.0; classes];
        rows.iter()
            .map(|x| {
                logits_into(&w, x, cols, &mut buf);
                argmax(&buf)
            })
            .collect()
    };
    Ok(ProbeResult {
        train_accuracy: accuracy(&predict(&xs), train_labels),
        heldout_accuracy: accuracy(&predict(&hs), heldout_labels),
        iters,
    })
}

fn logits_into(w: &[f64], x: &[f64], cols: usize, out: &mut [f64]) {
    for (c, o) in out.iter_mut().enumerate() {
        let row = &w[c * cols..(c + 1) * cols];
        *o = row[cols - 1] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    v.iter_mut().for_each(|x| *x /= sum);
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn check_pair(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.height != b.height || a.width != b.width || a.data.len() != b.data.len() {
        return Err(Error::shape(format!("{}x{}", a.height, a.width), format!("{}x{}", b.height, b.width)));
    }
    Ok(())
}

pub fn mse(x_hat: &ImageTensor, x: &ImageTensor) -> Result<f64> {
    check_pair(x_hat, x)?;
    Ok(x_hat.data.iter().zip(&x.data).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>()
        / x.data.len() as f64)
}

/// `10·log10(1/mse)` for data in [0, 1], capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
}

pub fn psnr(x_hat: &ImageTensor, x: &ImageTensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(x_hat, x)?))
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WIN / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WIN).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    let mut w = vec![0.0; SSIM_WIN * SSIM_WIN];
    for i in 0..SSIM_WIN {
        for j in 0..SSIM_WIN {
            w[i * SSIM_WIN + j] = g[i] * g[j];
        }
    }
    w
}

/// Mean SSIM over all fully contained 11×11 Gaussian windows, averaged over channels.
pub fn ssim(x_hat: &ImageTensor, x: &ImageTensor) -> Result<f64> {
    check_pair(x_hat, x)?;
    let (h, w) = (x.height, x.width);
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(Error::invalid(format!("ssim needs images of at least {SSIM_WIN}x{SSIM_WIN}")));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for ch in 0..3 {
        let mut acc = 0.0;
        let mut count = 0usize;
        for r in 0..=h - SSIM_WIN {
            for c in 0..=w - SSIM_WIN {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..SSIM_WIN {
                    for j in 0..SSIM_WIN {
                        let k = win[i * SSIM_WIN + j];
                        let idx = ((r + i) * w + (c + j)) * 3 + ch;
                        let a = x_hat.data[idx] as f64;
                        let b = x.data[idx] as f64;
                        ma += k * a;
                        mb += k * b;
                        saa += k * a * a;
                        sbb += k * b * b;
                        sab += k * a * b;
                    }
                }
                let va = saa - ma * ma;
                let vb = sbb - mb * mb;
                let cov = sab - ma * mb;
                acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    Ok(total / 3.0)
}

/// Mean reconstruction metrics over a set of images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconMetrics {
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Reconstruct through the quantized bottleneck and average MSE, PSNR and SSIM per image.
pub fn reconstruction_metrics(model: &QlipModel, images: &[&ImageTensor]) -> Result<ReconMetrics> {
    if images.is_empty() {
        return Err(Error::invalid("no images"));
    }
    let (mut m, mut p, mut s) = (0.0, 0.0, 0.0);
    for chunk in images.chunks(EVAL_CHUNK) {
        let recon = model.reconstruct(chunk)?;
        for (r, x) in recon.iter().zip(chunk) {
            let e = mse(r, x)?;
            m += e;
            p += psnr_from_mse(e);
            s += if x.height >= SSIM_WIN { ssim(r, x)? } else { f64::NAN };
        }
    }
    let n = images.len() as f64;
    Ok(ReconMetrics { mse: m / n, psnr: p / n, ssim: s / n })
}

/// Mean unweighted alignment loss on a held-out corpus, in batches of `batch`.
pub fn heldout_align(model: &QlipModel, corpus: &Corpus, batch: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for chunk in corpus.pairs.chunks(batch) {
        if chunk.len() < 2 {
            continue;
        }
        let images: Vec<_> = chunk.iter().map(|p| &p.image).collect();
        let caps: Vec<Vec<u32>> = chunk.iter().map(|p| p.tokens.clone()).collect();
        let v = model.image_embeddings(&images)?;
        let w = model.text_embeddings(&caps)?;
        let l = crate::objectives::infonce_loss(&v, &w, &model.temperature()?)?;
        total += l.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("held-out corpus too small for a contrastive batch"));
    }
    Ok(total / count as f64)
}

/// Flat evaluation record.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub zero_shot_acc: f64,
    /// Probe on the cls token.
    pub linear_probe_acc: f64,
    /// Probe on the mean of the grid tokens.
    pub linear_probe_mean_acc: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub heldout_align: f64,
    pub num_images: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub probe: ProbeConfig,
    pub align_batch: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { probe: ProbeConfig::default(), align_batch: 64 }
    }
}

/// Full evaluation: probes are fit on `train` and scored on `heldout`.
pub fn evaluate(model: &QlipModel, train: &Corpus, heldout: &Corpus, opts: &EvalOptions) -> Result<EvalReport> {
    let images: Vec<&ImageTensor> = heldout.pairs.iter().map(|p| &p.image).collect();
    let labels: Vec<usize> = heldout.pairs.iter().map(|p| p.label).collect();
    let train_images: Vec<&ImageTensor> = train.pairs.iter().map(|p| &p.image).collect();
    let train_labels: Vec<usize> = train.pairs.iter().map(|p| p.label).collect();
    let zs = zero_shot_classify(model, &class_prompts(&heldout.vocab)?, &images, &labels)?;
    let probe = |kind| -> Result<f64> {
        let tr = encoder_features(model, &train_images, kind)?;
        let te = encoder_features(model, &images, kind)?;
        Ok(linear_probe(&tr, &train_labels, &te, &labels, &opts.probe)?.heldout_accuracy)
    };
    let lp_cls = probe(ProbeFeature::Cls)?;
    let lp_mean = probe(ProbeFeature::MeanTokens)?;
    let rec = reconstruction_metrics(model, &images)?;
    Ok(EvalReport {
        zero_shot_acc: zs.accuracy,
        linear_probe_acc: lp_cls,
        linear_probe_mean_acc: lp_mean,
        psnr: rec.psnr,
        ssim: rec.ssim,
        mse: rec.mse,
        heldout_align: heldout_align(model, heldout, opts.align_batch)?,
        num_images: images.len(),
    })
}

impl EvalReport {
    pub const COLUMNS: [&'static str; 8] = [
        "zero_shot_acc",
        "linear_probe_acc",
        "linear_probe_mean_acc",
        "psnr",
        "ssim",
        "mse",
        "heldout_align",
        "num_images",
    ];

    fn values(&self) -> [String; 8] {
        [
            self.zero_shot_acc.to_string(),
            self.linear_probe_acc.to_string(),
            self.linear_probe_mean_acc.to_string(),
            self.psnr.to_string(),
            self.ssim.to_string(),
            self.mse.to_string(),
            self.heldout_align.to_string(),
            self.num_images.to_string(),
        ]
    }

    /// `key = value` lines.
    pub fn to_record(&self) -> String {
        let mut kv = KvConfig::default();
        for (k, v) in Self::COLUMNS.iter().zip(self.values()) {
            kv.set(k, v);
        }
        kv.render()
    }

    /// Append one tab-separated row, writing the header if the file is new.
    pub fn append_row(&self, path: &Path, run: &str) -> Result<()> {
        let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
        let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "run\t{}", Self::COLUMNS.join("\t"))?;
        }
        writeln!(f, "{run}\t{}", self.values().join("\t"))?;
        Ok(())
    }
}

/// Per-image decoder outputs as images, used by examples that dump reconstructions.
pub fn reconstructions(model: &QlipModel, images: &[&ImageTensor]) -> Result<Vec<ImageTensor>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        out.extend(model.reconstruct(chunk)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::syndata::{gen_pair_corpus_split, Split};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(seed: u64, size: usize) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(size, size, (0..size * size * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn psnr_examples() {
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        let a = img(1, 16);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let mut prev = f64::INFINITY;
        for e in [1e-6, 1e-4, 1e-2, 0.5, 1.0] {
            let p = psnr_from_mse(e);
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn ssim_identity_and_bounds() {
        let a = img(2, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let b = img(3, 16);
        let s = ssim(&a, &b).unwrap();
        assert!((-1.0..1.0).contains(&s));
        assert!(ssim(&img(1, 8), &img(2, 8)).is_err());
    }

    proptest! {
        #[test]
        fn ssim_is_symmetric(sa in 0u64..1000, sb in 0u64..1000) {
            let (a, b) = (img(sa, 12), img(sb + 1000, 12));
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn zero_shot_invariant_to_positive_scaling(seed in 0u64..500, c in 0.01f64..100.0, d in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut randv = |n: usize| (0..n).map(|_| rng.random::<f64>() - 0.5).collect::<Vec<f64>>();
            let imgs: Vec<Vec<f64>> = (0..20).map(|_| randv(6)).collect();
            let classes: Vec<(usize, Vec<f64>)> = (0..8).map(|l| (l, randv(6))).collect();
            let base = zero_shot_predict(&imgs, &classes).unwrap();
            let scaled: Vec<Vec<f64>> = imgs.iter().map(|v| v.iter().map(|x| x * c).collect()).collect();
            let scaled_c: Vec<(usize, Vec<f64>)> = classes.iter().map(|(l, v)| (*l, v.iter().map(|x| x * d).collect())).collect();
            prop_assert_eq!(zero_shot_predict(&scaled, &scaled_c).unwrap(), base);
        }
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let m = QlipModel::new(ModelConfig::small(), 5).unwrap();
        let c = gen_pair_corpus_split(640, 16, 9, Split::Val).unwrap();
        let images: Vec<_> = c.pairs.iter().map(|p| &p.image).collect();
        let labels: Vec<_> = c.pairs.iter().map(|p| p.label).collect();
        let zs = zero_shot_classify(&m, &class_prompts(&c.vocab).unwrap(), &images, &labels).unwrap();
        let p: f64 = 1.0 / 64.0;
        let sigma = (p * (1.0 - p) / 640.0).sqrt();
        assert!((zs.accuracy - p).abs() <= 3.0 * sigma, "untrained accuracy {}", zs.accuracy);
    }

    #[test]
    fn missing_prompt_is_rejected() {
        let m = QlipModel::new(ModelConfig::small(), 5).unwrap();
        let c = gen_pair_corpus_split(64, 16, 9, Split::Val).unwrap();
        let images: Vec<_> = c.pairs.iter().map(|p| &p.image).collect();
        let labels: Vec<_> = c.pairs.iter().map(|p| p.label).collect();
        let mut prompts = class_prompts(&c.vocab).unwrap();
        prompts.pop();
        assert!(zero_shot_classify(&m, &prompts, &images, &labels).is_err());
    }

    fn blobs(n: usize, seed: u64, sep: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = [[sep, 0.0, 0.0], [0.0, sep, 0.0], [0.0, 0.0, sep], [-sep, -sep, 0.0]];
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let y = i % 4;
            xs.push(centers[y].iter().map(|c| c + rng.random::<f64>() - 0.5).collect());
            ys.push(y);
        }
        (xs, ys)
    }

    #[test]
    fn probe_separable_features() {
        let (tr, ytr) = blobs(200, 1, 5.0);
        let (te, yte) = blobs(100, 2, 5.0);
        let r = linear_probe(&tr, &ytr, &te, &yte, &ProbeConfig::default()).unwrap();
        assert_eq!(r.heldout_accuracy, 1.0);
    }

    #[test]
    fn probe_on_label_independent_features_is_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut noise = |n: usize| -> (Vec<Vec<f64>>, Vec<usize>) {
            let xs = (0..n).map(|_| (0..8).map(|_| rng.random::<f64>()).collect()).collect();
            let ys = (0..n).map(|_| rng.random_range(0..4)).collect();
            (xs, ys)
        };
        let (tr, ytr) = noise(800);
        let (te, yte) = noise(800);
        let r = linear_probe(&tr, &ytr, &te, &yte, &ProbeConfig::default()).unwrap();
        let sigma = (0.25f64 * 0.75 / 800.0).sqrt();
        assert!((r.heldout_accuracy - 0.25).abs() < 4.0 * sigma, "{}", r.heldout_accuracy);
    }

    #[test]
    fn probe_rejects_single_class() {
        let xs = vec![vec![1.0], vec![2.0]];
        assert!(matches!(linear_probe(&xs, &[0, 0], &xs, &[0, 0], &ProbeConfig::default()), Err(Error::Degenerate(_))));
    }

    #[test]
    fn report_row_and_record() {
        let r = EvalReport {
            zero_shot_acc: 0.5,
            linear_probe_acc: 0.75,
            linear_probe_mean_acc: 0.7,
            psnr: 21.0,
            ssim: 0.8,
            mse: 0.008,
            heldout_align: 1.2,
            num_images: 10,
        };
        let kv = KvConfig::parse(&r.to_record()).unwrap();
        assert_eq!(kv.get("psnr"), Some("21"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("results.tsv");
        r.append_row(&p, "a").unwrap();
        r.append_row(&p, "b").unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("run\tzero_shot_acc"));
    }
}
