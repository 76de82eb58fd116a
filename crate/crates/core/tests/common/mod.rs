//! Shared helpers for integration tests and the acceptance harness.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod experiments;

use qlip::bsq::{commitment_loss, entropy_loss};
use qlip::model::{ModelConfig, QlipModel, QuantizerKind};
use qlip::nn::l2_normalize;
use qlip::objectives::{infonce_loss, mse_loss, stage1_components, stage1_loss, Batch, QuantLossConfig, Stage1Weights};
use qlip::syndata::{gen_pair_corpus_split, Split};
use qlip::um3::{split_softmax_nll, VocabLayout};

pub const FD_STEP: f64 = 1e-5;

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
}

fn with_entry(x: &Tensor, i: usize, delta: f64) -> Tensor {
    let mut v = flat(x);
    v[i] += delta;
    Tensor::from_vec(v, x.dims(), &Device::Cpu).unwrap()
}

/// Below this gradient norm both sides are roundoff (e.g. attention key biases,
/// which softmax ignores).
pub const GRAD_FLOOR: f64 = 1e-4;

/// `‖a − n‖ / max(‖a‖, ‖n‖, GRAD_FLOOR)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(GRAD_FLOOR)
}

/// Central differences of a scalar function against its autodiff gradient at `x0`.
pub fn check_fn(x0: &Tensor, f: impl Fn(&Tensor) -> Tensor) -> f64 {
    let var = Var::from_tensor(x0).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    let analytic = grads.get(var.as_tensor()).map(flat).unwrap_or_else(|| vec![0.0; x0.elem_count()]);
    let numeric: Vec<f64> = (0..x0.elem_count())
        .map(|i| (scalar(&f(&with_entry(x0, i, FD_STEP))) - scalar(&f(&with_entry(x0, i, -FD_STEP)))) / (2.0 * FD_STEP))
        .collect();
    rel_err(&analytic, &numeric)
}

fn randn(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    Tensor::from_vec(v, dims, &Device::Cpu).unwrap()
}

pub fn fd_mse(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = randn(&mut rng, &[3, 4, 5]);
    let x_hat = randn(&mut rng, &[3, 4, 5]);
    check_fn(&x_hat, |p| mse_loss(p, &x).unwrap())
}

/// Worst of the checks against image rows, text rows and the temperature.
pub fn fd_infonce(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = randn(&mut rng, &[5, 4]);
    let w = randn(&mut rng, &[5, 4]);
    let s = Tensor::new(1.3f64, &Device::Cpu).unwrap();
    let unit = |t: &Tensor| l2_normalize(t).unwrap();
    let by_v = check_fn(&v, |p| infonce_loss(&unit(p), &unit(&w), &s.exp().unwrap()).unwrap());
    let by_w = check_fn(&w, |p| infonce_loss(&unit(&v), &unit(p), &s.exp().unwrap()).unwrap());
    let by_t = check_fn(&s, |p| infonce_loss(&unit(&v), &unit(&w), &p.exp().unwrap()).unwrap());
    by_v.max(by_w).max(by_t)
}

pub fn fd_entropy(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = randn(&mut rng, &[6, 5]);
    [(1.0, 1.0), (0.5, 0.0), (2.0, 1.5)]
        .into_iter()
        .map(|(tau, gamma)| check_fn(&u, |p| entropy_loss(p, tau, gamma).unwrap().loss))
        .fold(0.0, f64::max)
}

pub fn fd_commitment(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = randn(&mut rng, &[6, 4]);
    let z_hat = randn(&mut rng, &[6, 4]);
    [true, false]
        .into_iter()
        .map(|sq| check_fn(&z, |p| commitment_loss(&z_hat, p, sq).unwrap()))
        .fold(0.0, f64::max)
}

pub fn fd_split_softmax(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = VocabLayout::new(7, 8).unwrap();
    let logits = randn(&mut rng, &[6, 15]).affine(3.0, 0.0).unwrap();
    let targets = [0u32, 6, 7, 14, 3, 10];
    check_fn(&logits, |p| split_softmax_nll(p, &targets, &layout).unwrap())
}

/// Tiny float64 tokenizer with the pass-through quantizer (the binarizer is
/// piecewise constant, so finite differences cannot see its straight-through path).
pub fn tiny_model(seed: u64) -> (QlipModel, Batch) {
    let cfg = ModelConfig { quantizer: QuantizerKind::Identity, ..ModelConfig::tiny_f64() };
    let model = QlipModel::new(cfg, seed).unwrap();
    let corpus = gen_pair_corpus_split(4, 16, seed, Split::Train).unwrap();
    let pairs: Vec<_> = corpus.pairs.iter().collect();
    let batch = Batch::from_pairs(&model, &pairs).unwrap();
    (model, batch)
}

/// Full stage-one objective on the tiny model, checked on a sample of every
/// parameter tensor. Returns the worst per-tensor relative error.
pub fn fd_composite(seed: u64, coords_per_tensor: usize) -> f64 {
    let (model, batch) = tiny_model(seed);
    let w = Stage1Weights::default();
    let q = QuantLossConfig::default();
    let grads = stage1_loss(&model, &batch, &w, &q).unwrap().total.backward().unwrap();
    // The commitment target is a stop-gradient, so it stays pinned at the base point.
    let z_hat0 = model.forward(&batch.patches, false).unwrap().z_hat.detach();
    let objective = || {
        let c = stage1_components(&model, &batch, &q).unwrap();
        let z = model.forward(&batch.patches, false).unwrap().z;
        let commit = commitment_loss(&z_hat0, &z, q.commit_squared).unwrap();
        w.recon * scalar(&c.mse) + w.quant * scalar(&c.bsq.loss) + w.align * scalar(&c.align) + w.commit * scalar(&commit)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut worst: f64 = 0.0;
    let names: Vec<String> = model.store.iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let var = model.store.get(&name).unwrap().clone();
        let base = var.as_tensor().copy().unwrap();
        let n = base.elem_count();
        let analytic_all = grads.get(var.as_tensor()).map(flat).unwrap_or_else(|| vec![0.0; n]);
        let picks: Vec<usize> = if n <= coords_per_tensor {
            (0..n).collect()
        } else {
            (0..coords_per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &i in &picks {
            var.set(&with_entry(&base, i, FD_STEP)).unwrap();
            let plus = objective();
            var.set(&with_entry(&base, i, -FD_STEP)).unwrap();
            let minus = objective();
            var.set(&base).unwrap();
            analytic.push(analytic_all[i]);
            numeric.push((plus - minus) / (2.0 * FD_STEP));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Every gradient check, as `(name, worst relative error)`.
pub fn gradient_suite() -> Vec<(&'static str, f64)> {
    vec![
        ("mse_loss", (0..3).map(fd_mse).fold(0.0, f64::max)),
        ("infonce_loss", (0..3).map(fd_infonce).fold(0.0, f64::max)),
        ("entropy_loss", (0..3).map(fd_entropy).fold(0.0, f64::max)),
        ("commitment_loss", (0..3).map(fd_commitment).fold(0.0, f64::max)),
        ("split_softmax_nll", (0..3).map(fd_split_softmax).fold(0.0, f64::max)),
        ("stage1_composite", fd_composite(0, 6)),
    ]
}
