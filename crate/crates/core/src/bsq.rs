//! Binary spherical quantization.
//!
//! A latent `z ∈ R^d` is mapped by an MLP to `u` on the unit sphere `S^{L-1}`,
//! binarized per axis to a hypercube corner `û = sign(u)/√L`, and mapped back
//! by a second MLP to `ẑ`. The corner doubles as an integer token:
//! bit `i` of the index is set when axis `i` is positive. The codebook is
//! implicit, so there are `2^L` tokens without any stored code vectors.
//!
//! The entropy objective uses the soft assignment
//! `p_i = σ(2·u_i / (√L·τ))`. Because `⟨u, c⟩` splits into a sum over axes,
//! the softmax over all corners factorizes into these Bernoulli marginals, so
//! the expected per-sample entropy is exact. The codebook-usage term is the
//! sum of marginal entropies of the batch-averaged `p`, which upper-bounds the
//! joint entropy. [`entropy_loss_exact`] enumerates the corners directly.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::nn::{l2_normalize, sigmoid, Builder, Mlp};

/// Largest code width the enumeration routines accept.
pub const MAX_EXACT_BITS: usize = 16;

/// A point on the sphere together with its quantized corner and token index.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereCode {
    pub u: Vec<f64>,
    pub u_hat: Vec<f64>,
    pub index: u64,
}

/// Binarize a unit vector. `sign(0)` counts as positive.
pub fn quantize(u: &[f64]) -> SphereCode {
    let l = u.len();
    let mag = 1.0 / (l as f64).sqrt();
    let mut index = 0u64;
    let u_hat = u
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            if x >= 0.0 {
                index |= 1 << i;
                mag
            } else {
                -mag
            }
        })
        .collect();
    SphereCode { u: u.to_vec(), u_hat, index }
}

/// The corner whose bit pattern is `k`.
pub fn index_to_code(k: u64, bits: usize) -> Result<Vec<f64>> {
    if bits == 0 || bits > 63 {
        return Err(Error::invalid(format!("code width {bits} outside 1..=63")));
    }
    if k >> bits != 0 {
        return Err(Error::invalid(format!("index {k} out of range for {bits} bits")));
    }
    let mag = 1.0 / (bits as f64).sqrt();
    Ok((0..bits).map(|i| if k >> i & 1 == 1 { mag } else { -mag }).collect())
}

/// Straight-through backward: the incoming gradient passes unchanged.
pub fn ste_backward(grad_wrt_u_hat: &[f64]) -> Vec<f64> {
    grad_wrt_u_hat.to_vec()
}

/// Per-axis soft assignment probabilities `σ(2·u_i/(√L·τ))`.
pub fn soft_assign(u: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    let s = 2.0 / ((u.len() as f64).sqrt() * tau);
    Ok(u.iter().map(|&x| 1.0 / (1.0 + (-s * x).exp())).collect())
}

fn binary_entropy(p: f64) -> f64 {
    let mut h = 0.0;
    if p > 0.0 {
        h -= p * p.ln();
    }
    if p < 1.0 {
        h -= (1.0 - p) * (1.0 - p).ln();
    }
    h
}

/// Value of the entropy objective and its two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyValue {
    /// Mean per-sample entropy of the soft code distribution.
    pub per_sample: f64,
    /// Entropy of the batch-averaged code distribution.
    pub codebook: f64,
    pub loss: f64,
}

/// Host-side factorized objective over a batch of unit vectors.
pub fn entropy_value(batch_u: &[Vec<f64>], tau: f64, gamma: f64) -> Result<EntropyValue> {
    let (l, probs) = batch_probs(batch_u, tau, gamma)?;
    let n = probs.len() as f64;
    let per_sample = probs.iter().map(|p| p.iter().map(|&q| binary_entropy(q)).sum::<f64>()).sum::<f64>() / n;
    let codebook = (0..l).map(|i| binary_entropy(probs.iter().map(|p| p[i]).sum::<f64>() / n)).sum();
    Ok(EntropyValue { per_sample, codebook, loss: per_sample - gamma * codebook })
}

fn batch_probs(batch_u: &[Vec<f64>], tau: f64, gamma: f64) -> Result<(usize, Vec<Vec<f64>>)> {
    let first = batch_u.first().ok_or_else(|| Error::invalid("empty batch"))?;
    if !(gamma >= 0.0) {
        return Err(Error::invalid(format!("gamma must be nonnegative, got {gamma}")));
    }
    let l = first.len();
    if batch_u.iter().any(|u| u.len() != l) {
        return Err(Error::shape(l, "ragged batch"));
    }
    let probs = batch_u.iter().map(|u| soft_assign(u, tau)).collect::<Result<Vec<_>>>()?;
    Ok((l, probs))
}

/// Exact objective by enumerating all `2^L` corners with a softmax over `⟨u, c⟩/τ`.
pub fn entropy_loss_exact(batch_u: &[Vec<f64>], tau: f64, gamma: f64) -> Result<EntropyValue> {
    let first = batch_u.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let l = first.len();
    if l == 0 || l > MAX_EXACT_BITS {
        return Err(Error::invalid(format!("exact entropy needs 1..={MAX_EXACT_BITS} bits, got {l}")));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if !(gamma >= 0.0) {
        return Err(Error::invalid(format!("gamma must be nonnegative, got {gamma}")));
    }
    let k = 1usize << l;
    let corners: Vec<Vec<f64>> = (0..k as u64).map(|c| index_to_code(c, l)).collect::<Result<_>>()?;
    let mut avg = vec![0.0f64; k];
    let mut per_sample = 0.0;
    let mut logits = vec![0.0f64; k];
    for u in batch_u {
        if u.len() != l {
            return Err(Error::shape(l, u.len()));
        }
        for (c, corner) in corners.iter().enumerate() {
            logits[c] = u.iter().zip(corner).map(|(a, b)| a * b).sum::<f64>() / tau;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let mut h = 0.0;
        for c in 0..k {
            let logp = logits[c] - lse;
            let p = logp.exp();
            h -= p * logp;
            avg[c] += p;
        }
        per_sample += h;
    }
    let n = batch_u.len() as f64;
    let codebook = avg.iter().map(|&s| s / n).filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum::<f64>();
    let per_sample = per_sample / n;
    Ok(EntropyValue { per_sample, codebook, loss: per_sample - gamma * codebook })
}

/// Product-of-marginals corner distribution for one vector, by enumeration.
pub fn factorized_corner_probs(u: &[f64], tau: f64) -> Result<Vec<f64>> {
    let l = u.len();
    if l == 0 || l > MAX_EXACT_BITS {
        return Err(Error::invalid(format!("enumeration needs 1..={MAX_EXACT_BITS} bits")));
    }
    let p = soft_assign(u, tau)?;
    Ok((0..1u64 << l)
        .map(|k| (0..l).map(|i| if k >> i & 1 == 1 { p[i] } else { 1.0 - p[i] }).product())
        .collect())
}

/// Differentiable entropy objective with its two terms.
#[derive(Debug, Clone)]
pub struct EntropyTerms {
    pub per_sample: Tensor,
    pub codebook: Tensor,
    pub loss: Tensor,
}

/// Binary entropy of `σ(a)` written stably in terms of the logit `a`.
fn binary_entropy_of_logit(a: &Tensor) -> Result<Tensor> {
    let abs = a.abs()?;
    // softplus(-|a|) + |a|·σ(-|a|)
    let softplus = abs.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((softplus + abs.mul(&sigmoid(&abs.neg()?)?)?)?)
}

fn binary_entropy_tensor(p: &Tensor) -> Result<Tensor> {
    let p = p.clamp(1e-7, 1.0 - 1e-7)?;
    let q = p.affine(-1.0, 1.0)?;
    Ok((p.mul(&p.log()?)? + q.mul(&q.log()?)?)?.neg()?)
}

/// Entropy objective over `batch_u` of shape (M, L): mean per-sample entropy
/// minus `gamma` times the factorized codebook entropy.
pub fn entropy_loss(batch_u: &Tensor, tau: f64, gamma: f64) -> Result<EntropyTerms> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if !(gamma >= 0.0) {
        return Err(Error::invalid(format!("gamma must be nonnegative, got {gamma}")));
    }
    let (m, l) = batch_u.dims2()?;
    if m == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let logits = batch_u.affine(2.0 / ((l as f64).sqrt() * tau), 0.0)?;
    let per_sample = binary_entropy_of_logit(&logits)?.sum(D::Minus1)?.mean(0)?;
    let mean_p = sigmoid(&logits)?.mean(0)?;
    let codebook = binary_entropy_tensor(&mean_p)?.sum(0)?;
    let loss = (&per_sample - codebook.affine(gamma, 0.0)?)?;
    Ok(EntropyTerms { per_sample, codebook, loss })
}

/// Mean over latents of `‖sg(ẑ) − z‖₂` (or its square). Gradient reaches `z` only.
pub fn commitment_loss(z_hat: &Tensor, z: &Tensor, squared: bool) -> Result<Tensor> {
    if z_hat.dims() != z.dims() {
        return Err(Error::shape(format!("{:?}", z.dims()), format!("{:?}", z_hat.dims())));
    }
    let sq = (z_hat.detach() - z)?.sqr()?.sum_keepdim(D::Minus1)?;
    let per = if squared { sq } else { safe_sqrt(&sq)? };
    Ok(per.mean_all()?)
}

/// `sqrt(x + ε) − sqrt(ε)`: exact zero at zero with a finite gradient there.
pub(crate) fn safe_sqrt(x: &Tensor) -> Result<Tensor> {
    const EPS: f64 = 1e-12;
    Ok(x.affine(1.0, EPS)?.sqrt()?.affine(1.0, -EPS.sqrt())?)
}

/// Quantize with a straight-through gradient: forward `sign(u)/√L`, backward identity.
pub fn quantize_ste(u: &Tensor) -> Result<Tensor> {
    let l = u.dim(D::Minus1)?;
    let mag = 1.0 / (l as f64).sqrt();
    let pos = u.ge(0.0)?;
    let hard = pos.where_cond(&u.ones_like()?.affine(mag, 0.0)?, &u.ones_like()?.affine(-mag, 0.0)?)?;
    Ok((u + (hard - u)?.detach())?)
}

/// Token index of every row of a (M, L) tensor.
pub fn indices(u: &Tensor) -> Result<Vec<u64>> {
    let rows = u.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(rows.iter().map(|r| quantize(r).index).collect())
}

/// Hidden width of the bottleneck MLPs.
pub fn default_hidden(dim: usize, bits: usize) -> usize {
    4 * dim.max(bits)
}

/// The learned down/up projections around the binarizer.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub down: Mlp,
    pub up: Mlp,
    pub bits: usize,
}

impl Bottleneck {
    pub fn new(b: &mut Builder, dim: usize, bits: usize, hidden: usize) -> Result<Self> {
        if hidden < dim.max(bits) {
            return Err(Error::invalid(format!("bottleneck hidden width {hidden} below max(d, L)")));
        }
        b.scoped("bsq", |b| {
            Ok(Bottleneck {
                down: Mlp::new(b, "down", dim, hidden, bits, 1.0)?,
                up: Mlp::new(b, "up", bits, hidden, dim, 1.0)?,
                bits,
            })
        })
    }

    /// `u = MLP_down(z) / ‖MLP_down(z)‖`.
    pub fn project_down(&self, z: &Tensor) -> Result<Tensor> {
        l2_normalize(&self.down.forward(z)?)
    }

    pub fn project_up(&self, u_hat: &Tensor) -> Result<Tensor> {
        self.up.forward(u_hat)
    }

    /// Codes for token indices, as a (M, L) tensor.
    pub fn codes(&self, ids: &[u64], dtype: DType) -> Result<Tensor> {
        let mut data = Vec::with_capacity(ids.len() * self.bits);
        for &k in ids {
            data.extend(index_to_code(k, self.bits)?);
        }
        Ok(Tensor::from_vec(data, (ids.len(), self.bits), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{randn_vec, Init, ParamStore};
    use candle_core::{Device, Var};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn worked_example_l3() {
        let c = quantize(&unit(vec![0.3, -0.2, 0.5]));
        let s = 1.0 / 3f64.sqrt();
        assert_eq!(c.u_hat, vec![s, -s, s]);
        assert_eq!(c.index, 5);
        assert_eq!(index_to_code(5, 3).unwrap(), vec![s, -s, s]);
        assert_eq!(index_to_code(0, 3).unwrap(), vec![-s, -s, -s]);
    }

    #[test]
    fn all_positive_is_last_index_and_zero_is_positive() {
        assert_eq!(quantize(&unit(vec![1.0; 7])).index, 127);
        assert_eq!(quantize(&[0.0, -1.0]).index, 1);
    }

    #[test]
    fn codes_have_unit_norm_and_reject_out_of_range() {
        for k in 0..1u64 << 6 {
            let c = index_to_code(k, 6).unwrap();
            assert!((c.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-15);
        }
        assert!(index_to_code(64, 6).is_err());
    }

    #[test]
    fn exhaustive_bijection_l10() {
        for k in 0..1u64 << 10 {
            assert_eq!(quantize(&index_to_code(k, 10).unwrap()).index, k);
        }
    }

    #[test]
    fn random_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let c = quantize(&unit(randn_vec(&mut rng, 12)));
            assert_eq!(index_to_code(c.index, 12).unwrap(), c.u_hat);
            // idempotent on the quantized point
            assert_eq!(quantize(&c.u_hat).index, c.index);
        }
    }

    #[test]
    fn soft_assign_basics() {
        let p = soft_assign(&[0.0, 0.5, -0.5], 1.0).unwrap();
        assert_eq!(p[0], 0.5);
        assert!(p[1] > 0.5 && p[2] < 0.5);
        let hot = soft_assign(&[0.7, -0.7], 1e9).unwrap();
        assert!(hot.iter().all(|&x| (x - 0.5).abs() < 1e-8));
        assert!(soft_assign(&[0.1], 0.0).is_err());
        assert!(soft_assign(&[0.1], -1.0).is_err());
    }

    #[test]
    fn zero_vector_entropy() {
        let l = 5;
        let v = entropy_value(&[vec![0.0; l]], 1.0, 0.3).unwrap();
        let ln2 = 2f64.ln();
        assert!((v.per_sample - l as f64 * ln2).abs() < 1e-12);
        assert!((v.codebook - l as f64 * ln2).abs() < 1e-12);
        assert!((v.loss - 0.7 * l as f64 * ln2).abs() < 1e-12);
    }

    #[test]
    fn exact_entropy_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch: Vec<Vec<f64>> = (0..4).map(|_| unit(randn_vec(&mut rng, 4))).collect();
        let e = entropy_loss_exact(&batch, 1.0, 0.0).unwrap();
        assert_eq!(e.loss, e.per_sample);
        // one dominant corner
        let corner = index_to_code(9, 4).unwrap();
        let batch = vec![corner.clone(); 3];
        let e = entropy_loss_exact(&batch, 1e-3, 1.0).unwrap();
        assert!(e.per_sample < 1e-6 && e.codebook < 1e-6);
        assert!(entropy_loss_exact(&[vec![0.1; 17]], 1.0, 1.0).is_err());
    }

    #[test]
    fn tensor_entropy_matches_host_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch: Vec<Vec<f64>> = (0..6).map(|_| unit(randn_vec(&mut rng, 8))).collect();
        let t = Tensor::from_vec(batch.concat(), (6, 8), &Device::Cpu).unwrap();
        let terms = entropy_loss(&t, 0.7, 1.3).unwrap();
        let host = entropy_value(&batch, 0.7, 1.3).unwrap();
        assert!((terms.loss.to_scalar::<f64>().unwrap() - host.loss).abs() < 1e-12);
        assert!((terms.per_sample.to_scalar::<f64>().unwrap() - host.per_sample).abs() < 1e-12);
    }

    #[test]
    fn ste_is_identity_in_backward() {
        let g = vec![0.25, -3.0, 1e-3];
        assert_eq!(ste_backward(&g), g);
        let u = Var::new(&[0.3f64, -0.2, 0.5], &Device::Cpu).unwrap();
        let w = Tensor::new(&[1.0f64, 2.0, -4.0], &Device::Cpu).unwrap();
        let q = quantize_ste(u.as_tensor()).unwrap();
        let s = 1.0 / 3f64.sqrt();
        let qv = q.to_vec1::<f64>().unwrap();
        assert!(qv.iter().zip([s, -s, s]).all(|(a, b)| (a - b).abs() < 1e-15));
        let grads = q.mul(&w).unwrap().sum_all().unwrap().backward().unwrap();
        assert_eq!(grads.get(u.as_tensor()).unwrap().to_vec1::<f64>().unwrap(), vec![1.0, 2.0, -4.0]);
    }

    #[test]
    fn commitment_basics() {
        let z = Var::new(&[[1.0f64, 2.0], [3.0, 4.0]], &Device::Cpu).unwrap();
        let zh = Var::new(&[[1.0f64, 2.0], [3.0, 4.0]], &Device::Cpu).unwrap();
        let l = commitment_loss(zh.as_tensor(), z.as_tensor(), false).unwrap();
        assert_eq!(l.to_scalar::<f64>().unwrap(), 0.0);
        let zh2 = Var::new(&[[0.0f64, 2.0], [3.0, 7.0]], &Device::Cpu).unwrap();
        let l = commitment_loss(zh2.as_tensor(), z.as_tensor(), false).unwrap();
        assert!((l.to_scalar::<f64>().unwrap() - 2.0).abs() < 1e-5);
        let g = l.backward().unwrap();
        assert!(g.get(zh2.as_tensor()).is_none());
        assert!(g.get(z.as_tensor()).is_some());
    }

    #[test]
    fn bottleneck_outputs() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bn = Bottleneck::new(&mut Builder::new(&mut store, Init::Random(&mut rng)), 8, 6, 32).unwrap();
        let z = Tensor::from_vec(randn_vec(&mut rng, 5 * 8), (5, 8), &Device::Cpu).unwrap();
        let u = bn.project_down(&z).unwrap();
        for row in u.to_vec2::<f64>().unwrap() {
            assert!((row.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-7);
        }
        let u2 = bn.project_down(&z).unwrap();
        assert_eq!(u.to_vec2::<f64>().unwrap(), u2.to_vec2::<f64>().unwrap());
        // ẑ depends only on the index
        let codes = bn.codes(&[3, 3, 17], DType::F64).unwrap();
        let zh = bn.project_up(&codes).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(zh[0], zh[1]);
        assert_ne!(zh[0], zh[2]);
        assert!(Bottleneck::new(&mut Builder::new(&mut store, Init::Random(&mut rng)), 8, 6, 7).is_err());
    }

    #[test]
    fn project_down_rejects_zero_output() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bn = Bottleneck::new(&mut Builder::new(&mut store, Init::Random(&mut rng)), 4, 3, 16).unwrap();
        let zero = bn.down.fc2.weight.zeros_like().unwrap();
        store.get("bsq.down.fc2.weight").unwrap().set(&zero).unwrap();
        let z = Tensor::ones((2, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(bn.project_down(&z), Err(Error::Degenerate(_))));
    }
}
