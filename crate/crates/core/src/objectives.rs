//! Training objectives and the machinery for weighing them against each other.

use candle_core::{DType, Tensor, D};

use crate::bsq::{self, EntropyTerms};
use crate::error::{Error, Result};
use crate::model::QlipModel;
use crate::nn::{log_softmax_last, tensor_to_f64};
use crate::syndata::Pair;

/// Mean squared error over every element.
pub fn mse_loss(x_hat: &Tensor, x: &Tensor) -> Result<Tensor> {
    if x_hat.dims() != x.dims() {
        return Err(Error::shape(format!("{:?}", x.dims()), format!("{:?}", x_hat.dims())));
    }
    Ok((x_hat - x)?.sqr()?.mean_all()?)
}

/// Symmetric contrastive loss over a batch of matched unit embeddings.
///
/// With logits `S = t·V·Wᵀ` this is the mean of the row-wise and column-wise
/// cross-entropies against the diagonal.
pub fn infonce_loss(v: &Tensor, w: &Tensor, t: &Tensor) -> Result<Tensor> {
    let (b, d) = v.dims2()?;
    if w.dims2()? != (b, d) {
        return Err(Error::shape(format!("({b}, {d})"), format!("{:?}", w.dims())));
    }
    if b < 2 {
        return Err(Error::Degenerate("contrastive loss needs at least two pairs".into()));
    }
    let tv = t.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !(tv > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tv}")));
    }
    for m in [v, w] {
        let norms = tensor_to_f64(&m.sqr()?.sum(D::Minus1)?.sqrt()?)?;
        if norms.iter().any(|n| (n - 1.0).abs() > 1e-3) {
            return Err(Error::invalid("contrastive inputs must be unit vectors"));
        }
    }
    let logits = v.matmul(&w.t()?)?.broadcast_mul(t)?;
    let eye = Tensor::eye(b, logits.dtype(), logits.device())?;
    let rows = log_softmax_last(&logits)?.mul(&eye)?.sum_all()?;
    let cols = log_softmax_last(&logits.t()?.contiguous()?)?.mul(&eye)?.sum_all()?;
    Ok((rows + cols)?.affine(-1.0 / (2.0 * b as f64), 0.0)?)
}

/// Stage-one weights `(α_r, α_q, α_a, α_z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1Weights {
    pub recon: f64,
    pub quant: f64,
    pub align: f64,
    pub commit: f64,
}

impl Default for Stage1Weights {
    fn default() -> Self {
        Self { recon: 1e3, quant: 1.0, align: 1.0, commit: 1.0 }
    }
}

/// Stage-two weights `(α_r', α_q', α_p', α_g')`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Weights {
    pub recon: f64,
    pub quant: f64,
    pub perceptual: f64,
    pub adversarial: f64,
}

impl Default for Stage2Weights {
    fn default() -> Self {
        Self { recon: 1.0, quant: 1.0, perceptual: 0.1, adversarial: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossWeights {
    pub stage1: Stage1Weights,
    pub stage2: Stage2Weights,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let s1 = self.stage1;
        let s2 = self.stage2;
        let all = [s1.recon, s1.quant, s1.align, s1.commit, s2.recon, s2.quant, s2.perceptual, s2.adversarial];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// Settings of the entropy and commitment terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantLossConfig {
    pub tau: f64,
    pub gamma: f64,
    pub commit_squared: bool,
}

impl Default for QuantLossConfig {
    fn default() -> Self {
        Self { tau: 1.0, gamma: 1.0, commit_squared: false }
    }
}

/// Tensors and labels for one optimization step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub patches: Tensor,
    pub captions: Vec<Vec<u32>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(model: &QlipModel, pairs: &[&Pair]) -> Result<Self> {
        let images: Vec<_> = pairs.iter().map(|p| &p.image).collect();
        Ok(Batch {
            patches: model.patches(&images)?,
            captions: pairs.iter().map(|p| p.tokens.clone()).collect(),
            labels: pairs.iter().map(|p| p.label).collect(),
        })
    }
}

/// Unweighted stage-one terms.
#[derive(Debug, Clone)]
pub struct Stage1Components {
    pub mse: Tensor,
    pub bsq: EntropyTerms,
    pub align: Tensor,
    pub commit: Tensor,
}

impl Stage1Components {
    pub fn values(&self) -> Result<[(&'static str, f64); 6]> {
        let s = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok([
            ("mse", s(&self.mse)?),
            ("bsq", s(&self.bsq.loss)?),
            ("bsq_sample_entropy", s(&self.bsq.per_sample)?),
            ("bsq_codebook_entropy", s(&self.bsq.codebook)?),
            ("align", s(&self.align)?),
            ("commit", s(&self.commit)?),
        ])
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub total: Tensor,
    pub components: Stage1Components,
}

/// Unweighted stage-one terms for a batch.
pub fn stage1_components(model: &QlipModel, batch: &Batch, q: &QuantLossConfig) -> Result<Stage1Components> {
    let fwd = model.forward(&batch.patches, false)?;
    let mse = mse_loss(&fwd.recon, &fwd.target)?;
    let bsq_terms = bsq::entropy_loss(&fwd.u, q.tau, q.gamma)?;
    let commit = bsq::commitment_loss(&fwd.z_hat, &fwd.z, q.commit_squared)?;
    let v = model.head.forward(&fwd.cls)?;
    let w = model.text_embeddings(&batch.captions)?;
    let align = infonce_loss(&v, &w, &model.temperature()?)?;
    Ok(Stage1Components { mse, bsq: bsq_terms, align, commit })
}

/// `α_r·L_mse + α_q·L_BSQ + α_a·L_align + α_z·L_commit`.
pub fn stage1_loss(model: &QlipModel, batch: &Batch, w: &Stage1Weights, q: &QuantLossConfig) -> Result<Stage1Output> {
    let c = stage1_components(model, batch, q)?;
    let total = (c.mse.affine(w.recon, 0.0)?
        + c.bsq.loss.affine(w.quant, 0.0)?
        + c.align.affine(w.align, 0.0)?
        + c.commit.affine(w.commit, 0.0)?)?;
    Ok(Stage1Output { total, components: c })
}

/// Which stage-two coefficient scales an extra loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtraKind {
    Perceptual,
    Adversarial,
}

/// A pluggable reconstruction-side loss (perceptual, adversarial, ...).
pub trait ExtraLoss {
    fn name(&self) -> &str;
    fn kind(&self) -> ExtraKind;
    /// Loss on reconstructed vs. target patches, both (B, N, P).
    fn loss(&self, recon: &Tensor, target: &Tensor) -> Result<Tensor>;
}

/// Which branches are frozen for a stage-two step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreezeFlags {
    pub encoder: bool,
    pub text: bool,
}

impl FreezeFlags {
    pub fn stage2() -> Self {
        Self { encoder: true, text: true }
    }
}

#[derive(Debug, Clone)]
pub struct Stage2Output {
    pub total: Tensor,
    pub mse: Tensor,
    pub bsq: EntropyTerms,
    pub extras: Vec<(String, Tensor)>,
}

/// `α_r'·L_mse + α_q'·L_BSQ + Σ α·L_extra` with the encoder detached.
pub fn stage2_loss(
    model: &QlipModel,
    batch: &Batch,
    w: &Stage2Weights,
    q: &QuantLossConfig,
    extras: &[Box<dyn ExtraLoss>],
    frozen: FreezeFlags,
) -> Result<Stage2Output> {
    if !frozen.encoder || !frozen.text {
        return Err(Error::FrozenViolation("stage two requires frozen encoder and text branches".into()));
    }
    let fwd = model.forward(&batch.patches, true)?;
    let mse = mse_loss(&fwd.recon, &fwd.target)?;
    let bsq_terms = bsq::entropy_loss(&fwd.u, q.tau, q.gamma)?;
    let mut total = (mse.affine(w.recon, 0.0)? + bsq_terms.loss.affine(w.quant, 0.0)?)?;
    let mut extra_vals = Vec::with_capacity(extras.len());
    for e in extras {
        let l = e.loss(&fwd.recon, &fwd.target)?;
        let alpha = match e.kind() {
            ExtraKind::Perceptual => w.perceptual,
            ExtraKind::Adversarial => w.adversarial,
        };
        total = (total + l.affine(alpha, 0.0)?)?;
        extra_vals.push((e.name().to_string(), l));
    }
    Ok(Stage2Output { total, mse, bsq: bsq_terms, extras: extra_vals })
}

/// How [`balance_weights`] reports the ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BalanceMode {
    #[default]
    PowerOfTen,
    Exact,
}

/// Post-hoc ratio `α_r/α_a ≈ L_align(∞)/L_mse(∞)` from converged single-objective runs.
pub fn balance_weights(align_converged: f64, mse_converged: f64, mode: BalanceMode) -> Result<f64> {
    if !(align_converged > 0.0) || !(mse_converged > 0.0) || !align_converged.is_finite() || !mse_converged.is_finite() {
        return Err(Error::invalid(format!(
            "converged losses must be positive and finite, got align={align_converged}, mse={mse_converged}"
        )));
    }
    let ratio = align_converged / mse_converged;
    Ok(match mode {
        BalanceMode::Exact => ratio,
        BalanceMode::PowerOfTen => 10f64.powf(ratio.log10().round()),
    })
}

/// Per-loss gradient norms at the probe layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GradProbeReport {
    pub step: usize,
    pub param: String,
    pub norms: Vec<(String, f64)>,
}

impl GradProbeReport {
    pub fn norm(&self, name: &str) -> Option<f64> {
        self.norms.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// One separate backward pass per `(name, weight)` loss over a shared forward.
/// Known names: `mse`, `bsq`, `align`, `commit`.
pub fn probe_gradients(
    model: &QlipModel,
    batch: &Batch,
    q: &QuantLossConfig,
    losses: &[(&str, f64)],
    step: usize,
) -> Result<GradProbeReport> {
    let param = model.encoder.probe_param_name();
    let probe = model.store.tensor(&param)?;
    let c = stage1_components(model, batch, q)?;
    let mut norms = Vec::with_capacity(losses.len());
    for &(name, weight) in losses {
        let l = match name {
            "mse" => &c.mse,
            "bsq" => &c.bsq.loss,
            "align" => &c.align,
            "commit" => &c.commit,
            other => return Err(Error::invalid(format!("unknown loss `{other}` for probing"))),
        };
        let grads = l.affine(weight, 0.0)?.backward()?;
        let norm = match grads.get(&probe) {
            Some(g) => g.to_dtype(DType::F64)?.sqr()?.sum_all()?.sqrt()?.to_scalar::<f64>()?,
            None => 0.0,
        };
        norms.push((name.to_string(), norm));
    }
    Ok(GradProbeReport { step, param, norms })
}
