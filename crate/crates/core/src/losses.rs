//! Training losses: prediction alignment, Gaussian statistics alignment,
//! input-gradient matching and their weighted sum.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use uad_autograd::{grad, BackwardCtx, Function, Tensor, Var};

use crate::error::{Result, UadError};
use crate::model::{BranchTag, NormMode, Session};
use crate::statistics::FeatureStats;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 4.0,
            lambda1: 1.0,
            lambda2: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(UadError::config("weights.beta", "must be > 0"));
        }
        if !(self.lambda1 >= 0.0) || !self.lambda1.is_finite() {
            return Err(UadError::config("weights.lambda1", "must be >= 0"));
        }
        if !(self.lambda2 >= 0.0) || !self.lambda2.is_finite() {
            return Err(UadError::config("weights.lambda2", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_clean: f64,
    pub kl_pred: f64,
    pub d2d_sa: f64,
    pub igm: f64,
    pub total: f64,
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(UadError::InvalidArgument(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        t.data_mut()[i * classes + y] = 1.0;
    }
    Ok(t)
}

fn check_logits(logits: &Var, batch: usize) -> Result<(usize, usize)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != batch {
        return Err(UadError::Shape {
            expected: format!("({batch}, C) logits"),
            got: s.to_vec(),
        });
    }
    Ok((s[0], s[1]))
}

/// Sum over the batch of per-sample cross-entropy.
pub fn cross_entropy_sum(logits: &Var, labels: &[usize]) -> Result<Var> {
    let (_, c) = check_logits(logits, labels.len())?;
    let target = Var::constant(one_hot(labels, c)?);
    Ok(logits.log_softmax().mul(&target).sum().neg())
}

/// Batch-mean cross-entropy.
pub fn cross_entropy(logits: &Var, labels: &[usize]) -> Result<Var> {
    Ok(cross_entropy_sum(logits, labels)?.scale(1.0 / labels.len() as f64))
}

/// Per-sample cross-entropy values, no graph.
pub fn cross_entropy_per_sample(logits: &Tensor, labels: &[usize]) -> Vec<f64> {
    let c = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = &logits.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .collect()
}

/// Batch-mean `KL(softmax(reference) || softmax(other))`.
pub fn kl_divergence(reference: &Var, other: &Var) -> Result<Var> {
    let (b, _) = check_logits(reference, reference.shape().first().copied().unwrap_or(0))?;
    check_logits(other, b)?;
    if reference.shape() != other.shape() {
        return Err(UadError::Shape {
            expected: format!("{:?}", reference.shape()),
            got: other.shape().to_vec(),
        });
    }
    let log_p = reference.log_softmax();
    let log_q = other.log_softmax();
    Ok(log_p.exp().mul(&log_p.sub(&log_q)).sum().scale(1.0 / b as f64))
}

/// Prediction-alignment terms `(ce_clean, kl_pred)`.
pub struct PaTerms {
    pub ce_clean: Var,
    pub kl_pred: Var,
}

/// Clean cross-entropy plus the KL between the benign-augmented (PRIMARY)
/// and adversarial-augmented (AUXILIARY) predictions. The weighting by
/// beta happens in [`total_loss`].
pub fn d2d_pa_loss(
    session: &mut Session<'_>,
    clean_logits: &Var,
    labels: &[usize],
    f_ben_aug: &Var,
    f_adv_aug: &Var,
    norm: NormMode,
) -> Result<PaTerms> {
    let ce_clean = cross_entropy(clean_logits, labels)?;
    let ben = session.forward_tail_head(f_ben_aug, BranchTag::Primary, norm)?;
    let adv = session.forward_tail_head(f_adv_aug, BranchTag::Auxiliary, norm)?;
    let kl_pred = kl_divergence(&ben, &adv)?;
    Ok(PaTerms { ce_clean, kl_pred })
}

/// Diagonal loading for the Gaussian KL.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Ridge {
    /// `max(1e-4, 1e-5 * tr(cov_adv) / D)` per instance.
    Adaptive,
    Fixed(f64),
}

impl Ridge {
    fn value(self, cov_adv: &DMatrix<f64>) -> f64 {
        match self {
            Ridge::Adaptive => (1e-5 * cov_adv.trace() / cov_adv.nrows() as f64).max(1e-4),
            Ridge::Fixed(r) => r,
        }
    }
}

struct GaussianKlGrads {
    d_mu_ref: Tensor,
    d_cov_ref: Tensor,
    d_mu_adv: Tensor,
    d_cov_adv: Tensor,
}

struct GaussianKlFn {
    grads: GaussianKlGrads,
    batch: usize,
}

impl Function for GaussianKlFn {
    fn name(&self) -> &'static str {
        "gaussian_kl"
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Var>> {
        let b = self.batch;
        let g2 = ctx.grad.reshape(&[b, 1]);
        let g3 = ctx.grad.reshape(&[b, 1, 1]);
        let scale = |g: &Var, t: &Tensor, need: bool| need.then(|| g.mul(&Var::constant(t.clone())));
        vec![
            scale(&g2, &self.grads.d_mu_ref, ctx.needs[0]),
            scale(&g3, &self.grads.d_cov_ref, ctx.needs[1]),
            scale(&g2, &self.grads.d_mu_adv, ctx.needs[2]),
            scale(&g3, &self.grads.d_cov_adv, ctx.needs[3]),
        ]
    }
}

fn matrix_at(t: &Tensor, i: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(d, d, &t.data()[i * d * d..(i + 1) * d * d])
}

/// Per-instance `KL(N(mu_ref, cov_ref) || N(mu_adv, cov_adv))`, shape `(B)`.
///
/// Both covariances are ridge-loaded before Cholesky factorization. The
/// ridge is treated as a constant when differentiating.
pub fn gaussian_kl(reference: &FeatureStats, adv: &FeatureStats, ridge: Ridge) -> Result<Var> {
    let (b, d) = (reference.batch(), reference.dim());
    if adv.mu.shape() != reference.mu.shape() || adv.cov.shape() != reference.cov.shape() {
        return Err(UadError::Shape {
            expected: format!("statistics of shape ({b}, {d})"),
            got: adv.mu.shape().to_vec(),
        });
    }
    let mut values = Vec::with_capacity(b);
    let mut d_mu_ref = Tensor::zeros(&[b, d]);
    let mut d_mu_adv = Tensor::zeros(&[b, d]);
    let mut d_cov_ref = Tensor::zeros(&[b, d, d]);
    let mut d_cov_adv = Tensor::zeros(&[b, d, d]);
    for i in 0..b {
        let cov_adv_raw = matrix_at(adv.cov.value(), i, d);
        let r = ridge.value(&cov_adv_raw);
        let eye = DMatrix::<f64>::identity(d, d);
        let a = cov_adv_raw + &eye * r;
        let c = matrix_at(reference.cov.value(), i, d) + &eye * r;
        let factor = |m: DMatrix<f64>, which: &str| {
            m.cholesky().ok_or_else(|| {
                UadError::Numerical(format!(
                    "{which} covariance of instance {i} is not positive definite after ridge {r:e}"
                ))
            })
        };
        let chol_a = factor(a, "adversarial")?;
        let chol_c = factor(c.clone(), "reference")?;
        let a_inv = chol_a.inverse();
        let c_inv = chol_c.inverse();
        let delta = DVector::from_fn(d, |k, _| {
            adv.mu.value().data()[i * d + k] - reference.mu.value().data()[i * d + k]
        });
        let a_inv_delta = &a_inv * &delta;
        let logdet = |l: &DMatrix<f64>| 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let logdet_a = logdet(&chol_a.l());
        let logdet_c = logdet(&chol_c.l());
        let trace_term = (&a_inv * &c).trace();
        let quad = delta.dot(&a_inv_delta);
        let kl = 0.5 * (trace_term - d as f64 + quad + logdet_a - logdet_c);
        if !kl.is_finite() {
            return Err(UadError::NonFinite(format!("Gaussian KL of instance {i}")));
        }
        values.push(kl);

        let g_ref = (&a_inv - &c_inv) * 0.5;
        let g_adv = (&a_inv - &a_inv * &c * &a_inv - &a_inv_delta * a_inv_delta.transpose()) * 0.5;
        for r_ in 0..d {
            d_mu_adv.data_mut()[i * d + r_] = a_inv_delta[r_];
            d_mu_ref.data_mut()[i * d + r_] = -a_inv_delta[r_];
            for c_ in 0..d {
                d_cov_ref.data_mut()[i * d * d + r_ * d + c_] = g_ref[(r_, c_)];
                d_cov_adv.data_mut()[i * d * d + r_ * d + c_] = g_adv[(r_, c_)];
            }
        }
    }
    Ok(Var::from_op(
        Tensor::new(&[b], values),
        vec![
            reference.mu.clone(),
            reference.cov.clone(),
            adv.mu.clone(),
            adv.cov.clone(),
        ],
        Box::new(GaussianKlFn {
            grads: GaussianKlGrads {
                d_mu_ref,
                d_cov_ref,
                d_mu_adv,
                d_cov_adv,
            },
            batch: b,
        }),
    ))
}

/// Batch-mean statistics alignment between un-augmented benign and
/// adversarial features.
pub fn d2d_sa_loss(reference: &FeatureStats, adv: &FeatureStats, ridge: Ridge) -> Result<Var> {
    Ok(gaussian_kl(reference, adv, ridge)?.mean())
}

/// Input gradient of the summed per-sample cross-entropy, kept
/// differentiable with respect to the model parameters.
pub fn input_gradient(x: &Var, logits: &Var, labels: &[usize]) -> Result<Var> {
    let loss = cross_entropy_sum(logits, labels)?;
    grad(&loss, &[x], true)
        .pop()
        .flatten()
        .ok_or_else(|| UadError::InvalidArgument("logits do not depend on the input".into()))
}

/// Batch mean of per-instance Euclidean distances between two input gradients.
pub fn igm_from_gradients(g_ben: &Var, g_adv: &Var) -> Result<Var> {
    if g_ben.shape() != g_adv.shape() || g_ben.shape().is_empty() {
        return Err(UadError::Shape {
            expected: format!("{:?}", g_ben.shape()),
            got: g_adv.shape().to_vec(),
        });
    }
    let b = g_ben.shape()[0];
    let n = g_ben.value().len() / b.max(1);
    let diff = g_ben.sub(g_adv).reshape(&[b, n]);
    Ok(diff.square().sum_keepdim(&[1]).sqrt().mean())
}

/// Input-gradient matching between the benign-refined (PRIMARY) and
/// adversarial (AUXILIARY) batches.
pub fn igm_loss(
    session: &mut Session<'_>,
    x_ben: &Tensor,
    x_adv: &Tensor,
    labels: &[usize],
    norm: NormMode,
) -> Result<Var> {
    let xb = Var::parameter(x_ben.clone());
    let xa = Var::parameter(x_adv.clone());
    let lb = session.forward(&xb, BranchTag::Primary, norm)?;
    let la = session.forward(&xa, BranchTag::Auxiliary, norm)?;
    let gb = input_gradient(&xb, &lb, labels)?;
    let ga = input_gradient(&xa, &la, labels)?;
    igm_from_gradients(&gb, &ga)
}

/// `ce + beta*kl + lambda1*sa + lambda2*igm`, with a finiteness check on each
/// component. A missing `igm` counts as zero.
pub fn total_loss(
    ce_clean: &Var,
    kl_pred: &Var,
    d2d_sa: Option<&Var>,
    igm: Option<&Var>,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let parts = [
        ("ce_clean", Some(ce_clean)),
        ("kl_pred", Some(kl_pred)),
        ("d2d_sa", d2d_sa),
        ("igm", igm),
    ];
    for (name, v) in parts {
        if let Some(v) = v {
            if v.value().len() != 1 {
                return Err(UadError::Shape {
                    expected: format!("scalar {name}"),
                    got: v.shape().to_vec(),
                });
            }
            if !v.item().is_finite() {
                return Err(UadError::NonFinite(format!("loss component {name}")));
            }
        }
    }
    let mut total = ce_clean.add(&kl_pred.scale(weights.beta));
    if let Some(sa) = d2d_sa {
        total = total.add(&sa.scale(weights.lambda1));
    }
    if let Some(g) = igm {
        total = total.add(&g.scale(weights.lambda2));
    }
    let breakdown = breakdown_of(
        ce_clean.item(),
        kl_pred.item(),
        d2d_sa.map_or(0.0, Var::item),
        igm.map_or(0.0, Var::item),
        weights,
    );
    if !total.item().is_finite() {
        return Err(UadError::NonFinite("loss component total".into()));
    }
    let breakdown = LossBreakdown {
        total: total.item(),
        ..breakdown
    };
    Ok((total, breakdown))
}

/// Scalar form of the weighted sum.
pub fn breakdown_of(ce_clean: f64, kl_pred: f64, d2d_sa: f64, igm: f64, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        ce_clean,
        kl_pred,
        d2d_sa,
        igm,
        total: ce_clean + w.beta * kl_pred + w.lambda1 * d2d_sa + w.lambda2 * igm,
    }
}
