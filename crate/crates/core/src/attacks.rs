//! L-infinity adversary generation and benign refinement.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use uad_autograd::{grad, no_grad, Tensor, Var};

use crate::error::{Result, UadError};
use crate::losses::{cross_entropy, cross_entropy_sum, kl_divergence};
use crate::model::{BranchTag, Classifier, NormMode};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub refine_step: f64,
    pub refine_steps: usize,
    pub init_noise_scale: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            steps: 10,
            refine_step: 8.0 / 255.0,
            refine_steps: 1,
            init_noise_scale: 0.001,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(UadError::config("attack.epsilon", "must be > 0"));
        }
        if !(self.step_size > 0.0) {
            return Err(UadError::config("attack.step_size", "must be > 0"));
        }
        if self.steps == 0 {
            return Err(UadError::config("attack.steps", "must be >= 1"));
        }
        if !(self.refine_step >= 0.0) {
            return Err(UadError::config("attack.refine_step", "must be >= 0"));
        }
        if self.refine_steps == 0 {
            return Err(UadError::config("attack.refine_steps", "must be >= 1"));
        }
        if !(self.init_noise_scale >= 0.0) {
            return Err(UadError::config("attack.init_noise_scale", "must be >= 0"));
        }
        Ok(())
    }
}

/// Result of one adversary generation run.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversaryRecord {
    /// Final iterate.
    pub adversarial: Tensor,
    /// Iterates `1..n-1` in order.
    pub intermediates: Vec<Tensor>,
    /// Attack objective at the start of each step.
    pub loss_trace: Vec<f64>,
}

/// Clip `candidate` into the `epsilon` ball around `x`, then into `[0, 1]`.
pub fn project(candidate: &Tensor, x: &Tensor, epsilon: f64) -> Tensor {
    candidate.zip_map(x, |c, o| c.clamp(o - epsilon, o + epsilon).clamp(0.0, 1.0))
}

fn signed_step(current: &Tensor, g: &Tensor, step: f64) -> Tensor {
    current.zip_map(g, |v, g| {
        let s = if g > 0.0 {
            1.0
        } else if g < 0.0 {
            -1.0
        } else {
            0.0
        };
        v + step * s
    })
}

fn gaussian_start(x: &Tensor, scale: f64, epsilon: f64, rng: &mut impl Rng) -> Tensor {
    let noise = Tensor::from_fn(x.shape(), |_| rng.sample::<f64, _>(StandardNormal));
    project(&x.zip_map(&noise, |v, n| v + scale * n), x, epsilon)
}

fn checked_gradient(loss: &Var, x: &Var, what: &str, step: usize) -> Result<Tensor> {
    let g = grad(loss, &[x], false)
        .pop()
        .flatten()
        .map(|g| g.value().clone())
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    if !g.all_finite() || !loss.item().is_finite() {
        return Err(UadError::NonFinite(format!("{what} gradient at step {step}")));
    }
    Ok(g)
}

/// PGD on `KL(p(x) || p(x_adv))` with a detached PRIMARY clean reference and
/// AUXILIARY adversarial forwards.
pub fn pgd_generate<M: Classifier + ?Sized>(
    model: &M,
    x: &Tensor,
    cfg: &AttackConfig,
    norm: NormMode,
    rng: &mut impl Rng,
) -> Result<AdversaryRecord> {
    if !(cfg.epsilon >= 0.0) || !(cfg.step_size >= 0.0) || cfg.steps == 0 {
        return Err(UadError::InvalidArgument(format!("invalid attack settings {cfg:?}")));
    }
    let reference = no_grad(|| model.logits(&Var::constant(x.clone()), BranchTag::Primary, norm))?.detach();
    let mut current = gaussian_start(x, cfg.init_noise_scale, cfg.epsilon, rng);
    let mut intermediates = Vec::with_capacity(cfg.steps.saturating_sub(1));
    let mut loss_trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let xv = Var::parameter(current.clone());
        let logits = model.logits(&xv, BranchTag::Auxiliary, norm)?;
        let loss = kl_divergence(&reference, &logits)?;
        let g = checked_gradient(&loss, &xv, "attack", step)?;
        loss_trace.push(loss.item());
        current = project(&signed_step(&current, &g, cfg.step_size), x, cfg.epsilon);
        if step + 1 < cfg.steps {
            intermediates.push(current.clone());
        }
    }
    Ok(AdversaryRecord {
        adversarial: current,
        intermediates,
        loss_trace,
    })
}

/// One signed KL step from the random start.
pub fn single_step_generate<M: Classifier + ?Sized>(
    model: &M,
    x: &Tensor,
    cfg: &AttackConfig,
    norm: NormMode,
    rng: &mut impl Rng,
) -> Result<AdversaryRecord> {
    if cfg.steps != 1 {
        return Err(UadError::InvalidArgument(format!(
            "single-step generation needs steps == 1, got {}",
            cfg.steps
        )));
    }
    pgd_generate(model, x, cfg, norm, rng)
}

/// Signed cross-entropy descent on the PRIMARY branch, kept inside the
/// `epsilon` ball around `x`.
pub fn benign_refine<M: Classifier + ?Sized>(
    model: &M,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    norm: NormMode,
) -> Result<Tensor> {
    let mut current = x.clone();
    for step in 0..cfg.refine_steps {
        let xv = Var::parameter(current.clone());
        let logits = model.logits(&xv, BranchTag::Primary, norm)?;
        let loss = cross_entropy(&logits, labels)?;
        let g = checked_gradient(&loss, &xv, "refinement", step)?;
        current = project(&signed_step(&current, &g, -cfg.refine_step), x, cfg.epsilon);
    }
    Ok(current)
}

/// Start point of a cross-entropy attack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttackStart {
    /// `x + scale * N(0, 1)`, projected.
    Gaussian(f64),
    /// Uniform in the `epsilon` ball, projected.
    Uniform,
}

/// Signed-gradient attack on the true-label cross-entropy (ascent, or
/// descent with `ascend == false`), PRIMARY branch.
#[allow(clippy::too_many_arguments)]
pub fn ce_attack<M: Classifier + ?Sized>(
    model: &M,
    x: &Tensor,
    labels: &[usize],
    epsilon: f64,
    step_size: f64,
    steps: usize,
    start: AttackStart,
    ascend: bool,
    norm: NormMode,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let mut current = match start {
        AttackStart::Gaussian(scale) => gaussian_start(x, scale, epsilon, rng),
        AttackStart::Uniform => {
            let noise = Tensor::from_fn(x.shape(), |_| rng.gen_range(-epsilon..=epsilon));
            project(&x.zip_map(&noise, |v, n| v + n), x, epsilon)
        }
    };
    let step = if ascend { step_size } else { -step_size };
    for s in 0..steps {
        let xv = Var::parameter(current.clone());
        let logits = model.logits(&xv, BranchTag::Primary, norm)?;
        let loss = cross_entropy_sum(&logits, labels)?;
        let g = checked_gradient(&loss, &xv, "evaluation attack", s)?;
        current = project(&signed_step(&current, &g, step), x, epsilon);
    }
    Ok(current)
}

/// PGD on `KL(p(x) || p(x_adv))` from a uniform start, both passes on `branch`.
#[allow(clippy::too_many_arguments)]
pub fn kl_attack_uniform<M: Classifier + ?Sized>(
    model: &M,
    x: &Tensor,
    epsilon: f64,
    step_size: f64,
    steps: usize,
    branch: BranchTag,
    norm: NormMode,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let reference = no_grad(|| model.logits(&Var::constant(x.clone()), branch, norm))?.detach();
    let noise = Tensor::from_fn(x.shape(), |_| rng.gen_range(-epsilon..=epsilon));
    let mut current = project(&x.zip_map(&noise, |v, n| v + n), x, epsilon);
    for s in 0..steps {
        let xv = Var::parameter(current.clone());
        let logits = model.logits(&xv, branch, norm)?;
        let loss = kl_divergence(&reference, &logits)?;
        let g = checked_gradient(&loss, &xv, "attack", s)?;
        current = project(&signed_step(&current, &g, step_size), x, epsilon);
    }
    Ok(current)
}
