//! Uncertainty-aware feature re-styling (AdaIN with perturbed own statistics).

use rand::Rng;
use rand_distr::StandardNormal;
use uad_autograd::{Tensor, Var};

use crate::error::{Result, UadError};
use crate::statistics::FeatureStats;

/// Denominator guard added to sigma.
pub const EPS_DIV: f64 = 1e-6;

/// Per-instance, per-channel standard normal draws, each `(B, D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AumNoise {
    pub eps1: Tensor,
    pub eps2: Tensor,
}

impl AumNoise {
    /// `eps1` is drawn in full before `eps2`.
    pub fn sample(batch: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let mut draw = || Tensor::from_fn(&[batch, dim], |_| rng.sample::<f64, _>(StandardNormal));
        let eps1 = draw();
        let eps2 = draw();
        Self { eps1, eps2 }
    }

    pub fn zeros(batch: usize, dim: usize) -> Self {
        Self {
            eps1: Tensor::zeros(&[batch, dim]),
            eps2: Tensor::zeros(&[batch, dim]),
        }
    }
}

/// Batched uncertainty, `(B, D)` each.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchUncertainty {
    pub std_mu: Tensor,
    pub std_sigma: Tensor,
}

impl BatchUncertainty {
    pub fn zeros(batch: usize, dim: usize) -> Self {
        Self {
            std_mu: Tensor::zeros(&[batch, dim]),
            std_sigma: Tensor::zeros(&[batch, dim]),
        }
    }
}

/// `(sigma + eps1*std_sigma) * (f - mu) / (sigma + EPS_DIV) + (mu + eps2*std_mu)`,
/// channel vectors broadcast over space.
pub fn aum_augment(f: &Var, stats: &FeatureStats, unc: &BatchUncertainty, noise: &AumNoise) -> Result<Var> {
    let s = f.shape();
    if s.len() != 4 {
        return Err(UadError::Shape {
            expected: "(B, D, H, W)".into(),
            got: s.to_vec(),
        });
    }
    let (b, d) = (s[0], s[1]);
    for (name, t) in [
        ("std_mu", &unc.std_mu),
        ("std_sigma", &unc.std_sigma),
        ("eps1", &noise.eps1),
        ("eps2", &noise.eps2),
    ] {
        if t.shape() != [b, d] {
            return Err(UadError::Shape {
                expected: format!("{name} of shape ({b}, {d})"),
                got: t.shape().to_vec(),
            });
        }
    }
    if stats.mu.shape() != [b, d] {
        return Err(UadError::Shape {
            expected: format!("statistics for ({b}, {d})"),
            got: stats.mu.shape().to_vec(),
        });
    }
    let col = |v: &Var| v.reshape(&[b, d, 1, 1]);
    let mu = col(&stats.mu);
    let sigma = col(&stats.sigma);
    let scale_shift = Var::constant(
        noise
            .eps1
            .zip_map(&unc.std_sigma, |e, u| e * u)
            .into_reshaped(&[b, d, 1, 1]),
    );
    let mean_shift = Var::constant(
        noise
            .eps2
            .zip_map(&unc.std_mu, |e, u| e * u)
            .into_reshaped(&[b, d, 1, 1]),
    );
    let normalized = f.sub(&mu).div(&sigma.add_scalar(EPS_DIV));
    let out = sigma.add(&scale_shift).mul(&normalized).add(&mu.add(&mean_shift));
    if !out.value().all_finite() {
        let hw = s[2] * s[3];
        let bad = out
            .value()
            .data()
            .iter()
            .position(|v| !v.is_finite())
            .map(|i| (i / hw) % d)
            .unwrap_or(0);
        return Err(UadError::NonFinite(format!("augmented features, channel {bad}")));
    }
    Ok(out)
}
