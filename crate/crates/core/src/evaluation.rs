//! Robust accuracy under PGD, feature-disruption curves and normality
//! checks of adversarial feature clouds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use uad_autograd::{grad, no_grad, Tensor, Var};

use crate::attacks::{ce_attack, kl_attack_uniform, AttackStart};
use crate::data::IndexedDataset;
use crate::error::{Result, UadError};
use crate::losses::{cross_entropy_per_sample, cross_entropy_sum};
use crate::model::{BranchTag, Classifier, NormMode, Session, SplitClassifier};
use crate::shapiro::shapiro_wilk;
use crate::statistics::feature_stats;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub restarts: usize,
    pub batch_size: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            steps: 20,
            restarts: 1,
            batch_size: 256,
        }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(UadError::config("eval.epsilon", "must be >= 0"));
        }
        if !(self.step_size >= 0.0) {
            return Err(UadError::config("eval.step_size", "must be >= 0"));
        }
        if self.restarts == 0 {
            return Err(UadError::config("eval.restarts", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(UadError::config("eval.batch_size", "must be >= 1"));
        }
        Ok(())
    }
}

/// 95% Wilson score interval for `k` successes out of `n`.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = 1.959_963_984_540_054;
    let n_f = n as f64;
    let p = k as f64 / n_f;
    let denom = 1.0 + z * z / n_f;
    let centre = (p + z * z / (2.0 * n_f)) / denom;
    let half = z * (p * (1.0 - p) / n_f + z * z / (4.0 * n_f * n_f)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub total: usize,
    pub clean_correct: usize,
    pub robust_correct: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustReport {
    pub settings: EvalSettings,
    pub n: usize,
    pub clean_correct: usize,
    pub robust_correct: usize,
    pub clean_acc: f64,
    pub robust_acc: f64,
    pub clean_ci: (f64, f64),
    pub robust_ci: (f64, f64),
    pub per_class: Vec<ClassCounts>,
}

impl RobustReport {
    /// `name,value,ci_low,ci_high` lines.
    pub fn records(&self) -> Vec<String> {
        let mut out = vec![
            format!("clean_acc,{},{},{}", self.clean_acc, self.clean_ci.0, self.clean_ci.1),
            format!(
                "robust_acc,{},{},{}",
                self.robust_acc, self.robust_ci.0, self.robust_ci.1
            ),
        ];
        for (c, counts) in self.per_class.iter().enumerate() {
            let acc = |k: usize| {
                if counts.total == 0 {
                    0.0
                } else {
                    k as f64 / counts.total as f64
                }
            };
            let (cl, ch) = wilson_interval(counts.clean_correct, counts.total);
            let (rl, rh) = wilson_interval(counts.robust_correct, counts.total);
            out.push(format!("class{c}_clean_acc,{},{cl},{ch}", acc(counts.clean_correct)));
            out.push(format!("class{c}_robust_acc,{},{rl},{rh}", acc(counts.robust_correct)));
        }
        out
    }
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

fn inference_logits<M: Classifier + ?Sized>(model: &M, x: &Tensor) -> Result<Tensor> {
    no_grad(|| {
        Ok(model
            .logits(&Var::constant(x.clone()), BranchTag::Primary, NormMode::Running)?
            .value()
            .clone())
    })
}

/// Clean and worst-case-over-restarts PGD accuracy on the true-label
/// cross-entropy, PRIMARY branch, running statistics.
pub fn evaluate<M: Classifier + ?Sized>(
    model: &M,
    data: &IndexedDataset,
    settings: &EvalSettings,
    seed: u64,
) -> Result<RobustReport> {
    settings.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_class = vec![
        ClassCounts {
            total: 0,
            clean_correct: 0,
            robust_correct: 0,
        };
        data.classes
    ];
    let n = data.len();
    for lo in (0..n).step_by(settings.batch_size) {
        let idx: Vec<usize> = (lo..(lo + settings.batch_size).min(n)).collect();
        let batch = data.batch(&idx);
        let clean = argmax_rows(&inference_logits(model, &batch.x)?);
        let mut robust = vec![true; idx.len()];
        for r in 0..settings.restarts {
            let start = if r == 0 {
                AttackStart::Gaussian(0.001)
            } else {
                AttackStart::Uniform
            };
            let adv = ce_attack(
                model,
                &batch.x,
                &batch.y,
                settings.epsilon,
                settings.step_size,
                settings.steps,
                start,
                true,
                NormMode::Running,
                &mut rng,
            )?;
            let pred = argmax_rows(&inference_logits(model, &adv)?);
            for (k, p) in pred.iter().enumerate() {
                robust[k] &= *p == batch.y[k];
            }
        }
        for (k, &y) in batch.y.iter().enumerate() {
            let c = &mut per_class[y];
            c.total += 1;
            c.clean_correct += usize::from(clean[k] == y);
            c.robust_correct += usize::from(robust[k]);
        }
    }
    let clean_correct: usize = per_class.iter().map(|c| c.clean_correct).sum();
    let robust_correct: usize = per_class.iter().map(|c| c.robust_correct).sum();
    let frac = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    Ok(RobustReport {
        settings: *settings,
        n,
        clean_correct,
        robust_correct,
        clean_acc: frac(clean_correct),
        robust_acc: frac(robust_correct),
        clean_ci: wilson_interval(clean_correct, n),
        robust_ci: wilson_interval(robust_correct, n),
        per_class,
    })
}

/// Feature variance and input-gradient norm as a function of perturbation radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisruptionCurve {
    pub radii: Vec<f64>,
    /// Mean per-instance `trace(cov) / D` at the augmentation depth.
    pub variance: Vec<f64>,
    /// Mean per-instance `||grad_x CE||_2`.
    pub grad_norm: Vec<f64>,
    /// Relative change against the unperturbed value.
    pub variance_increment: Vec<f64>,
    pub grad_norm_increment: Vec<f64>,
    /// Mean gradient norm of the higher-loss half of the clean samples.
    pub grad_norm_top_half: Vec<f64>,
    /// Mean gradient norm of the lower-loss half.
    pub grad_norm_bottom_half: Vec<f64>,
}

impl DisruptionCurve {
    /// Header plus one row per radius.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "radius,variance,variance_increment,grad_norm,grad_norm_increment,grad_norm_top_half,grad_norm_bottom_half\n",
        );
        for i in 0..self.radii.len() {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.radii[i],
                self.variance[i],
                self.variance_increment[i],
                self.grad_norm[i],
                self.grad_norm_increment[i],
                self.grad_norm_top_half[i],
                self.grad_norm_bottom_half[i]
            ));
        }
        s
    }
}

struct PointMeasure {
    variance: Vec<f64>,
    grad_norm: Vec<f64>,
}

fn measure(model: &SplitClassifier, x: &Tensor, y: &[usize]) -> Result<PointMeasure> {
    let mut session = Session::new(model, false);
    let xv = Var::parameter(x.clone());
    let f = session.forward_stem(&xv, BranchTag::Primary, NormMode::Running)?;
    let stats = feature_stats(&f)?;
    let (b, d) = (stats.batch(), stats.dim());
    let cov = stats.cov.value();
    let variance = (0..b)
        .map(|i| (0..d).map(|k| cov.data()[i * d * d + k * d + k]).sum::<f64>() / d as f64)
        .collect();
    let logits = session.forward_tail_head(&f, BranchTag::Primary, NormMode::Running)?;
    let loss = cross_entropy_sum(&logits, y)?;
    let g = grad(&loss, &[&xv], false)[0]
        .clone()
        .map(|g| g.value().clone())
        .unwrap_or_else(|| Tensor::zeros(x.shape()));
    let per = g.len() / b;
    let grad_norm = g
        .data()
        .chunks(per)
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    Ok(PointMeasure { variance, grad_norm })
}

/// Perturb every sample at each radius (positive: cross-entropy ascent,
/// negative: descent) and measure feature variance and gradient norm.
pub fn disruption_curve(
    model: &SplitClassifier,
    data: &IndexedDataset,
    radii: &[f64],
    steps: usize,
    seed: u64,
) -> Result<DisruptionCurve> {
    if data.is_empty() {
        return Err(UadError::InvalidArgument("disruption curve needs samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..data.len()).collect();
    let batch = data.batch(&all);
    let clean_loss = cross_entropy_per_sample(&inference_logits(model, &batch.x)?, &batch.y);
    let mut ranked: Vec<usize> = all.clone();
    ranked.sort_by(|&a, &b| clean_loss[b].total_cmp(&clean_loss[a]).then(a.cmp(&b)));
    let half = data.len().div_ceil(2);
    let top: Vec<usize> = ranked[..half].to_vec();
    let bottom: Vec<usize> = ranked[half..].to_vec();
    let mean_over = |v: &[f64], idx: &[usize]| {
        if idx.is_empty() {
            0.0
        } else {
            idx.iter().map(|&i| v[i]).sum::<f64>() / idx.len() as f64
        }
    };

    let mut curve = DisruptionCurve {
        radii: radii.to_vec(),
        variance: vec![],
        grad_norm: vec![],
        variance_increment: vec![],
        grad_norm_increment: vec![],
        grad_norm_top_half: vec![],
        grad_norm_bottom_half: vec![],
    };
    let baseline = measure(model, &batch.x, &batch.y)?;
    let base_var = mean_over(&baseline.variance, &all);
    let base_grad = mean_over(&baseline.grad_norm, &all);
    for &r in radii {
        let m = if r == 0.0 {
            PointMeasure {
                variance: baseline.variance.clone(),
                grad_norm: baseline.grad_norm.clone(),
            }
        } else {
            let eps = r.abs();
            let x = ce_attack(
                model,
                &batch.x,
                &batch.y,
                eps,
                eps / 4.0,
                steps,
                AttackStart::Gaussian(0.0),
                r > 0.0,
                NormMode::Running,
                &mut rng,
            )?;
            measure(model, &x, &batch.y)?
        };
        let v = mean_over(&m.variance, &all);
        let g = mean_over(&m.grad_norm, &all);
        let rel = |value: f64, base: f64| if base == 0.0 { 0.0 } else { (value - base) / base };
        curve.variance.push(v);
        curve.grad_norm.push(g);
        curve.variance_increment.push(rel(v, base_var));
        curve.grad_norm_increment.push(rel(g, base_grad));
        curve.grad_norm_top_half.push(mean_over(&m.grad_norm, &top));
        curve.grad_norm_bottom_half.push(mean_over(&m.grad_norm, &bottom));
    }
    Ok(curve)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalityReport {
    pub num_adversaries: usize,
    pub channels_tested: usize,
    pub channels_degenerate: usize,
    pub channels_passing: usize,
    pub pass_fraction: f64,
    pub mean_p: f64,
    /// The example counts as passing when its mean p-value exceeds `alpha`.
    pub example_passes: bool,
}

/// Shapiro–Wilk test per channel over a `(N, D)` cloud of channel means.
pub fn normality_of_cloud(cloud: &[Vec<f64>], alpha: f64) -> Result<NormalityReport> {
    let n = cloud.len();
    let d = cloud.first().map_or(0, Vec::len);
    let mut tested = 0;
    let mut degenerate = 0;
    let mut passing = 0;
    let mut p_sum = 0.0;
    for k in 0..d {
        let column: Vec<f64> = cloud.iter().map(|row| row[k]).collect();
        let lo = column.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo <= 1e-12 * hi.abs().max(lo.abs()).max(1.0) {
            degenerate += 1;
            continue;
        }
        let r = shapiro_wilk(&column)?;
        tested += 1;
        p_sum += r.p_value;
        passing += usize::from(r.p_value > alpha);
    }
    let mean_p = if tested == 0 { 0.0 } else { p_sum / tested as f64 };
    Ok(NormalityReport {
        num_adversaries: n,
        channels_tested: tested,
        channels_degenerate: degenerate,
        channels_passing: passing,
        pass_fraction: if tested == 0 {
            0.0
        } else {
            passing as f64 / tested as f64
        },
        mean_p,
        example_passes: tested > 0 && mean_p > alpha,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalitySettings {
    pub num_adversaries: usize,
    pub alpha: f64,
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    /// Adversaries generated per forward batch.
    pub chunk: usize,
}

impl Default for NormalitySettings {
    fn default() -> Self {
        Self {
            num_adversaries: 500,
            alpha: 0.05,
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            steps: 10,
            chunk: 100,
        }
    }
}

/// Random-start adversaries of one image, their channel means at the
/// augmentation depth, and a per-channel normality test.
pub fn normality_check(
    model: &SplitClassifier,
    x: &Tensor,
    settings: &NormalitySettings,
    seed: u64,
) -> Result<NormalityReport> {
    let s = x.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(UadError::Shape {
            expected: "a single image (1, C, H, W)".into(),
            got: s.to_vec(),
        });
    }
    if settings.num_adversaries < 20 {
        return Err(UadError::InvalidArgument(
            "normality check needs at least 20 adversaries".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = Vec::with_capacity(settings.num_adversaries);
    let mut remaining = settings.num_adversaries;
    while remaining > 0 {
        let k = remaining.min(settings.chunk.max(1));
        let reps = Tensor::from_fn(&[k, s[1], s[2], s[3]], |i| x.data()[i % x.len()]);
        let adv = kl_attack_uniform(
            model,
            &reps,
            settings.epsilon,
            settings.step_size,
            settings.steps,
            BranchTag::Primary,
            NormMode::Running,
            &mut rng,
        )?;
        let stats = no_grad(|| {
            let mut session = Session::new(model, false);
            let f = session.forward_stem(&Var::constant(adv), BranchTag::Primary, NormMode::Running)?;
            feature_stats(&f)
        })?;
        cloud.extend(stats.summaries().into_iter().map(|st| st.mu));
        remaining -= k;
    }
    normality_of_cloud(&cloud, settings.alpha)
}
