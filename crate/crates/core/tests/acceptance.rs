//! Acceptance suite: one PASS/FAIL line per criterion, all tolerances pinned here.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use uad_autograd::{grad, Tensor, Var};
use uad_core::attacks::{benign_refine, pgd_generate, single_step_generate, AttackConfig};
use uad_core::aum::{aum_augment, AumNoise, BatchUncertainty, EPS_DIV};
use uad_core::checkpoint::{state_from_bytes, state_to_bytes};
use uad_core::data::{epoch_order, make_synthetic_splits, IndexedDataset, Splits, SyntheticSpec};
use uad_core::evaluation::{
    disruption_curve, evaluate, normality_check, normality_of_cloud, DisruptionCurve, EvalSettings, NormalitySettings,
};
use uad_core::losses::{
    cross_entropy, d2d_pa_loss, d2d_sa_loss, gaussian_kl, igm_loss, kl_divergence, LossWeights, Ridge,
};
use uad_core::model::{ArchConfig, BranchTag, Classifier, LinearClassifier, NormMode, Session, SplitClassifier};
use uad_core::statistics::{feature_stats, FeatureStats};
use uad_core::training::{
    batches_per_epoch, epoch_batch, lr_at, train, train_step, Method, RunOutput, Sgd, TrainConfig, TrainState,
    METRICS_FILE,
};

// 1, 2
const ORACLE_TOL: f64 = 1e-6;
const KL_ZERO_TOL: f64 = 1e-8;
const STATS_BUDGET_SECS: f64 = 10.0;
// 3
const FD_REL_TOL: f64 = 5e-3;
const FD_STEP: f64 = 1e-5;
const FD_MAX_PARAMS: usize = 100;
const FD_BUDGET_SECS: f64 = 60.0;
// 4
const ITERATES_REQUIRED: usize = 10_000;
const BOX_TOL: f64 = 1e-12;
// 5
const CORNER_RATIO: f64 = 0.95;
const CORNER_EPSILON: f64 = 0.1;
const CORNER_CLASSES: usize = 3;
// 6
const TRADES_TOL: f64 = 1e-6;
const TRADES_STEPS: usize = 50;
// 7
const MOMENT_TOL: f64 = 1e-5;
// 8
const TOY_SEEDS: [u64; 3] = [0, 1, 2];
const TOY_MARGIN_OVER_NATURAL: f64 = 0.10;
const TOY_BUDGET_SECS: f64 = 15.0 * 60.0;
// 10
const CALIBRATION_PASS: f64 = 0.90;
const CALIBRATION_CHANNELS: usize = 1000;
// 11
const RESUME_STEPS: usize = 10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

// ---------------------------------------------------------------- 1

fn brute_force_stats(f: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = f.shape();
    let (b, d, n) = (s[0], s[1], s[2] * s[3]);
    let x = f.data();
    let mut mu = vec![0.0; b * d];
    let mut cov = vec![0.0; b * d * d];
    for i in 0..b {
        for k in 0..d {
            mu[i * d + k] = (0..n).map(|p| x[(i * d + k) * n + p]).sum::<f64>() / n as f64;
        }
        for k in 0..d {
            for l in 0..d {
                let mut acc = 0.0;
                for p in 0..n {
                    acc += (x[(i * d + k) * n + p] - mu[i * d + k]) * (x[(i * d + l) * n + p] - mu[i * d + l]);
                }
                cov[(i * d + k) * d + l] = acc / n as f64;
            }
        }
    }
    (mu, cov)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let b = rng.gen_range(1..=3);
        let d = rng.gen_range(1..=16);
        let h = rng.gen_range(2..=8);
        let w = rng.gen_range(1..=8);
        let scale = rng.gen_range(0.1..3.0);
        let shift = rng.gen_range(-2.0..2.0);
        let f = Tensor::from_fn(&[b, d, h, w], |_| shift + scale * normal(&mut rng));
        let stats = feature_stats(&Var::constant(f.clone())).unwrap();
        let (mu, cov) = brute_force_stats(&f);
        let sigma: Vec<f64> = (0..b * d).map(|j| cov[j * d + j % d].sqrt()).collect();
        worst = worst
            .max(max_diff(stats.mu.value().data(), &mu))
            .max(max_diff(stats.cov.value().data(), &cov))
            .max(max_diff(stats.sigma.value().data(), &sigma));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= ORACLE_TOL && secs < STATS_BUDGET_SECS,
        format!("100 blocks, max abs error {worst:.2e} (tol {ORACLE_TOL:.0e}), {secs:.2} s"),
    )
}

// ---------------------------------------------------------------- 2

fn stats_from(mu: Vec<f64>, cov: Vec<f64>, d: usize) -> FeatureStats {
    let b = mu.len() / d;
    let sigma: Vec<f64> = (0..b * d)
        .map(|j| cov[(j / d) * d * d + (j % d) * d + j % d].sqrt())
        .collect();
    FeatureStats {
        mu: Var::constant(Tensor::new(&[b, d], mu)),
        cov: Var::constant(Tensor::new(&[b, d, d], cov)),
        sigma: Var::constant(Tensor::new(&[b, d], sigma)),
    }
}

fn diag(v: &[f64]) -> Vec<f64> {
    let d = v.len();
    let mut m = vec![0.0; d * d];
    for (i, x) in v.iter().enumerate() {
        m[i * d + i] = *x;
    }
    m
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_diag = 0.0f64;
    for _ in 0..50 {
        let d = rng.gen_range(1..=8);
        let mu_r: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let mu_a: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let var_r: Vec<f64> = (0..d).map(|_| rng.gen_range(0.2..3.0)).collect();
        let var_a: Vec<f64> = (0..d).map(|_| rng.gen_range(0.2..3.0)).collect();
        let closed: f64 = (0..d)
            .map(|i| {
                0.5 * (var_r[i] / var_a[i] - 1.0 + (mu_a[i] - mu_r[i]).powi(2) / var_a[i] + (var_a[i] / var_r[i]).ln())
            })
            .sum();
        let kl = gaussian_kl(
            &stats_from(mu_r, diag(&var_r), d),
            &stats_from(mu_a, diag(&var_a), d),
            Ridge::Fixed(0.0),
        )
        .unwrap()
        .item();
        worst_diag = worst_diag.max((kl - closed).abs());
    }

    let mu: Vec<f64> = (0..6).map(|_| normal(&mut rng)).collect();
    let a = Tensor::from_fn(&[6, 6], |_| normal(&mut rng));
    let spd = a
        .matmul(&a.transpose_last())
        .zip_map(&Tensor::new(&[6, 6], diag(&[0.5; 6])), |x, y| x + y);
    let s = stats_from(mu, spd.data().to_vec(), 6);
    let identical = gaussian_kl(&s, &s, Ridge::Adaptive).unwrap().item().abs();

    let unit = gaussian_kl(
        &stats_from(vec![0.0, 0.0], diag(&[1.0, 1.0]), 2),
        &stats_from(vec![1.0, 0.0], diag(&[1.0, 1.0]), 2),
        Ridge::Fixed(0.0),
    )
    .unwrap()
    .item();

    outcome(
        worst_diag <= ORACLE_TOL && identical <= KL_ZERO_TOL && (unit - 0.5).abs() <= ORACLE_TOL,
        format!("diagonal closed form max err {worst_diag:.2e}; identical {identical:.2e}; unit shift {unit:.9}"),
    )
}

// ---------------------------------------------------------------- 3

struct FdFixture {
    x: Tensor,
    x_ben: Tensor,
    x_adv: Tensor,
    y: Vec<usize>,
    unc: BatchUncertainty,
    noise_ben: AumNoise,
    noise_adv: AumNoise,
}

#[derive(Clone, Copy, Debug)]
enum Term {
    Pa,
    Sa,
    Igm,
}

fn term_value(model: &SplitClassifier, fx: &FdFixture, term: Term, trainable: bool) -> (Var, Vec<Var>) {
    let norm = NormMode::Batch;
    let mut s = Session::new(model, trainable);
    let loss = match term {
        Term::Pa => {
            let clean = s
                .forward(&Var::constant(fx.x.clone()), BranchTag::Primary, norm)
                .unwrap();
            let fb = s
                .forward_stem(&Var::constant(fx.x_ben.clone()), BranchTag::Primary, norm)
                .unwrap();
            let fa = s
                .forward_stem(&Var::constant(fx.x_adv.clone()), BranchTag::Auxiliary, norm)
                .unwrap();
            let fb_aug = aum_augment(&fb, &feature_stats(&fb).unwrap(), &fx.unc, &fx.noise_ben).unwrap();
            let fa_aug = aum_augment(&fa, &feature_stats(&fa).unwrap(), &fx.unc, &fx.noise_adv).unwrap();
            let t = d2d_pa_loss(&mut s, &clean, &fx.y, &fb_aug, &fa_aug, norm).unwrap();
            t.ce_clean.add(&t.kl_pred.scale(LossWeights::default().beta))
        }
        Term::Sa => {
            let fb = s
                .forward_stem(&Var::constant(fx.x_ben.clone()), BranchTag::Primary, norm)
                .unwrap();
            let fa = s
                .forward_stem(&Var::constant(fx.x_adv.clone()), BranchTag::Auxiliary, norm)
                .unwrap();
            d2d_sa_loss(
                &feature_stats(&fb).unwrap(),
                &feature_stats(&fa).unwrap(),
                Ridge::Adaptive,
            )
            .unwrap()
        }
        Term::Igm => igm_loss(&mut s, &fx.x_ben, &fx.x_adv, &fx.y, norm).unwrap(),
    };
    (loss, s.params().to_vec())
}

fn fd_arch() -> ArchConfig {
    ArchConfig {
        in_channels: 1,
        image_size: 8,
        widths: vec![2, 1, 2],
        num_classes: 3,
        aum_depth: 1,
        init_seed: 3,
        ..ArchConfig::default()
    }
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut model = SplitClassifier::new(fd_arch()).unwrap();
    let n_params = model.num_parameters();
    // move norm affines off their identity initialisation so every path is exercised
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v += 0.1 * normal(&mut rng);
        }
    }
    let b = 4;
    let x = Tensor::from_fn(&[b, 1, 8, 8], |_| rng.gen_range(0.0..1.0));
    let x_ben = x.map(|v| v + 0.02);
    let x_adv = Tensor::from_fn(&[b, 1, 8, 8], |i| x.data()[i] + rng.gen_range(-0.03..0.03));
    let d = model.config().feature_geometry().0;
    let fx = FdFixture {
        x,
        x_ben,
        x_adv,
        y: vec![0, 1, 2, 1],
        unc: BatchUncertainty {
            std_mu: Tensor::from_fn(&[b, d], |_| rng.gen_range(0.01..0.2)),
            std_sigma: Tensor::from_fn(&[b, d], |_| rng.gen_range(0.01..0.2)),
        },
        noise_ben: AumNoise::sample(b, d, &mut rng),
        noise_adv: AumNoise::sample(b, d, &mut rng),
    };
    let mut report = Vec::new();
    let mut pass = n_params <= FD_MAX_PARAMS;
    for term in [Term::Pa, Term::Sa, Term::Igm] {
        let (loss, params) = term_value(&model, &fx, term, true);
        let refs: Vec<&Var> = params.iter().collect();
        let analytic: Vec<f64> = grad(&loss, &refs, false)
            .into_iter()
            .zip(&params)
            .flat_map(|(g, p)| match g {
                Some(g) => g.value().data().to_vec(),
                None => vec![0.0; p.value().len()],
            })
            .collect();
        let mut numeric = Vec::with_capacity(analytic.len());
        for k in 0..model.params().len() {
            for j in 0..model.params()[k].len() {
                let orig = model.params()[k].data()[j];
                model.params_mut()[k].data_mut()[j] = orig + FD_STEP;
                let up = term_value(&model, &fx, term, false).0.item();
                model.params_mut()[k].data_mut()[j] = orig - FD_STEP;
                let down = term_value(&model, &fx, term, false).0.item();
                model.params_mut()[k].data_mut()[j] = orig;
                numeric.push((up - down) / (2.0 * FD_STEP));
            }
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        let rel = diff / norm.max(1e-12);
        pass &= rel <= FD_REL_TOL && norm > 0.0;
        report.push(format!("{term:?} rel {rel:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < FD_BUDGET_SECS;
    outcome(
        pass,
        format!(
            "{n_params} params; {} (tol {FD_REL_TOL:.0e}); {secs:.1} s",
            report.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 4

fn small_arch(classes: usize) -> ArchConfig {
    ArchConfig {
        image_size: 8,
        widths: vec![4, 8, 8, 8],
        num_classes: classes,
        aum_depth: 1,
        ..ArchConfig::default()
    }
}

fn criterion_4() -> Outcome {
    let model = SplitClassifier::new(small_arch(4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = AttackConfig::default();
    let mut checked = 0;
    let mut violations = 0;
    let mut check = |x: &Tensor, it: &Tensor| {
        for (a, b) in x.data().iter().zip(it.data()) {
            checked += 1;
            let outside_ball = (a - b).abs() > cfg.epsilon + BOX_TOL;
            let outside_box = *b < 0.0 || *b > 1.0;
            if outside_ball || outside_box {
                violations += 1;
            }
        }
    };
    let mut iterates = 0;
    for round in 0..10 {
        // include saturated pixels so the box constraint binds
        let x = Tensor::from_fn(&[100, 3, 8, 8], |i| match (i + round) % 7 {
            0 => 0.0,
            1 => 1.0,
            _ => rng.gen_range(0.0..1.0),
        });
        let rec = pgd_generate(&model, &x, &cfg, NormMode::Batch, &mut rng).unwrap();
        for it in rec.intermediates.iter().chain(std::iter::once(&rec.adversarial)) {
            check(&x, it);
            iterates += x.shape()[0];
        }
        let labels: Vec<usize> = (0..100).map(|i| i % 4).collect();
        let refined = benign_refine(&model, &x, &labels, &cfg, NormMode::Batch).unwrap();
        check(&x, &refined);
    }
    let single = AttackConfig {
        steps: 1,
        step_size: cfg.epsilon,
        ..cfg
    };
    let x = Tensor::from_fn(&[16, 3, 8, 8], |_| rng.gen_range(0.0..1.0));
    let rec = single_step_generate(&model, &x, &single, NormMode::Batch, &mut rng).unwrap();
    check(&x, &rec.adversarial);
    let single_ok = rec.intermediates.is_empty();
    outcome(
        iterates >= ITERATES_REQUIRED && violations == 0 && single_ok,
        format!(
            "{iterates} PGD iterates ({checked} pixel checks incl. refinements), {violations} violations; single-step intermediates {}",
            rec.intermediates.len()
        ),
    )
}

// ---------------------------------------------------------------- 5

fn kl_rows(reference: &Tensor, other: &Tensor) -> Vec<f64> {
    let c = reference.shape()[1];
    let lsm = |row: &[f64]| {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        row.iter().map(|v| v - z).collect::<Vec<_>>()
    };
    reference
        .data()
        .chunks(c)
        .zip(other.data().chunks(c))
        .map(|(r, o)| {
            let (lp, lq) = (lsm(r), lsm(o));
            lp.iter().zip(&lq).map(|(p, q)| p.exp() * (p - q)).sum()
        })
        .collect()
}

fn corner_ratios(classes: usize, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = LinearClassifier {
        weight: Tensor::from_fn(&[2, classes], |_| scale * normal(&mut rng)),
        bias: Tensor::from_fn(&[classes], |_| normal(&mut rng)),
    };
    let n = 100;
    let eps = CORNER_EPSILON;
    // interior points, so every sign corner is a valid input
    let x = Tensor::from_fn(&[n, 2], |_| rng.gen_range(eps..1.0 - eps));
    let cfg = AttackConfig {
        epsilon: eps,
        step_size: eps / 4.0,
        steps: 10,
        ..AttackConfig::default()
    };
    let rec = pgd_generate(&model, &x, &cfg, NormMode::Batch, &mut rng).unwrap();
    let logits = |t: &Tensor| {
        model
            .logits(&Var::constant(t.clone()), BranchTag::Primary, NormMode::Batch)
            .unwrap()
            .value()
            .clone()
    };
    let clean = logits(&x);
    let achieved = kl_rows(&clean, &logits(&rec.adversarial));
    let mut best = vec![0.0f64; n];
    for (s0, s1) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
        let corner = Tensor::from_fn(&[n, 2], |i| x.data()[i] + if i % 2 == 0 { s0 } else { s1 } * eps);
        for (b, v) in best.iter_mut().zip(kl_rows(&clean, &logits(&corner))) {
            *b = b.max(v);
        }
    }
    achieved.iter().zip(&best).map(|(a, b)| a / b).collect()
}

fn criterion_5() -> Outcome {
    let ratios = corner_ratios(CORNER_CLASSES, 1.0, 5);
    let n = ratios.len();
    let worst = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let below = ratios.iter().filter(|r| **r < CORNER_RATIO).count();
    let mean = ratios.iter().sum::<f64>() / n as f64;
    outcome(
        below == 0,
        format!(
            "{n} instances, {CORNER_CLASSES} classes, eps {CORNER_EPSILON}: min ratio {worst:.4}, mean {mean:.4}, {below} below {CORNER_RATIO}"
        ),
    )
}

// ---------------------------------------------------------------- 6

fn degenerate(cfg: &TrainConfig) -> TrainConfig {
    let mut c = cfg.clone();
    c.method = Method::UadAt;
    c.aum = false;
    c.refine = false;
    c.weights.lambda1 = 0.0;
    c.weights.lambda2 = 0.0;
    c
}

/// Plain TRADES written against library primitives only.
fn reference_trades_step(
    model: &mut SplitClassifier,
    opt: &mut Sgd,
    rng: &mut ChaCha8Rng,
    cfg: &TrainConfig,
    x: &Tensor,
    y: &[usize],
    lr: f64,
) -> f64 {
    let rec = pgd_generate(&*model, x, &cfg.attack, NormMode::Batch, rng).unwrap();
    let (grads, updates, total) = {
        let mut s = Session::new(model, true);
        let clean = s
            .forward(&Var::constant(x.clone()), BranchTag::Primary, NormMode::BatchTracked)
            .unwrap();
        let adv = s
            .forward(
                &Var::constant(rec.adversarial.clone()),
                BranchTag::Auxiliary,
                NormMode::BatchTracked,
            )
            .unwrap();
        let loss = cross_entropy(&clean, y)
            .unwrap()
            .add(&kl_divergence(&clean, &adv).unwrap().scale(cfg.weights.beta));
        let params = s.params().to_vec();
        let refs: Vec<&Var> = params.iter().collect();
        let grads: Vec<Tensor> = grad(&loss, &refs, false)
            .into_iter()
            .zip(&params)
            .map(|(g, p)| g.map(|g| g.value().clone()).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        (grads, s.finish(), loss.item())
    };
    opt.step(model.params_mut(), &grads, lr);
    model.apply_running_updates(updates);
    total
}

fn criterion_6() -> Outcome {
    let spec = SyntheticSpec {
        classes: 4,
        image_size: 8,
        train_per_class: 100,
        ..SyntheticSpec::default()
    };
    let arch = small_arch(4);
    let data = make_synthetic_splits(&spec, &arch).unwrap().train;
    let cfg = degenerate(&TrainConfig {
        epochs: 4,
        batch_size: 32,
        seed: 6,
        ..TrainConfig::default()
    });
    let mut state = TrainState::new(cfg.clone(), arch.clone()).unwrap();
    let mut ref_model = state.model.clone();
    let mut ref_opt = state.optimizer.clone();
    let mut ref_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let per_epoch = batches_per_epoch(data.len(), cfg.batch_size);
    let total_steps = (per_epoch * cfg.epochs as usize) as u64;
    let mut worst = 0.0f64;
    let mut step = 0;
    'outer: for epoch in 1..=cfg.epochs {
        let order = epoch_order(data.len(), cfg.seed, epoch);
        for k in 0..per_epoch {
            if step == TRADES_STEPS {
                break 'outer;
            }
            let batch = epoch_batch(&cfg, &data, &order, epoch, k);
            let lr = lr_at(cfg.schedule, state.step, total_steps, cfg.lr_peak);
            let ours = train_step(&mut state, &batch, lr).unwrap().total;
            state.step += 1;
            let reference =
                reference_trades_step(&mut ref_model, &mut ref_opt, &mut ref_rng, &cfg, &batch.x, &batch.y, lr);
            worst = worst.max((ours - reference).abs());
            step += 1;
        }
        state.epoch = epoch;
    }
    outcome(
        step == TRADES_STEPS && worst <= TRADES_TOL,
        format!("{step} steps, max |total - reference| {worst:.2e} (tol {TRADES_TOL:.0e})"),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (b, d, h, w) = (4, 6, 8, 8);
    let f = Tensor::from_fn(&[b, d, h, w], |i| 0.3 * (i % 5) as f64 + normal(&mut rng));
    let fv = Var::constant(f.clone());
    let stats = feature_stats(&fv).unwrap();

    let out = aum_augment(
        &fv,
        &stats,
        &BatchUncertainty::zeros(b, d),
        &AumNoise::sample(b, d, &mut rng),
    )
    .unwrap();
    let mu = stats.mu.value().data().to_vec();
    let sigma = stats.sigma.value().data().to_vec();
    let n = h * w;
    let mut bound = 0.0f64;
    for (j, chunk) in f.data().chunks(n).enumerate() {
        for v in chunk {
            bound = bound.max(((v - mu[j]) / sigma[j]).abs());
        }
    }
    let bound = EPS_DIV * bound;
    let recon = max_diff(out.value().data(), f.data());

    let unc = BatchUncertainty {
        std_mu: Tensor::from_fn(&[b, d], |_| rng.gen_range(0.0..0.5)),
        std_sigma: Tensor::from_fn(&[b, d], |_| rng.gen_range(0.0..0.3)),
    };
    let noise = AumNoise::sample(b, d, &mut rng);
    let moved = aum_augment(&fv, &stats, &unc, &noise).unwrap();
    let after = feature_stats(&moved).unwrap();
    let target: Vec<f64> = (0..b * d)
        .map(|j| mu[j] + noise.eps2.data()[j] * unc.std_mu.data()[j])
        .collect();
    let moment = max_diff(after.mu.value().data(), &target);
    outcome(
        recon <= bound && moment <= MOMENT_TOL,
        format!("reconstruction err {recon:.2e} <= bound {bound:.2e}; mean transfer err {moment:.2e} (tol {MOMENT_TOL:.0e})"),
    )
}

// ---------------------------------------------------------------- 8, 9

/// Toy regime shared by criteria 8 and 9.
fn toy_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        classes: 4,
        image_size: 8,
        train_per_class: 500,
        val_per_class: 50,
        test_per_class: 100,
        seed,
        contrast: 0.15,
        ..SyntheticSpec::default()
    }
}

fn toy_arch() -> ArchConfig {
    ArchConfig {
        image_size: 8,
        widths: vec![8, 16, 16, 16],
        num_classes: 4,
        aum_depth: 1,
        shared_affine: true,
        ..ArchConfig::default()
    }
}

fn toy_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 20,
        batch_size: 64,
        lr_peak: 0.05,
        seed,
        ..TrainConfig::default()
    }
}

struct ToyRun {
    model: SplitClassifier,
    clean: f64,
    robust: f64,
}

fn toy_run(cfg: TrainConfig, splits: &Splits) -> ToyRun {
    let eval = EvalSettings {
        epsilon: cfg.attack.epsilon,
        steps: 20,
        ..EvalSettings::default()
    };
    let seed = cfg.seed;
    let mut state = TrainState::new(cfg, toy_arch()).unwrap();
    train(&mut state, &splits.train, &splits.val, &RunOutput::default()).unwrap();
    let report = evaluate(&state.model, &splits.test, &eval, 1000 + seed).unwrap();
    ToyRun {
        model: state.model,
        clean: report.clean_acc,
        robust: report.robust_acc,
    }
}

struct ToyResults {
    natural: Vec<ToyRun>,
    control: Vec<ToyRun>,
    uad: Vec<ToyRun>,
    test: IndexedDataset,
    secs: f64,
}

fn toy_experiment() -> ToyResults {
    let start = Instant::now();
    let splits = make_synthetic_splits(&toy_spec(0), &toy_arch()).unwrap();
    let mut res = ToyResults {
        natural: vec![],
        control: vec![],
        uad: vec![],
        test: splits.test.clone(),
        secs: 0.0,
    };
    for seed in TOY_SEEDS {
        let base = toy_train_config(seed);
        res.natural.push(toy_run(
            TrainConfig {
                method: Method::Natural,
                ..base.clone()
            },
            &splits,
        ));
        res.control.push(toy_run(degenerate(&base), &splits));
        res.uad.push(toy_run(base, &splits));
        eprintln!(
            "  seed {seed}: robust natural {:.3} control {:.3} uad {:.3}",
            res.natural.last().unwrap().robust,
            res.control.last().unwrap().robust,
            res.uad.last().unwrap().robust
        );
    }
    res.secs = start.elapsed().as_secs_f64();
    res
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let all: Vec<f64> = v.collect();
    all.iter().sum::<f64>() / all.len() as f64
}

fn criterion_8(res: &ToyResults) -> Outcome {
    let nat = mean(res.natural.iter().map(|r| r.robust));
    let ctl = mean(res.control.iter().map(|r| r.robust));
    let uad = mean(res.uad.iter().map(|r| r.robust));
    let clean = mean(res.uad.iter().map(|r| r.clean));
    outcome(
        uad >= nat + TOY_MARGIN_OVER_NATURAL && uad >= ctl && res.secs < TOY_BUDGET_SECS,
        format!(
            "PGD-20 robust acc (3 seeds): UAD-AT {uad:.4} (clean {clean:.4}), control {ctl:.4}, natural {nat:.4}; {:.0} s",
            res.secs
        ),
    )
}

fn criterion_9(res: &ToyResults) -> Outcome {
    let radii: Vec<f64> = [-8.0, 0.0, 2.0, 4.0, 6.0, 8.0].iter().map(|r| r / 255.0).collect();
    let data = res.test.head(200);
    let curve = |m: &SplitClassifier| -> DisruptionCurve { disruption_curve(m, &data, &radii, 10, 9).unwrap() };
    let uad_curves: Vec<DisruptionCurve> = res.uad.iter().map(|r| curve(&r.model)).collect();
    let ctl_curves: Vec<DisruptionCurve> = res.control.iter().map(|r| curve(&r.model)).collect();
    let c = &uad_curves[0];
    let positive = 2..radii.len();
    let nondecreasing = |v: &[f64]| v[positive.clone()].windows(2).all(|w| w[1] >= w[0]);
    let trend = nondecreasing(&c.variance) && nondecreasing(&c.grad_norm);
    let refine = c.grad_norm[0] <= c.grad_norm[1];
    let last = radii.len() - 1;
    let var_u = mean(uad_curves.iter().map(|c| c.variance_increment[last]));
    let var_c = mean(ctl_curves.iter().map(|c| c.variance_increment[last]));
    let g_u = mean(uad_curves.iter().map(|c| c.grad_norm_increment[last]));
    let g_c = mean(ctl_curves.iter().map(|c| c.grad_norm_increment[last]));
    outcome(
        trend && refine && var_u <= var_c && g_u <= g_c,
        format!(
            "variance {:?}, grad norm {:?} over radii -8,0,2,4,6,8 (/255); increments at 8/255 UAD-AT var {var_u:.4} grad {g_u:.4} vs control var {var_c:.4} grad {g_c:.4}",
            c.variance.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            c.grad_norm.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------- 10

fn criterion_10(res: &ToyResults) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = 500;
    let means: Vec<f64> = (0..CALIBRATION_CHANNELS).map(|_| normal(&mut rng)).collect();
    let scales: Vec<f64> = (0..CALIBRATION_CHANNELS).map(|_| rng.gen_range(0.1..2.0)).collect();
    let cloud: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..CALIBRATION_CHANNELS)
                .map(|k| means[k] + scales[k] * normal(&mut rng))
                .collect()
        })
        .collect();
    let cal = normality_of_cloud(&cloud, 0.05).unwrap();

    let settings = NormalitySettings::default();
    let model = &res.uad[0].model;
    let images = 3;
    let mut fractions = Vec::new();
    let mut ps = Vec::new();
    for i in 0..images {
        let x = res.test.batch(&[i]).x;
        let r = normality_check(model, &x, &settings, 100 + i as u64).unwrap();
        fractions.push(r.pass_fraction);
        ps.push(r.mean_p);
    }
    outcome(
        cal.pass_fraction >= CALIBRATION_PASS && cal.channels_tested == CALIBRATION_CHANNELS,
        format!(
            "calibration pass fraction {:.3} over {} channels; toy model ({images} images x {} adversaries): pass fractions {:?}, mean p {:?} (full-scale reference 0.974 / 0.5137, not asserted)",
            cal.pass_fraction,
            cal.channels_tested,
            settings.num_adversaries,
            fractions.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>(),
            ps.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------------------------------- 11

fn small_run_config() -> (TrainConfig, ArchConfig, Splits) {
    let spec = SyntheticSpec {
        classes: 4,
        image_size: 8,
        train_per_class: 100,
        val_per_class: 10,
        test_per_class: 10,
        ..SyntheticSpec::default()
    };
    let arch = small_arch(4);
    let splits = make_synthetic_splits(&spec, &arch).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 16,
        lr_peak: 0.05,
        seed: 11,
        eval: EvalSettings {
            steps: 5,
            ..EvalSettings::default()
        },
        ..TrainConfig::default()
    };
    (cfg, arch, splits)
}

fn criterion_11() -> Outcome {
    let (cfg, arch, splits) = small_run_config();
    let logs: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let mut state = TrainState::new(cfg.clone(), arch.clone()).unwrap();
            train(
                &mut state,
                &splits.train,
                &splits.val,
                &RunOutput {
                    dir: Some(dir.path().to_path_buf()),
                    wall_time: false,
                },
            )
            .unwrap();
            std::fs::read(dir.path().join(METRICS_FILE)).unwrap()
        })
        .collect();
    let identical_logs = logs[0] == logs[1] && !logs[0].is_empty();

    // one full epoch so the history store holds data, then a few steps into the next
    let data = &splits.train;
    let per_epoch = batches_per_epoch(data.len(), cfg.batch_size);
    let total = (per_epoch * cfg.epochs as usize) as u64;
    let mut state = TrainState::new(cfg.clone(), arch).unwrap();
    let run = |state: &mut TrainState, epoch: u32, ks: std::ops::Range<usize>| -> Vec<f64> {
        let order = epoch_order(data.len(), cfg.seed, epoch);
        ks.map(|k| {
            let batch = epoch_batch(&cfg, data, &order, epoch, k);
            let lr = lr_at(cfg.schedule, state.step, total, cfg.lr_peak);
            let t = train_step(state, &batch, lr).unwrap().total;
            state.step += 1;
            t
        })
        .collect()
    };
    run(&mut state, 1, 0..per_epoch);
    state.epoch = 1;
    run(&mut state, 2, 0..3);
    let mut restored = state_from_bytes(&state_to_bytes(&state)).unwrap();
    let a = run(&mut state, 2, 3..3 + RESUME_STEPS);
    let b = run(&mut restored, 2, 3..3 + RESUME_STEPS);
    let bit_exact = a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits())
        && state.model.params() == restored.model.params()
        && state.model.running_stats() == restored.model.running_stats()
        && state.history == restored.history
        && state.optimizer == restored.optimizer;
    outcome(
        identical_logs && bit_exact && a.len() == RESUME_STEPS,
        format!(
            "metrics logs identical: {identical_logs} ({} bytes); {RESUME_STEPS} resumed steps bit-exact: {bit_exact}",
            logs[0].len()
        ),
    )
}

// ----------------------------------------------------------------

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let names = [
        "statistics oracle",
        "gaussian KL oracle",
        "gradient correctness",
        "attack constraints",
        "attack optimality",
        "TRADES degeneration",
        "AUM identity and moment transfer",
        "end-to-end toy robustness",
        "disruption trends",
        "normality harness",
        "determinism and persistence",
    ];
    let mut failed = 0;
    let mut report = |n: usize, o: Outcome| {
        println!(
            "[{}] {n:>2} {}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            names[n - 1],
            o.detail
        );
        if !o.pass {
            failed += 1;
        }
    };
    let quick: [(usize, fn() -> Outcome); 7] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
    ];
    for (n, f) in quick {
        if wanted(n) {
            report(n, f());
        }
    }
    if wanted(8) || wanted(9) || wanted(10) {
        let toy = toy_experiment();
        for (n, f) in [
            (8, criterion_8 as fn(&ToyResults) -> Outcome),
            (9, criterion_9),
            (10, criterion_10),
        ] {
            if wanted(n) {
                report(n, f(&toy));
            }
        }
    }
    if wanted(11) {
        report(11, criterion_11());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
