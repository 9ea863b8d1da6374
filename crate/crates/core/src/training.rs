//! The training loop: adversary generation, refinement, statistics,
//! uncertainty-aware augmentation, loss assembly and the parameter update.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use uad_autograd::{grad, no_grad, Tensor, Var};

use crate::attacks::{benign_refine, pgd_generate, single_step_generate, AttackConfig};
use crate::aum::{aum_augment, AumNoise, BatchUncertainty};
use crate::checkpoint;
use crate::data::{augment_crop_flip, epoch_order, Batch, IndexedDataset};
use crate::error::{Result, UadError};
use crate::evaluation::{evaluate, EvalSettings};
use crate::losses::{
    cross_entropy, d2d_sa_loss, igm_from_gradients, input_gradient, kl_divergence, total_loss, LossBreakdown,
    LossWeights, Ridge,
};
use crate::model::{ArchConfig, BranchTag, NormMode, Session, SplitClassifier};
use crate::statistics::{feature_stats, stack_uncertainty, stat_uncertainty, HistoryStore, StatSummary, Track};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    Cyclic,
    Linear,
}

/// Learning rate at `step` of `total_steps`.
pub fn lr_at(schedule: Schedule, step: u64, total_steps: u64, lr_peak: f64) -> f64 {
    let total = total_steps.max(1) as f64;
    let s = step as f64;
    match schedule {
        Schedule::Cyclic => {
            let half = total / 2.0;
            if s <= half {
                lr_peak * s / half
            } else {
                lr_peak * (total - s) / half
            }
        }
        Schedule::Linear => lr_peak * (1.0 - s / total),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// The full uncertainty-aware objective (individual parts can be switched off).
    UadAt,
    /// Plain TRADES: `CE(x) + beta * KL(p(x) || p(x_adv))`.
    Trades,
    /// Clean cross-entropy only.
    Natural,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: u32,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub attack: AttackConfig,
    pub weights: LossWeights,
    pub kappa_i: usize,
    pub kappa_h: usize,
    pub seed: u64,
    /// Benign refinement; when off the clean batch stands in for it.
    pub refine: bool,
    /// Feature augmentation; when off the raw features feed the prediction alignment.
    pub aum: bool,
    /// Uncertainty estimation; when off the augmentation uses zero spread.
    pub uncertainty: bool,
    /// Random crop and flip of training batches.
    pub augment: bool,
    pub eval: EvalSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::UadAt,
            epochs: 100,
            batch_size: 128,
            lr_peak: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: Schedule::Cyclic,
            attack: AttackConfig::default(),
            weights: LossWeights::default(),
            kappa_i: 5,
            kappa_h: 3,
            seed: 0,
            refine: true,
            aum: true,
            uncertainty: true,
            augment: false,
            eval: EvalSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.attack.validate()?;
        self.weights.validate()?;
        if self.epochs == 0 {
            return Err(UadError::config("train.epochs", "must be >= 1"));
        }
        if self.batch_size < 2 {
            return Err(UadError::config("train.batch_size", "must be >= 2"));
        }
        if !(self.lr_peak > 0.0) {
            return Err(UadError::config("train.lr_peak", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(UadError::config("train.momentum", "must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(UadError::config("train.weight_decay", "must be >= 0"));
        }
        if self.kappa_h == 0 {
            return Err(UadError::config("train.kappa_h", "must be >= 1"));
        }
        if self.attack.steps > 1 && (self.kappa_i == 0 || self.kappa_i > self.attack.steps - 1) {
            return Err(UadError::config(
                "train.kappa_i",
                format!(
                    "must be in 1..={} for {} attack steps",
                    self.attack.steps - 1,
                    self.attack.steps
                ),
            ));
        }
        self.eval.validate()
    }

    /// Adversary statistics kept per epoch: the retained intermediates, or
    /// the final adversary in single-step mode.
    pub fn adv_per_epoch(&self) -> usize {
        if self.attack.steps == 1 {
            1
        } else {
            self.kappa_i
        }
    }
}

/// SGD with Nesterov momentum; weight decay only on flagged parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub buffers: Vec<Tensor>,
    pub decay: Vec<bool>,
}

impl Sgd {
    pub fn new(model: &SplitClassifier, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: model.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
            decay: model.param_info().iter().map(|i| i.decay).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let wd = if self.decay[k] { self.weight_decay } else { 0.0 };
            let buf = self.buffers[k].data_mut();
            for ((pv, gv), bv) in p.data_mut().iter_mut().zip(g.data()).zip(buf.iter_mut()) {
                let d = gv + wd * *pv;
                *bv = self.momentum * *bv + d;
                *pv -= lr * (d + self.momentum * *bv);
            }
        }
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: SplitClassifier,
    pub optimizer: Sgd,
    pub history: HistoryStore,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: u32,
    /// Completed optimizer steps.
    pub step: u64,
    pub best_robust: Option<f64>,
}

impl TrainState {
    pub fn new(config: TrainConfig, arch: ArchConfig) -> Result<Self> {
        config.validate()?;
        let model = SplitClassifier::new(ArchConfig {
            init_seed: config.seed,
            ..arch
        })?;
        let (dim, _) = model.config().feature_geometry();
        let history = HistoryStore::new(config.kappa_h, config.adv_per_epoch(), dim)?;
        let optimizer = Sgd::new(&model, config.momentum, config.weight_decay);
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            config,
            model,
            optimizer,
            history,
            rng,
            epoch: 0,
            step: 0,
            best_robust: None,
        })
    }

    /// 1-based index of the epoch in progress.
    pub fn current_epoch(&self) -> u32 {
        self.epoch + 1
    }
}

fn stem_summaries(model: &SplitClassifier, x: &Tensor, branch: BranchTag) -> Result<Vec<StatSummary>> {
    no_grad(|| {
        let mut s = Session::new(model, false);
        let f = s.forward_stem(&Var::constant(x.clone()), branch, NormMode::Batch)?;
        Ok(feature_stats(&f)?.summaries())
    })
}

fn batch_uncertainty(
    history: &HistoryStore,
    ids: &[u64],
    epoch: u32,
    track: Track,
    dim: usize,
    enabled: bool,
) -> Result<BatchUncertainty> {
    if !enabled {
        return Ok(BatchUncertainty::zeros(ids.len(), dim));
    }
    let items = ids
        .iter()
        .map(|&id| {
            let (adv, ben) = history.query(id, epoch);
            let samples = match track {
                Track::Adv => adv,
                Track::Benign => ben,
            };
            if samples.is_empty() {
                Ok(crate::statistics::StatUncertainty::zeros(dim))
            } else {
                stat_uncertainty(&samples)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let (std_mu, std_sigma) = stack_uncertainty(&items);
    Ok(BatchUncertainty { std_mu, std_sigma })
}

fn gradients(loss: &Var, params: &[Var]) -> Vec<Tensor> {
    let refs: Vec<&Var> = params.iter().collect();
    grad(loss, &refs, false)
        .into_iter()
        .zip(params)
        .map(|(g, p)| g.map(|g| g.value().clone()).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect()
}

/// One optimizer step on `batch` at learning rate `lr`.
pub fn train_step(state: &mut TrainState, batch: &Batch, lr: f64) -> Result<LossBreakdown> {
    match state.config.method {
        Method::UadAt => uad_step(state, batch, lr),
        Method::Trades => trades_step(state, batch, lr),
        Method::Natural => natural_step(state, batch, lr),
    }
}

fn generate(state: &mut TrainState, x: &Tensor) -> Result<crate::attacks::AdversaryRecord> {
    let cfg = state.config.attack;
    if cfg.steps == 1 {
        single_step_generate(&state.model, x, &cfg, NormMode::Batch, &mut state.rng)
    } else {
        pgd_generate(&state.model, x, &cfg, NormMode::Batch, &mut state.rng)
    }
}

fn apply_update(
    state: &mut TrainState,
    session_updates: Vec<crate::model::RunningUpdate>,
    grads: Vec<Tensor>,
    lr: f64,
) {
    state.optimizer.step(state.model.params_mut(), &grads, lr);
    state.model.apply_running_updates(session_updates);
}

fn check_grads(grads: &[Tensor]) -> Result<()> {
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(UadError::NonFinite("parameter gradients".into()));
    }
    Ok(())
}

fn uad_step(state: &mut TrainState, batch: &Batch, lr: f64) -> Result<LossBreakdown> {
    let cfg = state.config.clone();
    let (x, y) = (&batch.x, batch.y.as_slice());
    let epoch = state.current_epoch();

    let record = generate(state, x)?;
    let adv_summaries: Vec<Vec<StatSummary>> = if cfg.attack.steps == 1 {
        vec![stem_summaries(&state.model, &record.adversarial, BranchTag::Auxiliary)?]
    } else {
        let n = record.intermediates.len();
        record.intermediates[n - cfg.kappa_i..]
            .iter()
            .map(|it| stem_summaries(&state.model, it, BranchTag::Auxiliary))
            .collect::<Result<_>>()?
    };
    let refined = if cfg.refine {
        Some(benign_refine(&state.model, x, y, &cfg.attack, NormMode::Batch)?)
    } else {
        None
    };

    let use_igm = cfg.weights.lambda2 > 0.0;
    let use_sa = cfg.weights.lambda1 > 0.0;
    let input = |t: &Tensor| {
        if use_igm {
            Var::parameter(t.clone())
        } else {
            Var::constant(t.clone())
        }
    };
    let (grads, updates, breakdown, ben_summaries) = {
        let mut session = Session::new(&state.model, true);
        let track = NormMode::BatchTracked;

        let x_clean = input(x);
        let f_clean = session.forward_stem(&x_clean, BranchTag::Primary, track)?;
        let clean_logits = session.forward_tail_head(&f_clean, BranchTag::Primary, track)?;
        let (x_ben, f_ben) = match &refined {
            Some(r) => {
                let xb = input(r);
                let fb = session.forward_stem(&xb, BranchTag::Primary, NormMode::Batch)?;
                (xb, fb)
            }
            None => (x_clean.clone(), f_clean.clone()),
        };
        let x_adv = input(&record.adversarial);
        let f_adv = session.forward_stem(&x_adv, BranchTag::Auxiliary, track)?;

        let stats_ben = feature_stats(&f_ben)?;
        let stats_adv = feature_stats(&f_adv)?;
        let (b, d) = (stats_ben.batch(), stats_ben.dim());

        let (ben_logits, adv_logits) = if cfg.aum {
            let unc_adv = batch_uncertainty(&state.history, &batch.ids, epoch, Track::Adv, d, cfg.uncertainty)?;
            let unc_ben = batch_uncertainty(&state.history, &batch.ids, epoch, Track::Benign, d, cfg.uncertainty)?;
            let noise_adv = AumNoise::sample(b, d, &mut state.rng);
            let noise_ben = AumNoise::sample(b, d, &mut state.rng);
            let f_adv_aug = aum_augment(&f_adv, &stats_adv, &unc_adv, &noise_adv)?;
            let f_ben_aug = aum_augment(&f_ben, &stats_ben, &unc_ben, &noise_ben)?;
            let ben = session.forward_tail_head(&f_ben_aug, BranchTag::Primary, NormMode::Batch)?;
            let adv = session.forward_tail_head(&f_adv_aug, BranchTag::Auxiliary, track)?;
            (ben, adv)
        } else {
            let ben = if refined.is_some() {
                session.forward_tail_head(&f_ben, BranchTag::Primary, NormMode::Batch)?
            } else {
                clean_logits.clone()
            };
            let adv = session.forward_tail_head(&f_adv, BranchTag::Auxiliary, track)?;
            (ben, adv)
        };
        let ce_clean = cross_entropy(&clean_logits, y)?;
        let kl_pred = kl_divergence(&ben_logits, &adv_logits)?;

        let sa = if use_sa {
            Some(d2d_sa_loss(&stats_ben, &stats_adv, Ridge::Adaptive)?)
        } else {
            None
        };
        let igm = if use_igm {
            let lb = session.forward_tail_head(&f_ben, BranchTag::Primary, NormMode::Batch)?;
            let la = session.forward_tail_head(&f_adv, BranchTag::Auxiliary, NormMode::Batch)?;
            let gb = input_gradient(&x_ben, &lb, y)?;
            let ga = input_gradient(&x_adv, &la, y)?;
            Some(igm_from_gradients(&gb, &ga)?)
        } else {
            None
        };
        let (total, breakdown) = total_loss(&ce_clean, &kl_pred, sa.as_ref(), igm.as_ref(), &cfg.weights)?;
        let grads = gradients(&total, session.params());
        let ben_summaries = stats_ben.summaries();
        (grads, session.finish(), breakdown, ben_summaries)
    };
    check_grads(&grads)?;
    apply_update(state, updates, grads, lr);

    for (i, &id) in batch.ids.iter().enumerate() {
        let adv: Vec<StatSummary> = adv_summaries.iter().map(|s| s[i].clone()).collect();
        state.history.push(id, epoch, Track::Adv, adv)?;
        state
            .history
            .push(id, epoch, Track::Benign, vec![ben_summaries[i].clone()])?;
    }
    Ok(breakdown)
}

fn trades_step(state: &mut TrainState, batch: &Batch, lr: f64) -> Result<LossBreakdown> {
    let cfg = state.config.clone();
    let record = generate(state, &batch.x)?;
    let (grads, updates, breakdown) = {
        let mut session = Session::new(&state.model, true);
        let clean = session.forward(
            &Var::constant(batch.x.clone()),
            BranchTag::Primary,
            NormMode::BatchTracked,
        )?;
        let adv = session.forward(
            &Var::constant(record.adversarial.clone()),
            BranchTag::Auxiliary,
            NormMode::BatchTracked,
        )?;
        let ce = cross_entropy(&clean, &batch.y)?;
        let kl = kl_divergence(&clean, &adv)?;
        let (total, breakdown) = total_loss(&ce, &kl, None, None, &cfg.weights)?;
        (gradients(&total, session.params()), session.finish(), breakdown)
    };
    check_grads(&grads)?;
    apply_update(state, updates, grads, lr);
    Ok(breakdown)
}

fn natural_step(state: &mut TrainState, batch: &Batch, lr: f64) -> Result<LossBreakdown> {
    let (grads, updates, ce) = {
        let mut session = Session::new(&state.model, true);
        let logits = session.forward(
            &Var::constant(batch.x.clone()),
            BranchTag::Primary,
            NormMode::BatchTracked,
        )?;
        let ce = cross_entropy(&logits, &batch.y)?;
        if !ce.item().is_finite() {
            return Err(UadError::NonFinite("loss component ce_clean".into()));
        }
        (gradients(&ce, session.params()), session.finish(), ce.item())
    };
    check_grads(&grads)?;
    apply_update(state, updates, grads, lr);
    Ok(LossBreakdown {
        ce_clean: ce,
        total: ce,
        ..LossBreakdown::default()
    })
}

/// Where and what a training run writes.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
    /// Include wall-clock timings in step records (makes logs non-reproducible).
    pub wall_time: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u32,
    pub lr: f64,
    pub ce_clean: f64,
    pub kl_pred: f64,
    pub d2d_sa: f64,
    pub igm: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub val_clean_acc: f64,
    pub val_robust_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
}

#[derive(Clone, Debug, Default)]
pub struct TrainSummary {
    pub metrics: Vec<MetricRecord>,
    pub epochs: Vec<EpochRecord>,
    pub final_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    let full = n / batch_size;
    if n % batch_size >= 2 {
        full + 1
    } else {
        full
    }
}

fn append_metric(path: &Path, record: &MetricRecord) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| UadError::io(format!("opening {}", path.display()), e))?;
    let line = serde_json::to_string(record).expect("metric records serialize");
    writeln!(f, "{line}").map_err(|e| UadError::io(format!("writing {}", path.display()), e))
}

pub const METRICS_FILE: &str = "metrics.ndjson";

/// Batch `k` of `epoch`, with augmentation applied when configured.
pub fn epoch_batch(config: &TrainConfig, data: &IndexedDataset, order: &[usize], epoch: u32, k: usize) -> Batch {
    let lo = k * config.batch_size;
    let hi = (lo + config.batch_size).min(order.len());
    let mut batch = data.batch(&order[lo..hi]);
    if config.augment {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xa06_0000);
        rng.set_stream(((epoch as u64) << 32) | k as u64);
        batch.x = augment_crop_flip(&batch.x, 4, &mut rng);
    }
    batch
}

/// Run epochs `state.epoch + 1 ..= config.epochs`.
pub fn train(
    state: &mut TrainState,
    train_set: &IndexedDataset,
    val_set: &IndexedDataset,
    out: &RunOutput,
) -> Result<TrainSummary> {
    let config = state.config.clone();
    let per_epoch = batches_per_epoch(train_set.len(), config.batch_size);
    if per_epoch == 0 {
        return Err(UadError::Dataset("training split is smaller than two samples".into()));
    }
    let total_steps = per_epoch as u64 * config.epochs as u64;
    let metrics_path = out.dir.as_ref().map(|d| d.join(METRICS_FILE));
    let mut summary = TrainSummary::default();
    let mut last_good: Option<PathBuf> = None;
    let emit = |summary: &mut TrainSummary, r: MetricRecord| -> Result<()> {
        if let Some(p) = &metrics_path {
            append_metric(p, &r)?;
        }
        summary.metrics.push(r);
        Ok(())
    };
    while state.epoch < config.epochs {
        let epoch = state.current_epoch();
        let order = epoch_order(train_set.len(), config.seed, epoch);
        for k in 0..per_epoch {
            let batch = epoch_batch(&config, train_set, &order, epoch, k);
            let lr = lr_at(config.schedule, state.step, total_steps, config.lr_peak);
            let started = Instant::now();
            let b = train_step(state, &batch, lr).map_err(|e| match (&e, &last_good) {
                (UadError::NonFinite(_) | UadError::Numerical(_), Some(p)) => {
                    UadError::Numerical(format!("{e}; last good checkpoint: {}", p.display()))
                }
                _ => e,
            })?;
            let rec = StepRecord {
                step: state.step,
                epoch,
                lr,
                ce_clean: b.ce_clean,
                kl_pred: b.kl_pred,
                d2d_sa: b.d2d_sa,
                igm: b.igm,
                total: b.total,
                wall_ms: out.wall_time.then(|| started.elapsed().as_secs_f64() * 1e3),
            };
            emit(&mut summary, MetricRecord::Step(rec))?;
            state.step += 1;
        }
        state.epoch = epoch;
        let report = evaluate(
            &state.model,
            val_set,
            &config.eval,
            config.seed.wrapping_add(epoch as u64),
        )?;
        let er = EpochRecord {
            epoch,
            val_clean_acc: report.clean_acc,
            val_robust_acc: report.robust_acc,
        };
        info!(
            "epoch {epoch}: val clean {:.4} robust {:.4}",
            er.val_clean_acc, er.val_robust_acc
        );
        emit(&mut summary, MetricRecord::Epoch(er.clone()))?;
        summary.epochs.push(er.clone());
        let improved = state.best_robust.is_none_or(|b| er.val_robust_acc > b);
        if improved {
            state.best_robust = Some(er.val_robust_acc);
        }
        if let Some(dir) = &out.dir {
            let path = dir.join(format!("ckpt_epoch{epoch}.bin"));
            checkpoint::save_state(&path, state)?;
            if improved {
                let best = dir.join("ckpt_best.bin");
                checkpoint::save_model(&best, &state.model)?;
                summary.best_checkpoint = Some(best);
            }
            summary.final_checkpoint = Some(path.clone());
            last_good = Some(path);
        }
    }
    Ok(summary)
}
