//! Split classifier with dual normalization branches.
//!
//! The network is a stack of blocks followed by global average pooling and a
//! linear head. The first `aum_depth` blocks form the *stem* (the feature
//! extractor up to the augmentation point); the remaining blocks plus the
//! head form the *tail*. Every normalization layer carries two independent
//! sets of affine parameters and running statistics, one per [`BranchTag`].
//! Convolution and linear weights are shared by both branches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use uad_autograd::{no_grad, Tensor, Var};

use crate::error::{Result, UadError};

/// Which normalization branch a forward pass uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BranchTag {
    /// Clean and benignly refined inputs; the only branch used at inference.
    Primary,
    /// Adversarial inputs during training.
    Auxiliary,
}

impl BranchTag {
    pub fn index(self) -> usize {
        match self {
            BranchTag::Primary => 0,
            BranchTag::Auxiliary => 1,
        }
    }
}

/// How normalization layers obtain their statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Running statistics (inference).
    Running,
    /// Current batch statistics, running statistics untouched.
    Batch,
    /// Current batch statistics, and the batch moments are queued as a
    /// running-statistics update.
    BatchTracked,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchKind {
    /// Plain conv blocks: `[pool] conv3x3 -> norm -> relu`.
    ConvNet,
    /// ResNet-18 layout (basic residual blocks, 2 per stage).
    ResNet18,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub kind: ArchKind,
    pub in_channels: usize,
    pub image_size: usize,
    /// Conv block widths (ConvNet) or stage widths (ResNet18).
    pub widths: Vec<usize>,
    pub num_classes: usize,
    /// Number of blocks in the stem; features are taken after this block.
    pub aum_depth: usize,
    pub norm_eps: f64,
    pub norm_momentum: f64,
    /// One set of normalization affine parameters for both branches; only
    /// the statistics stay separate.
    pub shared_affine: bool,
    pub init_seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            kind: ArchKind::ConvNet,
            in_channels: 3,
            image_size: 16,
            widths: vec![16, 32, 64, 64],
            num_classes: 10,
            aum_depth: 2,
            norm_eps: 1e-5,
            norm_momentum: 0.1,
            shared_affine: false,
            init_seed: 0,
        }
    }
}

impl ArchConfig {
    pub fn resnet18(num_classes: usize) -> Self {
        Self {
            kind: ArchKind::ResNet18,
            image_size: 32,
            widths: vec![64, 128, 256, 512],
            num_classes,
            aum_depth: 2,
            ..Self::default()
        }
    }

    fn blocks(&self) -> Vec<BlockSpec> {
        match self.kind {
            ArchKind::ConvNet => self
                .widths
                .iter()
                .enumerate()
                .map(|(i, &w)| BlockSpec::Conv {
                    cin: if i == 0 { self.in_channels } else { self.widths[i - 1] },
                    cout: w,
                    pool_before: i > 0,
                })
                .collect(),
            ArchKind::ResNet18 => {
                let mut blocks = vec![BlockSpec::Conv {
                    cin: self.in_channels,
                    cout: self.widths[0],
                    pool_before: false,
                }];
                let mut cin = self.widths[0];
                for (stage, &w) in self.widths.iter().enumerate() {
                    for j in 0..2 {
                        blocks.push(BlockSpec::Residual {
                            cin,
                            cout: w,
                            downsample: stage > 0 && j == 0,
                        });
                        cin = w;
                    }
                }
                blocks
            }
        }
    }

    /// `(D, H, W)` of the features at `aum_depth`.
    pub fn feature_geometry(&self) -> (usize, usize) {
        let blocks = self.blocks();
        let mut size = self.image_size;
        let mut channels = self.in_channels;
        for b in blocks.iter().take(self.aum_depth) {
            if b.pools() {
                size /= 2;
            }
            channels = b.cout();
        }
        (channels, size)
    }

    pub fn validate(&self) -> Result<()> {
        let blocks = self.blocks();
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(UadError::config(
                "model.widths",
                "widths must be non-empty and positive",
            ));
        }
        if self.num_classes < 2 {
            return Err(UadError::config("model.num_classes", "need at least 2 classes"));
        }
        if self.aum_depth == 0 || self.aum_depth >= blocks.len() {
            return Err(UadError::config(
                "model.aum_depth",
                format!("must be in 1..{} for this architecture", blocks.len()),
            ));
        }
        let pools = blocks.iter().filter(|b| b.pools()).count();
        if self.image_size == 0 || self.image_size % (1 << pools) != 0 {
            return Err(UadError::config(
                "data.image_size",
                format!("image_size must be a positive multiple of {}", 1 << pools),
            ));
        }
        let (d, s) = self.feature_geometry();
        if s * s < d {
            let pools_before = blocks.iter().take(self.aum_depth).filter(|b| b.pools()).count();
            let side = (1..).find(|k| k * k >= d).expect("finite");
            let unit = 1usize << pools;
            let needed = (side << pools_before).div_ceil(unit) * unit;
            return Err(UadError::config(
                "data.image_size",
                format!(
                    "features at aum_depth {} are {s}x{s} (H*W = {}) but need H*W >= D = {d}; \
                     image_size must be at least {needed}",
                    self.aum_depth,
                    s * s,
                ),
            ));
        }
        if !(self.norm_eps > 0.0) || !(0.0..=1.0).contains(&self.norm_momentum) {
            return Err(UadError::config("model.norm", "eps must be > 0 and momentum in [0,1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum BlockSpec {
    Conv { cin: usize, cout: usize, pool_before: bool },
    Residual { cin: usize, cout: usize, downsample: bool },
}

impl BlockSpec {
    fn pools(&self) -> bool {
        match *self {
            BlockSpec::Conv { pool_before, .. } => pool_before,
            BlockSpec::Residual { downsample, .. } => downsample,
        }
    }
    fn cout(&self) -> usize {
        match *self {
            BlockSpec::Conv { cout, .. } | BlockSpec::Residual { cout, .. } => cout,
        }
    }
}

/// Parameter indices of one block.
#[derive(Clone, Debug)]
enum Block {
    Conv {
        weight: usize,
        norm: usize,
        pool_before: bool,
    },
    Residual {
        conv1: usize,
        norm1: usize,
        conv2: usize,
        norm2: usize,
        shortcut: Option<(usize, usize)>,
        downsample: bool,
    },
}

/// Affine parameter indices `[gamma, beta]` per branch.
#[derive(Clone, Debug)]
struct NormLayer {
    affine: [[usize; 2]; 2],
    channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

/// A queued running-statistics update from a tracked forward pass.
#[derive(Clone, Debug)]
pub struct RunningUpdate {
    pub layer: usize,
    pub branch: BranchTag,
    pub batch_mean: Tensor,
    pub batch_var: Tensor,
}

#[derive(Clone, Debug)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    /// Normalization affine parameters are excluded from weight decay.
    pub decay: bool,
}

#[derive(Clone, Debug)]
struct Layout {
    blocks: Vec<Block>,
    norms: Vec<NormLayer>,
    head_weight: usize,
    head_bias: usize,
    infos: Vec<ParamInfo>,
}

fn build_layout(config: &ArchConfig) -> Layout {
    let mut infos: Vec<ParamInfo> = Vec::new();
    let mut norms: Vec<NormLayer> = Vec::new();
    let shared = config.shared_affine;
    let add = |infos: &mut Vec<ParamInfo>, name: String, shape: Vec<usize>, decay: bool| {
        infos.push(ParamInfo { name, shape, decay });
        infos.len() - 1
    };
    let add_norm = |infos: &mut Vec<ParamInfo>, norms: &mut Vec<NormLayer>, prefix: &str, c: usize| {
        let mut affine = [[0; 2]; 2];
        if shared {
            let gamma = add(infos, format!("{prefix}.gamma"), vec![c], false);
            let beta = add(infos, format!("{prefix}.beta"), vec![c], false);
            affine = [[gamma, beta]; 2];
        } else {
            for (b, tag) in ["primary", "auxiliary"].iter().enumerate() {
                affine[b][0] = add(infos, format!("{prefix}.{tag}.gamma"), vec![c], false);
                affine[b][1] = add(infos, format!("{prefix}.{tag}.beta"), vec![c], false);
            }
        }
        norms.push(NormLayer { affine, channels: c });
        norms.len() - 1
    };
    let mut blocks = Vec::new();
    for (i, spec) in config.blocks().into_iter().enumerate() {
        match spec {
            BlockSpec::Conv { cin, cout, pool_before } => {
                let weight = add(&mut infos, format!("block{i}.conv.weight"), vec![cout, cin, 3, 3], true);
                let norm = add_norm(&mut infos, &mut norms, &format!("block{i}.norm"), cout);
                blocks.push(Block::Conv {
                    weight,
                    norm,
                    pool_before,
                });
            }
            BlockSpec::Residual { cin, cout, downsample } => {
                let conv1 = add(
                    &mut infos,
                    format!("block{i}.conv1.weight"),
                    vec![cout, cin, 3, 3],
                    true,
                );
                let norm1 = add_norm(&mut infos, &mut norms, &format!("block{i}.norm1"), cout);
                let conv2 = add(
                    &mut infos,
                    format!("block{i}.conv2.weight"),
                    vec![cout, cout, 3, 3],
                    true,
                );
                let norm2 = add_norm(&mut infos, &mut norms, &format!("block{i}.norm2"), cout);
                let shortcut = (cin != cout).then(|| {
                    let w = add(
                        &mut infos,
                        format!("block{i}.shortcut.weight"),
                        vec![cout, cin, 1, 1],
                        true,
                    );
                    let n = add_norm(&mut infos, &mut norms, &format!("block{i}.shortcut.norm"), cout);
                    (w, n)
                });
                blocks.push(Block::Residual {
                    conv1,
                    norm1,
                    conv2,
                    norm2,
                    shortcut,
                    downsample,
                });
            }
        }
    }
    let features = *config.widths.last().expect("validated widths");
    let head_weight = add(
        &mut infos,
        "head.weight".into(),
        vec![features, config.num_classes],
        true,
    );
    let head_bias = add(&mut infos, "head.bias".into(), vec![config.num_classes], true);
    Layout {
        blocks,
        norms,
        head_weight,
        head_bias,
        infos,
    }
}

/// Stem/tail/head classifier with dual normalization branches.
#[derive(Clone, Debug)]
pub struct SplitClassifier {
    config: ArchConfig,
    layout: Layout,
    params: Vec<Tensor>,
    running: Vec<[RunningStats; 2]>,
}

impl SplitClassifier {
    /// Randomly initialized model (He-normal convolutions, unit/zero affine).
    pub fn new(config: ArchConfig) -> Result<Self> {
        config.validate()?;
        let layout = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let params = layout
            .infos
            .iter()
            .map(|info| {
                let n: usize = info.shape.iter().product();
                if info.name.ends_with(".gamma") {
                    Tensor::ones(&info.shape)
                } else if info.name.ends_with(".beta") || info.name == "head.bias" {
                    Tensor::zeros(&info.shape)
                } else {
                    let fan_in = if info.name == "head.weight" {
                        info.shape[0]
                    } else {
                        n / info.shape[0]
                    };
                    let gain = if info.name == "head.weight" { 1.0 } else { 2.0 };
                    let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
                    Tensor::from_fn(&info.shape, |_| normal.sample(&mut rng))
                }
            })
            .collect();
        let running = layout
            .norms
            .iter()
            .map(|n| {
                let fresh = RunningStats {
                    mean: Tensor::zeros(&[n.channels]),
                    var: Tensor::ones(&[n.channels]),
                };
                [fresh.clone(), fresh]
            })
            .collect();
        Ok(Self {
            config,
            layout,
            params,
            running,
        })
    }

    /// Rebuild from stored parameters and running statistics.
    pub fn from_parts(config: ArchConfig, params: Vec<Tensor>, running: Vec<[RunningStats; 2]>) -> Result<Self> {
        config.validate()?;
        let layout = build_layout(&config);
        if params.len() != layout.infos.len() {
            return Err(UadError::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                layout.infos.len(),
                params.len()
            )));
        }
        for (p, info) in params.iter().zip(&layout.infos) {
            if p.shape() != info.shape.as_slice() {
                return Err(UadError::Shape {
                    expected: format!("{} with shape {:?}", info.name, info.shape),
                    got: p.shape().to_vec(),
                });
            }
        }
        if running.len() != layout.norms.len()
            || running.iter().zip(&layout.norms).any(|(r, n)| {
                r.iter()
                    .any(|s| s.mean.len() != n.channels || s.var.len() != n.channels)
            })
        {
            return Err(UadError::InvalidArgument(
                "running statistics do not match architecture".into(),
            ));
        }
        Ok(Self {
            config,
            layout,
            params,
            running,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_info(&self) -> &[ParamInfo] {
        &self.layout.infos
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn running_stats(&self) -> &[[RunningStats; 2]] {
        &self.running
    }

    /// Shape of stem output for a batch of `batch` images.
    pub fn feature_shape(&self, batch: usize) -> [usize; 4] {
        let (d, s) = self.config.feature_geometry();
        [batch, d, s, s]
    }

    pub fn apply_running_updates(&mut self, updates: Vec<RunningUpdate>) {
        let m = self.config.norm_momentum;
        for u in updates {
            let stats = &mut self.running[u.layer][u.branch.index()];
            for (r, b) in stats.mean.data_mut().iter_mut().zip(u.batch_mean.data()) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in stats.var.data_mut().iter_mut().zip(u.batch_var.data()) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }

    /// Inference logits: PRIMARY branch, running statistics, no graph.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        no_grad(|| {
            let mut s = Session::new(self, false);
            let f = s.forward_stem(&Var::constant(x.clone()), BranchTag::Primary, NormMode::Running)?;
            let logits = s.forward_tail_head(&f, BranchTag::Primary, NormMode::Running)?;
            Ok(logits.value().clone())
        })
    }
}

/// One use of a model: binds its parameters as graph leaves and collects
/// running-statistics updates produced by tracked forward passes.
pub struct Session<'m> {
    model: &'m SplitClassifier,
    params: Vec<Var>,
    updates: Vec<RunningUpdate>,
}

impl<'m> Session<'m> {
    /// With `trainable`, parameters are leaves whose gradients can be requested.
    pub fn new(model: &'m SplitClassifier, trainable: bool) -> Self {
        let params = model
            .params
            .iter()
            .map(|p| {
                if trainable {
                    Var::parameter(p.clone())
                } else {
                    Var::constant(p.clone())
                }
            })
            .collect();
        Self {
            model,
            params,
            updates: Vec::new(),
        }
    }

    pub fn model(&self) -> &SplitClassifier {
        self.model
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    /// Queued running-statistics updates, in forward order.
    pub fn finish(self) -> Vec<RunningUpdate> {
        self.updates
    }

    /// Feature extractor up to `aum_depth`.
    pub fn forward_stem(&mut self, x: &Var, branch: BranchTag, norm: NormMode) -> Result<Var> {
        let cfg = &self.model.config;
        let s = x.shape();
        if s.len() != 4 || s[1] != cfg.in_channels || s[2] != cfg.image_size || s[3] != cfg.image_size || s[0] == 0 {
            return Err(UadError::Shape {
                expected: format!("(B>0, {}, {}, {})", cfg.in_channels, cfg.image_size, cfg.image_size),
                got: s.to_vec(),
            });
        }
        if !x.value().all_finite() {
            return Err(UadError::NonFinite("stem input".into()));
        }
        let mut h = x.clone();
        for i in 0..cfg.aum_depth {
            h = self.block(&h, i, branch, norm);
        }
        Ok(h)
    }

    /// Remaining blocks, global average pooling and the linear head.
    pub fn forward_tail_head(&mut self, f: &Var, branch: BranchTag, norm: NormMode) -> Result<Var> {
        let expected = self.model.feature_shape(f.shape().first().copied().unwrap_or(0));
        if f.shape() != expected.as_slice() || expected[0] == 0 {
            return Err(UadError::Shape {
                expected: format!("(B>0, {}, {}, {})", expected[1], expected[2], expected[3]),
                got: f.shape().to_vec(),
            });
        }
        if !f.value().all_finite() {
            return Err(UadError::NonFinite("features entering the tail".into()));
        }
        let mut h = f.clone();
        for i in self.model.config.aum_depth..self.model.layout.blocks.len() {
            h = self.block(&h, i, branch, norm);
        }
        let s = h.shape().to_vec();
        let pooled = h
            .reshape(&[s[0], s[1], s[2] * s[3]])
            .mean_keepdim(&[2])
            .reshape(&[s[0], s[1]]);
        let layout = &self.model.layout;
        let logits = pooled
            .matmul(&self.params[layout.head_weight])
            .add(&self.params[layout.head_bias]);
        Ok(logits)
    }

    /// `forward_tail_head(forward_stem(x))` with one branch throughout.
    pub fn forward(&mut self, x: &Var, branch: BranchTag, norm: NormMode) -> Result<Var> {
        let f = self.forward_stem(x, branch, norm)?;
        self.forward_tail_head(&f, branch, norm)
    }

    fn block(&mut self, x: &Var, index: usize, branch: BranchTag, norm: NormMode) -> Var {
        match self.model.layout.blocks[index].clone() {
            Block::Conv {
                weight,
                norm: n,
                pool_before,
            } => {
                let input = if pool_before { x.avg_pool2() } else { x.clone() };
                let h = input.conv2d(&self.params[weight], 1);
                self.normalize(&h, n, branch, norm).relu()
            }
            Block::Residual {
                conv1,
                norm1,
                conv2,
                norm2,
                shortcut,
                downsample,
            } => {
                let input = if downsample { x.avg_pool2() } else { x.clone() };
                let h = input.conv2d(&self.params[conv1], 1);
                let h = self.normalize(&h, norm1, branch, norm).relu();
                let h = h.conv2d(&self.params[conv2], 1);
                let h = self.normalize(&h, norm2, branch, norm);
                let skip = match shortcut {
                    Some((w, n)) => {
                        let s = input.conv2d(&self.params[w], 0);
                        self.normalize(&s, n, branch, norm)
                    }
                    None => input,
                };
                h.add(&skip).relu()
            }
        }
    }

    fn normalize(&mut self, x: &Var, layer: usize, branch: BranchTag, norm: NormMode) -> Var {
        let nl = &self.model.layout.norms[layer];
        let c = nl.channels;
        let [gi, bi] = nl.affine[branch.index()];
        let gamma = self.params[gi].reshape(&[1, c, 1, 1]);
        let beta = self.params[bi].reshape(&[1, c, 1, 1]);
        let eps = self.model.config.norm_eps;
        let xhat = match norm {
            NormMode::Running => {
                let rs = &self.model.running[layer][branch.index()];
                let mean = Var::constant(rs.mean.reshape(&[1, c, 1, 1]));
                let inv_std = Var::constant(rs.var.map(|v| 1.0 / (v + eps).sqrt()).into_reshaped(&[1, c, 1, 1]));
                x.sub(&mean).mul(&inv_std)
            }
            NormMode::Batch | NormMode::BatchTracked => {
                let mean = x.mean_keepdim(&[0, 2, 3]);
                let centered = x.sub(&mean);
                let var = centered.square().mean_keepdim(&[0, 2, 3]);
                if norm == NormMode::BatchTracked {
                    let s = x.shape();
                    let n = (s[0] * s[2] * s[3]) as f64;
                    let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                    self.updates.push(RunningUpdate {
                        layer,
                        branch,
                        batch_mean: mean.value().reshape(&[c]),
                        batch_var: var.value().map(|v| v * unbiased).into_reshaped(&[c]),
                    });
                }
                centered.div(&var.add_scalar(eps).sqrt())
            }
        };
        xhat.mul(&gamma).add(&beta)
    }
}

/// Anything the attack engine can differentiate through.
pub trait Classifier {
    /// Logits for `x`; running-statistics updates, if any, are discarded.
    fn logits(&self, x: &Var, branch: BranchTag, norm: NormMode) -> Result<Var>;
}

impl Classifier for SplitClassifier {
    fn logits(&self, x: &Var, branch: BranchTag, norm: NormMode) -> Result<Var> {
        let norm = if norm == NormMode::BatchTracked {
            NormMode::Batch
        } else {
            norm
        };
        Session::new(self, false).forward(x, branch, norm)
    }
}

/// Affine softmax classifier on flattened inputs; branch-agnostic.
#[derive(Clone, Debug)]
pub struct LinearClassifier {
    /// `(F, C)`
    pub weight: Tensor,
    /// `(C)`
    pub bias: Tensor,
}

impl Classifier for LinearClassifier {
    fn logits(&self, x: &Var, _branch: BranchTag, _norm: NormMode) -> Result<Var> {
        let features = self.weight.shape()[0];
        let batch = x.shape()[0];
        if x.value().len() != batch * features {
            return Err(UadError::Shape {
                expected: format!("(B, {features}) after flattening"),
                got: x.shape().to_vec(),
            });
        }
        Ok(x.reshape(&[batch, features])
            .matmul(&Var::constant(self.weight.clone()))
            .add(&Var::constant(self.bias.clone())))
    }
}
