//! The `train`, `eval` and `analyze` commands.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use uad_core::checkpoint;
use uad_core::data::{load_standard, make_synthetic_splits, IndexedDataset, Split, Splits, SyntheticSpec};
use uad_core::evaluation::{disruption_curve, evaluate, normality_check, NormalitySettings, RobustReport};
use uad_core::model::{ArchConfig, SplitClassifier};
use uad_core::training::{train, RunOutput, TrainState, TrainSummary, METRICS_FILE};
use uad_core::{Result, UadError};

use crate::config::{DataSource, RunConfig};

pub const RESOLVED_CONFIG: &str = "config.resolved.cfg";
pub const EVAL_JSON: &str = "eval_report.json";
pub const EVAL_CSV: &str = "eval_report.csv";
pub const DISRUPTION_CSV: &str = "disruption.csv";
pub const NORMALITY_CSV: &str = "normality.csv";

/// Process exit code for an error: 2 config, 3 I/O, 4 numerical.
pub fn exit_code(e: &UadError) -> i32 {
    match e {
        UadError::Config { .. } | UadError::InvalidArgument(_) | UadError::Shape { .. } => 2,
        UadError::Io { .. } | UadError::Checkpoint { .. } | UadError::Dataset(_) | UadError::History(_) => 3,
        UadError::NonFinite(_) | UadError::Numerical(_) => 4,
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| UadError::io(format!("writing {}", path.display()), e))
}

fn prepare_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir()?;
    fs::create_dir_all(&dir).map_err(|e| UadError::io(format!("creating output dir {}", dir.display()), e))?;
    Ok(dir)
}

/// Train/val/test splits and the architecture fitted to them.
pub fn load_data(cfg: &RunConfig) -> Result<(Splits, ArchConfig)> {
    match cfg.source()? {
        DataSource::Synthetic => {
            let spec = SyntheticSpec {
                seed: cfg.data.seed,
                ..cfg.data.synthetic.clone()
            };
            let arch = cfg.arch(3, spec.image_size, spec.classes);
            let splits = make_synthetic_splits(&spec, &arch)?;
            Ok((splits, arch))
        }
        DataSource::Cifar10 => {
            let (full, test) = load_standard("cifar10", &cfg.data.root)?;
            let n = full.len();
            if cfg.data.val_size >= n {
                return Err(UadError::config(
                    "data.val_size",
                    format!("must be below the {n} training images"),
                ));
            }
            let cut = n - cfg.data.val_size;
            let train = full.select(&(0..cut).collect::<Vec<_>>(), Split::Train);
            let val = full.select(&(cut..n).collect::<Vec<_>>(), Split::Val);
            let [c, h, _] = train.image_shape();
            let arch = cfg.arch(c, h, train.classes);
            arch.validate()?;
            Ok((Splits { train, val, test }, arch))
        }
    }
}

/// Train from scratch, or continue from a `ckpt_epoch{t}.bin` state.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    let dir = prepare_dir(cfg)?;
    let (splits, arch) = load_data(cfg)?;
    let mut state = match resume {
        Some(path) => {
            let state = checkpoint::load_state(path)?;
            if state.config != cfg.train_config() {
                return Err(UadError::config(
                    "train",
                    "training settings differ from the resumed checkpoint",
                ));
            }
            check_arch(state.model.config(), &arch)?;
            state
        }
        None => {
            let metrics = dir.join(METRICS_FILE);
            if metrics.exists() {
                fs::remove_file(&metrics).map_err(|e| UadError::io(format!("removing {}", metrics.display()), e))?;
            }
            TrainState::new(cfg.train_config(), arch)?
        }
    };
    write(&dir.join(RESOLVED_CONFIG), &cfg.to_text())?;
    info!(
        "training {} parameters on {} samples for {} epochs",
        state.model.num_parameters(),
        splits.train.len(),
        cfg.train.epochs
    );
    train(
        &mut state,
        &splits.train,
        &splits.val,
        &RunOutput {
            dir: Some(dir),
            wall_time: cfg.output.wall_time,
        },
    )
}

/// Reject a checkpoint whose architecture differs from the configured one.
fn check_arch(found: &ArchConfig, expected: &ArchConfig) -> Result<()> {
    let checks: [(&str, bool); 8] = [
        ("model.kind", found.kind == expected.kind),
        ("model.widths", found.widths == expected.widths),
        ("model.aum_depth", found.aum_depth == expected.aum_depth),
        ("model.shared_affine", found.shared_affine == expected.shared_affine),
        ("data.image_size", found.image_size == expected.image_size),
        ("data.classes", found.num_classes == expected.num_classes),
        ("model.norm_eps", found.norm_eps == expected.norm_eps),
        ("data.source", found.in_channels == expected.in_channels),
    ];
    for (field, ok) in checks {
        if !ok {
            return Err(UadError::config(
                field,
                format!("checkpoint architecture {found:?} does not match the configured {expected:?}"),
            ));
        }
    }
    Ok(())
}

fn load_checked(cfg: &RunConfig, path: &Path) -> Result<(SplitClassifier, Splits)> {
    cfg.validate()?;
    let model = checkpoint::load_model(path)?;
    let (splits, arch) = load_data(cfg)?;
    check_arch(model.config(), &arch)?;
    Ok((model, splits))
}

/// Robust accuracy on the `eval.split` split under the `eval.*` attack.
pub fn cmd_eval(cfg: &RunConfig, path: &Path) -> Result<RobustReport> {
    let (model, splits) = load_checked(cfg, path)?;
    let dir = prepare_dir(cfg)?;
    let data = match cfg.eval_split {
        Split::Val => &splits.val,
        _ => &splits.test,
    };
    let report = evaluate(&model, data, &cfg.train.eval, cfg.seed)?;
    let json = serde_json::to_string_pretty(&report).expect("reports serialize");
    write(&dir.join(EVAL_JSON), &json)?;
    let mut csv = String::from("metric,value,ci_low,ci_high\n");
    for line in report.records() {
        csv.push_str(&line);
        csv.push('\n');
    }
    write(&dir.join(EVAL_CSV), &csv)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Analysis {
    Disruption,
    Normality,
}

impl std::str::FromStr for Analysis {
    type Err = UadError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disruption" => Ok(Self::Disruption),
            "normality" => Ok(Self::Normality),
            _ => Err(UadError::config(
                "analysis",
                format!("unknown analysis `{s}` (expected disruption or normality)"),
            )),
        }
    }
}

/// Write the analysis table and return its path.
pub fn cmd_analyze(cfg: &RunConfig, path: &Path, analysis: Analysis) -> Result<PathBuf> {
    let (model, splits) = load_checked(cfg, path)?;
    let dir = prepare_dir(cfg)?;
    match analysis {
        Analysis::Disruption => {
            let data = splits.test.head(cfg.analysis.disruption_samples);
            let curve = disruption_curve(
                &model,
                &data,
                &cfg.analysis.radii,
                cfg.analysis.disruption_steps,
                cfg.seed,
            )?;
            let out = dir.join(DISRUPTION_CSV);
            write(&out, &curve.to_csv())?;
            Ok(out)
        }
        Analysis::Normality => {
            let attack = cfg.train.attack;
            let settings = NormalitySettings {
                epsilon: attack.epsilon,
                step_size: attack.step_size,
                steps: attack.steps,
                ..cfg.analysis.normality
            };
            let out = dir.join(NORMALITY_CSV);
            write(
                &out,
                &normality_table(&model, &splits.test, cfg.analysis.normality_images, &settings, cfg.seed)?,
            )?;
            Ok(out)
        }
    }
}

fn normality_table(
    model: &SplitClassifier,
    data: &IndexedDataset,
    images: usize,
    settings: &NormalitySettings,
    seed: u64,
) -> Result<String> {
    let mut csv = String::from(
        "image,label,num_adversaries,channels_tested,channels_degenerate,channels_passing,pass_fraction,mean_p,passes\n",
    );
    for i in 0..images.min(data.len()) {
        let b = data.batch(&[i]);
        let r = normality_check(model, &b.x, settings, seed.wrapping_add(i as u64))?;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            b.ids[0],
            b.y[0],
            r.num_adversaries,
            r.channels_tested,
            r.channels_degenerate,
            r.channels_passing,
            r.pass_fraction,
            r.mean_p,
            r.example_passes
        ));
    }
    Ok(csv)
}
