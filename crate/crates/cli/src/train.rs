//! Training runs driven from a dataset directory.

use std::path::{Path, PathBuf};

use langgrasp_core::autonet::{init_params, ArchConfig};
use langgrasp_core::synthgen::Dataset;
use langgrasp_core::training::{train, Checkpoint, TrainConfig, TrainData, TrainMode, TrainState};

use crate::{write_text, CliError, Result};

/// Training settings beyond the optimizer schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub cfg: TrainConfig,
    /// Ablation: fuse text and vision without cross-attention.
    pub cross_attention: bool,
    /// Write a checkpoint every this many epochs (0: only at stage
    /// boundaries and at the end).
    pub checkpoint_every: usize,
}

impl TrainOptions {
    pub fn new(cfg: TrainConfig) -> Self {
        Self {
            cfg,
            cross_attention: true,
            checkpoint_every: 0,
        }
    }

    /// The network for this run. Single-stage runs have no mask pooling.
    pub fn arch(&self, vocab_size: usize) -> ArchConfig {
        ArchConfig {
            mask_pooling: self.cfg.mode == TrainMode::TwoStage,
            cross_attention: self.cross_attention,
            spatial_grounding: self.cross_attention,
            ..ArchConfig::new(vocab_size)
        }
    }
}

/// The settings used for every learning run of the benchmarks: the default
/// schedule with a faster step and a stronger quality weighting, without
/// which the quality head settles on a near-constant map.
pub fn learning_recipe(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        learning_rate: 3e-3,
        seed,
        ..TrainConfig::default()
    };
    cfg.loss.alpha = 20.0;
    cfg
}

/// Trains on the `train` split (subsampled by `data_fraction`) and validates
/// on `val`. `resume` continues a run from its saved state; `on_epoch` sees
/// the state after every epoch.
pub fn train_model(
    ds: &Dataset,
    opts: &TrainOptions,
    resume: Option<Checkpoint>,
    mut on_epoch: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<Checkpoint> {
    let cfg = opts.cfg;
    cfg.validate()?;
    let vocab = &ds.manifest.vocabulary;
    let data = TrainData::from_split(ds, "train", vocab)?.fraction(cfg.data_fraction, cfg.seed)?;
    let val = TrainData::from_split(ds, "val", vocab)?;
    let arch = opts.arch(vocab.len());
    let mut state = match resume {
        Some(ck) => {
            if ck.meta.arch != arch || &ck.meta.vocabulary != vocab {
                return Err(CliError::Usage("checkpoint architecture or vocabulary does not match this run".into()));
            }
            if ck.meta.train_config.is_some_and(|c| c != cfg) {
                return Err(CliError::Usage("checkpoint was trained with different settings".into()));
            }
            ck.state
        }
        None => TrainState::new(init_params(&arch, cfg.seed)?),
    };
    let scenes = data.scene_ids();
    let snapshot = |s: &TrainState| Checkpoint::new(arch.clone(), vocab.clone(), s.clone(), Some(cfg), scenes.clone());
    let mut err = None;
    train(&mut state, &arch, &data, Some(&val), &cfg, |s| {
        if let Err(e) = on_epoch(&snapshot(s)) {
            let msg = e.to_string();
            err = Some(e);
            return Err(langgrasp_core::Error::Config(msg));
        }
        Ok(())
    })
    .map_err(|e| err.take().unwrap_or(CliError::Core(e)))?;
    Ok(snapshot(&state))
}

/// Log file written next to a checkpoint.
pub fn log_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".log.jsonl");
    PathBuf::from(s)
}

/// Trains and writes the checkpoint to `out` (with its JSON sidecar and a
/// JSON-lines log), saving intermediate checkpoints at stage boundaries and
/// every `checkpoint_every` epochs. Progress goes to `progress`.
pub fn run_train(
    dataset: &Path,
    out: &Path,
    opts: &TrainOptions,
    resume: Option<&Path>,
    mut progress: impl FnMut(&str),
) -> Result<Checkpoint> {
    opts.cfg.validate()?;
    let ds = Dataset::load(dataset)?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| langgrasp_core::Error::io(parent, e))?;
    }
    let cfg = opts.cfg;
    let ckpt = train_model(&ds, opts, resume, |ck| {
        let r = ck.state.log.records.last().expect("an epoch was just recorded");
        progress(&format!(
            "epoch {:>3} stage {} loss {:.5} mask {:.5} iou {:.3}{}",
            r.epoch,
            r.stage,
            r.total_loss,
            r.mask_loss,
            r.train_mask_iou,
            r.val_top1.map_or(String::new(), |v| format!(" val_top1 {v:.3}"))
        ));
        let boundary = cfg.mode == TrainMode::TwoStage && r.epoch == cfg.stage1_epochs;
        let periodic = opts.checkpoint_every > 0 && r.epoch % opts.checkpoint_every == 0;
        if boundary || periodic {
            ck.save(out)?;
            write_text(&log_path(out), &ck.state.log.to_jsonl()?)?;
        }
        Ok(())
    })?;
    ckpt.save(out)?;
    write_text(&log_path(out), &ckpt.state.log.to_jsonl()?)?;
    Ok(ckpt)
}
