//! Split evaluation, oracle runs and cross-dataset evaluation.

use std::collections::BTreeSet;
use std::path::Path;

use langgrasp_core::autonet::{ArchConfig, ModelParams, Vocabulary};
use langgrasp_core::grasp_maps::DEFAULT_NMS_RADIUS;
use langgrasp_core::metrics::tokenize;
use langgrasp_core::synthgen::Dataset;
use langgrasp_core::training::{evaluate_with, Checkpoint, Predictor, RecordDump, TrainData};
use langgrasp_core::{EvalReport, SuccessCriteria};
use serde::Serialize;

use crate::{to_jsonl, write_text, CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub k: usize,
    pub nms_radius: usize,
    pub criteria: SuccessCriteria,
    /// Decode the ground-truth maps instead of running a model.
    pub oracle: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k: 5,
            nms_radius: DEFAULT_NMS_RADIUS,
            criteria: SuccessCriteria::default(),
            oracle: false,
        }
    }
}

/// The parts of a checkpoint needed for inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub arch: ArchConfig,
    pub params: ModelParams,
    pub vocabulary: Vocabulary,
}

impl Model {
    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        Self {
            arch: ckpt.meta.arch,
            params: ckpt.state.params,
            vocabulary: ckpt.meta.vocabulary,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_checkpoint(Checkpoint::load(path)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalOutput {
    pub split: String,
    pub report: EvalReport,
    pub records: Vec<RecordDump>,
}

impl EvalOutput {
    /// `report.json`, `report.csv`, `report.txt` and `records.jsonl` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut json = self.report.to_flat_json();
        json["split"] = self.split.clone().into();
        write_text(&dir.join("report.json"), &(serde_json::to_string_pretty(&json)? + "\n"))?;
        write_text(
            &dir.join("report.csv"),
            &format!("split,{}\n{},{}\n", EvalReport::csv_header(), self.split, self.report.csv_row()),
        )?;
        write_text(&dir.join("report.txt"), &self.report.table())?;
        write_text(&dir.join("records.jsonl"), &to_jsonl(&self.records)?)
    }
}

fn check_k(opts: &EvalOptions) -> Result<()> {
    if opts.k == 0 {
        return Err(CliError::Usage("k must be at least 1".into()));
    }
    Ok(())
}

/// Evaluates every expression of `split`. Expressions are encoded with the
/// model's vocabulary, so words it never saw become UNK.
pub fn eval_dataset(ds: &Dataset, model: Option<&Model>, split: &str, opts: &EvalOptions) -> Result<EvalOutput> {
    check_k(opts)?;
    let predictor = match (model, opts.oracle) {
        (_, true) => Predictor::Oracle,
        (Some(m), false) => Predictor::Model {
            arch: &m.arch,
            params: &m.params,
        },
        (None, false) => return Err(CliError::Usage("a checkpoint is required unless the oracle is requested".into())),
    };
    let vocab = model.map_or(&ds.manifest.vocabulary, |m| &m.vocabulary);
    let data = TrainData::from_split(ds, split, vocab)?;
    let picks = data.all_expressions();
    let (report, records) = evaluate_with(predictor, &data, &picks, opts.k, opts.nms_radius, &opts.criteria)?;
    Ok(EvalOutput {
        split: split.to_string(),
        report,
        records,
    })
}

/// Loads a dataset and (unless running the oracle) a checkpoint, then
/// evaluates one split.
pub fn run_eval(dataset: &Path, checkpoint: Option<&Path>, split: &str, opts: &EvalOptions) -> Result<EvalOutput> {
    check_k(opts)?;
    let ds = Dataset::load(dataset)?;
    // fail on a bad split name before loading any weights
    ds.manifest.splits.scenes(split)?;
    let model = match checkpoint {
        Some(p) if !opts.oracle => Some(Model::load(p)?),
        _ => None,
    };
    eval_dataset(&ds, model.as_ref(), split, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossEvalOutput {
    pub eval: EvalOutput,
    /// Words of the evaluated expressions outside the model's vocabulary.
    pub oov_words: BTreeSet<String>,
    /// Fraction of evaluated tokens that were mapped to UNK.
    pub unk_token_rate: f64,
}

/// Evaluates a checkpoint trained on `train_dataset` against a split of
/// `target_dataset`, mapping words the model never saw to UNK.
pub fn run_cross_eval(
    train_dataset: &Path,
    target_dataset: &Path,
    checkpoint: &Path,
    split: &str,
    opts: &EvalOptions,
) -> Result<CrossEvalOutput> {
    check_k(opts)?;
    let train = Dataset::load(train_dataset)?;
    let target = Dataset::load(target_dataset)?;
    target.manifest.splits.scenes(split)?;
    let model = Model::load(checkpoint)?;
    if model.vocabulary != train.manifest.vocabulary {
        return Err(CliError::Usage(format!(
            "checkpoint {} was not trained on {}: vocabularies differ",
            checkpoint.display(),
            train_dataset.display()
        )));
    }
    let eval = eval_dataset(&target, Some(&model), split, &EvalOptions { oracle: false, ..*opts })?;
    let mut oov_words = BTreeSet::new();
    let (mut unk, mut total) = (0usize, 0usize);
    for r in &eval.records {
        for w in tokenize(&r.text) {
            total += 1;
            if model.vocabulary.id(&w).is_none() {
                unk += 1;
                oov_words.insert(w);
            }
        }
    }
    Ok(CrossEvalOutput {
        eval,
        oov_words,
        unk_token_rate: if total == 0 { 0.0 } else { unk as f64 / total as f64 },
    })
}
