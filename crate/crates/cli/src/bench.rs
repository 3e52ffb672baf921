//! Benchmark sweeps: data efficiency over nested training fractions,
//! two-stage against single-stage training, and accuracy by expression
//! complexity.

use std::collections::BTreeMap;
use std::path::Path;

use langgrasp_core::metrics::{aggregate_outcomes, Band, Lexicon};
use langgrasp_core::synthgen::Dataset;
use langgrasp_core::training::{epochs_to_convergence, TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};

use crate::eval::{eval_dataset, EvalOptions, Model};
use crate::train::{train_model, TrainOptions};
use crate::{write_text, CliError, Result};

fn trained_model(ds: &Dataset, opts: &TrainOptions, progress: &mut dyn FnMut(&str), tag: &str) -> Result<(Model, langgrasp_core::training::TrainLog, Vec<String>)> {
    let ck = train_model(ds, opts, None, |ck| {
        let r = ck.state.log.records.last().expect("an epoch was just recorded");
        progress(&format!(
            "{tag} epoch {:>3} stage {} loss {:.5}{}",
            r.epoch,
            r.stage,
            r.total_loss,
            r.val_top1.map_or(String::new(), |v| format!(" val_top1 {v:.3}"))
        ));
        Ok(())
    })?;
    let log = ck.state.log.clone();
    let scenes = ck.meta.train_scenes.clone();
    Ok((Model::from_checkpoint(ck), log, scenes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyRow {
    pub fraction: f64,
    pub seed: u64,
    pub n_train_scenes: usize,
    pub top1: f64,
    pub topk: f64,
}

/// The training scenes of one (fraction, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetManifest {
    pub fraction: f64,
    pub seed: u64,
    pub scenes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyOutput {
    pub split: String,
    pub rows: Vec<EfficiencyRow>,
    pub manifests: Vec<SubsetManifest>,
}

impl EfficiencyOutput {
    pub fn csv(&self) -> String {
        let mut s = String::from("fraction,seed,n_train_scenes,top1,topk\n");
        for r in &self.rows {
            s.push_str(&format!("{:.2},{},{},{:.6},{:.6}\n", r.fraction, r.seed, r.n_train_scenes, r.top1, r.topk));
        }
        s
    }

    /// `efficiency.csv` plus one subset manifest per run under `subsets/`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for m in &self.manifests {
            let name = format!("fraction-{:.2}_seed-{}.json", m.fraction, m.seed);
            write_text(&dir.join("subsets").join(name), &(serde_json::to_string_pretty(m)? + "\n"))?;
        }
        write_text(&dir.join("efficiency.csv"), &self.csv())
    }
}

fn check_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() {
        return Err(CliError::Usage("at least one fraction is required".into()));
    }
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(CliError::Usage(format!("fraction {f} is outside (0, 1]")));
    }
    Ok(())
}

/// Trains one model per (fraction, seed) on nested subsets of the training
/// split and evaluates each on `split`.
pub fn run_bench_efficiency(
    ds: &Dataset,
    fractions: &[f64],
    seeds: &[u64],
    base: &TrainOptions,
    split: &str,
    eval: &EvalOptions,
    progress: &mut dyn FnMut(&str),
) -> Result<EfficiencyOutput> {
    check_fractions(fractions)?;
    if seeds.is_empty() {
        return Err(CliError::Usage("at least one seed is required".into()));
    }
    ds.manifest.splits.scenes(split)?;
    let mut out = EfficiencyOutput {
        split: split.to_string(),
        rows: Vec::new(),
        manifests: Vec::new(),
    };
    for &seed in seeds {
        for &fraction in fractions {
            let opts = TrainOptions {
                cfg: TrainConfig {
                    seed,
                    data_fraction: fraction,
                    ..base.cfg
                },
                ..base.clone()
            };
            let tag = format!("[fraction {fraction:.2} seed {seed}]");
            let (model, _, scenes) = trained_model(ds, &opts, progress, &tag)?;
            let report = eval_dataset(ds, Some(&model), split, eval)?.report;
            out.rows.push(EfficiencyRow {
                fraction,
                seed,
                n_train_scenes: scenes.len(),
                top1: report.top1_success_rate,
                topk: report.topk_success_rate,
            });
            out.manifests.push(SubsetManifest { fraction, seed, scenes });
        }
    }
    Ok(out)
}

/// Reads the subset manifests written by an efficiency sweep and checks
/// that, for every seed, each fraction's scenes contain those of every
/// smaller fraction.
pub fn nested_manifests(dir: &Path) -> Result<bool> {
    let sub = dir.join("subsets");
    let entries = std::fs::read_dir(&sub).map_err(|e| langgrasp_core::Error::io(&sub, e))?;
    let mut by_seed: BTreeMap<u64, Vec<SubsetManifest>> = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| langgrasp_core::Error::io(&sub, e))?.path();
        let text = std::fs::read_to_string(&path).map_err(|e| langgrasp_core::Error::io(&path, e))?;
        let m: SubsetManifest = serde_json::from_str(&text)?;
        by_seed.entry(m.seed).or_default().push(m);
    }
    for runs in by_seed.values_mut() {
        runs.sort_by(|a, b| a.fraction.total_cmp(&b.fraction));
        for pair in runs.windows(2) {
            if !pair[0].scenes.iter().all(|s| pair[1].scenes.contains(s)) {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    pub mode: TrainMode,
    pub seed: u64,
    pub epochs: usize,
    pub epochs_to_convergence: usize,
    pub final_val_top1: f64,
    pub top1: f64,
    pub topk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModesOutput {
    pub split: String,
    pub patience: usize,
    pub tol: f64,
    pub rows: Vec<ModeRow>,
    /// Per-run training logs, keyed like `two_stage_seed-0`.
    pub logs: BTreeMap<String, langgrasp_core::training::TrainLog>,
}

fn mode_name(m: TrainMode) -> &'static str {
    match m {
        TrainMode::TwoStage => "two_stage",
        TrainMode::SingleStage => "single_stage",
    }
}

impl ModesOutput {
    pub fn csv(&self) -> String {
        let mut s = String::from("mode,seed,epochs,epochs_to_convergence,final_val_top1,top1,topk\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.6}\n",
                mode_name(r.mode),
                r.seed,
                r.epochs,
                r.epochs_to_convergence,
                r.final_val_top1,
                r.top1,
                r.topk
            ));
        }
        s
    }

    /// `modes.csv` plus the JSON-lines log of every run under `logs/`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, log) in &self.logs {
            write_text(&dir.join("logs").join(format!("{name}.jsonl")), &log.to_jsonl()?)?;
        }
        write_text(&dir.join("modes.csv"), &self.csv())
    }
}

/// Trains two-stage and single-stage models with the same seeds, data and
/// epoch budget and reports epochs to convergence and final accuracy of
/// each. The comparison is reported, not judged.
pub fn run_bench_modes(
    ds: &Dataset,
    seeds: &[u64],
    base: &TrainOptions,
    split: &str,
    eval: &EvalOptions,
    patience: usize,
    tol: f64,
    progress: &mut dyn FnMut(&str),
) -> Result<ModesOutput> {
    if seeds.is_empty() {
        return Err(CliError::Usage("at least one seed is required".into()));
    }
    ds.manifest.splits.scenes(split)?;
    let mut out = ModesOutput {
        split: split.to_string(),
        patience,
        tol,
        rows: Vec::new(),
        logs: BTreeMap::new(),
    };
    for &seed in seeds {
        for mode in [TrainMode::TwoStage, TrainMode::SingleStage] {
            let opts = TrainOptions {
                cfg: TrainConfig { seed, mode, ..base.cfg },
                ..base.clone()
            };
            let tag = format!("[{} seed {seed}]", mode_name(mode));
            let (model, log, _) = trained_model(ds, &opts, progress, &tag)?;
            let report = eval_dataset(ds, Some(&model), split, eval)?.report;
            out.rows.push(ModeRow {
                mode,
                seed,
                epochs: log.records.len(),
                epochs_to_convergence: epochs_to_convergence(&log, patience, tol)?,
                final_val_top1: log.last_val_top1().unwrap_or(0.0),
                top1: report.top1_success_rate,
                topk: report.topk_success_rate,
            });
            out.logs.insert(format!("{}_seed-{seed}", mode_name(mode)), log);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub band: Band,
    pub n: usize,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityOutput {
    pub split: String,
    pub rows: Vec<BandRow>,
    pub n_records: usize,
    pub top1: f64,
    /// Fraction of records whose lexicon band equals the generator's
    /// recorded attribute count band.
    pub band_agreement: f64,
}

impl ComplexityOutput {
    pub fn csv(&self) -> String {
        let mut s = String::from("band,n,top1\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{:.6}\n", r.band, r.n, r.top1));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.csv())
    }
}

/// Top-1 rate per complexity band, with bands assigned by the attribute
/// lexicon from each expression's text.
pub fn run_bench_complexity(ds: &Dataset, model: Option<&Model>, split: &str, eval: &EvalOptions) -> Result<ComplexityOutput> {
    let out = eval_dataset(ds, model, split, eval)?;
    let lexicon = Lexicon::default();
    let mut outcomes = Vec::with_capacity(out.records.len());
    let mut agree = 0usize;
    for r in &out.records {
        let band = lexicon.complexity_bin(&r.text)?;
        agree += usize::from(band == r.band);
        outcomes.push((band, (r.top1, r.topk)));
    }
    let report = aggregate_outcomes(&outcomes, eval.k)?;
    Ok(ComplexityOutput {
        split: split.to_string(),
        rows: report
            .per_band
            .iter()
            .map(|(band, r)| BandRow {
                band: *band,
                n: r.n,
                top1: r.top1,
            })
            .collect(),
        n_records: report.n_records,
        top1: report.top1_success_rate,
        band_agreement: agree as f64 / out.records.len() as f64,
    })
}
