//! Two-stage optimization (mask-only, then end-to-end with mask pooling),
//! the single-stage baseline, evaluation, logging and checkpoints.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autonet::{
    build_forward, build_loss, is_grasp_head, ArchConfig, ForwardMode, ForwardOutput, Graph, Image, LossConfig,
    ModelParams, Targets, Vocabulary, MAP_STRIDE, UNK_ID,
};
use crate::error::{Error, Result};
use crate::grasp_maps::{decode_topk, rasterize_gt, GraspRect, DEFAULT_NMS_RADIUS};
use crate::io_formats::{load_container, save_container, write_atomic, Entry};
use crate::metrics::{aggregate_outcomes, record_outcome, Band, EvalRecord, EvalReport, SuccessCriteria};
use crate::synthgen::{Dataset, SceneRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    TwoStage,
    SingleStage,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_stage" => Ok(TrainMode::TwoStage),
            "single_stage" => Ok(TrainMode::SingleStage),
            other => Err(Error::Config(format!("unknown training mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub loss: LossConfig,
    pub data_fraction: f64,
    /// Probability of replacing each training token by UNK.
    pub unk_rate: f64,
    /// Number of validation expressions scored after each end-to-end epoch.
    pub val_limit: usize,
    /// Distinct expressions drawn per scene in every epoch.
    pub expressions_per_scene: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_epochs: 15,
            stage2_epochs: 45,
            learning_rate: 1e-3,
            optimizer: Optimizer::Adam,
            batch_size: 8,
            seed: 0,
            mode: TrainMode::TwoStage,
            loss: LossConfig::default(),
            data_fraction: 1.0,
            unk_rate: 0.1,
            val_limit: 100,
            expressions_per_scene: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.expressions_per_scene == 0 {
            return Err(Error::Config("expressions_per_scene must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(Error::Config(format!("data fraction must lie in (0, 1], got {}", self.data_fraction)));
        }
        if !(0.0..1.0).contains(&self.unk_rate) {
            return Err(Error::Config("unk_rate must lie in [0, 1)".into()));
        }
        self.loss.validate()
    }

    pub fn total_epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MapLosses {
    pub quality: f64,
    pub angle: f64,
    pub width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub total_loss: f64,
    pub mask_loss: f64,
    pub map_losses: MapLosses,
    pub train_mask_iou: f64,
    pub val_top1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn last_val_top1(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.val_top1)
    }
}

/// First epoch after which the validation top-1 fails to beat its running
/// best by `tol` for `patience` consecutive epochs; the last epoch when that
/// never happens. Epochs without a validation score are skipped.
pub fn epochs_to_convergence(log: &TrainLog, patience: usize, tol: f64) -> Result<usize> {
    let scored: Vec<(usize, f64)> = log.records.iter().filter_map(|r| r.val_top1.map(|v| (r.epoch, v))).collect();
    let last = log.records.last().ok_or(Error::EmptyDataset)?.epoch;
    for i in 0..scored.len() {
        if i + patience >= scored.len() {
            break;
        }
        let mut best = scored[..=i].iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        let mut stalled = true;
        for &(_, v) in &scored[i + 1..=i + patience] {
            if v - best >= tol {
                stalled = false;
                break;
            }
            best = best.max(v);
        }
        if stalled {
            return Ok(scored[i].0);
        }
    }
    Ok(last)
}

/// Supervision for one object at prediction-grid resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTargets {
    pub object_id: u32,
    pub category: String,
    pub targets: Targets,
    /// Ground-truth grasps in image pixels.
    pub grasps: Vec<GraspRect>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionItem {
    pub text: String,
    pub tokens: Vec<usize>,
    /// Index into the owning scene's `objects`.
    pub object: usize,
    pub band: Band,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneItem {
    pub scene_id: String,
    pub image: Image,
    pub objects: Vec<ObjectTargets>,
    pub expressions: Vec<ExpressionItem>,
}

/// Image-pixel rectangle to prediction-grid coordinates.
pub fn to_grid(r: &GraspRect) -> GraspRect {
    r.rescaled(1.0 / MAP_STRIDE as f64, (MAP_STRIDE as f64 - 1.0) / 2.0)
}

/// Prediction-grid rectangle back to image pixels.
pub fn to_image(r: &GraspRect) -> GraspRect {
    r.rescaled(MAP_STRIDE as f64, -(MAP_STRIDE as f64 - 1.0) / (2.0 * MAP_STRIDE as f64))
}

/// Block-averaged mask: a grid cell is foreground when at least half of its
/// pixels are.
pub fn downsample_mask(mask: &[u8], height: usize, width: usize) -> Vec<f64> {
    let (gh, gw) = (height / MAP_STRIDE, width / MAP_STRIDE);
    let mut out = vec![0.0; gh * gw];
    for r in 0..gh {
        for c in 0..gw {
            let mut n = 0;
            for y in r * MAP_STRIDE..(r + 1) * MAP_STRIDE {
                for x in c * MAP_STRIDE..(c + 1) * MAP_STRIDE {
                    n += usize::from(mask[y * width + x] != 0);
                }
            }
            if 2 * n >= MAP_STRIDE * MAP_STRIDE {
                out[r * gw + c] = 1.0;
            }
        }
    }
    out
}

/// Scenes of one split prepared for training or evaluation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainData {
    pub items: Vec<SceneItem>,
}

impl TrainData {
    /// Prepares `scenes`; with `unseen_only`, keeps only expressions whose
    /// target category is in `unseen`.
    pub fn from_scenes(scenes: &[&SceneRecord], vocab: &Vocabulary, unseen: Option<&[String]>) -> Result<Self> {
        let mut items = Vec::with_capacity(scenes.len());
        for s in scenes {
            if s.height % MAP_STRIDE != 0 || s.width % MAP_STRIDE != 0 {
                return Err(Error::Shape(format!("scene {} is not divisible by the map stride", s.scene_id)));
            }
            let (gh, gw) = (s.height / MAP_STRIDE, s.width / MAP_STRIDE);
            let mut objects = Vec::new();
            let mut index_of = Vec::new();
            for o in &s.objects {
                if o.grasps4dof.is_empty() {
                    index_of.push(None);
                    continue;
                }
                let grid: Vec<GraspRect> = o.grasps4dof.iter().map(to_grid).collect();
                let maps = rasterize_gt(&grid, gh as u32, gw as u32)?;
                index_of.push(Some(objects.len()));
                objects.push(ObjectTargets {
                    object_id: o.object_id,
                    category: o.category.clone(),
                    targets: Targets {
                        mask: downsample_mask(&o.mask, s.height, s.width),
                        maps,
                    },
                    grasps: o.grasps4dof.clone(),
                });
            }
            let mut expressions = Vec::new();
            for e in &s.expressions {
                let Some(k) = s.objects.iter().position(|o| o.object_id == e.target_object_id) else {
                    return Err(Error::Config(format!("expression {:?} targets a missing object", e.text)));
                };
                let Some(obj) = index_of[k] else { continue };
                if let Some(u) = unseen {
                    if !u.contains(&objects[obj].category) {
                        continue;
                    }
                }
                expressions.push(ExpressionItem {
                    text: e.text.clone(),
                    tokens: vocab.encode(&e.text),
                    object: obj,
                    band: Band::from_count(e.attribute_count),
                });
            }
            items.push(SceneItem {
                scene_id: s.scene_id.clone(),
                image: Image::new(s.height, s.width, s.image.clone())?,
                objects,
                expressions,
            });
        }
        Ok(Self { items })
    }

    /// Prepares a named split of a dataset. `test_unseen` keeps only
    /// expressions about unseen categories.
    pub fn from_split(ds: &Dataset, split: &str, vocab: &Vocabulary) -> Result<Self> {
        let scenes = ds.split(split)?;
        let unseen = (split == "test_unseen").then_some(ds.manifest.splits.unseen_categories.as_slice());
        Self::from_scenes(&scenes, vocab, unseen)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_expressions(&self) -> usize {
        self.items.iter().map(|i| i.expressions.len()).sum()
    }

    pub fn scene_ids(&self) -> Vec<String> {
        self.items.iter().map(|i| i.scene_id.clone()).collect()
    }

    /// A seeded prefix of a fixed shuffle: for one seed, smaller fractions
    /// are subsets of larger ones.
    pub fn fraction(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Config(format!("data fraction must lie in (0, 1], got {fraction}")));
        }
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xf2ac_7100));
        let n = ((fraction * self.items.len() as f64).round() as usize).clamp(1.min(self.items.len()), self.items.len());
        let mut keep = order[..n].to_vec();
        keep.sort_unstable();
        Ok(Self {
            items: keep.into_iter().map(|i| self.items[i].clone()).collect(),
        })
    }

    /// One expression per scene, chosen by `seed`, at most `limit` of them.
    pub fn one_per_scene(&self, seed: u64, limit: usize) -> Vec<(usize, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.items
            .iter()
            .enumerate()
            .filter(|(_, it)| !it.expressions.is_empty())
            .map(|(i, it)| (i, rng.gen_range(0..it.expressions.len())))
            .take(limit)
            .collect()
    }

    /// Every (scene, expression) pair.
    pub fn all_expressions(&self) -> Vec<(usize, usize)> {
        self.items
            .iter()
            .enumerate()
            .flat_map(|(i, it)| (0..it.expressions.len()).map(move |e| (i, e)))
            .collect()
    }
}

/// Per-tensor Adam moments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub steps: Vec<u64>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            steps: vec![0; params.len()],
        }
    }

    /// One update from the gradients stored in `params`, skipping tensors
    /// for which `frozen` holds.
    pub fn step(&mut self, params: &mut ModelParams, kind: Optimizer, lr: f64, frozen: impl Fn(&str) -> bool) {
        let names = params.names().to_vec();
        for (i, t) in params.tensors_mut().iter_mut().enumerate() {
            if frozen(&names[i]) {
                continue;
            }
            match kind {
                Optimizer::Sgd => {
                    for (p, g) in t.values.iter_mut().zip(&t.grad) {
                        *p -= lr * g;
                    }
                }
                Optimizer::Adam => {
                    self.steps[i] += 1;
                    let n = self.steps[i] as i32;
                    let c1 = 1.0 - ADAM_BETA1.powi(n);
                    let c2 = 1.0 - ADAM_BETA2.powi(n);
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..t.values.len() {
                        let g = t.grad[j];
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
                        t.values[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Everything needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    /// Completed epochs, counted across both stages.
    pub epoch: usize,
    pub log: TrainLog,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        let optimizer = OptimizerState::new(&params);
        Self {
            params,
            optimizer,
            epoch: 0,
            log: TrainLog::default(),
        }
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn mask_iou(pred: &[f64], gt: &[f64]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        let (a, b) = (*p > 0.5, *g > 0.5);
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Runs one epoch of the given stage and appends its record.
fn run_epoch(
    state: &mut TrainState,
    arch: &ArchConfig,
    data: &TrainData,
    val: Option<&TrainData>,
    cfg: &TrainConfig,
    stage: u8,
) -> Result<()> {
    let epoch = state.epoch + 1;
    let mode = match (stage, cfg.mode) {
        (1, _) => ForwardMode::MASK_ONLY,
        (_, TrainMode::TwoStage) => ForwardMode::FULL,
        (_, TrainMode::SingleStage) => ForwardMode::NO_POOLING,
    };
    let mut rng = epoch_rng(cfg.seed, epoch);
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (i, item) in data.items.iter().enumerate() {
        let n = item.expressions.len();
        for e in rand::seq::index::sample(&mut rng, n, cfg.expressions_per_scene.min(n)) {
            order.push((i, e));
        }
    }
    if order.is_empty() {
        return Err(Error::EmptyDataset);
    }
    order.shuffle(&mut rng);
    let mut sums = [0.0f64; 6];
    let mut count = 0usize;
    for batch in order.chunks(cfg.batch_size) {
        state.params.zero_grads();
        for &(i, e) in batch {
            let item = &data.items[i];
            let e = &item.expressions[e];
            let tokens: Vec<usize> = e
                .tokens
                .iter()
                .map(|&t| if rng.gen::<f64>() < cfg.unk_rate { UNK_ID } else { t })
                .collect();
            let target = &item.objects[e.object];
            let mut g = Graph::new();
            let nodes = build_forward(&mut g, arch, &state.params, &item.image, &tokens, mode)?;
            let loss = build_loss(&mut g, &nodes, &target.targets, &cfg.loss, arch.max_width_map())?;
            let grads = g.backward(loss.total)?;
            state.params.accumulate(&grads, 1.0 / batch.len() as f64);
            let b = loss.breakdown(&g);
            let iou = mask_iou(g.value(nodes.mask), &target.targets.mask);
            for (s, v) in sums.iter_mut().zip([b.total, b.mask, b.quality, b.angle, b.width, iou]) {
                *s += v;
            }
            count += 1;
        }
        let frozen = |name: &str| stage == 1 && is_grasp_head(name);
        state.optimizer.step(&mut state.params, cfg.optimizer, cfg.learning_rate, frozen);
    }
    if !state.params.all_finite() {
        return Err(Error::Config(format!("parameters diverged in epoch {epoch}; lower the learning rate")));
    }
    let mean = sums.map(|s| s / count as f64);
    let val_top1 = match (stage, val) {
        (2, Some(v)) if !v.is_empty() => {
            let picks = v.one_per_scene(cfg.seed ^ 0x7a1, cfg.val_limit);
            let (report, _) = evaluate(arch, &state.params, v, &picks, 1, DEFAULT_NMS_RADIUS, &SuccessCriteria::default())?;
            Some(report.top1_success_rate)
        }
        _ => None,
    };
    state.log.records.push(EpochRecord {
        epoch,
        stage,
        total_loss: mean[0],
        mask_loss: mean[1],
        map_losses: MapLosses {
            quality: mean[2],
            angle: mean[3],
            width: mean[4],
        },
        train_mask_iou: mean[5],
        val_top1,
    });
    state.epoch = epoch;
    Ok(())
}

/// Mask-only training of the segmentation path; grasp-head tensors are left
/// untouched.
pub fn train_stage1(data: &TrainData, params: ModelParams, arch: &ArchConfig, cfg: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut state = TrainState::new(params);
    for _ in 0..cfg.stage1_epochs {
        run_epoch(&mut state, arch, data, None, cfg, 1)?;
    }
    Ok((state.params, state.log))
}

/// End-to-end training of every parameter with mask pooling active.
pub fn train_stage2(
    data: &TrainData,
    params: ModelParams,
    arch: &ArchConfig,
    val: Option<&TrainData>,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut state = TrainState::new(params);
    for _ in 0..cfg.stage2_epochs {
        run_epoch(&mut state, arch, data, val, cfg, 2)?;
    }
    Ok((state.params, state.log))
}

/// Continues a run until its configured epoch budget is spent, calling
/// `on_epoch` after every epoch (e.g. to checkpoint).
///
/// Two-stage mode spends `stage1_epochs` on the mask alone and the rest end
/// to end; single-stage mode trains end to end without pooling for the same
/// total budget.
pub fn train(
    state: &mut TrainState,
    arch: &ArchConfig,
    data: &TrainData,
    val: Option<&TrainData>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.mode == TrainMode::SingleStage && arch.mask_pooling {
        return Err(Error::Config("single-stage training needs an architecture without mask pooling".into()));
    }
    while state.epoch < cfg.total_epochs() {
        let stage = if cfg.mode == TrainMode::TwoStage && state.epoch < cfg.stage1_epochs { 1 } else { 2 };
        run_epoch(state, arch, data, val, cfg, stage)?;
        on_epoch(state)?;
    }
    Ok(())
}

/// Per-record outcome, as dumped next to an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordDump {
    pub scene_id: String,
    pub object_id: u32,
    pub text: String,
    pub band: Band,
    pub top1: bool,
    pub topk: bool,
    pub preds: Vec<GraspRect>,
}

/// Ranked image-space predictions for one expression.
pub fn predict(arch: &ArchConfig, params: &ModelParams, image: &Image, tokens: &[usize], k: usize, nms_radius: usize) -> Result<(ForwardOutput, Vec<GraspRect>)> {
    let out = crate::autonet::forward(arch, params, image, tokens)?;
    let preds = decode_topk(&out.maps, k, nms_radius).iter().map(to_image).collect();
    Ok((out, preds))
}

/// Where the ranked grasps of an evaluation come from.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a> {
    Model { arch: &'a ArchConfig, params: &'a ModelParams },
    /// Decodes the ground-truth maps themselves (an upper bound).
    Oracle,
}

fn score_pick(
    predictor: Predictor<'_>,
    data: &TrainData,
    (i, e): (usize, usize),
    k: usize,
    nms_radius: usize,
    criteria: &SuccessCriteria,
) -> Result<RecordDump> {
    let item = data
        .items
        .get(i)
        .ok_or_else(|| Error::Config(format!("scene index {i} out of range")))?;
    let ex = item
        .expressions
        .get(e)
        .ok_or_else(|| Error::Config(format!("expression index {e} out of range in scene {}", item.scene_id)))?;
    let target = &item.objects[ex.object];
    let preds = match predictor {
        Predictor::Model { arch, params } => predict(arch, params, &item.image, &ex.tokens, k, nms_radius)?.1,
        Predictor::Oracle => decode_topk(&target.targets.maps, k, nms_radius).iter().map(to_image).collect(),
    };
    let record = EvalRecord {
        preds,
        gts: target.grasps.clone(),
        band: ex.band,
    };
    let (top1, topk) = record_outcome(&record, k, criteria)?;
    Ok(RecordDump {
        scene_id: item.scene_id.clone(),
        object_id: target.object_id,
        text: ex.text.clone(),
        band: ex.band,
        top1,
        topk,
        preds: record.preds,
    })
}

/// Scores the selected (scene, expression) pairs. Records are split into
/// contiguous chunks over the available cores and reassembled in pick order,
/// so the result does not depend on the worker count.
pub fn evaluate_with(
    predictor: Predictor<'_>,
    data: &TrainData,
    picks: &[(usize, usize)],
    k: usize,
    nms_radius: usize,
    criteria: &SuccessCriteria,
) -> Result<(EvalReport, Vec<RecordDump>)> {
    if picks.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(picks.len());
    let score = |chunk: &[(usize, usize)]| -> Result<Vec<RecordDump>> {
        chunk.iter().map(|&p| score_pick(predictor, data, p, k, nms_radius, criteria)).collect()
    };
    let dumps: Vec<RecordDump> = if workers <= 1 {
        score(picks)?
    } else {
        let chunk = picks.len().div_ceil(workers);
        let parts: Vec<Result<Vec<RecordDump>>> = std::thread::scope(|s| {
            let handles: Vec<_> = picks.chunks(chunk).map(|c| s.spawn(move || score(c))).collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        });
        let mut all = Vec::with_capacity(picks.len());
        for part in parts {
            all.extend(part?);
        }
        all
    };
    let outcomes: Vec<_> = dumps.iter().map(|d| (d.band, (d.top1, d.topk))).collect();
    Ok((aggregate_outcomes(&outcomes, k)?, dumps))
}

pub fn evaluate(
    arch: &ArchConfig,
    params: &ModelParams,
    data: &TrainData,
    picks: &[(usize, usize)],
    k: usize,
    nms_radius: usize,
    criteria: &SuccessCriteria,
) -> Result<(EvalReport, Vec<RecordDump>)> {
    evaluate_with(Predictor::Model { arch, params }, data, picks, k, nms_radius, criteria)
}

/// JSON sidecar of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub arch: ArchConfig,
    pub vocabulary: Vocabulary,
    pub seed: u64,
    /// Stage of the last completed epoch (0 before training).
    pub stage: u8,
    pub epoch: usize,
    pub train_config: Option<TrainConfig>,
    pub log: TrainLog,
    /// Scene ids the run trained on.
    #[serde(default)]
    pub train_scenes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub state: TrainState,
}

const OPT_PREFIX_M: &str = "optim.m/";
const OPT_PREFIX_V: &str = "optim.v/";
const OPT_STEPS: &str = "optim.steps";

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Checkpoint {
    pub fn new(arch: ArchConfig, vocabulary: Vocabulary, state: TrainState, cfg: Option<TrainConfig>, train_scenes: Vec<String>) -> Self {
        let stage = state.log.records.last().map_or(0, |r| r.stage);
        Self {
            meta: CheckpointMeta {
                format_version: 1,
                seed: cfg.map_or(0, |c| c.seed),
                arch,
                vocabulary,
                stage,
                epoch: state.epoch,
                train_config: cfg,
                log: state.log.clone(),
                train_scenes,
            },
            state,
        }
    }

    /// Writes the tensor container at `path` and the JSON sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let p = &self.state.params;
        let mut entries = p.to_entries();
        for (i, name) in p.names().iter().enumerate() {
            let dims = &p.tensors()[i].dims;
            entries.push(Entry::f64(format!("{OPT_PREFIX_M}{name}"), dims, self.state.optimizer.m[i].clone()));
            entries.push(Entry::f64(format!("{OPT_PREFIX_V}{name}"), dims, self.state.optimizer.v[i].clone()));
        }
        let steps: Vec<f64> = self.state.optimizer.steps.iter().map(|&s| s as f64).collect();
        entries.push(Entry::f64(OPT_STEPS, &[steps.len()], steps));
        save_container(path, &entries)?;
        write_atomic(&meta_path(path), serde_json::to_string_pretty(&self.meta)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mp = meta_path(path);
        let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text)?;
        let entries = load_container(path)?;
        let mut params = crate::autonet::init_params(&meta.arch, 0)?;
        params.load_entries(&entries)?;
        let mut optimizer = OptimizerState::new(&params);
        for (i, name) in params.names().iter().enumerate() {
            if let Ok(e) = crate::io_formats::find(&entries, &format!("{OPT_PREFIX_M}{name}")) {
                optimizer.m[i] = e.data.to_f64();
            }
            if let Ok(e) = crate::io_formats::find(&entries, &format!("{OPT_PREFIX_V}{name}")) {
                optimizer.v[i] = e.data.to_f64();
            }
        }
        if let Ok(e) = crate::io_formats::find(&entries, OPT_STEPS) {
            optimizer.steps = e.data.to_f64().into_iter().map(|s| s as u64).collect();
        }
        let state = TrainState {
            params,
            optimizer,
            epoch: meta.epoch,
            log: meta.log.clone(),
        };
        Ok(Self { meta, state })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_of(vals: &[Option<f64>]) -> TrainLog {
        TrainLog {
            records: vals
                .iter()
                .enumerate()
                .map(|(i, v)| EpochRecord {
                    epoch: i + 1,
                    stage: 2,
                    total_loss: 0.0,
                    mask_loss: 0.0,
                    map_losses: MapLosses::default(),
                    train_mask_iou: 0.0,
                    val_top1: *v,
                })
                .collect(),
        }
    }

    #[test]
    fn convergence_examples() {
        let mut v: Vec<Option<f64>> = (1..=9).map(|i| Some(i as f64 * 0.05)).collect();
        v.extend(std::iter::repeat(Some(0.5)).take(8));
        assert_eq!(epochs_to_convergence(&log_of(&v), 3, 1e-3).unwrap(), 10);
        let rising: Vec<Option<f64>> = (1..=12).map(|i| Some(i as f64 * 0.05)).collect();
        assert_eq!(epochs_to_convergence(&log_of(&rising), 3, 1e-3).unwrap(), 12);
        assert!(epochs_to_convergence(&TrainLog::default(), 3, 1e-3).is_err());
    }

    #[test]
    fn grid_and_image_coordinates_invert() {
        let r = GraspRect::new(37.25, 12.5, 20.0, 0.3, 10.0);
        let back = to_image(&to_grid(&r));
        assert!((back.x - r.x).abs() < 1e-12 && (back.y - r.y).abs() < 1e-12 && (back.w - r.w).abs() < 1e-12);
        // image pixel 1.5 is the center of grid cell 0
        assert!(to_grid(&GraspRect::new(1.5, 5.5, 4.0, 0.0, 2.0)).x.abs() < 1e-12);
    }

    #[test]
    fn downsample_mask_majority() {
        let mut m = vec![0u8; 8 * 8];
        for y in 0..4 {
            for x in 0..2 {
                m[y * 8 + x] = 1;
            }
        }
        assert_eq!(downsample_mask(&m, 8, 8), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let arch = ArchConfig::new(5);
        let mut p = crate::autonet::init_params(&arch, 1).unwrap();
        for t in p.tensors_mut() {
            t.grad.iter_mut().enumerate().for_each(|(i, g)| *g = (i as f64).sin());
        }
        let before = p.clone();
        let mut opt = OptimizerState::new(&p);
        opt.step(&mut p, Optimizer::Adam, 0.0, |_| false);
        opt.step(&mut p, Optimizer::Sgd, 0.0, |_| false);
        for (a, b) in p.tensors().iter().zip(before.tensors()) {
            assert_eq!(a.values, b.values);
        }
    }
}
