//! Single-shot tools: map decoding, 6-DoF lifting, gradient checking,
//! grasp filtering and dataset generation.

use std::path::Path;

use langgrasp_core::autonet::{
    gradcheck, init_params, is_grasp_head, loss_and_grads, random_sample, ArchConfig, ForwardMode, GradcheckReport, LossConfig,
};
use langgrasp_core::geometry3d::{deproject, rect_to_points, sample_candidates, select_grasp};
use langgrasp_core::grasp_maps::decode_topk;
use langgrasp_core::io_formats::{find, load_container};
use langgrasp_core::synthgen::{filter_grasps, generate_dataset, Dataset, DatasetConfig, SceneRecord};
use langgrasp_core::{Grasp6DoF, GraspMaps, GraspRect, GripperModel};
use serde::Serialize;

use crate::{CliError, Result};

/// Ranked grasps from a container holding one `3 x H x W` map stack (named
/// `maps`, or the only entry).
pub fn decode_maps_file(path: &Path, k: usize, nms_radius: usize) -> Result<Vec<GraspRect>> {
    if k == 0 {
        return Err(CliError::Usage("k must be at least 1".into()));
    }
    let entries = load_container(path)?;
    let entry = match find(&entries, "maps") {
        Ok(e) => e,
        Err(_) if entries.len() == 1 => &entries[0],
        Err(e) => return Err(e.into()),
    };
    let maps = GraspMaps::from_entry(entry)?;
    Ok(decode_topk(&maps, k, nms_radius))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiftOptions {
    /// Pixel stride of the depth back-projection.
    pub stride: usize,
    /// Candidates drawn by the geometric sampler when no pool is given.
    pub n_candidates: usize,
    pub seed: u64,
    pub gripper: GripperModel,
}

impl Default for LiftOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            n_candidates: 64,
            seed: 0,
            gripper: GripperModel::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LiftOutput {
    pub scene_id: String,
    pub rect: GraspRect,
    /// Cloud points inside the rectangle footprint.
    pub region_points: usize,
    pub candidates: usize,
    pub selected_index: usize,
    pub overlap: usize,
    pub pose: Grasp6DoF,
}

/// Lifts a planar grasp on `scene` to the 6-DoF candidate whose closing
/// volume covers the most points under the rectangle. Without an external
/// pool, candidates are sampled from those points.
pub fn lift(scene: &SceneRecord, rect: &GraspRect, pool: Option<Vec<Grasp6DoF>>, opts: &LiftOptions) -> Result<LiftOutput> {
    let cloud = deproject(&scene.depth, scene.height, scene.width, &scene.intrinsics, opts.stride)?;
    let region = rect_to_points(rect, &cloud)?;
    let candidates = match pool {
        Some(p) => p,
        None => sample_candidates(&region, opts.n_candidates, &opts.gripper, opts.seed)?,
    };
    let sel = select_grasp(&candidates, &region, &opts.gripper)?;
    Ok(LiftOutput {
        scene_id: scene.scene_id.clone(),
        rect: *rect,
        region_points: region.len(),
        candidates: candidates.len(),
        selected_index: sel.index,
        overlap: sel.overlap,
        pose: sel.pose,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub arch: ArchConfig,
    pub seed: u64,
    /// Input side length in pixels.
    pub size: usize,
    pub tokens: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            arch: toy_arch(),
            seed: 0,
            size: 16,
            tokens: 4,
            step: 1e-5,
            tolerance: 1e-4,
        }
    }
}

/// The full architecture (every block and parameter kind) at toy widths.
pub fn toy_arch() -> ArchConfig {
    ArchConfig {
        embed_dim: 8,
        channels: 8,
        stem_channels: [4, 8],
        head_hidden: 4,
        ..ArchConfig::new(12)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckOutcome {
    pub n_params: usize,
    pub n_scalars: usize,
    pub report: GradcheckReport,
    /// Largest grasp-head gradient magnitude in a mask-only graph.
    pub stage1_head_grad_max: f64,
    pub passed: bool,
}

/// Finite-difference check of every registered parameter on a random input,
/// plus the frozen-head check of the mask-only graph.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckOutcome> {
    opts.arch.validate()?;
    if !(opts.step > 0.0) {
        return Err(CliError::Usage("finite-difference step must be positive".into()));
    }
    let params = init_params(&opts.arch, opts.seed)?;
    let sample = random_sample(&opts.arch, opts.size, opts.tokens, opts.seed.wrapping_add(1))?;
    let loss = LossConfig::default();
    let report = gradcheck(&opts.arch, &params, &sample, &loss, ForwardMode::FULL, opts.step)?;
    let (_, grads) = loss_and_grads(&opts.arch, &params, &sample, &loss, ForwardMode::MASK_ONLY)?;
    let stage1_head_grad_max = grads
        .iter()
        .filter(|(i, _)| is_grasp_head(&params.names()[*i]))
        .flat_map(|(_, g)| g.iter())
        .fold(0.0f64, |m, g| m.max(g.abs()));
    let passed = report.checked == params.num_scalars() && report.max_rel_error < opts.tolerance && stage1_head_grad_max == 0.0;
    Ok(GradcheckOutcome {
        n_params: params.len(),
        n_scalars: params.num_scalars(),
        report,
        stage1_head_grad_max,
        passed,
    })
}

/// Grasps (JSON lines of rectangles with scores) kept at `threshold`.
pub fn filter_file(path: &Path, threshold: f64) -> Result<Vec<GraspRect>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CliError::Usage(format!("threshold {threshold} is outside [0, 1]")));
    }
    let text = std::fs::read_to_string(path).map_err(|e| langgrasp_core::Error::io(path, e))?;
    let grasps = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str::<GraspRect>)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(filter_grasps(&grasps, threshold))
}

/// Generates a dataset in memory and only then writes it under `out`.
pub fn gen_data(cfg: &DatasetConfig, out: &Path) -> Result<Dataset> {
    let ds = generate_dataset(cfg)?;
    ds.save(out)?;
    Ok(ds)
}
