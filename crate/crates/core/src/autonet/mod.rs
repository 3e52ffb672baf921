//! A small hand-differentiated vision-language grasp network.

mod graph;
mod loss;
mod model;
mod tensor;
mod vocab;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use graph::{smooth_l1, ConvSpec, Graph, NodeId};
pub use loss::{build_loss, mask_loss, total_loss, weighted_smooth_l1, LossBreakdown, LossConfig, LossNodes, Targets};
pub use model::{
    build_forward, embed_text, embed_text_nodes, forward, init_params, is_grasp_head, mask_head, mask_pool, ArchConfig,
    ForwardMode, ForwardNodes, ForwardOutput, Image, MAP_STRIDE,
};
pub use tensor::{ModelParams, Tensor};
pub use vocab::{Vocabulary, PAD, UNK, UNK_ID};

use crate::error::Result;
use crate::grasp_maps::{rasterize_gt, GraspRect};

/// One supervised example at network resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub tokens: Vec<usize>,
    pub targets: Targets,
}

/// Loss value and per-parameter gradients for one sample.
pub fn loss_and_grads(
    arch: &ArchConfig,
    params: &ModelParams,
    sample: &Sample,
    cfg: &LossConfig,
    mode: ForwardMode,
) -> Result<(LossBreakdown, Vec<(usize, Vec<f64>)>)> {
    let mut g = Graph::new();
    let nodes = build_forward(&mut g, arch, params, &sample.image, &sample.tokens, mode)?;
    let loss = build_loss(&mut g, &nodes, &sample.targets, cfg, arch.max_width_map())?;
    let grads = g.backward(loss.total)?;
    Ok((loss.breakdown(&g), grads))
}

/// Loss value only.
pub fn loss_value(arch: &ArchConfig, params: &ModelParams, sample: &Sample, cfg: &LossConfig, mode: ForwardMode) -> Result<f64> {
    let mut g = Graph::new();
    let nodes = build_forward(&mut g, arch, params, &sample.image, &sample.tokens, mode)?;
    let loss = build_loss(&mut g, &nodes, &sample.targets, cfg, arch.max_width_map())?;
    Ok(g.scalar(loss.total))
}

/// Below this magnitude a gradient is compared on an absolute scale, since
/// central differences carry roughly `1e-16 * |L| / h` rounding noise.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
    /// Largest absolute analytic gradient over grasp-head tensors.
    pub head_grad_max: f64,
}

/// `|a - n| / max(|a|, |n|, GRADCHECK_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// Compares analytic gradients of every registry scalar against central
/// finite differences with step `h`.
pub fn gradcheck(
    arch: &ArchConfig,
    params: &ModelParams,
    sample: &Sample,
    cfg: &LossConfig,
    mode: ForwardMode,
    h: f64,
) -> Result<GradcheckReport> {
    let (_, grads) = loss_and_grads(arch, params, sample, cfg, mode)?;
    let mut analytic: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
    for (i, g) in grads {
        analytic[i] = g;
    }
    let mut work = params.clone();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
        head_grad_max: 0.0,
    };
    for ti in 0..params.len() {
        let name = params.names()[ti].clone();
        if is_grasp_head(&name) {
            let m = analytic[ti].iter().fold(0.0f64, |m, g| m.max(g.abs()));
            report.head_grad_max = report.head_grad_max.max(m);
        }
        for j in 0..params.tensors()[ti].len() {
            let orig = params.tensors()[ti].values[j];
            work.tensors_mut()[ti].values[j] = orig + h;
            let up = loss_value(arch, &work, sample, cfg, mode)?;
            work.tensors_mut()[ti].values[j] = orig - h;
            let down = loss_value(arch, &work, sample, cfg, mode)?;
            work.tensors_mut()[ti].values[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic[ti][j], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = j;
            }
        }
    }
    Ok(report)
}

/// A random image, token sequence and plausible targets for gradient checks.
pub fn random_sample(arch: &ArchConfig, size: usize, n_tokens: usize, seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = Image::new(size, size, (0..size * size * 3).map(|_| rng.gen::<f64>()).collect())?;
    let tokens = (0..n_tokens).map(|_| rng.gen_range(0..arch.vocab_size)).collect();
    let grid = size / MAP_STRIDE;
    let mask = (0..grid * grid).map(|_| f64::from(u8::from(rng.gen_bool(0.3)))).collect();
    let c = grid as f64 / 2.0;
    let rect = GraspRect::new(c, c, rng.gen_range(1.0..arch.max_width_map()), rng.gen_range(-1.5..1.5), 1.0);
    let maps = rasterize_gt(&[rect], grid as u32, grid as u32)?;
    Ok(Sample {
        image,
        tokens,
        targets: Targets { mask, maps },
    })
}
