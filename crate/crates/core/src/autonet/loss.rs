//! Mask and grasp-map losses, both as plain functions of predicted values and
//! as graph nodes for backpropagation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grasp_maps::{encode_angle, GraspMaps};

use super::graph::{smooth_l1, Graph, NodeId};
use super::model::{ForwardNodes, ForwardOutput};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub beta: f64,
    pub alpha: f64,
    pub lambda_mask: f64,
    pub lambda_q: f64,
    pub lambda_theta: f64,
    pub lambda_w: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            alpha: 2.0,
            lambda_mask: 1.0,
            lambda_q: 1.0,
            lambda_theta: 1.0,
            lambda_w: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!("smooth-L1 beta must be positive, got {}", self.beta)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        let lambdas = [self.lambda_mask, self.lambda_q, self.lambda_theta, self.lambda_w];
        if lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Per-pixel weights `1 + alpha * q_gt`.
    pub fn pixel_weights(&self, q_gt: &[f64]) -> Vec<f64> {
        q_gt.iter().map(|q| 1.0 + self.alpha * q).collect()
    }
}

/// Mean of `(1 + alpha * q_gt) * smooth_l1(pred - gt)`.
pub fn weighted_smooth_l1(pred: &[f64], gt: &[f64], q_gt: &[f64], cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    if pred.len() != gt.len() || pred.len() != q_gt.len() {
        return Err(Error::Shape("prediction, target and quality grids differ in size".into()));
    }
    if pred.is_empty() {
        return Err(Error::Shape("empty grid".into()));
    }
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .zip(q_gt)
        .map(|((p, t), q)| (1.0 + cfg.alpha * q) * smooth_l1(p - t, cfg.beta))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Mean binary cross-entropy of a soft mask against a binary target.
pub fn mask_loss(m: &[f64], m_gt: &[f64]) -> Result<f64> {
    if m.len() != m_gt.len() || m.is_empty() {
        return Err(Error::Shape("mask and target sizes differ".into()));
    }
    let eps = 1e-300;
    let sum: f64 = m
        .iter()
        .zip(m_gt)
        .map(|(&p, &t)| -(t * p.max(eps).ln() + (1.0 - t) * (1.0 - p).max(eps).ln()))
        .sum();
    Ok(sum / m.len() as f64)
}

/// Supervision for one sample on the prediction grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub mask: Vec<f64>,
    pub maps: GraspMaps,
}

impl Targets {
    /// `(sin 2θ, cos 2θ)` targets; background pixels carry angle 0, i.e. `(0, 1)`.
    pub fn angle_targets(&self) -> (Vec<f64>, Vec<f64>) {
        self.maps.angle.iter().map(|&t| encode_angle(t)).unzip()
    }

    /// Widths normalized by the gripper maximum, clamped to `[0, 1]`.
    pub fn width_targets(&self, max_width_map: f64) -> Vec<f64> {
        self.maps.width.iter().map(|w| (w / max_width_map).clamp(0.0, 1.0)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mask: f64,
    pub quality: f64,
    pub angle: f64,
    pub width: f64,
}

/// Recomputes the training objective from forward values.
pub fn total_loss(out: &ForwardOutput, gt: &Targets, cfg: &LossConfig, max_width_map: f64) -> Result<LossBreakdown> {
    cfg.validate()?;
    let q_gt = &gt.maps.quality;
    let mask = mask_loss(&out.mask, &gt.mask)?;
    let quality = weighted_smooth_l1(&out.maps.quality, q_gt, q_gt, cfg)?;
    let (s_gt, c_gt) = gt.angle_targets();
    let angle = weighted_smooth_l1(&out.sin2, &s_gt, q_gt, cfg)? + weighted_smooth_l1(&out.cos2, &c_gt, q_gt, cfg)?;
    let width = weighted_smooth_l1(&out.width_norm, &gt.width_targets(max_width_map), q_gt, cfg)?;
    let total = cfg.lambda_mask * mask + cfg.lambda_q * quality + cfg.lambda_theta * angle + cfg.lambda_w * width;
    Ok(LossBreakdown {
        total,
        mask,
        quality,
        angle,
        width,
    })
}

/// Loss nodes appended to a forward graph.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: NodeId,
    pub mask: NodeId,
    pub quality: Option<NodeId>,
    pub angle: Option<NodeId>,
    pub width: Option<NodeId>,
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |n: Option<NodeId>| n.map_or(0.0, |n| g.scalar(n));
        LossBreakdown {
            total: g.scalar(self.total),
            mask: g.scalar(self.mask),
            quality: v(self.quality),
            angle: v(self.angle),
            width: v(self.width),
        }
    }
}

/// Builds the loss on top of `nodes`. Without grasp heads in the graph only
/// the mask term is used.
pub fn build_loss(g: &mut Graph, nodes: &ForwardNodes, gt: &Targets, cfg: &LossConfig, max_width_map: f64) -> Result<LossNodes> {
    cfg.validate()?;
    let mask = g.bce_with_logits(nodes.mask_logits, &gt.mask)?;
    let (Some(q), Some(a), Some(w)) = (nodes.quality, nodes.angle, nodes.width) else {
        let total = g.weighted_sum(&[(mask, cfg.lambda_mask)])?;
        return Ok(LossNodes {
            total,
            mask,
            quality: None,
            angle: None,
            width: None,
        });
    };
    let q_gt = &gt.maps.quality;
    let weight = cfg.pixel_weights(q_gt);
    let quality = g.weighted_smooth_l1(q, q_gt, &weight, cfg.beta)?;
    let (s_gt, c_gt) = gt.angle_targets();
    let mut both = s_gt;
    both.extend(c_gt);
    let mut weight2 = weight.clone();
    weight2.extend_from_slice(&weight);
    // both channels share one mean over 2N elements; scale back to a per-channel sum
    let angle_mean = g.weighted_smooth_l1(a, &both, &weight2, cfg.beta)?;
    let angle = g.weighted_sum(&[(angle_mean, 2.0)])?;
    let width = g.weighted_smooth_l1(w, &gt.width_targets(max_width_map), &weight, cfg.beta)?;
    let total = g.weighted_sum(&[
        (mask, cfg.lambda_mask),
        (quality, cfg.lambda_q),
        (angle, cfg.lambda_theta),
        (width, cfg.lambda_w),
    ])?;
    Ok(LossNodes {
        total,
        mask,
        quality: Some(quality),
        angle: Some(angle),
        width: Some(width),
    })
}
