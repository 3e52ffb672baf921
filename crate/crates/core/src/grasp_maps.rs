//! Dense grasp maps (quality, angle, width), ground-truth rasterization and
//! decoding back into ranked planar grasps.

use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_formats::{Entry, TensorData};

/// Rectangle height as a fraction of the gripper opening when none is given.
pub const DEFAULT_HEIGHT_RATIO: f64 = 0.5;
/// Gripper width normalizer in pixels at 96x96 input resolution.
pub const DEFAULT_MAX_WIDTH: f64 = 60.0;
pub const DEFAULT_NMS_RADIUS: usize = 3;
const MIN_WIDTH: f64 = 1e-3;

/// Maps any angle into the canonical grasp-axis range `[-pi/2, pi/2)`.
pub fn canonical_angle(theta: f64) -> f64 {
    if (-FRAC_PI_2..FRAC_PI_2).contains(&theta) {
        return theta;
    }
    let t = (theta + FRAC_PI_2).rem_euclid(PI) - FRAC_PI_2;
    // rem_euclid can return exactly PI for tiny negative inputs
    if t >= FRAC_PI_2 {
        t - PI
    } else {
        t
    }
}

/// Encodes a grasp angle as `(sin 2θ, cos 2θ)`, which is continuous across
/// the ±π/2 seam.
pub fn encode_angle(theta: f64) -> (f64, f64) {
    let (s, c) = (2.0 * theta).sin_cos();
    (s, c)
}

pub fn decode_angle(s: f64, c: f64) -> Result<f64> {
    if s == 0.0 && c == 0.0 {
        return Err(Error::DegenerateAngle);
    }
    Ok(canonical_angle(0.5 * s.atan2(c)))
}

/// A planar (4-DoF) grasp: center, gripper opening `w` along the closing axis
/// at angle `theta`, and rectangle height `h` across it. Image convention:
/// `x` is the column, `y` the row (pointing down).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspRect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub theta: f64,
    pub h: f64,
    pub score: f64,
}

impl GraspRect {
    pub fn new(x: f64, y: f64, w: f64, theta: f64, h: f64) -> Self {
        Self {
            x,
            y,
            w,
            theta: canonical_angle(theta),
            h,
            score: 1.0,
        }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn with_height_ratio(mut self, ratio: f64) -> Self {
        self.h = self.w * ratio;
        self
    }

    /// Unit vectors of the closing axis and the axis across it.
    pub fn axes(&self) -> ([f64; 2], [f64; 2]) {
        let (s, c) = self.theta.sin_cos();
        ([c, s], [-s, c])
    }

    /// Footprint corners in counter-clockwise order (in a y-up frame).
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (a, p) = self.axes();
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        let at = |sa: f64, sp: f64| {
            [
                self.x + sa * hw * a[0] + sp * hh * p[0],
                self.y + sa * hw * a[1] + sp * hh * p[1],
            ]
        };
        [at(-1.0, -1.0), at(1.0, -1.0), at(1.0, 1.0), at(-1.0, 1.0)]
    }

    /// Coordinates of a point in the rectangle frame: (along closing axis, across).
    pub fn local(&self, px: f64, py: f64) -> (f64, f64) {
        let (a, p) = self.axes();
        let (dx, dy) = (px - self.x, py - self.y);
        (dx * a[0] + dy * a[1], dx * p[0] + dy * p[1])
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (u, v) = self.local(px, py);
        u.abs() <= self.w / 2.0 && v.abs() <= self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Scales position and size, e.g. to move between image and map resolution.
    /// Pixel centers map as `x' = (x - offset) * factor`.
    pub fn rescaled(&self, factor: f64, offset: f64) -> Self {
        Self {
            x: (self.x - offset) * factor,
            y: (self.y - offset) * factor,
            w: self.w * factor,
            h: self.h * factor,
            ..*self
        }
    }
}

/// Quality, angle and width maps over a `height x width_px` grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GraspMaps {
    pub quality: Vec<f64>,
    pub angle: Vec<f64>,
    pub width: Vec<f64>,
    pub height: u32,
    pub width_px: u32,
}

impl GraspMaps {
    pub fn zeros(height: u32, width_px: u32) -> Self {
        let n = height as usize * width_px as usize;
        Self {
            quality: vec![0.0; n],
            angle: vec![0.0; n],
            width: vec![0.0; n],
            height,
            width_px,
        }
    }

    pub fn len(&self) -> usize {
        self.quality.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quality.is_empty()
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width_px as usize + col
    }

    /// Checks the shape and range invariants against a width limit.
    pub fn validate(&self, max_width: f64) -> Result<()> {
        let n = self.height as usize * self.width_px as usize;
        if self.quality.len() != n || self.angle.len() != n || self.width.len() != n {
            return Err(Error::Shape(format!(
                "maps must all hold {n} values, got {}/{}/{}",
                self.quality.len(),
                self.angle.len(),
                self.width.len()
            )));
        }
        if let Some(q) = self.quality.iter().find(|q| !(0.0..=1.0).contains(*q)) {
            return Err(Error::Shape(format!("quality {q} outside [0, 1]")));
        }
        if let Some(a) = self.angle.iter().find(|a| !(-FRAC_PI_2..=FRAC_PI_2).contains(*a)) {
            return Err(Error::Shape(format!("angle {a} outside [-pi/2, pi/2]")));
        }
        if let Some(w) = self.width.iter().find(|w| !(0.0..=max_width).contains(*w)) {
            return Err(Error::Shape(format!("width {w} outside [0, {max_width}]")));
        }
        Ok(())
    }

    /// Serializes as one `3 x H x W` f64 tensor in (quality, angle, width) order.
    pub fn to_entry(&self, name: &str) -> Entry {
        let mut values = Vec::with_capacity(3 * self.len());
        values.extend_from_slice(&self.quality);
        values.extend_from_slice(&self.angle);
        values.extend_from_slice(&self.width);
        Entry::new(
            name,
            vec![3, self.height, self.width_px],
            TensorData::F64(values),
        )
    }

    pub fn from_entry(entry: &Entry) -> Result<Self> {
        let [c, h, w] = entry.dims[..] else {
            return Err(Error::Shape(format!("grasp maps need 3 dims, got {:?}", entry.dims)));
        };
        if c != 3 {
            return Err(Error::Shape(format!("grasp maps need 3 channels, got {c}")));
        }
        let values = entry.data.to_f64();
        let n = h as usize * w as usize;
        Ok(Self {
            quality: values[..n].to_vec(),
            angle: values[n..2 * n].to_vec(),
            width: values[2 * n..].to_vec(),
            height: h,
            width_px: w,
        })
    }
}

/// Rasterizes ground-truth maps from grasp rectangles given in grid pixels.
///
/// Quality is a Gaussian bump over the central third of each rectangle along
/// its closing axis (full height across), peaking at 1 on the rectangle
/// center; the pixel nearest to the center is always written. Later
/// rectangles overwrite earlier ones wherever they write.
pub fn rasterize_gt(rects: &[GraspRect], height: u32, width: u32) -> Result<GraspMaps> {
    if height == 0 || width == 0 {
        return Err(Error::Shape("grid must be non-empty".into()));
    }
    let mut maps = GraspMaps::zeros(height, width);
    let (hf, wf) = (height as f64, width as f64);
    for r in rects {
        if !(r.w > 0.0 && r.h > 0.0) {
            return Err(Error::ZeroArea);
        }
        let corners = r.corners();
        let (min_x, max_x) = min_max(corners.iter().map(|c| c[0]));
        let (min_y, max_y) = min_max(corners.iter().map(|c| c[1]));
        if max_x < -0.5 || max_y < -0.5 || min_x > wf - 0.5 || min_y > hf - 0.5 {
            return Err(Error::OutOfBounds {
                x: r.x,
                y: r.y,
                width,
                height,
            });
        }
        let sigma_a = (r.w / 12.0).max(0.25);
        let sigma_p = (r.h / 4.0).max(0.25);
        let center = (r.x.round(), r.y.round());
        let col0 = min_x.floor().max(0.0) as usize;
        let col1 = (max_x.ceil().min(wf - 1.0)).max(0.0) as usize;
        let row0 = min_y.floor().max(0.0) as usize;
        let row1 = (max_y.ceil().min(hf - 1.0)).max(0.0) as usize;
        for row in row0..=row1 {
            for col in col0..=col1 {
                let (cx, cy) = (col as f64, row as f64);
                let (u, v) = r.local(cx, cy);
                let inside = u.abs() <= r.w / 6.0 && v.abs() <= r.h / 2.0;
                if !inside && (cx, cy) != center {
                    continue;
                }
                let q = (-0.5 * ((u / sigma_a).powi(2) + (v / sigma_p).powi(2))).exp();
                let i = maps.index(row, col);
                maps.quality[i] = q;
                maps.angle[i] = r.theta;
                maps.width[i] = r.w;
            }
        }
    }
    Ok(maps)
}

fn min_max(it: impl Iterator<Item = f64>) -> (f64, f64) {
    it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

/// Row-major first index of the maximum, `None` if nothing is positive.
fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if v > 0.0 && best.map_or(true, |(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

fn rect_at(maps: &GraspMaps, i: usize) -> GraspRect {
    let cols = maps.width_px as usize;
    let w = maps.width[i].max(MIN_WIDTH);
    GraspRect::new((i % cols) as f64, (i / cols) as f64, w, maps.angle[i], w * DEFAULT_HEIGHT_RATIO)
        .with_score(maps.quality[i])
}

/// The grasp at the quality maximum. Ties go to the first pixel in row-major
/// order.
pub fn decode_top1(maps: &GraspMaps) -> Result<GraspRect> {
    if maps.is_empty() {
        return Err(Error::Shape("empty grasp maps".into()));
    }
    argmax(&maps.quality)
        .map(|i| rect_at(maps, i))
        .ok_or(Error::NoGrasp)
}

/// Greedy peak picking: take the maximum, zero its Chebyshev neighborhood of
/// `nms_radius`, repeat up to `k` times.
pub fn decode_topk(maps: &GraspMaps, k: usize, nms_radius: usize) -> Vec<GraspRect> {
    let mut q = maps.quality.clone();
    let (rows, cols) = (maps.height as usize, maps.width_px as usize);
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let Some(i) = argmax(&q) else { break };
        out.push(rect_at(maps, i));
        let (r, c) = (i / cols, i % cols);
        for rr in r.saturating_sub(nms_radius)..=(r + nms_radius).min(rows - 1) {
            for cc in c.saturating_sub(nms_radius)..=(c + nms_radius).min(cols - 1) {
                q[rr * cols + cc] = 0.0;
            }
        }
    }
    out
}
