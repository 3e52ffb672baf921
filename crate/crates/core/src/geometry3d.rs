//! Camera geometry and the lifting of planar grasps to 6-DoF poses: depth
//! deprojection, rectangle-to-cloud association, a geometric candidate
//! sampler, swept-volume overlap scoring and the reverse projection of poses
//! into image rectangles.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grasp_maps::{canonical_angle, GraspRect, DEFAULT_HEIGHT_RATIO};

/// Neighborhood size for normal estimation.
pub const KNN: usize = 12;
/// Neighborhoods flatter than this (smallest eigenvalue over the trace) are
/// treated as surface patches; anything curvier is an edge or corner.
const MAX_SURFACE_VARIATION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Config(format!("focal lengths must be positive, got {fx}, {fy}")));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Pixel `(u, v)` = (column, row) of a camera-frame point.
    pub fn project(&self, p: &Vector3<f64>) -> Result<(f64, f64)> {
        if p.z <= 0.0 {
            return Err(Error::BehindCamera(p.z));
        }
        Ok((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    pub fn deproject_pixel(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    /// Source pixel `[row, col]` of each point, when known.
    pub pixels: Option<Vec<[u32; 2]>>,
}

impl PointCloud {
    pub fn from_points(points: Vec<Vector3<f64>>) -> Self {
        Self { points, pixels: None }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GripperModel {
    pub finger_depth: f64,
    pub finger_thickness: f64,
    pub max_opening: f64,
}

impl Default for GripperModel {
    fn default() -> Self {
        Self {
            finger_depth: 0.04,
            finger_thickness: 0.02,
            max_opening: 0.08,
        }
    }
}

/// A parallel-jaw grasp pose. Rotation columns are the closing, lateral and
/// approach axes in the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grasp6DoF {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub opening: f64,
    pub score: f64,
}

/// One line of a candidate pool file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub opening: f64,
    pub score: f64,
}

impl Grasp6DoF {
    /// Builds a pose from closing and approach directions, orthonormalizing
    /// the closing axis against the approach.
    pub fn from_axes(
        closing: Vector3<f64>,
        approach: Vector3<f64>,
        translation: Vector3<f64>,
        opening: f64,
        score: f64,
    ) -> Self {
        let approach = approach.normalize();
        let closing = (closing - approach * closing.dot(&approach)).normalize();
        let lateral = approach.cross(&closing);
        Self {
            rotation: Matrix3::from_columns(&[closing, lateral, approach]),
            translation,
            opening,
            score,
        }
    }

    pub fn closing_axis(&self) -> Vector3<f64> {
        self.rotation.column(0).into()
    }

    pub fn approach_axis(&self) -> Vector3<f64> {
        self.rotation.column(2).into()
    }

    /// Largest deviation of `RᵀR` from identity and of `det R` from 1.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        e.max((self.rotation.determinant() - 1.0).abs())
    }

    /// The point expressed in the gripper frame.
    pub fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn translation_distance(&self, other: &Grasp6DoF) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Geodesic distance between the two rotations, in degrees.
    pub fn rotation_distance_deg(&self, other: &Grasp6DoF) -> f64 {
        let r = self.rotation.transpose() * other.rotation;
        ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
    }

    pub fn to_record(&self) -> PoseRecord {
        let r = &self.rotation;
        PoseRecord {
            rotation: [
                r[(0, 0)], r[(0, 1)], r[(0, 2)],
                r[(1, 0)], r[(1, 1)], r[(1, 2)],
                r[(2, 0)], r[(2, 1)], r[(2, 2)],
            ],
            translation: [self.translation.x, self.translation.y, self.translation.z],
            opening: self.opening,
            score: self.score,
        }
    }

    pub fn from_record(rec: &PoseRecord) -> Self {
        Self {
            rotation: Matrix3::from_row_slice(&rec.rotation),
            translation: Vector3::from_column_slice(&rec.translation),
            opening: rec.opening,
            score: rec.score,
        }
    }
}

impl Serialize for Grasp6DoF {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_record().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Grasp6DoF {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        PoseRecord::deserialize(d).map(|r| Grasp6DoF::from_record(&r))
    }
}

/// Parses a JSON-lines candidate pool; blank lines are skipped.
pub fn parse_pool(text: &str) -> Result<Vec<Grasp6DoF>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str::<Grasp6DoF>(l)?))
        .collect()
}

pub fn format_pool(poses: &[Grasp6DoF]) -> Result<String> {
    let mut out = String::new();
    for p in poses {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    Ok(out)
}

/// Back-projects every `stride`-th valid pixel of a row-major depth image.
/// Zero (or non-finite) depth marks an invalid pixel.
pub fn deproject(
    depth: &[f64],
    height: usize,
    width: usize,
    intr: &CameraIntrinsics,
    stride: usize,
) -> Result<PointCloud> {
    if depth.len() != height * width {
        return Err(Error::Shape(format!(
            "depth has {} values, expected {height}x{width}",
            depth.len()
        )));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    let mut points = Vec::new();
    let mut pixels = Vec::new();
    for row in (0..height).step_by(stride) {
        for col in (0..width).step_by(stride) {
            let z = depth[row * width + col];
            if z > 0.0 && z.is_finite() {
                points.push(intr.deproject_pixel(col as f64, row as f64, z));
                pixels.push([row as u32, col as u32]);
            }
        }
    }
    Ok(PointCloud {
        points,
        pixels: Some(pixels),
    })
}

/// The points whose source pixel falls inside the rectangle footprint.
pub fn rect_to_points(rect: &GraspRect, cloud: &PointCloud) -> Result<PointCloud> {
    let pixels = cloud
        .pixels
        .as_ref()
        .ok_or_else(|| Error::Config("cloud carries no source pixels".into()))?;
    let mut out = PointCloud {
        points: Vec::new(),
        pixels: Some(Vec::new()),
    };
    for (p, px) in cloud.points.iter().zip(pixels) {
        if rect.contains(px[1] as f64, px[0] as f64) {
            out.points.push(*p);
            out.pixels.as_mut().unwrap().push(*px);
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyRegion);
    }
    Ok(out)
}

/// Number of points inside the closing region: a box centered on the pose,
/// `opening x finger_thickness x finger_depth` along (closing, lateral,
/// approach).
pub fn swept_overlap(pose: &Grasp6DoF, gripper: &GripperModel, pg: &PointCloud) -> usize {
    let half = Vector3::new(pose.opening, gripper.finger_thickness, gripper.finger_depth) / 2.0;
    let rt = pose.rotation.transpose();
    pg.points
        .iter()
        .filter(|p| {
            let l = rt * (*p - pose.translation);
            l.x.abs() <= half.x && l.y.abs() <= half.y && l.z.abs() <= half.z
        })
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub overlap: usize,
    pub pose: Grasp6DoF,
}

/// Picks the candidate covering the most graspable points; ties go to the
/// higher score, then the lower index.
pub fn select_grasp(
    candidates: &[Grasp6DoF],
    pg: &PointCloud,
    gripper: &GripperModel,
) -> Result<Selection> {
    if candidates.is_empty() || pg.is_empty() {
        return Err(Error::NoFeasibleGrasp);
    }
    let mut best: Option<Selection> = None;
    for (index, c) in candidates.iter().enumerate() {
        let overlap = swept_overlap(c, gripper, pg);
        let better = match &best {
            None => true,
            Some(b) => overlap > b.overlap || (overlap == b.overlap && c.score > b.pose.score),
        };
        if better {
            best = Some(Selection {
                index,
                overlap,
                pose: *c,
            });
        }
    }
    best.filter(|b| b.overlap > 0).ok_or(Error::NoFeasibleGrasp)
}

fn knn_indices(points: &[Vector3<f64>], query: &Vector3<f64>, k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| ((p - query).norm_squared(), i))
        .collect();
    let k = k.min(d.len());
    d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d[..k].iter().map(|&(_, i)| i).collect()
}

/// Surface normal (oriented toward the camera) and surface variation from a
/// PCA plane fit.
fn estimate_normal(points: &[Vector3<f64>], idx: &[usize], at: &Vector3<f64>) -> (Vector3<f64>, f64) {
    let mean = idx.iter().map(|&i| points[i]).sum::<Vector3<f64>>() / idx.len() as f64;
    let mut cov = Matrix3::zeros();
    for &i in idx {
        let d = points[i] - mean;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let (mut min_i, mut min_v) = (0, f64::INFINITY);
    for (i, &v) in eig.eigenvalues.iter().enumerate() {
        if v < min_v {
            min_v = v;
            min_i = i;
        }
    }
    let trace = eig.eigenvalues.sum();
    let variation = if trace > 0.0 { min_v.max(0.0) / trace } else { 1.0 };
    let mut n: Vector3<f64> = eig.eigenvectors.column(min_i).into();
    if n.dot(at) > 0.0 {
        n = -n;
    }
    (n, variation)
}

fn tangent_basis(n: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = n.cross(&helper).normalize();
    let e2 = n.cross(&e1);
    (e1, e2)
}

/// Geometric stand-in for a learned grasp proposal network. Samples surface
/// points, approaches against the estimated normal with a random roll and
/// sizes the opening from the local extent of the cloud.
pub fn sample_candidates(
    cloud: &PointCloud,
    n: usize,
    gripper: &GripperModel,
    seed: u64,
) -> Result<Vec<Grasp6DoF>> {
    let pts = &cloud.points;
    if pts.len() < KNN + 1 {
        return Err(Error::InsufficientGeometry {
            have: pts.len(),
            need: KNN + 1,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let max_attempts = 20 * n.max(1);
    for _ in 0..max_attempts {
        if out.len() >= n {
            break;
        }
        let p = pts[rng.gen_range(0..pts.len())];
        let roll = rng.gen_range(0.0..std::f64::consts::PI);
        let nbrs = knn_indices(pts, &p, KNN + 1);
        let (normal, variation) = estimate_normal(pts, &nbrs, &p);
        if variation > MAX_SURFACE_VARIATION {
            continue;
        }
        let approach = -normal;
        let (e1, e2) = tangent_basis(&approach);
        let closing = e1 * roll.cos() + e2 * roll.sin();
        let lateral = approach.cross(&closing);
        // the sampled surface point sits a quarter depth inside the closing box
        let translation = p + approach * (gripper.finger_depth / 4.0);

        let mut extent: f64 = 0.0;
        for q in pts {
            let d = q - p;
            let along = d.dot(&closing);
            if along.abs() <= gripper.max_opening / 2.0
                && d.dot(&lateral).abs() <= gripper.finger_thickness / 2.0
                && d.dot(&approach).abs() <= gripper.finger_depth / 2.0
            {
                extent = extent.max(along.abs());
            }
        }
        let opening = (2.0 * extent + 0.01).clamp(0.01, gripper.max_opening);
        let score = 1.0 - variation / MAX_SURFACE_VARIATION;
        out.push(Grasp6DoF::from_axes(closing, approach, translation, opening, score));
    }
    Ok(out)
}

/// Projects each pose's two finger contact points and fits the minimum-area
/// rectangle around all of them. The rectangle's width axis is the one best
/// aligned with the mean closing direction; height is at least
/// `DEFAULT_HEIGHT_RATIO` of the width.
pub fn poses_to_rect(
    poses: &[Grasp6DoF],
    intr: &CameraIntrinsics,
    gripper: &GripperModel,
) -> Result<GraspRect> {
    if poses.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let mut pts = Vec::with_capacity(2 * poses.len());
    // mean closing direction in doubled-angle space (axes are sign-free)
    let (mut s2, mut c2) = (0.0, 0.0);
    for pose in poses {
        let half = pose.opening.min(gripper.max_opening) / 2.0;
        let axis = pose.closing_axis();
        let a = intr.project(&(pose.translation + axis * half))?;
        let b = intr.project(&(pose.translation - axis * half))?;
        let phi = (a.1 - b.1).atan2(a.0 - b.0);
        s2 += (2.0 * phi).sin();
        c2 += (2.0 * phi).cos();
        pts.push([a.0, a.1]);
        pts.push([b.0, b.1]);
    }
    let closing_dir = 0.5 * s2.atan2(c2);
    let hull = convex_hull(&pts);
    let (center, axis, ext_a, ext_b) = min_area_rect(&hull, closing_dir);

    let angle_a = axis[1].atan2(axis[0]);
    let diff = canonical_angle(angle_a - closing_dir).abs();
    let (theta, w, across) = if diff <= std::f64::consts::FRAC_PI_4 {
        (angle_a, ext_a, ext_b)
    } else {
        (angle_a + std::f64::consts::FRAC_PI_2, ext_b, ext_a)
    };
    let h = across.max(w * DEFAULT_HEIGHT_RATIO);
    Ok(GraspRect::new(center[0], center[1], w, theta, h))
}

fn cross2(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Andrew's monotone chain; collinear points are dropped.
fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut p = points.to_vec();
    p.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    p.dedup();
    if p.len() <= 2 {
        return p;
    }
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &q in &p {
        while lower.len() >= 2 && cross2(lower[lower.len() - 2], lower[lower.len() - 1], q) <= 0.0 {
            lower.pop();
        }
        lower.push(q);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &q in p.iter().rev() {
        while upper.len() >= 2 && cross2(upper[upper.len() - 2], upper[upper.len() - 1], q) <= 0.0 {
            upper.pop();
        }
        upper.push(q);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Minimum-area enclosing rectangle by trying every hull edge direction.
/// Returns (center, unit axis, extent along axis, extent across). For a
/// degenerate hull the preferred direction is used.
fn min_area_rect(hull: &[[f64; 2]], preferred: f64) -> ([f64; 2], [f64; 2], f64, f64) {
    let mut dirs: Vec<[f64; 2]> = Vec::new();
    if hull.len() >= 2 {
        for i in 0..hull.len() {
            let a = hull[i];
            let b = hull[(i + 1) % hull.len()];
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let n = dx.hypot(dy);
            if n > 0.0 {
                dirs.push([dx / n, dy / n]);
            }
        }
    }
    if dirs.is_empty() {
        dirs.push([preferred.cos(), preferred.sin()]);
    }
    let mut best: Option<(f64, [f64; 2], [f64; 2], f64, f64)> = None;
    for d in dirs {
        let perp = [-d[1], d[0]];
        let (mut lo_a, mut hi_a, mut lo_b, mut hi_b) =
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in hull {
            let a = p[0] * d[0] + p[1] * d[1];
            let b = p[0] * perp[0] + p[1] * perp[1];
            lo_a = lo_a.min(a);
            hi_a = hi_a.max(a);
            lo_b = lo_b.min(b);
            hi_b = hi_b.max(b);
        }
        let area = (hi_a - lo_a) * (hi_b - lo_b);
        if best.as_ref().map_or(true, |b| area < b.0 - 1e-12) {
            let (ma, mb) = ((lo_a + hi_a) / 2.0, (lo_b + hi_b) / 2.0);
            let center = [ma * d[0] + mb * perp[0], ma * d[1] + mb * perp[1]];
            best = Some((area, center, d, hi_a - lo_a, hi_b - lo_b));
        }
    }
    let (_, center, axis, ea, eb) = best.unwrap();
    (center, axis, ea, eb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::new(600.0, 600.0, 320.0, 240.0).unwrap()
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
        let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let angle = rng.gen_range(-PI..PI);
        *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).matrix()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Grasp6DoF {
        Grasp6DoF {
            rotation: random_rotation(rng),
            translation: Vector3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(0.4..0.7)),
            opening: rng.gen_range(0.02..0.08),
            score: rng.gen(),
        }
    }

    #[test]
    fn deproject_principal_point_and_offset() {
        let i = intr();
        let mut depth = vec![0.0; 480 * 640];
        depth[240 * 640 + 320] = 0.5;
        let c = deproject(&depth, 480, 640, &i, 1).unwrap();
        assert_eq!(c.points, vec![Vector3::new(0.0, 0.0, 0.5)]);
        assert_eq!(i.deproject_pixel(320.0 + 600.0, 240.0, 1.0), Vector3::new(1.0, 0.0, 1.0));
    }

    #[test]
    fn deproject_all_invalid_is_empty() {
        let c = deproject(&[0.0; 16], 4, 4, &intr(), 1).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn deproject_reprojects_onto_source_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (h, w) = (48, 64);
        let i = CameraIntrinsics::new(80.0, 75.0, 31.5, 23.0).unwrap();
        let depth: Vec<f64> = (0..h * w)
            .map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.2..2.0) })
            .collect();
        let c = deproject(&depth, h, w, &i, 2).unwrap();
        for (p, px) in c.points.iter().zip(c.pixels.as_ref().unwrap()) {
            let (u, v) = i.project(p).unwrap();
            assert!((u - px[1] as f64).abs() < 0.5 && (v - px[0] as f64).abs() < 0.5);
            assert_eq!(px[0] % 2, 0);
        }
    }

    #[test]
    fn rect_to_points_cases() {
        let i = CameraIntrinsics::new(20.0, 20.0, 8.0, 8.0).unwrap();
        let mut depth = vec![1.0; 256];
        for v in depth.iter_mut().take(64) {
            *v = 0.0;
        }
        let cloud = deproject(&depth, 16, 16, &i, 1).unwrap();
        let all = GraspRect::new(8.0, 8.0, 100.0, 0.0, 100.0);
        assert_eq!(rect_to_points(&all, &cloud).unwrap().len(), cloud.len());
        let invalid = GraspRect::new(8.0, 1.5, 4.0, 0.0, 2.0);
        assert!(matches!(rect_to_points(&invalid, &cloud), Err(Error::EmptyRegion)));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let r = GraspRect::new(
                rng.gen_range(0.0..16.0),
                rng.gen_range(0.0..16.0),
                rng.gen_range(2.0..10.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(1.0..6.0),
            );
            let expected: Vec<_> = cloud
                .pixels
                .as_ref()
                .unwrap()
                .iter()
                .filter(|px| {
                    let (dx, dy) = (px[1] as f64 - r.x, px[0] as f64 - r.y);
                    let u = dx * r.theta.cos() + dy * r.theta.sin();
                    let v = -dx * r.theta.sin() + dy * r.theta.cos();
                    u.abs() <= r.w / 2.0 && v.abs() <= r.h / 2.0
                })
                .copied()
                .collect();
            match rect_to_points(&r, &cloud) {
                Ok(pg) => assert_eq!(pg.pixels.unwrap(), expected),
                Err(Error::EmptyRegion) => assert!(expected.is_empty()),
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn swept_overlap_basic_cases() {
        let g = GripperModel::default();
        let pose = Grasp6DoF::from_axes(Vector3::x(), Vector3::z(), Vector3::new(0.0, 0.0, 0.5), 0.06, 1.0);
        let at = PointCloud::from_points(vec![pose.translation]);
        assert_eq!(swept_overlap(&pose, &g, &at), 1);
        let far = PointCloud::from_points(vec![pose.translation + Vector3::new(0.0, 0.0, 1.0)]);
        assert_eq!(swept_overlap(&pose, &g, &far), 0);
    }

    #[test]
    fn swept_overlap_matches_frame_transform_oracle_and_rigid_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = GripperModel::default();
        for _ in 0..20 {
            let pose = random_pose(&mut rng);
            let pts: Vec<_> = (0..400)
                .map(|_| pose.translation + Vector3::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)))
                .collect();
            let cloud = PointCloud::from_points(pts.clone());
            // oracle: homogeneous inverse transform, then box test
            let mut t = nalgebra::Matrix4::identity();
            t.fixed_view_mut::<3, 3>(0, 0).copy_from(&pose.rotation);
            t.fixed_view_mut::<3, 1>(0, 3).copy_from(&pose.translation);
            let inv = t.try_inverse().unwrap();
            let expected = pts
                .iter()
                .filter(|p| {
                    let l = inv * p.push(1.0);
                    l.x.abs() <= pose.opening / 2.0 && l.y.abs() <= g.finger_thickness / 2.0 && l.z.abs() <= g.finger_depth / 2.0
                })
                .count();
            assert_eq!(swept_overlap(&pose, &g, &cloud), expected);

            let rot = random_rotation(&mut rng);
            let shift = Vector3::new(0.3, -0.2, 0.1);
            let moved = Grasp6DoF {
                rotation: rot * pose.rotation,
                translation: rot * pose.translation + shift,
                ..pose
            };
            let moved_cloud = PointCloud::from_points(pts.iter().map(|p| rot * p + shift).collect());
            let a = swept_overlap(&moved, &g, &moved_cloud) as i64;
            // a point may sit within rounding error of a face
            assert!((a - expected as i64).abs() <= 1);
        }
    }

    #[test]
    fn select_grasp_argmax_and_ties() {
        let g = GripperModel::default();
        let base = Vector3::new(0.0, 0.0, 0.5);
        let mk = |dx: f64, score: f64| Grasp6DoF::from_axes(Vector3::x(), Vector3::z(), base + Vector3::new(dx, 0.0, 0.0), 0.06, score);
        // three clusters of points: 3 near candidate 0, 17 near 1, 5 near 2
        let mut pts = Vec::new();
        for (dx, n) in [(0.0, 3), (0.5, 17), (1.0, 5)] {
            for i in 0..n {
                pts.push(base + Vector3::new(dx + 0.001 * i as f64, 0.0, 0.0));
            }
        }
        let pg = PointCloud::from_points(pts);
        let cands = [mk(0.0, 0.5), mk(0.5, 0.5), mk(1.0, 0.5)];
        assert_eq!(select_grasp(&cands, &pg, &g).unwrap().index, 1);
        let tied = [mk(0.5, 0.2), mk(0.5, 0.9), mk(0.5, 0.9)];
        assert_eq!(select_grasp(&tied, &pg, &g).unwrap().index, 1);
        let none = [mk(5.0, 1.0)];
        assert!(matches!(select_grasp(&none, &pg, &g), Err(Error::NoFeasibleGrasp)));
    }

    #[test]
    fn select_grasp_matches_exhaustive_scoring() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = GripperModel::default();
        for _ in 0..20 {
            let cands: Vec<_> = (0..30).map(|_| random_pose(&mut rng)).collect();
            let pg = PointCloud::from_points(
                (0..300)
                    .map(|_| Vector3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(0.4..0.7)))
                    .collect(),
            );
            let scores: Vec<_> = cands.iter().map(|c| swept_overlap(c, &g, &pg)).collect();
            let max = *scores.iter().max().unwrap();
            if max == 0 {
                continue;
            }
            let mut expected = None;
            for (i, c) in cands.iter().enumerate() {
                if scores[i] == max && expected.map_or(true, |e: usize| c.score > cands[e].score) {
                    expected = Some(i);
                }
            }
            assert_eq!(select_grasp(&cands, &pg, &g).unwrap().index, expected.unwrap());
        }
    }

    fn box_cloud() -> PointCloud {
        // axis-aligned 10 x 8 x 6 cm box, 4 mm grid on every face
        let (lx, ly, lz) = (0.10, 0.08, 0.06);
        let c = Vector3::new(0.0, 0.0, 0.5);
        let step = 0.004;
        let mut pts = Vec::new();
        let n = |l: f64| (l / step).round() as usize;
        for i in 0..=n(lx) {
            for j in 0..=n(ly) {
                let (x, y) = (-lx / 2.0 + i as f64 * step, -ly / 2.0 + j as f64 * step);
                pts.push(c + Vector3::new(x, y, -lz / 2.0));
                pts.push(c + Vector3::new(x, y, lz / 2.0));
            }
        }
        for i in 0..=n(lx) {
            for k in 1..n(lz) {
                let (x, z) = (-lx / 2.0 + i as f64 * step, -lz / 2.0 + k as f64 * step);
                pts.push(c + Vector3::new(x, -ly / 2.0, z));
                pts.push(c + Vector3::new(x, ly / 2.0, z));
            }
        }
        for j in 1..n(ly) {
            for k in 1..n(lz) {
                let (y, z) = (-ly / 2.0 + j as f64 * step, -lz / 2.0 + k as f64 * step);
                pts.push(c + Vector3::new(-lx / 2.0, y, z));
                pts.push(c + Vector3::new(lx / 2.0, y, z));
            }
        }
        PointCloud::from_points(pts)
    }

    #[test]
    fn sampler_on_box_approaches_along_face_normals() {
        let cloud = box_cloud();
        let g = GripperModel::default();
        let cands = sample_candidates(&cloud, 60, &g, 4).unwrap();
        assert!(cands.len() >= 30);
        let faces = [Vector3::x(), Vector3::y(), Vector3::z()];
        for c in &cands {
            let a = c.approach_axis();
            let best = faces.iter().map(|f| a.dot(f).abs().min(1.0).acos().to_degrees()).fold(f64::INFINITY, f64::min);
            assert!(best < 25.0, "approach {a:?} is {best} deg off");
            assert!(c.orthonormality_error() < 1e-9);
            assert!(c.opening > 0.0 && c.opening <= g.max_opening);
        }
        assert_eq!(cands, sample_candidates(&cloud, 60, &g, 4).unwrap());
    }

    #[test]
    fn sampler_needs_enough_points() {
        let cloud = PointCloud::from_points(vec![Vector3::new(0.0, 0.0, 1.0); 5]);
        assert!(matches!(
            sample_candidates(&cloud, 3, &GripperModel::default(), 0),
            Err(Error::InsufficientGeometry { .. })
        ));
    }

    fn top_down(theta: f64, t: Vector3<f64>, opening: f64) -> Grasp6DoF {
        Grasp6DoF::from_axes(Vector3::new(theta.cos(), theta.sin(), 0.0), Vector3::z(), t, opening, 1.0)
    }

    #[test]
    fn poses_to_rect_fronto_parallel() {
        let i = intr();
        let g = GripperModel::default();
        let pose = top_down(0.0, Vector3::new(0.01, -0.02, 0.6), 0.06);
        let r = poses_to_rect(&[pose], &i, &g).unwrap();
        assert!((r.w - 60.0).abs() < 1e-9);
        assert!(r.theta.abs() < 1e-12);
        let (u, v) = i.project(&pose.translation).unwrap();
        assert!((r.x - u).abs() < 0.5 && (r.y - v).abs() < 0.5);
        assert!((r.h - 30.0).abs() < 1e-9);
    }

    #[test]
    fn poses_to_rect_is_permutation_invariant_and_rejects_behind_camera() {
        let i = intr();
        let g = GripperModel::default();
        let poses = [
            top_down(0.3, Vector3::new(0.0, 0.0, 0.6), 0.05),
            top_down(0.35, Vector3::new(0.01, 0.005, 0.6), 0.05),
            top_down(0.25, Vector3::new(-0.01, 0.0, 0.61), 0.04),
        ];
        let a = poses_to_rect(&poses, &i, &g).unwrap();
        let b = poses_to_rect(&[poses[2], poses[0], poses[1]], &i, &g).unwrap();
        for (x, y) in [(a.x, b.x), (a.y, b.y), (a.w, b.w), (a.h, b.h), (a.theta, b.theta)] {
            assert!((x - y).abs() < 1e-9);
        }
        assert!((a.theta - 0.3).abs() < 0.2);
        let behind = top_down(0.0, Vector3::new(0.0, 0.0, -0.5), 0.05);
        assert!(matches!(poses_to_rect(&[behind], &i, &g), Err(Error::BehindCamera(_))));
    }

    #[test]
    fn pool_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let poses: Vec<_> = (0..3).map(|_| random_pose(&mut rng)).collect();
        let text = format_pool(&poses).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("\"rotation\":["));
        assert_eq!(parse_pool(&text).unwrap(), poses);
    }
}
