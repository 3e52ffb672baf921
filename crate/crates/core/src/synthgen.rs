//! Synthetic cluttered tabletop scenes: flat-shaded primitives seen from a
//! top-down camera, with per-object masks, analytic planar and 6-DoF grasp
//! annotations, templated referring expressions and seen/unseen splits.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::autonet::Vocabulary;
use crate::error::{Error, Result};
use crate::geometry3d::{CameraIntrinsics, Grasp6DoF, PoseRecord};
use crate::grasp_maps::{GraspRect, DEFAULT_HEIGHT_RATIO, DEFAULT_MAX_WIDTH};
use crate::io_formats::{find, load_container, save_container, write_atomic, Entry, TensorData};
use crate::metrics::Lexicon;

pub const DEFAULT_GRASP_THRESHOLD: f64 = 0.70;
/// Camera height above the table in meters.
pub const CAMERA_HEIGHT: f64 = 0.3;
/// Clearance added to an object's extent to get the gripper opening, pixels.
const GRASP_MARGIN: f64 = 4.0;
/// Minimum gap between object footprints, pixels.
const PLACEMENT_GAP: f64 = 2.0;
const PLACEMENT_RETRIES: usize = 400;
/// A superlative only counts when the target beats the runner-up by this
/// many pixels.
pub const SPATIAL_MARGIN: f64 = 4.0;
/// Width in pixels of the darkened rim drawn along box outlines.
const BOX_EDGE: f64 = 2.0;

pub const TEMPLATES: [&str; 10] = [
    "Grasp the {object}",
    "Locate the {object}",
    "Pick the {object}",
    "Grab the {object}",
    "Take the {object}",
    "Hold the {object}",
    "Get me the {object}",
    "Lift the {object}",
    "I want the {object}",
    "Please grasp the {object}",
];

pub const COLORS: [(&str, [f64; 3]); 10] = [
    ("red", [0.85, 0.12, 0.10]),
    ("green", [0.10, 0.65, 0.20]),
    ("blue", [0.12, 0.28, 0.90]),
    ("yellow", [0.95, 0.85, 0.10]),
    ("orange", [1.00, 0.50, 0.05]),
    ("purple", [0.50, 0.15, 0.65]),
    ("white", [0.97, 0.97, 0.97]),
    ("black", [0.08, 0.08, 0.08]),
    ("pink", [1.00, 0.55, 0.75]),
    ("cyan", [0.10, 0.85, 0.90]),
];
const TABLE_COLOR: [f64; 3] = [0.52, 0.47, 0.42];

/// Superlatives used in expressions, in priority order.
pub const SPATIAL_WORDS: [&str; 8] = [
    "leftmost",
    "rightmost",
    "front",
    "rear",
    "top left",
    "top right",
    "bottom left",
    "bottom right",
];

const SPHERES: [&str; 16] = [
    "ball", "globe", "orb", "melon", "apple", "pear", "lemon", "plum", "peach", "onion", "tomato", "marble", "bead",
    "pebble", "egg", "bulb",
];
const BOXES: [&str; 27] = [
    "box", "carton", "crate", "case", "block", "brick", "cube", "tile", "book", "tray", "sponge", "eraser", "soap",
    "wallet", "dice", "parcel", "package", "bin", "chest", "drawer", "radio", "speaker", "timer", "toy", "cushion",
    "pillow", "basket",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Box,
    Cylinder,
    Sphere,
}

impl Primitive {
    pub fn shape_word(self) -> &'static str {
        match self {
            Primitive::Box => "rectangular",
            Primitive::Cylinder => "cylindrical",
            Primitive::Sphere => "spherical",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub primitive: Primitive,
}

/// One category per object noun of the bundled lexicon.
pub fn catalog() -> Vec<Category> {
    Lexicon::default()
        .objects
        .iter()
        .map(|name| {
            let primitive = if SPHERES.contains(&name.as_str()) {
                Primitive::Sphere
            } else if BOXES.contains(&name.as_str()) {
                Primitive::Box
            } else {
                Primitive::Cylinder
            };
            Category {
                name: name.clone(),
                primitive,
            }
        })
        .collect()
}

/// Top-down camera over a table, sized to the image.
pub fn scene_intrinsics(image_size: usize) -> CameraIntrinsics {
    let f = 1.25 * image_size as f64;
    let c = (image_size as f64 - 1.0) / 2.0;
    CameraIntrinsics {
        fx: f,
        fy: f,
        cx: c,
        cy: c,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub n_objects: usize,
    pub image_size: usize,
    /// Probability that a new object reuses the color of one already placed.
    pub distractor_rate: f64,
}

impl SceneConfig {
    pub fn new(n_objects: usize, image_size: usize) -> Self {
        Self {
            n_objects,
            image_size,
            distractor_rate: 0.2,
        }
    }
}

/// Object footprint in image pixels (x = column, y = row).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub center: [f64; 2],
    /// Box half extents along its long and short axes; `[r, r]` for round
    /// footprints.
    pub half: [f64; 2],
    /// Direction of the long axis.
    pub angle: f64,
    /// Top height above the table (sphere: diameter), meters.
    pub height: f64,
}

impl Footprint {
    fn bounding_radius(&self) -> f64 {
        self.half[0].hypot(self.half[1])
    }

    fn contains(&self, primitive: Primitive, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        match primitive {
            Primitive::Box => {
                let (s, c) = self.angle.sin_cos();
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                u.abs() <= self.half[0] && v.abs() <= self.half[1]
            }
            _ => dx.hypot(dy) <= self.half[0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub object_id: u32,
    pub category: String,
    pub primitive: Primitive,
    pub color: String,
    pub shape: String,
    pub size: String,
    /// First superlative that singles this object out in the scene, if any.
    pub position_word: Option<String>,
    pub footprint: Footprint,
    #[serde(skip)]
    pub mask: Vec<u8>,
    pub grasps4dof: Vec<GraspRect>,
    pub grasps6dof: Vec<PoseRecord>,
}

impl ObjectRecord {
    pub fn poses(&self) -> Vec<Grasp6DoF> {
        self.grasps6dof.iter().map(Grasp6DoF::from_record).collect()
    }

    fn attribute(&self, kind: Qualifier) -> &str {
        match kind {
            Qualifier::Color => &self.color,
            Qualifier::Shape => &self.shape,
            Qualifier::Size => &self.size,
            Qualifier::Spatial => "",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expression {
    pub text: String,
    pub target_object_id: u32,
    pub attribute_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_id: String,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Row-major `H x W x 3`, multiples of 1/255.
    #[serde(skip)]
    pub image: Vec<f64>,
    /// Row-major `H x W`, meters, f32-representable.
    #[serde(skip)]
    pub depth: Vec<f64>,
    pub intrinsics: CameraIntrinsics,
    pub objects: Vec<ObjectRecord>,
    pub expressions: Vec<Expression>,
    /// Objects for which some expression level had no discriminative form.
    #[serde(default)]
    pub ambiguous: Vec<u32>,
}

impl SceneRecord {
    pub fn object(&self, id: u32) -> Option<&ObjectRecord> {
        self.objects.iter().find(|o| o.object_id == id)
    }

    /// Checks the structural invariants of a scene.
    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if self.image.len() != 3 * n || self.depth.len() != n {
            return Err(Error::Shape(format!("scene {} has inconsistent raster sizes", self.scene_id)));
        }
        let mut owner = vec![u32::MAX; n];
        for o in &self.objects {
            if o.mask.len() != n {
                return Err(Error::Shape(format!("mask of object {} has wrong size", o.object_id)));
            }
            for (i, &m) in o.mask.iter().enumerate() {
                if m != 0 {
                    if owner[i] != u32::MAX {
                        return Err(Error::Config(format!("objects {} and {} overlap", owner[i], o.object_id)));
                    }
                    owner[i] = o.object_id;
                }
            }
            for g in &o.grasps4dof {
                let (r, c) = (g.y.round(), g.x.round());
                if r < 0.0 || c < 0.0 || r as usize >= self.height || c as usize >= self.width {
                    return Err(Error::OutOfBounds {
                        x: g.x,
                        y: g.y,
                        width: self.width as u32,
                        height: self.height as u32,
                    });
                }
                if o.mask[r as usize * self.width + c as usize] == 0 {
                    return Err(Error::Config(format!("grasp center of object {} is off its mask", o.object_id)));
                }
            }
        }
        for e in &self.expressions {
            if self.object(e.target_object_id).is_none() {
                return Err(Error::Config(format!("expression {:?} targets a missing object", e.text)));
            }
            if !(1..=4).contains(&e.attribute_count) {
                return Err(Error::Config(format!("attribute count {} out of range", e.attribute_count)));
            }
        }
        Ok(())
    }
}

fn quantize_u8(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Generates a scene with categories drawn from the full catalog.
pub fn gen_scene(seed: u64, cfg: &SceneConfig) -> Result<SceneRecord> {
    let cat = catalog();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce7_e5ca_7e60_0001);
    let picks: Vec<Category> = (0..cfg.n_objects).map(|_| cat[rng.gen_range(0..cat.len())].clone()).collect();
    gen_scene_with(seed, cfg, &picks)
}

/// Generates a scene holding exactly the given categories.
pub fn gen_scene_with(seed: u64, cfg: &SceneConfig, categories: &[Category]) -> Result<SceneRecord> {
    if cfg.n_objects == 0 || categories.len() != cfg.n_objects {
        return Err(Error::Config(format!(
            "need n_objects >= 1 matching the category list ({} vs {})",
            cfg.n_objects,
            categories.len()
        )));
    }
    if cfg.image_size == 0 || cfg.image_size % 4 != 0 {
        return Err(Error::Config(format!("image size {} must be a positive multiple of 4", cfg.image_size)));
    }
    if !(0.0..=1.0).contains(&cfg.distractor_rate) {
        return Err(Error::Config("distractor_rate must lie in [0, 1]".into()));
    }
    let size = cfg.image_size;
    let scale = size as f64 / 96.0;
    let intr = scene_intrinsics(size);
    let m_per_px = CAMERA_HEIGHT / intr.fx;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // placement
    let mut placed: Vec<(Primitive, Footprint, bool)> = Vec::new();
    for cat in categories {
        let large = rng.gen_bool(0.5);
        let mut ok = false;
        for _ in 0..PLACEMENT_RETRIES {
            let (half, angle) = match cat.primitive {
                Primitive::Box => {
                    let b = if large { rng.gen_range(7.0..9.0) } else { rng.gen_range(4.0..5.5) } * scale;
                    let a = b * rng.gen_range(1.15..1.7);
                    ([a, b], rng.gen_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2))
                }
                _ => {
                    let r = if large { rng.gen_range(9.0..11.0) } else { rng.gen_range(5.0..6.5) } * scale;
                    ([r, r], 0.0)
                }
            };
            let probe = Footprint {
                center: [0.0, 0.0],
                half,
                angle,
                height: 0.0,
            };
            let br = probe.bounding_radius();
            let lo = br + 1.0;
            let hi = size as f64 - 1.0 - br - 1.0;
            if lo >= hi {
                continue;
            }
            let center = [rng.gen_range(lo..hi), rng.gen_range(lo..hi)];
            let clear = placed.iter().all(|(_, f, _)| {
                let d = (f.center[0] - center[0]).hypot(f.center[1] - center[1]);
                d >= f.bounding_radius() + br + PLACEMENT_GAP
            });
            if clear {
                let height = match cat.primitive {
                    Primitive::Box => 2.0 * half[1] * m_per_px * rng.gen_range(0.8..1.4),
                    Primitive::Cylinder => half[0] * m_per_px * rng.gen_range(1.5..2.5),
                    Primitive::Sphere => 2.0 * half[0] * m_per_px,
                };
                placed.push((
                    cat.primitive,
                    Footprint {
                        center,
                        half,
                        angle,
                        height,
                    },
                    large,
                ));
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Placement(cfg.n_objects));
        }
    }

    // colors, with optional deliberate repeats
    let mut colors: Vec<usize> = Vec::new();
    for i in 0..placed.len() {
        let c = if i > 0 && rng.gen_bool(cfg.distractor_rate) {
            colors[rng.gen_range(0..i)]
        } else {
            rng.gen_range(0..COLORS.len())
        };
        colors.push(c);
    }

    // rasterization
    let n = size * size;
    let mut image = vec![0.0; 3 * n];
    let mut depth = vec![CAMERA_HEIGHT; n];
    let mut masks = vec![vec![0u8; n]; placed.len()];
    for row in 0..size {
        for col in 0..size {
            let i = row * size + col;
            let noise = rng.gen_range(-0.02..0.02);
            let mut rgb = TABLE_COLOR.map(|c| c + noise);
            let (x, y) = (col as f64, row as f64);
            for (k, (prim, fp, _)) in placed.iter().enumerate() {
                if !fp.contains(*prim, x, y) {
                    continue;
                }
                masks[k][i] = 1;
                let base = COLORS[colors[k]].1;
                let d = (x - fp.center[0]).hypot(y - fp.center[1]);
                let (shade, z) = match prim {
                    Primitive::Box => {
                        let e = BOX_EDGE;
                        let edge = !fp.contains(*prim, x - e, y)
                            || !fp.contains(*prim, x + e, y)
                            || !fp.contains(*prim, x, y - e)
                            || !fp.contains(*prim, x, y + e);
                        (if edge { 0.6 } else { 1.0 }, CAMERA_HEIGHT - fp.height)
                    }
                    Primitive::Cylinder => {
                        // flat top inside a dark rim that scales with the radius
                        let rim = (0.3 * fp.half[0]).max(1.5);
                        (if d > fp.half[0] - rim { 0.5 } else { 1.0 }, CAMERA_HEIGHT - fp.height)
                    }
                    Primitive::Sphere => {
                        let r = fp.half[0];
                        let rm = r * m_per_px;
                        let dm = (d.min(r)) * m_per_px;
                        // diffuse falloff plus a specular spot toward the light
                        let spot = [fp.center[0] - 0.35 * r, fp.center[1] - 0.35 * r];
                        let ds = (x - spot[0]).hypot(y - spot[1]) / (0.3 * r);
                        let shade = 1.0 - 0.55 * (d / r).powi(2) + 0.45 * (-0.5 * ds * ds).exp();
                        (shade, CAMERA_HEIGHT - rm - (rm * rm - dm * dm).max(0.0).sqrt())
                    }
                };
                rgb = base.map(|c| (c * shade).max(shade - 1.0) + noise);
                depth[i] = z;
                break;
            }
            for ch in 0..3 {
                image[i * 3 + ch] = quantize_u8(rgb[ch]);
            }
        }
    }
    for d in &mut depth {
        *d = f64::from(*d as f32);
    }

    // annotations
    let beta = Beta::new(5.0, 2.0).expect("valid beta parameters");
    let mut objects = Vec::with_capacity(placed.len());
    for (k, ((prim, fp, large), cat)) in placed.iter().zip(categories).enumerate() {
        let mut grasps = Vec::new();
        let mut add = |x: f64, y: f64, w: f64, theta: f64, ecc: f64, rng: &mut ChaCha8Rng| {
            if w > DEFAULT_MAX_WIDTH * scale {
                return;
            }
            let s: f64 = beta.sample(rng);
            let score = (s * (1.0 - 0.4 * ecc.clamp(0.0, 1.0))).clamp(0.0, 1.0);
            grasps.push(GraspRect::new(x, y, w, theta, w * DEFAULT_HEIGHT_RATIO).with_score(score));
        };
        let [cx, cy] = fp.center;
        match prim {
            Primitive::Box => {
                let (a, b) = (fp.half[0], fp.half[1]);
                let (s, c) = fp.angle.sin_cos();
                let across = fp.angle + std::f64::consts::FRAC_PI_2;
                add(cx, cy, 2.0 * b + GRASP_MARGIN, across, 0.0, &mut rng);
                for t in [-0.45, 0.45] {
                    add(cx + t * a * c, cy + t * a * s, 2.0 * b + GRASP_MARGIN, across, t.abs(), &mut rng);
                }
                add(cx, cy, 2.0 * a + GRASP_MARGIN, fp.angle, 0.5, &mut rng);
            }
            _ => {
                let r = fp.half[0];
                for j in 0..6 {
                    let theta = -std::f64::consts::FRAC_PI_2 + j as f64 * std::f64::consts::PI / 6.0;
                    add(cx, cy, 2.0 * r + GRASP_MARGIN, theta, 0.0, &mut rng);
                }
            }
        }
        let grasps: Vec<GraspRect> = grasps
            .into_iter()
            .map(|g| GraspRect {
                theta: crate::grasp_maps::canonical_angle(g.theta),
                ..g
            })
            .collect();
        let poses = grasps
            .iter()
            .map(|g| planted_pose(g, &depth, size, &intr).to_record())
            .collect();
        objects.push(ObjectRecord {
            object_id: k as u32,
            category: cat.name.clone(),
            primitive: *prim,
            color: COLORS[colors[k]].0.to_string(),
            shape: prim.shape_word().to_string(),
            size: if *large { "large" } else { "small" }.to_string(),
            position_word: None,
            footprint: *fp,
            mask: std::mem::take(&mut masks[k]),
            grasps4dof: grasps,
            grasps6dof: poses,
        });
    }
    let centers: Vec<[f64; 2]> = objects.iter().map(|o| o.footprint.center).collect();
    let all: Vec<usize> = (0..objects.len()).collect();
    for (k, o) in objects.iter_mut().enumerate() {
        o.position_word = SPATIAL_WORDS
            .iter()
            .find(|w| is_extreme(&centers, &all, k, w))
            .map(|w| w.to_string());
    }
    Ok(SceneRecord {
        scene_id: format!("scene_{seed:016x}"),
        seed,
        height: size,
        width: size,
        image,
        depth,
        intrinsics: intr,
        objects,
        expressions: Vec::new(),
        ambiguous: Vec::new(),
    })
}

/// Top-down pose whose projected finger contacts reproduce the rectangle.
fn planted_pose(g: &GraspRect, depth: &[f64], size: usize, intr: &CameraIntrinsics) -> Grasp6DoF {
    let (col, row) = (g.x.round() as usize, g.y.round() as usize);
    let z = depth[row.min(size - 1) * size + col.min(size - 1)] + 0.01;
    let center = intr.deproject_pixel(g.x, g.y, z);
    let closing = Vector3::new(g.theta.cos(), g.theta.sin(), 0.0);
    let approach = Vector3::new(0.0, 0.0, 1.0);
    let opening = g.w * z / intr.fx;
    Grasp6DoF::from_axes(closing, approach, center, opening, g.score)
}

fn spatial_score(word: &str, c: [f64; 2]) -> f64 {
    let [x, y] = c;
    match word {
        "leftmost" => -x,
        "rightmost" => x,
        "front" => y,
        "rear" => -y,
        "top left" => -(x + y),
        "top right" => x - y,
        "bottom left" => y - x,
        "bottom right" => x + y,
        _ => f64::NAN,
    }
}

/// Whether `target` is the extreme of `word` among `among` by the margin.
fn is_extreme(centers: &[[f64; 2]], among: &[usize], target: usize, word: &str) -> bool {
    let t = spatial_score(word, centers[target]);
    among
        .iter()
        .filter(|&&i| i != target)
        .all(|&i| t >= spatial_score(word, centers[i]) + SPATIAL_MARGIN)
}

/// Keeps grasps whose score reaches the threshold.
pub fn filter_grasps(grasps: &[GraspRect], threshold: f64) -> Vec<GraspRect> {
    grasps.iter().filter(|g| g.score >= threshold).copied().collect()
}

/// Applies the score filter to both annotation lists of every object.
pub fn filter_scene_grasps(scene: &mut SceneRecord, threshold: f64) {
    for o in &mut scene.objects {
        let keep: Vec<bool> = o.grasps4dof.iter().map(|g| g.score >= threshold).collect();
        let mut it = keep.iter();
        o.grasps4dof.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        o.grasps6dof.retain(|_| *it.next().unwrap());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Qualifier {
    Color,
    Shape,
    Size,
    Spatial,
}

const QUALIFIERS: [Qualifier; 4] = [Qualifier::Color, Qualifier::Shape, Qualifier::Size, Qualifier::Spatial];

/// Emits, for every object that still has grasps, one expression per
/// attribute level 1-4. Each qualifier set singles out the target on its own
/// (without the noun); spatial words are superlatives over the objects that
/// share the other qualifiers. Sets resolvable without a superlative are
/// preferred. In a one-object scene the level-1 form is the bare noun.
pub fn gen_expressions(scene: &SceneRecord, templates: &[&str], seed: u64) -> Result<(Vec<Expression>, Vec<u32>)> {
    if templates.is_empty() {
        return Err(Error::Config("no expression templates".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<[f64; 2]> = scene.objects.iter().map(|o| o.footprint.center).collect();
    let mut out = Vec::new();
    let mut ambiguous = Vec::new();
    for (t, obj) in scene.objects.iter().enumerate() {
        if obj.grasps4dof.is_empty() {
            continue;
        }
        let mut flagged = false;
        for level in 1..=4usize {
            let phrase_quals: Option<Vec<(Qualifier, String)>> = if scene.objects.len() == 1 && level == 1 {
                Some(Vec::new())
            } else {
                choose_qualifiers(scene, &centers, t, level, &mut rng)
            };
            let Some(quals) = phrase_quals else {
                flagged = true;
                continue;
            };
            // natural English order: superlative, size, color, shape, noun
            let order = [Qualifier::Spatial, Qualifier::Size, Qualifier::Color, Qualifier::Shape];
            let mut words: Vec<&str> = order
                .iter()
                .filter_map(|kind| quals.iter().find(|(k, _)| k == kind).map(|(_, w)| w.as_str()))
                .collect();
            words.push(&obj.category);
            let template = templates[rng.gen_range(0..templates.len())];
            out.push(Expression {
                text: template.replace("{object}", &words.join(" ")),
                target_object_id: obj.object_id,
                attribute_count: quals.len().max(1),
            });
        }
        if flagged {
            ambiguous.push(obj.object_id);
        }
    }
    Ok((out, ambiguous))
}

fn choose_qualifiers(
    scene: &SceneRecord,
    centers: &[[f64; 2]],
    t: usize,
    level: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<(Qualifier, String)>> {
    let target = &scene.objects[t];
    let everyone: Vec<usize> = (0..scene.objects.len()).collect();
    // (needs a superlative, qualifier list)
    let mut options: Vec<(bool, Vec<(Qualifier, String)>)> = Vec::new();
    for mask in 0u8..16 {
        if mask.count_ones() as usize != level {
            continue;
        }
        let kinds: Vec<Qualifier> = QUALIFIERS.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, k)| *k).collect();
        let among: Vec<usize> = (0..scene.objects.len())
            .filter(|&i| {
                kinds
                    .iter()
                    .filter(|k| **k != Qualifier::Spatial)
                    .all(|k| scene.objects[i].attribute(*k) == target.attribute(*k))
            })
            .collect();
        let mut quals: Vec<(Qualifier, String)> = kinds
            .iter()
            .filter(|k| **k != Qualifier::Spatial)
            .map(|k| (*k, target.attribute(*k).to_string()))
            .collect();
        if kinds.contains(&Qualifier::Spatial) {
            // prefer words that also hold over the whole scene, so a redundant
            // superlative still describes where the object is
            let mut valid: Vec<&str> = SPATIAL_WORDS.iter().copied().filter(|w| is_extreme(centers, &everyone, t, w)).collect();
            if valid.is_empty() {
                valid = SPATIAL_WORDS.iter().copied().filter(|w| is_extreme(centers, &among, t, w)).collect();
            }
            let Some(w) = valid.choose(rng) else { continue };
            quals.push((Qualifier::Spatial, w.to_string()));
            options.push((among.len() > 1, quals));
        } else if among.len() == 1 {
            options.push((false, quals));
        }
    }
    let local: Vec<&Vec<(Qualifier, String)>> = options.iter().filter(|(s, _)| !s).map(|(_, q)| q).collect();
    let pool: Vec<&Vec<(Qualifier, String)>> = if local.is_empty() {
        options.iter().map(|(_, q)| q).collect()
    } else {
        local
    };
    pool.choose(rng).map(|q| (*q).clone())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seen_categories: Vec<String>,
    pub unseen_categories: Vec<String>,
    pub splits: BTreeMap<String, Vec<String>>,
}

pub const SPLIT_NAMES: [&str; 4] = ["train", "val", "test_seen", "test_unseen"];

impl SplitSpec {
    pub fn scenes(&self, split: &str) -> Result<&[String]> {
        self.splits
            .get(split)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::SplitNotFound(split.to_string()))
    }

    pub fn is_unseen(&self, category: &str) -> bool {
        self.unseen_categories.iter().any(|c| c == category)
    }

    /// Checks category disjointness and the per-split target rules.
    pub fn validate(&self, scenes: &[SceneRecord]) -> Result<()> {
        let seen: BTreeSet<&String> = self.seen_categories.iter().collect();
        if self.unseen_categories.iter().any(|c| seen.contains(c)) {
            return Err(Error::Config("seen and unseen categories overlap".into()));
        }
        let by_id: BTreeMap<&str, &SceneRecord> = scenes.iter().map(|s| (s.scene_id.as_str(), s)).collect();
        for (split, ids) in &self.splits {
            for id in ids {
                let scene = by_id
                    .get(id.as_str())
                    .ok_or_else(|| Error::Config(format!("split {split} lists unknown scene {id}")))?;
                let unseen_target = target_categories(scene).iter().any(|c| self.is_unseen(c));
                match split.as_str() {
                    "train" | "val" if unseen_target => {
                        return Err(Error::Config(format!("{split} scene {id} has an unseen-category target")))
                    }
                    "test_unseen" if !unseen_target => {
                        return Err(Error::Config(format!("test_unseen scene {id} has no unseen-category target")))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

/// Categories of objects referred to by some expression.
pub fn target_categories(scene: &SceneRecord) -> BTreeSet<String> {
    scene
        .expressions
        .iter()
        .filter_map(|e| scene.object(e.target_object_id))
        .map(|o| o.category.clone())
        .collect()
}

/// Seeded partition of categories into `round(fraction * N)` seen and the
/// rest unseen.
pub fn partition_categories(categories: &[String], seen_fraction: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if categories.len() < 2 {
        return Err(Error::Config("need at least two categories".into()));
    }
    if !(0.0..=1.0).contains(&seen_fraction) {
        return Err(Error::Config("seen fraction must lie in [0, 1]".into()));
    }
    let mut cats: Vec<String> = categories.to_vec();
    cats.sort();
    cats.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cats.shuffle(&mut rng);
    let n_seen = (seen_fraction * cats.len() as f64).round() as usize;
    let unseen = cats.split_off(n_seen);
    cats.sort();
    let mut unseen = unseen;
    unseen.sort();
    Ok((cats, unseen))
}

/// Partitions categories and assigns scenes: any scene with an unseen-category
/// target goes to test_unseen; the remaining scenes are shuffled and split
/// 80/10/10 into train, val and test_seen.
pub fn make_splits(categories: &[String], scenes: &[SceneRecord], seen_fraction: f64, seed: u64) -> Result<SplitSpec> {
    let (seen, unseen) = partition_categories(categories, seen_fraction, seed)?;
    let unseen_set: BTreeSet<&String> = unseen.iter().collect();
    let mut pool = Vec::new();
    let mut test_unseen = Vec::new();
    for s in scenes {
        if target_categories(s).iter().any(|c| unseen_set.contains(c)) {
            test_unseen.push(s.scene_id.clone());
        } else {
            pool.push(s.scene_id.clone());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    pool.shuffle(&mut rng);
    let n_train = (pool.len() as f64 * 0.8).round() as usize;
    let n_val = (pool.len() as f64 * 0.1).round() as usize;
    let test_seen = pool.split_off((n_train + n_val).min(pool.len()));
    let val = pool.split_off(n_train.min(pool.len()));
    let mut splits = BTreeMap::new();
    splits.insert("train".to_string(), pool);
    splits.insert("val".to_string(), val);
    splits.insert("test_seen".to_string(), test_seen);
    splits.insert("test_unseen".to_string(), test_unseen);
    Ok(SplitSpec {
        seen_categories: seen,
        unseen_categories: unseen,
        splits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test_seen: usize,
    pub n_test_unseen: usize,
    pub seen_fraction: f64,
    pub grasp_threshold: f64,
    pub distractor_rate: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 96,
            min_objects: 4,
            max_objects: 7,
            n_train: 500,
            n_val: 50,
            n_test_seen: 100,
            n_test_unseen: 100,
            seen_fraction: 0.7,
            grasp_threshold: DEFAULT_GRASP_THRESHOLD,
            distractor_rate: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub splits: SplitSpec,
    /// Built from training expressions; other words encode as UNK.
    pub vocabulary: Vocabulary,
    pub templates: Vec<String>,
    pub templates_note: String,
    pub catalog: Vec<Category>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub scenes: Vec<SceneRecord>,
}

fn mix(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a combined key
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generates one fully annotated scene for a split: placement, filtering and
/// expressions. Retries with derived seeds until the split's target rules hold.
fn gen_split_scene(
    cfg: &DatasetConfig,
    key: u64,
    seen: &[Category],
    unseen: &[Category],
    want_unseen: bool,
) -> Result<SceneRecord> {
    for attempt in 0..64u64 {
        let seed = mix(cfg.seed, key * 64 + attempt);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xca7e_6091);
        let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
        let mut cats: Vec<Category> = if want_unseen {
            let k = rng.gen_range(1..=n.div_ceil(2));
            let mut c: Vec<Category> = unseen.choose_multiple(&mut rng, k).cloned().collect();
            c.extend(seen.choose_multiple(&mut rng, n - k).cloned());
            c
        } else {
            seen.choose_multiple(&mut rng, n).cloned().collect()
        };
        cats.shuffle(&mut rng);
        let scfg = SceneConfig {
            n_objects: cats.len(),
            image_size: cfg.image_size,
            distractor_rate: cfg.distractor_rate,
        };
        let mut scene = match gen_scene_with(seed, &scfg, &cats) {
            Ok(s) => s,
            Err(Error::Placement(_)) => continue,
            Err(e) => return Err(e),
        };
        filter_scene_grasps(&mut scene, cfg.grasp_threshold);
        let (expressions, ambiguous) = gen_expressions(&scene, &TEMPLATES, seed ^ 0xe4b2)?;
        scene.expressions = expressions;
        scene.ambiguous = ambiguous;
        let targets = target_categories(&scene);
        let has_unseen = targets.iter().any(|c| unseen.iter().any(|u| &u.name == c));
        if scene.expressions.is_empty() || has_unseen != want_unseen {
            continue;
        }
        return Ok(scene);
    }
    Err(Error::Placement(cfg.max_objects))
}

/// Generates a complete dataset according to `cfg`.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.min_objects == 0 || cfg.min_objects > cfg.max_objects {
        return Err(Error::Config("object count range is empty".into()));
    }
    let cat = catalog();
    let names: Vec<String> = cat.iter().map(|c| c.name.clone()).collect();
    let (seen_names, unseen_names) = partition_categories(&names, cfg.seen_fraction, cfg.seed)?;
    let pick = |names: &[String]| -> Vec<Category> { cat.iter().filter(|c| names.contains(&c.name)).cloned().collect() };
    let (seen, unseen) = (pick(&seen_names), pick(&unseen_names));
    if seen.len() < cfg.max_objects {
        return Err(Error::Config("too few seen categories for the object count".into()));
    }
    if cfg.n_test_unseen > 0 && unseen.is_empty() {
        return Err(Error::Config("no unseen categories for test_unseen".into()));
    }
    let plan = [
        ("train", cfg.n_train, false),
        ("val", cfg.n_val, false),
        ("test_seen", cfg.n_test_seen, false),
        ("test_unseen", cfg.n_test_unseen, true),
    ];
    let mut scenes = Vec::new();
    let mut splits = BTreeMap::new();
    let mut key = 0u64;
    for (name, count, want_unseen) in plan {
        let mut ids = Vec::with_capacity(count);
        for _ in 0..count {
            let scene = gen_split_scene(cfg, key, &seen, &unseen, want_unseen)?;
            key += 1;
            ids.push(scene.scene_id.clone());
            scenes.push(scene);
        }
        splits.insert(name.to_string(), ids);
    }
    let split_spec = SplitSpec {
        seen_categories: seen_names,
        unseen_categories: unseen_names,
        splits,
    };
    split_spec.validate(&scenes)?;
    let train: BTreeSet<&str> = split_spec.splits["train"].iter().map(String::as_str).collect();
    let vocabulary = Vocabulary::build(
        scenes
            .iter()
            .filter(|s| train.contains(s.scene_id.as_str()))
            .flat_map(|s| s.expressions.iter().map(|e| e.text.as_str())),
    );
    Ok(Dataset {
        manifest: Manifest {
            format_version: 1,
            config: *cfg,
            splits: split_spec,
            vocabulary,
            templates: TEMPLATES.iter().map(|s| s.to_string()).collect(),
            templates_note: "template paraphrases are authored for this generator".into(),
            catalog: cat,
        },
        scenes,
    })
}

const MANIFEST: &str = "manifest.json";
const INDEX: &str = "index.jsonl";

#[derive(Debug, Serialize, Deserialize)]
struct IndexLine {
    file: String,
    #[serde(flatten)]
    scene: SceneRecord,
}

fn scene_entries(s: &SceneRecord) -> Vec<Entry> {
    let (h, w) = (s.height as u32, s.width as u32);
    let image: Vec<u8> = s.image.iter().map(|v| (v * 255.0).round() as u8).collect();
    let depth: Vec<f32> = s.depth.iter().map(|&d| d as f32).collect();
    let masks: Vec<u8> = s.objects.iter().flat_map(|o| o.mask.iter().copied()).collect();
    vec![
        Entry::new("image", vec![h, w, 3], TensorData::U8(image)),
        Entry::new("depth", vec![h, w], TensorData::F32(depth)),
        Entry::new("masks", vec![s.objects.len() as u32, h, w], TensorData::U8(masks)),
    ]
}

impl Dataset {
    pub fn scene(&self, id: &str) -> Option<&SceneRecord> {
        self.scenes.iter().find(|s| s.scene_id == id)
    }

    /// Scenes of a split in manifest order.
    pub fn split(&self, name: &str) -> Result<Vec<&SceneRecord>> {
        let ids = self.manifest.splits.scenes(name)?;
        let by_id: BTreeMap<&str, &SceneRecord> = self.scenes.iter().map(|s| (s.scene_id.as_str(), s)).collect();
        ids.iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Config(format!("scene {id} missing from dataset")))
            })
            .collect()
    }

    /// Writes manifest, index and per-scene containers under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let scene_dir = dir.join("scenes");
        std::fs::create_dir_all(&scene_dir).map_err(|e| Error::io(&scene_dir, e))?;
        let mut index = String::new();
        for s in &self.scenes {
            let file = format!("scenes/{}.gmtc", s.scene_id);
            save_container(&dir.join(&file), &scene_entries(s))?;
            let line = IndexLine {
                file,
                scene: s.clone(),
            };
            index.push_str(&serde_json::to_string(&line)?);
            index.push('\n');
        }
        write_atomic(&dir.join(INDEX), index.as_bytes())?;
        let manifest = serde_json::to_string_pretty(&self.manifest)?;
        write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let ipath = dir.join(INDEX);
        let index = std::fs::read_to_string(&ipath).map_err(|e| Error::io(&ipath, e))?;
        let mut scenes = Vec::new();
        for line in index.lines().filter(|l| !l.trim().is_empty()) {
            let IndexLine { file, mut scene } = serde_json::from_str(line)?;
            let entries = load_container(&dir.join(&file))?;
            let (h, w) = (scene.height, scene.width);
            let image = find(&entries, "image")?;
            let depth = find(&entries, "depth")?;
            let masks = find(&entries, "masks")?;
            if image.element_count() != h * w * 3 || depth.element_count() != h * w || masks.element_count() != scene.objects.len() * h * w {
                return Err(Error::Shape(format!("scene file {file} does not match its index entry")));
            }
            scene.image = match &image.data {
                TensorData::U8(v) => v.iter().map(|&b| f64::from(b) / 255.0).collect(),
                other => other.to_f64(),
            };
            scene.depth = depth.data.to_f64();
            let mvals = masks.data.to_f64();
            for (k, o) in scene.objects.iter_mut().enumerate() {
                o.mask = mvals[k * h * w..(k + 1) * h * w].iter().map(|&v| v as u8).collect();
            }
            scenes.push(scene);
        }
        Ok(Self { manifest, scenes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::grasp_success;

    #[test]
    fn catalog_covers_lexicon_objects() {
        let c = catalog();
        assert_eq!(c.len(), 88);
        assert!(c.iter().any(|c| c.primitive == Primitive::Sphere));
        assert!(c.iter().any(|c| c.primitive == Primitive::Box));
        assert!(c.iter().any(|c| c.primitive == Primitive::Cylinder));
    }

    #[test]
    fn single_box_grasp_is_at_centroid() {
        let cat = catalog().into_iter().find(|c| c.name == "box").unwrap();
        let s = gen_scene_with(3, &SceneConfig::new(1, 96), &[cat]).unwrap();
        let o = &s.objects[0];
        assert_eq!(o.mask.iter().filter(|&&m| m == 1).count() > 0, true);
        let g = o.grasps4dof[0];
        assert_eq!([g.x, g.y], o.footprint.center);
        // centroid of the mask agrees with the footprint center to within a pixel
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for (i, &m) in o.mask.iter().enumerate() {
            if m == 1 {
                sx += (i % 96) as f64;
                sy += (i / 96) as f64;
                n += 1.0;
            }
        }
        assert!((sx / n - g.x).abs() < 1.0 && (sy / n - g.y).abs() < 1.0);
    }

    #[test]
    fn scenes_are_deterministic_and_valid() {
        let cfg = SceneConfig::new(6, 96);
        let a = gen_scene(11, &cfg).unwrap();
        let b = gen_scene(11, &cfg).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        for o in &a.objects {
            for g in &o.grasps4dof {
                assert!(grasp_success(g, &[*g]).unwrap());
            }
        }
    }

    #[test]
    fn planted_poses_project_back_to_rects() {
        let s = gen_scene(5, &SceneConfig::new(4, 96)).unwrap();
        let gripper = crate::geometry3d::GripperModel::default();
        for o in &s.objects {
            for (g, p) in o.grasps4dof.iter().zip(o.poses()) {
                let r = crate::geometry3d::poses_to_rect(&[p], &s.intrinsics, &gripper).unwrap();
                assert!((r.x - g.x).abs() < 1e-6 && (r.y - g.y).abs() < 1e-6);
                assert!((r.w - g.w).abs() < 1e-6, "{} vs {}", r.w, g.w);
                assert!(crate::metrics::angle_diff(r.theta, g.theta) < 1e-6);
            }
        }
    }

    #[test]
    fn filter_examples() {
        let g = |s| GraspRect::new(5.0, 5.0, 4.0, 0.0, 2.0).with_score(s);
        let kept = filter_grasps(&[g(0.65), g(0.70), g(0.90)], 0.70);
        assert_eq!(kept.iter().map(|g| g.score).collect::<Vec<_>>(), vec![0.70, 0.90]);
        assert_eq!(filter_grasps(&[g(0.65), g(0.70)], 0.0).len(), 2);
        assert!(filter_grasps(&[g(0.65), g(0.99)], 1.0).is_empty());
    }

    #[test]
    fn single_object_level_one_is_bare_noun() {
        let cat = catalog().into_iter().find(|c| c.name == "mug").unwrap();
        let s = gen_scene_with(8, &SceneConfig::new(1, 96), &[cat]).unwrap();
        let (ex, _) = gen_expressions(&s, &["Grasp the {object}"], 1).unwrap();
        assert_eq!(ex[0].text, "Grasp the mug");
        assert_eq!(ex[0].attribute_count, 1);
    }

    #[test]
    fn two_boxes_differing_in_color() {
        let cat = catalog().into_iter().find(|c| c.name == "box").unwrap();
        let mut s = gen_scene_with(21, &SceneConfig::new(2, 96), &[cat.clone(), cat]).unwrap();
        s.objects[0].color = "red".into();
        s.objects[1].color = "blue".into();
        s.objects[1].size = s.objects[0].size.clone();
        let (ex, _) = gen_expressions(&s, &["Grasp the {object}"], 2).unwrap();
        let l1: Vec<&Expression> = ex.iter().filter(|e| e.attribute_count == 1).collect();
        assert!(l1.iter().all(|e| e.text != "Grasp the box"));
        assert!(l1.iter().any(|e| e.text == "Grasp the red box" && e.target_object_id == 0));
    }

    #[test]
    fn split_counts_match_category_fraction() {
        let names: Vec<String> = catalog().into_iter().map(|c| c.name).collect();
        let (seen, unseen) = partition_categories(&names, 0.7, 4).unwrap();
        assert_eq!((seen.len(), unseen.len()), (62, 26));
        let (all, none) = partition_categories(&names, 1.0, 4).unwrap();
        assert_eq!((all.len(), none.len()), (88, 0));
        assert_eq!(partition_categories(&names, 0.7, 4).unwrap(), (seen, unseen));
    }

    #[test]
    fn small_dataset_round_trips_through_disk() {
        let cfg = DatasetConfig {
            image_size: 32,
            min_objects: 1,
            max_objects: 2,
            n_train: 3,
            n_val: 1,
            n_test_seen: 1,
            n_test_unseen: 2,
            ..DatasetConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        for s in &ds.scenes {
            s.validate().unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(ds, back);
        assert!(matches!(back.split("holdout"), Err(Error::SplitNotFound(_))));
    }
}
