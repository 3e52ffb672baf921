//! Grasp success criteria, rotated-rectangle IoU, Top-1/Top-K aggregation and
//! referring-expression complexity bands.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry3d::Grasp6DoF;
use crate::grasp_maps::GraspRect;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.25;
pub const DEFAULT_ANGLE_THRESHOLD_DEG: f64 = 30.0;
pub const DEFAULT_TOL_TRANSLATION: f64 = 0.02;
pub const DEFAULT_TOL_ROTATION_DEG: f64 = 15.0;

type Pt = [f64; 2];

fn signed_area(poly: &[Pt]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        / 2.0
}

/// Shoelace area of a simple polygon.
pub fn polygon_area(poly: &[Pt]) -> f64 {
    signed_area(poly).abs()
}

fn ccw(mut poly: Vec<Pt>) -> Vec<Pt> {
    if signed_area(&poly) < 0.0 {
        poly.reverse();
    }
    poly
}

/// Sutherland-Hodgman clip of `subject` against a convex, counter-clockwise
/// `clip` polygon.
pub fn clip_convex(subject: &[Pt], clip: &[Pt]) -> Vec<Pt> {
    let mut out = subject.to_vec();
    let side = |a: Pt, b: Pt, p: Pt| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let (sc, sp) = (side(a, b, cur), side(a, b, prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    out.push(intersect(prev, cur, sp, sc));
                }
                out.push(cur);
            } else if sp >= 0.0 {
                out.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    out
}

fn intersect(p: Pt, q: Pt, sp: f64, sq: f64) -> Pt {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Intersection over union of two rotated grasp rectangles.
pub fn rect_iou(a: &GraspRect, b: &GraspRect) -> Result<f64> {
    if !(a.w > 0.0 && a.h > 0.0 && b.w > 0.0 && b.h > 0.0) {
        return Err(Error::ZeroArea);
    }
    // cheap reject on circumscribed circles
    let (dx, dy) = (a.x - b.x, a.y - b.y);
    let reach = a.w.hypot(a.h) / 2.0 + b.w.hypot(b.h) / 2.0;
    if dx * dx + dy * dy > reach * reach {
        return Ok(0.0);
    }
    let pa = ccw(a.corners().to_vec());
    let pb = ccw(b.corners().to_vec());
    let clipped = clip_convex(&pa, &pb);
    let inter = if clipped.len() < 3 { 0.0 } else { polygon_area(&clipped) };
    let union = a.area() + b.area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Angular distance between two grasp axes (mod pi), in degrees within
/// [0, 90], rounded to 1e-9 degrees so that threshold boundaries given in
/// degrees survive the radian round trip.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    (d.min(PI - d).to_degrees() * 1e9).round() / 1e9
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessCriteria {
    pub iou_threshold: f64,
    pub angle_threshold_deg: f64,
}

impl Default for SuccessCriteria {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            angle_threshold_deg: DEFAULT_ANGLE_THRESHOLD_DEG,
        }
    }
}

impl SuccessCriteria {
    /// True iff some ground truth has IoU strictly above the threshold and an
    /// angle difference strictly below it.
    pub fn grasp_success(&self, pred: &GraspRect, gts: &[GraspRect]) -> Result<bool> {
        if gts.is_empty() {
            return Err(Error::EmptyGroundTruth);
        }
        for gt in gts {
            if angle_diff(pred.theta, gt.theta) < self.angle_threshold_deg
                && rect_iou(pred, gt)? > self.iou_threshold
            {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

pub fn grasp_success(pred: &GraspRect, gts: &[GraspRect]) -> Result<bool> {
    SuccessCriteria::default().grasp_success(pred, gts)
}

/// True iff some pool member is within `tol_t` meters and `tol_r_deg` degrees.
pub fn success6dof(selected: &Grasp6DoF, gt_pool: &[Grasp6DoF], tol_t: f64, tol_r_deg: f64) -> Result<bool> {
    if gt_pool.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    if !(tol_t > 0.0 && tol_r_deg > 0.0) {
        return Err(Error::Config("tolerances must be positive".into()));
    }
    Ok(gt_pool.iter().any(|gt| {
        selected.translation_distance(gt) <= tol_t && selected.rotation_distance_deg(gt) <= tol_r_deg
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Band {
    L1,
    L2,
    L3,
    L4,
}

impl Band {
    pub const ALL: [Band; 4] = [Band::L1, Band::L2, Band::L3, Band::L4];

    /// Band for an attribute count, clamped to 1..=4.
    pub fn from_count(count: usize) -> Self {
        match count {
            0 | 1 => Band::L1,
            2 => Band::L2,
            3 => Band::L3,
            _ => Band::L4,
        }
    }

    pub fn level(self) -> usize {
        self as usize + 1
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.level())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttributeKind {
    Color,
    Shape,
    Size,
    Spatial,
}

/// Static attribute word lists. Multi-word phrases ("top right") count once.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lexicon {
    pub colors: Vec<String>,
    pub shapes: Vec<String>,
    pub sizes: Vec<String>,
    pub spatial: Vec<String>,
    pub objects: Vec<String>,
}

const LEXICON_JSON: &str = include_str!("../data/lexicon.json");

impl Default for Lexicon {
    fn default() -> Self {
        serde_json::from_str(LEXICON_JSON).expect("bundled lexicon is valid")
    }
}

/// Lowercased alphanumeric words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AttributeHits {
    pub qualifiers: Vec<AttributeKind>,
    pub nouns: usize,
}

impl Lexicon {
    fn phrases(&self) -> Vec<(Vec<String>, Option<AttributeKind>)> {
        let mut out = Vec::new();
        let groups: [(&[String], Option<AttributeKind>); 5] = [
            (&self.colors, Some(AttributeKind::Color)),
            (&self.shapes, Some(AttributeKind::Shape)),
            (&self.sizes, Some(AttributeKind::Size)),
            (&self.spatial, Some(AttributeKind::Spatial)),
            (&self.objects, None),
        ];
        for (words, kind) in groups {
            for w in words {
                out.push((tokenize(w), kind));
            }
        }
        // longest phrases first so "top right" wins over any single word
        out.sort_by_key(|(p, _)| std::cmp::Reverse(p.len()));
        out
    }

    /// Scans left to right, matching the longest lexicon phrase at each word.
    pub fn attribute_hits(&self, expression: &str) -> AttributeHits {
        let words = tokenize(expression);
        let phrases = self.phrases();
        let mut hits = AttributeHits::default();
        let mut i = 0;
        while i < words.len() {
            let m = phrases
                .iter()
                .find(|(p, _)| words.len() - i >= p.len() && words[i..i + p.len()] == p[..]);
            match m {
                Some((p, kind)) => {
                    match kind {
                        Some(k) => hits.qualifiers.push(*k),
                        None => hits.nouns += 1,
                    }
                    i += p.len();
                }
                None => i += 1,
            }
        }
        hits
    }

    /// Complexity band of an expression: the number of qualifier terms, with
    /// the object noun alone counting as one.
    pub fn complexity_bin(&self, expression: &str) -> Result<Band> {
        if expression.trim().is_empty() {
            return Err(Error::UnrecognizedExpression(expression.to_string()));
        }
        let hits = self.attribute_hits(expression);
        if hits.qualifiers.is_empty() && hits.nouns == 0 {
            return Err(Error::UnrecognizedExpression(expression.to_string()));
        }
        Ok(Band::from_count(hits.qualifiers.len().max(1)))
    }
}

pub fn complexity_bin(expression: &str, lexicon: &Lexicon) -> Result<Band> {
    lexicon.complexity_bin(expression)
}

/// One evaluated referring expression: ranked predictions, the target's
/// ground-truth grasps and its complexity band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub preds: Vec<GraspRect>,
    pub gts: Vec<GraspRect>,
    pub band: Band,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandRate {
    pub n: usize,
    pub top1: f64,
    pub topk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1_success_rate: f64,
    pub topk_success_rate: f64,
    pub k: usize,
    pub per_band: BTreeMap<Band, BandRate>,
    pub n_records: usize,
}

/// Per-record outcome: (top-1 success, top-k success).
pub fn record_outcome(record: &EvalRecord, k: usize, criteria: &SuccessCriteria) -> Result<(bool, bool)> {
    if record.gts.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let mut top1 = false;
    let mut topk = false;
    for (i, p) in record.preds.iter().take(k.max(1)).enumerate() {
        if criteria.grasp_success(p, &record.gts)? {
            topk = true;
            if i == 0 {
                top1 = true;
            }
            break;
        }
    }
    Ok((top1, topk))
}

pub fn aggregate(records: &[EvalRecord], k: usize, criteria: &SuccessCriteria) -> Result<EvalReport> {
    let outcomes = records
        .iter()
        .map(|r| Ok((r.band, record_outcome(r, k, criteria)?)))
        .collect::<Result<Vec<_>>>()?;
    aggregate_outcomes(&outcomes, k)
}

/// Aggregates precomputed (band, (top1, topk)) outcomes.
pub fn aggregate_outcomes(outcomes: &[(Band, (bool, bool))], k: usize) -> Result<EvalReport> {
    if outcomes.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let n = outcomes.len();
    let rate = |c: usize, n: usize| c as f64 / n as f64;
    let top1 = outcomes.iter().filter(|o| o.1 .0).count();
    let topk = outcomes.iter().filter(|o| o.1 .1).count();
    let mut counts: BTreeMap<Band, (usize, usize, usize)> = BTreeMap::new();
    for (band, (t1, tk)) in outcomes {
        let e = counts.entry(*band).or_default();
        e.0 += 1;
        e.1 += *t1 as usize;
        e.2 += *tk as usize;
    }
    let per_band = counts
        .into_iter()
        .map(|(b, (n, t1, tk))| {
            (
                b,
                BandRate {
                    n,
                    top1: rate(t1, n),
                    topk: rate(tk, n),
                },
            )
        })
        .collect();
    Ok(EvalReport {
        top1_success_rate: rate(top1, n),
        topk_success_rate: rate(topk, n),
        k,
        per_band,
        n_records: n,
    })
}

impl EvalReport {
    /// Flat key/value JSON object, with bands expanded to `L1_n`, `L1_top1`, ...
    pub fn to_flat_json(&self) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        m.insert("n_records".into(), self.n_records.into());
        m.insert("k".into(), self.k.into());
        m.insert("top1_success_rate".into(), self.top1_success_rate.into());
        m.insert("topk_success_rate".into(), self.topk_success_rate.into());
        for (b, r) in &self.per_band {
            m.insert(format!("{b}_n"), r.n.into());
            m.insert(format!("{b}_top1"), r.top1.into());
            m.insert(format!("{b}_topk"), r.topk.into());
        }
        serde_json::Value::Object(m)
    }

    pub fn csv_header() -> String {
        let mut cols = vec!["n_records".to_string(), "k".into(), "top1".into(), "topk".into()];
        for b in Band::ALL {
            cols.push(format!("{b}_n"));
            cols.push(format!("{b}_top1"));
        }
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.n_records.to_string(),
            self.k.to_string(),
            format!("{:.6}", self.top1_success_rate),
            format!("{:.6}", self.topk_success_rate),
        ];
        for b in Band::ALL {
            match self.per_band.get(&b) {
                Some(r) => {
                    cols.push(r.n.to_string());
                    cols.push(format!("{:.6}", r.top1));
                }
                None => {
                    cols.push("0".into());
                    cols.push(String::new());
                }
            }
        }
        cols.join(",")
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("{:<8} {:>8} {:>8} {:>8}\n", "band", "records", "top-1", format!("top-{}", self.k)));
        for (b, r) in &self.per_band {
            s.push_str(&format!("{:<8} {:>8} {:>8.4} {:>8.4}\n", b.to_string(), r.n, r.top1, r.topk));
        }
        s.push_str(&format!(
            "{:<8} {:>8} {:>8.4} {:>8.4}\n",
            "all", self.n_records, self.top1_success_rate, self.topk_success_rate
        ));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rect(x: f64, y: f64, w: f64, h: f64, t: f64) -> GraspRect {
        GraspRect::new(x, y, w, t, h)
    }

    #[test]
    fn iou_identity_disjoint_and_axis_aligned() {
        let a = rect(10.0, 10.0, 10.0, 4.0, 0.0);
        assert!((rect_iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(rect_iou(&a, &rect(1010.0, 10.0, 10.0, 4.0, 0.0)).unwrap(), 0.0);
        let b = rect(12.0, 10.0, 10.0, 4.0, 0.0);
        assert!((rect_iou(&a, &b).unwrap() - 32.0 / 48.0).abs() < 1e-9);
    }

    #[test]
    fn iou_zero_area_is_an_error() {
        let a = rect(0.0, 0.0, 0.0, 4.0, 0.0);
        assert!(matches!(rect_iou(&a, &a), Err(Error::ZeroArea)));
    }

    #[test]
    fn iou_matches_closed_form_for_axis_aligned_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let mut r = || rect(rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0), rng.gen_range(1.0..15.0), rng.gen_range(1.0..15.0), 0.0);
            let (a, b) = (r(), r());
            let ix = ((a.x + a.w / 2.0).min(b.x + b.w / 2.0) - (a.x - a.w / 2.0).max(b.x - b.w / 2.0)).max(0.0);
            let iy = ((a.y + a.h / 2.0).min(b.y + b.h / 2.0) - (a.y - a.h / 2.0).max(b.y - b.h / 2.0)).max(0.0);
            let expected = ix * iy / (a.area() + b.area() - ix * iy);
            assert!((rect_iou(&a, &b).unwrap() - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn angle_diff_cases() {
        assert_eq!(angle_diff(0.3, 0.3), 0.0);
        assert!((angle_diff(85f64.to_radians(), -85f64.to_radians()) - 10.0).abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let a = rng.gen_range(-PI / 2.0..PI / 2.0);
            let b = rng.gen_range(-PI / 2.0..PI / 2.0);
            let brute = [-1.0, 0.0, 1.0].iter().map(|k| (a - b + k * PI).abs()).fold(f64::INFINITY, f64::min);
            assert!((angle_diff(a, b) - brute.to_degrees()).abs() < 1e-9);
        }
    }

    /// Shifts `pred` along x until its IoU with `gt` reaches the target (same size/angle).
    fn with_iou(gt: &GraspRect, iou: f64, dtheta_deg: f64) -> GraspRect {
        // axis-aligned overlap along x: (w - d) / (w + d) = iou
        let d = gt.w * (1.0 - iou) / (1.0 + iou);
        let mut p = rect(gt.x + d, gt.y, gt.w, gt.h, 0.0);
        p.theta = dtheta_deg.to_radians();
        p
    }

    #[test]
    fn success_thresholds_are_strict() {
        let gt = rect(50.0, 50.0, 40.0, 20.0, 0.0);
        // The IoU check uses the real rotated overlap, so angles stay 0 here
        // and the angle threshold is tested separately.
        let p = with_iou(&gt, 0.30, 0.0);
        assert!(grasp_success(&p, &[gt]).unwrap());
        let p = with_iou(&gt, 0.24, 0.0);
        assert!(!grasp_success(&p, &[gt]).unwrap());

        let mut p = gt;
        p.theta = 20f64.to_radians();
        assert!(rect_iou(&p, &gt).unwrap() > 0.25);
        assert!(grasp_success(&p, &[gt]).unwrap());
        p.theta = 30f64.to_radians();
        assert!(!grasp_success(&p, &[gt]).unwrap());
        assert!(matches!(grasp_success(&p, &[]), Err(Error::EmptyGroundTruth)));
    }

    #[test]
    fn success6dof_cases() {
        use nalgebra::Vector3;
        let g = Grasp6DoF::from_axes(Vector3::x(), Vector3::z(), Vector3::new(0.0, 0.0, 0.5), 0.05, 1.0);
        assert!(success6dof(&g, &[g], 0.02, 15.0).unwrap());
        let far = Grasp6DoF {
            translation: g.translation + Vector3::new(0.05, 0.0, 0.0),
            ..g
        };
        assert!(!success6dof(&far, &[g], 0.02, 15.0).unwrap());
        assert!(matches!(success6dof(&g, &[], 0.02, 15.0), Err(Error::EmptyGroundTruth)));
    }

    #[test]
    fn complexity_bins() {
        let lex = Lexicon::default();
        assert_eq!(lex.complexity_bin("Grasp the red circular box near the top right of the image").unwrap(), Band::L3);
        assert_eq!(lex.complexity_bin("Grasp the box").unwrap(), Band::L1);
        assert_eq!(lex.complexity_bin("Pick up the small red round mug at the front").unwrap(), Band::L4);
        assert!(matches!(lex.complexity_bin("hello world"), Err(Error::UnrecognizedExpression(_))));
        assert!(lex.complexity_bin("  ").is_err());
    }

    fn rec(top1: bool, top5: bool) -> EvalRecord {
        let gt = rect(10.0, 10.0, 10.0, 5.0, 0.0);
        let miss = rect(100.0, 100.0, 10.0, 5.0, 0.0);
        let mut preds = vec![if top1 { gt } else { miss }, miss, miss];
        if top5 && !top1 {
            preds.push(gt);
        }
        EvalRecord {
            preds,
            gts: vec![gt],
            band: Band::L2,
        }
    }

    #[test]
    fn aggregate_counts() {
        let c = SuccessCriteria::default();
        let recs = [rec(true, true), rec(false, true), rec(true, true), rec(false, false)];
        let r = aggregate(&recs, 5, &c).unwrap();
        assert_eq!((r.top1_success_rate, r.topk_success_rate), (0.5, 0.75));
        assert_eq!(r.per_band[&Band::L2].n, 4);
        let r = aggregate(&[rec(false, false), rec(false, false)], 5, &c).unwrap();
        assert_eq!((r.top1_success_rate, r.topk_success_rate), (0.0, 0.0));
        assert!(matches!(aggregate(&[], 5, &c), Err(Error::EmptyEvaluation)));
        let empty_preds = EvalRecord {
            preds: vec![],
            ..rec(true, true)
        };
        assert_eq!(aggregate(&[empty_preds], 5, &c).unwrap().topk_success_rate, 0.0);
    }

    #[test]
    fn aggregate_matches_recount() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let c = SuccessCriteria::default();
        for _ in 0..20 {
            let n = rng.gen_range(1..40);
            let table: Vec<(bool, bool, Band)> = (0..n)
                .map(|_| {
                    let t1 = rng.gen_bool(0.4);
                    (t1, t1 || rng.gen_bool(0.3), Band::ALL[rng.gen_range(0..4)])
                })
                .collect();
            let recs: Vec<_> = table.iter().map(|&(a, b, band)| EvalRecord { band, ..rec(a, b) }).collect();
            let r = aggregate(&recs, 5, &c).unwrap();
            let t1 = table.iter().filter(|t| t.0).count() as f64 / n as f64;
            let tk = table.iter().filter(|t| t.1).count() as f64 / n as f64;
            assert_eq!((r.top1_success_rate, r.topk_success_rate), (t1, tk));
            assert_eq!(r.per_band.values().map(|b| b.n).sum::<usize>(), n);
        }
    }

    #[test]
    fn report_renderings() {
        let r = aggregate(&[rec(true, true), rec(false, true)], 5, &SuccessCriteria::default()).unwrap();
        let j = r.to_flat_json();
        assert_eq!(j["top1_success_rate"], 0.5);
        assert_eq!(j["L2_n"], 2);
        assert!(j.as_object().unwrap().values().all(|v| !v.is_object()));
        assert_eq!(EvalReport::csv_header().split(',').count(), r.csv_row().split(',').count());
        assert!(r.table().contains("top-5"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_rect() -> impl Strategy<Value = GraspRect> {
            (0.0..30.0f64, 0.0..30.0f64, 1.0..20.0f64, 1.0..20.0f64, -3.2..3.2f64)
                .prop_map(|(x, y, w, h, t)| GraspRect::new(x, y, w, t, h))
        }

        proptest! {
            #[test]
            fn iou_symmetric_bounded_and_pi_invariant(a in arb_rect(), b in arb_rect()) {
                let ab = rect_iou(&a, &b).unwrap();
                let ba = rect_iou(&b, &a).unwrap();
                prop_assert!((ab - ba).abs() < 1e-9);
                prop_assert!((0.0..=1.0).contains(&ab));
                let mut a2 = a; a2.theta += PI;
                let mut b2 = b; b2.theta += PI;
                prop_assert!((rect_iou(&a2, &b2).unwrap() - ab).abs() < 1e-9);
            }

            #[test]
            fn success_is_order_invariant(p in arb_rect(), gts in proptest::collection::vec(arb_rect(), 1..6)) {
                let mut rev = gts.clone();
                rev.reverse();
                prop_assert_eq!(grasp_success(&p, &gts).unwrap(), grasp_success(&p, &rev).unwrap());
            }

            #[test]
            fn failing_record_never_raises_rates(outcomes in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..30)) {
                let o: Vec<_> = outcomes.iter().map(|&(a, b)| (Band::L1, (a, a || b))).collect();
                let r0 = aggregate_outcomes(&o, 5).unwrap();
                prop_assert!(r0.top1_success_rate <= r0.topk_success_rate);
                let mut o2 = o.clone();
                o2.push((Band::L1, (false, false)));
                let r1 = aggregate_outcomes(&o2, 5).unwrap();
                prop_assert!(r1.top1_success_rate <= r0.top1_success_rate);
                prop_assert!(r1.topk_success_rate <= r0.topk_success_rate);
            }
        }
    }
}
