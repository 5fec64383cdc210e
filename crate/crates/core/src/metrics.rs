//! Evaluation metrics: DICE, AJI, DQ/SQ/PQ and point-detection scores.
//!
//! Conventions for degenerate inputs: two empty masks have DICE 1, two empty
//! instance maps have AJI/DQ/SQ/PQ 1, and recall (precision) is 1 when there
//! are no ground-truth (predicted) points. A perfect empty prediction is
//! therefore never penalised.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::raster::{BinaryMask, InstanceMap, Point, PointSet};

/// Panoptic IoU threshold; matches above it are unique.
pub const PANOPTIC_IOU: f64 = 0.5;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(gt_id, pred_id, iou)`, sorted by gt id.
    pub pairs: Vec<(u32, u32, f64)>,
    pub unmatched_gt: Vec<u32>,
    pub unmatched_pred: Vec<u32>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "DICE")]
    pub dice: f64,
    #[serde(rename = "AJI")]
    pub aji: f64,
    #[serde(rename = "DQ")]
    pub dq: f64,
    #[serde(rename = "SQ")]
    pub sq: f64,
    #[serde(rename = "PQ")]
    pub pq: f64,
    #[serde(rename = "Recall")]
    pub det_recall: f64,
    #[serde(rename = "Precision")]
    pub det_precision: f64,
    #[serde(rename = "F1")]
    pub det_f1: f64,
}

/// Pixel overlap tables between two label maps.
struct Overlap {
    gt_area: BTreeMap<u32, u64>,
    pred_area: BTreeMap<u32, u64>,
    inter: HashMap<(u32, u32), u64>,
}

impl Overlap {
    fn new(pred: &InstanceMap, gt: &InstanceMap) -> Self {
        let mut o = Overlap { gt_area: BTreeMap::new(), pred_area: BTreeMap::new(), inter: HashMap::new() };
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if g > 0 {
                *o.gt_area.entry(g).or_default() += 1;
            }
            if p > 0 {
                *o.pred_area.entry(p).or_default() += 1;
            }
            if g > 0 && p > 0 {
                *o.inter.entry((g, p)).or_default() += 1;
            }
        }
        o
    }

    fn union(&self, g: u32, p: u32, inter: u64) -> u64 {
        self.gt_area[&g] + self.pred_area[&p] - inter
    }

    /// Overlapping predictions per gt id, ascending pred id.
    fn candidates(&self) -> BTreeMap<u32, Vec<(u32, u64)>> {
        let mut c: BTreeMap<u32, Vec<(u32, u64)>> = BTreeMap::new();
        for (&(g, p), &n) in &self.inter {
            c.entry(g).or_default().push((p, n));
        }
        for v in c.values_mut() {
            v.sort_unstable();
        }
        c
    }
}

/// Counts needed to aggregate metrics over many images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub dice_intersection: u64,
    pub dice_total: u64,
    pub aji_intersection: u64,
    pub aji_union: u64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub iou_sum: f64,
    pub det_tp: u64,
    pub det_gt: u64,
    pub det_pred: u64,
}

fn ratio(num: f64, den: f64, empty: f64) -> f64 {
    if den == 0.0 {
        empty
    } else {
        num / den
    }
}

fn harmonic(r: f64, p: f64) -> f64 {
    if r + p == 0.0 {
        0.0
    } else {
        2.0 * r * p / (r + p)
    }
}

impl MetricCounts {
    pub fn report(&self) -> MetricReport {
        let dice = ratio(2.0 * self.dice_intersection as f64, self.dice_total as f64, 1.0);
        let aji = if self.aji_union == 0 { 1.0 } else { self.aji_intersection as f64 / self.aji_union as f64 };
        let (dq, sq) = panoptic_from_counts(self.tp, self.fp, self.fn_, self.iou_sum);
        let recall = ratio(self.det_tp as f64, self.det_gt as f64, 1.0);
        let precision = ratio(self.det_tp as f64, self.det_pred as f64, 1.0);
        MetricReport {
            dice,
            aji,
            dq,
            sq,
            pq: dq * sq,
            det_recall: recall,
            det_precision: precision,
            det_f1: harmonic(recall, precision),
        }
    }
}

impl std::ops::Add for MetricCounts {
    type Output = MetricCounts;

    fn add(self, o: MetricCounts) -> MetricCounts {
        MetricCounts {
            dice_intersection: self.dice_intersection + o.dice_intersection,
            dice_total: self.dice_total + o.dice_total,
            aji_intersection: self.aji_intersection + o.aji_intersection,
            aji_union: self.aji_union + o.aji_union,
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            iou_sum: self.iou_sum + o.iou_sum,
            det_tp: self.det_tp + o.det_tp,
            det_gt: self.det_gt + o.det_gt,
            det_pred: self.det_pred + o.det_pred,
        }
    }
}

fn panoptic_from_counts(tp: u64, fp: u64, fn_: u64, iou_sum: f64) -> (f64, f64) {
    if tp + fp + fn_ == 0 {
        return (1.0, 1.0);
    }
    let dq = tp as f64 / (tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64);
    let sq = if tp == 0 { 0.0 } else { iou_sum / tp as f64 };
    (dq, sq)
}

fn dice_counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<(u64, u64)> {
    pred.check_shape(gt)?;
    let mut inter = 0;
    let mut total = 0;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += u64::from(p && g);
        total += u64::from(p) + u64::from(g);
    }
    Ok((inter, total))
}

/// `2|P∩G| / (|P| + |G|)`.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (inter, total) = dice_counts(pred, gt)?;
    Ok(ratio(2.0 * inter as f64, total as f64, 1.0))
}

fn aji_counts(o: &Overlap) -> (u64, u64) {
    let candidates = o.candidates();
    let mut used: HashSet<u32> = HashSet::new();
    let (mut inter_sum, mut union_sum) = (0u64, 0u64);
    for (&g, &g_area) in &o.gt_area {
        let mut best: Option<(u32, u64, f64)> = None;
        for &(p, n) in candidates.get(&g).map(Vec::as_slice).unwrap_or(&[]) {
            if used.contains(&p) {
                continue;
            }
            let iou = n as f64 / o.union(g, p, n) as f64;
            // strict > keeps the lower pred id on ties
            if best.is_none_or(|(_, _, b)| iou > b) {
                best = Some((p, n, iou));
            }
        }
        match best {
            Some((p, n, _)) => {
                used.insert(p);
                inter_sum += n;
                union_sum += o.union(g, p, n);
            }
            None => union_sum += g_area,
        }
    }
    for (p, &a) in &o.pred_area {
        if !used.contains(p) {
            union_sum += a;
        }
    }
    (inter_sum, union_sum)
}

/// Aggregated Jaccard Index. Ground-truth instances are visited in ascending
/// id order; each takes the still-unused prediction of highest IoU (lower id
/// on ties). Unused predictions and unmatched ground truth enlarge the union.
pub fn aji(pred: &InstanceMap, gt: &InstanceMap) -> Result<f64> {
    pred.check_shape(gt)?;
    let (i, u) = aji_counts(&Overlap::new(pred, gt));
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

fn panoptic_match(o: &Overlap) -> MatchResult {
    let mut pairs = Vec::new();
    let mut matched_pred = HashSet::new();
    for (&g, cands) in &o.candidates() {
        for &(p, n) in cands {
            let iou = n as f64 / o.union(g, p, n) as f64;
            if iou > PANOPTIC_IOU {
                pairs.push((g, p, iou));
                matched_pred.insert(p);
            }
        }
    }
    let matched_gt: HashSet<u32> = pairs.iter().map(|&(g, _, _)| g).collect();
    MatchResult {
        pairs,
        unmatched_gt: o.gt_area.keys().copied().filter(|g| !matched_gt.contains(g)).collect(),
        unmatched_pred: o.pred_area.keys().copied().filter(|p| !matched_pred.contains(p)).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Panoptic {
    pub dq: f64,
    pub sq: f64,
    pub pq: f64,
    pub matches: MatchResult,
}

/// Detection, segmentation and panoptic quality under IoU > 0.5 matching.
pub fn panoptic(pred: &InstanceMap, gt: &InstanceMap) -> Result<Panoptic> {
    pred.check_shape(gt)?;
    let m = panoptic_match(&Overlap::new(pred, gt));
    let iou_sum: f64 = m.pairs.iter().map(|p| p.2).sum();
    let (dq, sq) =
        panoptic_from_counts(m.pairs.len() as u64, m.unmatched_pred.len() as u64, m.unmatched_gt.len() as u64, iou_sum);
    Ok(Panoptic { dq, sq, pq: dq * sq, matches: m })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionScores {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub tp: usize,
}

fn detection_matches(pred: &[Point], gt: &[Point], radius: f64) -> usize {
    let r2 = radius * radius;
    let mut cands = Vec::new();
    for (gi, g) in gt.iter().enumerate() {
        for (pi, p) in pred.iter().enumerate() {
            let dx = g.x as i64 - p.x as i64;
            let dy = g.y as i64 - p.y as i64;
            let d2 = dx * dx + dy * dy;
            if d2 as f64 <= r2 {
                let (a, b) = if (g.x, g.y) <= (p.x, p.y) { (*g, *p) } else { (*p, *g) };
                cands.push((d2, a, b, gi, pi));
            }
        }
    }
    // key is symmetric in (gt, pred) so swapping the roles picks the same pairs
    cands.sort_unstable_by_key(|&(d2, a, b, _, _)| (d2, a, b));
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut tp = 0;
    for (_, _, _, gi, pi) in cands {
        if !gt_used[gi] && !pred_used[pi] {
            gt_used[gi] = true;
            pred_used[pi] = true;
            tp += 1;
        }
    }
    tp
}

/// Greedy nearest-first point matching within `match_radius`.
pub fn detection_scores(pred: &PointSet, gt: &PointSet, match_radius: f64) -> DetectionScores {
    let tp = detection_matches(pred.points(), gt.points(), match_radius);
    let recall = ratio(tp as f64, gt.len() as f64, 1.0);
    let precision = ratio(tp as f64, pred.len() as f64, 1.0);
    DetectionScores { recall, precision, f1: harmonic(recall, precision), tp }
}

/// Pixel-mean centroid of every instance, rounded half-up, in ascending id
/// order. A centroid equal to an earlier one is skipped.
pub fn centroids(inst: &InstanceMap) -> PointSet {
    let mut acc: BTreeMap<u32, (f64, f64, f64)> = BTreeMap::new();
    let w = inst.width() as usize;
    for (i, &id) in inst.data().iter().enumerate() {
        if id > 0 {
            let e = acc.entry(id).or_default();
            e.0 += (i % w) as f64;
            e.1 += (i / w) as f64;
            e.2 += 1.0;
        }
    }
    let mut seen = HashSet::new();
    let points = acc
        .values()
        .map(|&(sx, sy, n)| Point::new((sx / n + 0.5).floor() as u32, (sy / n + 0.5).floor() as u32))
        .filter(|p| seen.insert(*p))
        .collect();
    PointSet::new(inst.width(), inst.height(), points).expect("centroids lie inside the raster and are unique")
}

/// Per-image counts for instance prediction `pred` against `gt` and its point annotations.
pub fn image_counts(
    pred: &InstanceMap,
    gt: &InstanceMap,
    gt_points: &PointSet,
    match_radius: f64,
) -> Result<MetricCounts> {
    pred.check_shape(gt)?;
    gt_points.check_bounds(gt)?;
    let (dice_intersection, dice_total) = dice_counts(&pred.foreground(), &gt.foreground())?;
    let o = Overlap::new(pred, gt);
    let (aji_intersection, aji_union) = aji_counts(&o);
    let m = panoptic_match(&o);
    let pred_pts = centroids(pred);
    let det_tp = detection_matches(pred_pts.points(), gt_points.points(), match_radius) as u64;
    Ok(MetricCounts {
        dice_intersection,
        dice_total,
        aji_intersection,
        aji_union,
        tp: m.pairs.len() as u64,
        fp: m.unmatched_pred.len() as u64,
        fn_: m.unmatched_gt.len() as u64,
        iou_sum: m.pairs.iter().map(|p| p.2).sum(),
        det_tp,
        det_gt: gt_points.len() as u64,
        det_pred: pred_pts.len() as u64,
    })
}

pub fn evaluate_image(
    pred: &InstanceMap,
    gt: &InstanceMap,
    gt_points: &PointSet,
    match_radius: f64,
) -> Result<MetricReport> {
    Ok(image_counts(pred, gt, gt_points, match_radius)?.report())
}

/// Image-mean and pooled summaries of a set of per-image evaluations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: MetricReport,
    pub pooled: MetricReport,
}

pub fn aggregate(per_image: &[MetricCounts]) -> Aggregate {
    let reports: Vec<MetricReport> = per_image.iter().map(MetricCounts::report).collect();
    let n = reports.len().max(1) as f64;
    let mean_of = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let mean = MetricReport {
        dice: mean_of(|r| r.dice),
        aji: mean_of(|r| r.aji),
        dq: mean_of(|r| r.dq),
        sq: mean_of(|r| r.sq),
        pq: mean_of(|r| r.pq),
        det_recall: mean_of(|r| r.det_recall),
        det_precision: mean_of(|r| r.det_precision),
        det_f1: mean_of(|r| r.det_f1),
    };
    let pooled = per_image.iter().copied().fold(MetricCounts::default(), |a, b| a + b).report();
    Aggregate { mean, pooled }
}
