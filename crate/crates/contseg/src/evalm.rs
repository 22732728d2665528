//! Inference-time semantics and metrics.
//!
//! Proposals become a dense semantic map by a panoptic-style arbitration:
//! keep proposals whose objectness clears a threshold, give each a label and
//! a combined score `s_i · max_c p_{i,c}`, then let every pixel go to the
//! highest-scoring kept proposal whose mask covers it; segments that lose
//! most of their footprint to stronger competitors are dropped entirely.
//! Quality is summarized as per-class intersection-over-union accumulated
//! over an evaluation set, with continual aggregates over the class groups
//! of a schedule, plus the average recall of the raw proposals against the
//! annotated masks.
//!
//! Confusion counts form a commutative monoid ([`ConfusionCounts::merge`]),
//! so per-image evaluation parallelizes with a final reduction; every
//! reported number is independent of image order and batch partitioning.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::TaskSchedule;
use crate::error::{Error, Result};
use crate::loss::kd::select_high_objectness;

pub use crate::data::BACKGROUND;

/// Mask binarization threshold used both for pixel eligibility during
/// arbitration and for proposal binarization in recall.
pub const MASK_THRESHOLD: f64 = 0.5;

/// A kept segment must retain at least this fraction of its own footprint
/// after per-pixel arbitration or it is discarded.
pub const SURVIVAL_FRACTION: f64 = 0.5;

/// Dense semantic labeling of one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticPrediction {
    /// Class id per pixel, [`BACKGROUND`] where no proposal qualifies.
    pub label_map: Array2<u32>,
}

/// Panoptic-style arbitration of proposals into a dense semantic map.
///
/// * `scores`: objectness per proposal, `[n]`, values in `(0, 1)`.
/// * `masks`: mask probabilities, `[n, H, W]`.
/// * `class_probs`: per-proposal class probabilities, `[n, c]`.
/// * `class_ids`: class id of each probability column, length `c`.
/// * `alpha`: objectness filter; only proposals with `s > alpha` compete.
///
/// Ties are broken towards the lower proposal index and the lower column
/// index, so the output is deterministic. An all-background map is a valid
/// outcome.
pub fn panoptic_inference(
    scores: &Array1<f64>,
    masks: &Array3<f64>,
    class_probs: &Array2<f64>,
    class_ids: &[u32],
    alpha: f64,
) -> Result<SemanticPrediction> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::config(format!(
            "panoptic_inference: alpha must be in (0,1), got {alpha}"
        )));
    }
    let n = scores.len();
    let (mn, h, w) = masks.dim();
    let (pn, c) = class_probs.dim();
    if mn != n || pn != n || class_ids.len() != c {
        return Err(Error::shape(format!(
            "panoptic_inference: {n} scores, {mn} masks, {pn} probability rows, \
             {c} columns vs {} class ids",
            class_ids.len()
        )));
    }
    if class_ids.iter().any(|&id| id == BACKGROUND) {
        return Err(Error::config(
            "panoptic_inference: class id collides with the background sentinel".to_string(),
        ));
    }

    let kept = select_high_objectness(scores.as_slice().expect("contiguous scores"), alpha);

    // Label and combined score per kept proposal.
    let mut seg_label = vec![BACKGROUND; n];
    let mut seg_score = vec![0.0f64; n];
    for &i in &kept {
        if c == 0 {
            return Err(Error::shape(
                "panoptic_inference: kept proposal but no class columns".to_string(),
            ));
        }
        let row = class_probs.row(i);
        let mut best = 0usize;
        for k in 1..c {
            if row[k] > row[best] {
                best = k;
            }
        }
        seg_label[i] = class_ids[best];
        seg_score[i] = scores[i] * row[best];
    }

    // Per-pixel winner among covering kept proposals.
    let mut winner = Array2::<i64>::from_elem((h, w), -1);
    for i in 0..h {
        for j in 0..w {
            let mut best: i64 = -1;
            let mut best_val = f64::NEG_INFINITY;
            for &k in &kept {
                let m = masks[[k, i, j]];
                if m >= MASK_THRESHOLD {
                    let v = seg_score[k] * m;
                    if v > best_val {
                        best_val = v;
                        best = k as i64;
                    }
                }
            }
            winner[[i, j]] = best;
        }
    }

    // Overlap pruning: a segment keeping under half of its own footprint is
    // dropped; its surviving pixels fall back to background rather than
    // being re-auctioned.
    let mut footprint = vec![0u64; n];
    let mut survived = vec![0u64; n];
    for &k in &kept {
        for i in 0..h {
            for j in 0..w {
                if masks[[k, i, j]] >= MASK_THRESHOLD {
                    footprint[k] += 1;
                }
            }
        }
    }
    for i in 0..h {
        for j in 0..w {
            if winner[[i, j]] >= 0 {
                survived[winner[[i, j]] as usize] += 1;
            }
        }
    }
    let pruned: Vec<bool> = (0..n)
        .map(|k| {
            footprint[k] == 0 || (survived[k] as f64) < SURVIVAL_FRACTION * footprint[k] as f64
        })
        .collect();

    let label_map = Array2::from_shape_fn((h, w), |(i, j)| match winner[[i, j]] {
        -1 => BACKGROUND,
        k if pruned[k as usize] => BACKGROUND,
        k => seg_label[k as usize],
    });
    Ok(SemanticPrediction { label_map })
}

/// Per-class intersection-over-union counts, accumulated over images.
///
/// Merging is commutative and associative, so per-image counts can be
/// folded in any order or partitioning without changing any reported value.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    /// Per label (including [`BACKGROUND`]): (true-positive, false-positive,
    /// false-negative) pixel counts.
    counts: BTreeMap<u32, (u64, u64, u64)>,
}

impl ConfusionCounts {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accumulate one image. Labels outside `classes` (and not background)
    /// are rejected: every evaluated map must stay inside the label space.
    pub fn accumulate(
        &mut self,
        pred: &SemanticPrediction,
        gt: &Array2<u32>,
        classes: &[u32],
    ) -> Result<()> {
        if pred.label_map.dim() != gt.dim() {
            return Err(Error::shape(format!(
                "confusion: prediction {:?} vs ground truth {:?}",
                pred.label_map.dim(),
                gt.dim()
            )));
        }
        let legal = |l: u32| l == BACKGROUND || classes.contains(&l);
        for (&p, &g) in pred.label_map.iter().zip(gt.iter()) {
            if !legal(p) || !legal(g) {
                return Err(Error::config(format!(
                    "confusion: label outside the evaluated set (pred {p}, gt {g})"
                )));
            }
            if p == g {
                self.counts.entry(p).or_default().0 += 1;
            } else {
                self.counts.entry(p).or_default().1 += 1;
                self.counts.entry(g).or_default().2 += 1;
            }
        }
        Ok(())
    }

    /// Fold another accumulator into this one.
    pub fn merge(&mut self, other: &ConfusionCounts) {
        for (&l, &(tp, fp, fnn)) in &other.counts {
            let e = self.counts.entry(l).or_default();
            e.0 += tp;
            e.1 += fp;
            e.2 += fnn;
        }
    }

    /// IoU of one label, or `None` when the label never occurs in either
    /// ground truth or prediction.
    pub fn iou(&self, label: u32) -> Option<f64> {
        let &(tp, fp, fnn) = self.counts.get(&label)?;
        let denom = tp + fp + fnn;
        if denom == 0 {
            None
        } else {
            Some(tp as f64 / denom as f64)
        }
    }
}

/// Metric summary of one evaluation, plus continual aggregates.
///
/// From a single [`miou`] call the schedule split is unknown, so `base`,
/// `inc`, and `avg` all coincide with `all` and the history holds that one
/// value; [`continual_metrics`] fills the real aggregates from per-step
/// reports.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    /// IoU per evaluated class; classes absent from both ground truth and
    /// prediction over the whole set are omitted rather than scored.
    pub per_class_iou: BTreeMap<u32, f64>,
    /// IoU of the background sentinel, when background occurred at all.
    pub background_iou: Option<f64>,
    /// Mean IoU over the first-step classes (at the final step).
    pub base: f64,
    /// Mean IoU over all later-step classes (0 when there are none).
    pub inc: f64,
    /// Mean IoU over the evaluated classes; background joins this mean only
    /// when explicitly requested.
    pub all: f64,
    /// Mean of `all` across steps.
    pub avg: f64,
    /// `all` of each step, first to last.
    pub history: Vec<f64>,
}

fn mean_over(keys: &[u32], table: &BTreeMap<u32, f64>) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0usize;
    for k in keys {
        if let Some(&v) = table.get(k) {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        (0.0, 0)
    } else {
        (sum / n as f64, n)
    }
}

/// Build a report from accumulated counts. `classes` is the evaluated class
/// set; `include_background` adds the background IoU into the `all` mean.
pub fn report_from_counts(
    counts: &ConfusionCounts,
    classes: &[u32],
    include_background: bool,
) -> MetricReport {
    let mut per_class = BTreeMap::new();
    for &c in classes {
        if let Some(v) = counts.iou(c) {
            per_class.insert(c, v);
        }
    }
    let background_iou = counts.iou(BACKGROUND);
    let mut sum: f64 = per_class.values().sum();
    let mut n = per_class.len();
    if include_background {
        if let Some(b) = background_iou {
            sum += b;
            n += 1;
        }
    }
    let all = if n == 0 { 0.0 } else { sum / n as f64 };
    MetricReport {
        per_class_iou: per_class,
        background_iou,
        base: all,
        inc: all,
        all,
        avg: all,
        history: vec![all],
    }
}

/// Mean intersection-over-union of aligned prediction/ground-truth lists.
pub fn miou(
    preds: &[SemanticPrediction],
    gts: &[Array2<u32>],
    classes: &[u32],
    include_background: bool,
) -> Result<MetricReport> {
    if preds.len() != gts.len() {
        return Err(Error::shape(format!(
            "miou: {} predictions vs {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let mut counts = ConfusionCounts::new();
    for (p, g) in preds.iter().zip(gts.iter()) {
        counts.accumulate(p, g, classes)?;
    }
    Ok(report_from_counts(&counts, classes, include_background))
}

/// Continual aggregates from one report per completed step.
///
/// The final step's per-class table is split by the schedule: `base` over
/// the first step's classes, `inc` over everything introduced later, `all`
/// over the whole evaluated set; `avg` is the mean of each step's `all`.
pub fn continual_metrics(
    step_reports: &[MetricReport],
    schedule: &TaskSchedule,
) -> Result<MetricReport> {
    if step_reports.is_empty() {
        return Err(Error::config(
            "continual_metrics: no step reports".to_string(),
        ));
    }
    if step_reports.len() > schedule.steps() {
        return Err(Error::config(format!(
            "continual_metrics: {} reports for a {}-step schedule",
            step_reports.len(),
            schedule.steps()
        )));
    }
    let last = step_reports.last().expect("nonempty");
    let t = step_reports.len();
    let base_classes = schedule.classes_at(1).to_vec();
    let inc_classes: Vec<u32> = schedule
        .classes_up_to(t)
        .into_iter()
        .filter(|c| !base_classes.contains(c))
        .collect();
    let (base, _) = mean_over(&base_classes, &last.per_class_iou);
    let (inc, _) = mean_over(&inc_classes, &last.per_class_iou);
    let history: Vec<f64> = step_reports.iter().map(|r| r.all).collect();
    let avg = history.iter().sum::<f64>() / history.len() as f64;
    Ok(MetricReport {
        per_class_iou: last.per_class_iou.clone(),
        background_iou: last.background_iou,
        base,
        inc,
        all: last.all,
        avg,
        history,
    })
}

/// Which proposals may participate in recall.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreFilter {
    /// Any proposal with positive objectness.
    Positive,
    /// Only proposals with objectness strictly above the threshold.
    Above(f64),
}

/// Matched/total annotation counts of one image; pool by summing fields.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Recall {
    pub matched: usize,
    pub total: usize,
}

impl Recall {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.matched as f64 / self.total as f64
        }
    }

    pub fn pool(&mut self, other: Recall) {
        self.matched += other.matched;
        self.total += other.total;
    }
}

fn binary_iou(a: &Array2<bool>, b: &Array2<u8>) -> f64 {
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let y = y != 0;
        if x && y {
            inter += 1;
        }
        if x || y {
            union += 1;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Greedy recall of the annotated masks by the proposals of one image.
///
/// Proposals passing `filter` are visited in descending score order (ties
/// towards the lower index); each takes the best still-unmatched annotation
/// with binarized-mask IoU ≥ `iou_threshold`, consuming it. Returns `None`
/// (with a log line) for an image without annotations, where recall is
/// undefined.
pub fn mask_recall(
    masks: &Array3<f64>,
    scores: &[f64],
    gt_masks: &[Array2<u8>],
    iou_threshold: f64,
    filter: ScoreFilter,
) -> Result<Option<Recall>> {
    if !(0.0 < iou_threshold && iou_threshold < 1.0) {
        return Err(Error::config(format!(
            "mask_recall: IoU threshold must be in (0,1), got {iou_threshold}"
        )));
    }
    let (n, h, w) = masks.dim();
    if scores.len() != n {
        return Err(Error::shape(format!(
            "mask_recall: {} scores for {n} proposals",
            scores.len()
        )));
    }
    for g in gt_masks {
        if g.dim() != (h, w) {
            return Err(Error::shape(format!(
                "mask_recall: annotation {:?} vs proposals {h}x{w}",
                g.dim()
            )));
        }
    }
    if gt_masks.is_empty() {
        log::info!("mask_recall: image without annotations skipped");
        return Ok(None);
    }

    let mut candidates: Vec<usize> = (0..n)
        .filter(|&i| match filter {
            ScoreFilter::Positive => scores[i] > 0.0,
            ScoreFilter::Above(a) => scores[i] > a,
        })
        .collect();
    candidates.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores must be comparable")
            .then(a.cmp(&b))
    });

    let mut taken = vec![false; gt_masks.len()];
    let mut matched = 0usize;
    for &i in &candidates {
        let bin = Array2::from_shape_fn((h, w), |(r, c)| masks[[i, r, c]] >= MASK_THRESHOLD);
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt_masks.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let iou = binary_iou(&bin, g);
            if iou >= iou_threshold {
                let better = match best {
                    None => true,
                    Some((_, b)) => iou > b,
                };
                if better {
                    best = Some((j, iou));
                }
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            matched += 1;
        }
    }
    Ok(Some(Recall {
        matched,
        total: gt_masks.len(),
    }))
}
