//! Cubic 3D boxes and the anchor-based detection pipeline around them:
//! overlap, anchor generation and labelling, regression targets, the
//! multi-task loss, hard-negative mining, NMS and FROC evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{smooth_l1_scalar, PROB_FLOOR};
use crate::tensor::{sigmoid_scalar, Tensor};

/// Anchor diameters in voxels.
pub const ANCHOR_SCALES: [f64; 3] = [5.0, 10.0, 20.0];
/// IoU above which an anchor is positive.
pub const POSITIVE_IOU: f64 = 0.5;
/// IoU below which (against every ground truth) an anchor is negative.
pub const NEGATIVE_IOU: f64 = 0.02;
/// Weight of the classification term in the multi-task loss.
pub const CLS_WEIGHT: f64 = 0.5;
/// NMS overlap threshold for final detections.
pub const NMS_IOU: f64 = 0.1;
/// Detections with a logit at or below this are dropped before NMS
/// (probability ≈ 0.12).
pub const DETECTION_LOGIT_THRESHOLD: f64 = -2.0;
/// False positives per scan at which FROC sensitivities are read.
pub const FROC_FP_RATES: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

/// Axis-aligned cube: center and diameter (edge length), in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub d: f64,
}

impl Box3 {
    pub fn new(x: f64, y: f64, z: f64, d: f64) -> Result<Self> {
        if !(d > 0.0) || ![x, y, z, d].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid box ({x}, {y}, {z}, d = {d})")));
        }
        Ok(Self { x, y, z, d })
    }

    pub fn center(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn volume(&self) -> f64 {
        self.d * self.d * self.d
    }

    pub fn center_distance(&self, other: &Box3) -> f64 {
        let [a, b, c] = self.center();
        let [p, q, r] = other.center();
        ((a - p).powi(2) + (b - q).powi(2) + (c - r).powi(2)).sqrt()
    }
}

/// Intersection over union of two cubes.
pub fn iou3(a: &Box3, b: &Box3) -> f64 {
    let mut inter = 1.0;
    for (ca, cb) in a.center().into_iter().zip(b.center()) {
        let lo = (ca - a.d / 2.0).max(cb - b.d / 2.0);
        let hi = (ca + a.d / 2.0).min(cb + b.d / 2.0);
        if hi <= lo {
            return 0.0;
        }
        inter *= hi - lo;
    }
    inter / (a.volume() + b.volume() - inter)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub bbox: Box3,
    pub scale: f64,
}

/// One anchor per grid cell and scale, centered at `(index + 0.5) * stride`.
/// Ordered by z, then y, then x, then scale.
pub fn gen_anchors(grid: [usize; 3], stride: f64, scales: &[f64]) -> Result<Vec<Anchor>> {
    if !(stride >= 1.0) {
        return Err(Error::InvalidArgument(format!("stride must be >= 1, got {stride}")));
    }
    let [gx, gy, gz] = grid;
    let mut out = Vec::with_capacity(gx * gy * gz * scales.len());
    for iz in 0..gz {
        for iy in 0..gy {
            for ix in 0..gx {
                let c = |i: usize| (i as f64 + 0.5) * stride;
                for &scale in scales {
                    out.push(Anchor {
                        bbox: Box3::new(c(ix), c(iy), c(iz), scale)?,
                        scale,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Anchor-relative regression offsets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegTarget {
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub td: f64,
}

impl RegTarget {
    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tz, self.td]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            tx: a[0],
            ty: a[1],
            tz: a[2],
            td: a[3],
        }
    }
}

pub fn encode_target(gt: &Box3, anchor: &Anchor) -> RegTarget {
    let a = &anchor.bbox;
    RegTarget {
        tx: (gt.x - a.x) / a.d,
        ty: (gt.y - a.y) / a.d,
        tz: (gt.z - a.z) / a.d,
        td: (gt.d / a.d).ln(),
    }
}

pub fn decode(t: &RegTarget, anchor: &Anchor) -> Box3 {
    let a = &anchor.bbox;
    Box3 {
        x: a.x + t.tx * a.d,
        y: a.y + t.ty * a.d,
        z: a.z + t.tz * a.d,
        d: a.d * t.td.exp(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorAssignment {
    pub label: AnchorLabel,
    /// Best-overlapping ground truth, if any exist.
    pub matched: Option<usize>,
    pub max_iou: f64,
}

pub fn label_anchors(anchors: &[Anchor], gts: &[Box3], pos_iou: f64, neg_iou: f64) -> Result<Vec<AnchorAssignment>> {
    if !(0.0 < neg_iou && neg_iou < pos_iou && pos_iou < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "thresholds must satisfy 0 < neg < pos < 1, got {neg_iou}, {pos_iou}"
        )));
    }
    Ok(anchors
        .iter()
        .map(|a| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                let v = iou3(&a.bbox, gt);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            let max_iou = best.map_or(0.0, |b| b.1);
            let label = if max_iou > pos_iou {
                AnchorLabel::Positive
            } else if max_iou < neg_iou {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            };
            AnchorAssignment {
                label,
                matched: best.map(|b| b.0),
                max_iou,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionLossOutput {
    pub value: f64,
    pub classification: f64,
    pub regression: f64,
    /// `[A]`, zero for ignored anchors.
    pub grad_logits: Tensor,
    /// `[A × 4]`, nonzero only for positive anchors.
    pub grad_deltas: Tensor,
}

/// `λ · BCE(sigmoid(logit), p*)` averaged over non-ignored anchors plus
/// smooth-L1 regression (summed over the four offsets) averaged over positive
/// anchors.
pub fn detection_loss(
    logits: &[f64],
    deltas: &[RegTarget],
    labels: &[AnchorLabel],
    targets: &[RegTarget],
    lambda: f64,
) -> Result<DetectionLossOutput> {
    let a = logits.len();
    if deltas.len() != a || labels.len() != a || targets.len() != a {
        return Err(Error::InvalidArgument(format!(
            "misaligned inputs: {a} logits, {} deltas, {} labels, {} targets",
            deltas.len(),
            labels.len(),
            targets.len()
        )));
    }
    let trainable = labels.iter().filter(|&&l| l != AnchorLabel::Ignore).count();
    if trainable == 0 {
        return Err(Error::NoTrainableAnchors);
    }
    let positives = labels.iter().filter(|&&l| l == AnchorLabel::Positive).count();
    let inv_cls = 1.0 / trainable as f64;
    let inv_reg = if positives > 0 { 1.0 / positives as f64 } else { 0.0 };

    let mut classification = 0.0;
    let mut regression = 0.0;
    let mut grad_logits = vec![0.0; a];
    let mut grad_deltas = vec![0.0; 4 * a];
    for i in 0..a {
        let target = match labels[i] {
            AnchorLabel::Ignore => continue,
            AnchorLabel::Positive => 1.0,
            AnchorLabel::Negative => 0.0,
        };
        let raw = sigmoid_scalar(logits[i]);
        let p = raw.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        classification -= inv_cls * (target * p.ln() + (1.0 - target) * (1.0 - p).ln());
        if raw > PROB_FLOOR && raw < 1.0 - PROB_FLOOR {
            // d BCE / d logit = p - y
            grad_logits[i] = lambda * inv_cls * (p - target);
        }
        if labels[i] == AnchorLabel::Positive {
            let pred = deltas[i].to_array();
            let want = targets[i].to_array();
            for k in 0..4 {
                let (v, d) = smooth_l1_scalar(pred[k] - want[k]);
                regression += inv_reg * v;
                grad_deltas[4 * i + k] = inv_reg * d;
            }
        }
    }
    Ok(DetectionLossOutput {
        value: lambda * classification + regression,
        classification,
        regression,
        grad_logits: Tensor::new(vec![a], grad_logits)?,
        grad_deltas: Tensor::new(vec![a, 4], grad_deltas)?,
    })
}

/// Indices of the `n` highest scores, descending, ties to the lower index.
pub fn hard_negative_mine(neg_scores: &[f64], n: usize) -> Result<Vec<usize>> {
    if n > neg_scores.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot mine {n} negatives from {}",
            neg_scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..neg_scores.len()).collect();
    idx.sort_by(|&a, &b| neg_scores[b].total_cmp(&neg_scores[a]));
    idx.truncate(n);
    Ok(idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Box3,
    pub score: f64,
    pub logit: f64,
}

impl Detection {
    pub fn from_logit(bbox: Box3, logit: f64) -> Self {
        Self {
            bbox,
            score: sigmoid_scalar(logit),
            logit,
        }
    }
}

/// Greedy NMS. Returns kept indices in selection order (score descending,
/// ties to the lower index).
pub fn nms(dets: &[Detection], iou_thr: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&iou_thr) {
        return Err(Error::InvalidArgument(format!(
            "IoU threshold {iou_thr} outside [0, 1]"
        )));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou3(&dets[k].bbox, &dets[i].bbox) < iou_thr) {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Logit threshold followed by NMS; returns the surviving detections.
pub fn filter_detections(dets: &[Detection], logit_thr: f64, iou_thr: f64) -> Result<Vec<Detection>> {
    let above: Vec<Detection> = dets.iter().copied().filter(|d| d.logit > logit_thr).collect();
    Ok(nms(&above, iou_thr)?.into_iter().map(|i| above[i]).collect())
}

/// When a detection counts as finding a ground-truth nodule.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HitRule {
    /// Detection center within the ground-truth sphere (`distance ≤ d/2`).
    #[default]
    CenterInSphere,
    /// IoU at or above the given value.
    IouAtLeast(f64),
}

impl HitRule {
    pub fn hits(&self, det: &Box3, gt: &Box3) -> bool {
        match *self {
            Self::CenterInSphere => det.center_distance(gt) <= gt.d / 2.0,
            Self::IouAtLeast(t) => iou3(det, gt) >= t,
        }
    }
}

/// Scored detections and ground truth for one scan.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScanResult {
    pub dets: Vec<(Box3, f64)>,
    pub gts: Vec<Box3>,
}

/// Wire form: `{"dets": [[x,y,z,d,score]...], "gts": [[x,y,z,d]...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanRecord {
    pub dets: Vec<[f64; 5]>,
    pub gts: Vec<[f64; 4]>,
}

impl TryFrom<ScanRecord> for ScanResult {
    type Error = Error;

    fn try_from(r: ScanRecord) -> Result<Self> {
        Ok(Self {
            dets: r
                .dets
                .iter()
                .map(|d| Ok((Box3::new(d[0], d[1], d[2], d[3])?, d[4])))
                .collect::<Result<_>>()?,
            gts: r
                .gts
                .iter()
                .map(|g| Box3::new(g[0], g[1], g[2], g[3]))
                .collect::<Result<_>>()?,
        })
    }
}

impl From<&ScanResult> for ScanRecord {
    fn from(s: &ScanResult) -> Self {
        Self {
            dets: s.dets.iter().map(|(b, p)| [b.x, b.y, b.z, b.d, *p]).collect(),
            gts: s.gts.iter().map(|g| [g.x, g.y, g.z, g.d]).collect(),
        }
    }
}

pub fn parse_scans(text: &str) -> Result<Vec<ScanResult>> {
    let records: Vec<ScanRecord> = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    records.into_iter().map(ScanResult::try_from).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrocResult {
    pub froc: f64,
    pub fp_rates: Vec<f64>,
    pub sensitivities: Vec<f64>,
    /// Achieved `(false positives per scan, sensitivity)` points, one per
    /// distinct false-positive rate, starting at zero.
    pub curve: Vec<(f64, f64)>,
}

/// Sweeps the score threshold over every detection and reads the sensitivity
/// at the standard false-positive rates.
///
/// A detection that hits any ground truth of its scan is never a false
/// positive; each ground truth is credited once. Between achieved points the
/// curve is interpolated linearly in FP/scan and held flat past the last one.
pub fn froc(scans: &[ScanResult], hit_rule: HitRule) -> Result<FrocResult> {
    if scans.is_empty() {
        return Err(Error::InvalidArgument("FROC needs at least one scan".into()));
    }
    let total_gts: usize = scans.iter().map(|s| s.gts.len()).sum();

    // (score, Some(global gt ids hit) | None for a false positive)
    let mut events: Vec<(f64, Option<Vec<usize>>)> = Vec::new();
    let mut gt_offset = 0;
    for scan in scans {
        for (bbox, score) in &scan.dets {
            let hit: Vec<usize> = scan
                .gts
                .iter()
                .enumerate()
                .filter(|(_, g)| hit_rule.hits(bbox, g))
                .map(|(i, _)| gt_offset + i)
                .collect();
            events.push((*score, if hit.is_empty() { None } else { Some(hit) }));
        }
        gt_offset += scan.gts.len();
    }
    events.sort_by(|a, b| b.0.total_cmp(&a.0));

    let n_scans = scans.len() as f64;
    let mut found = vec![false; total_gts];
    let mut n_found = 0usize;
    let mut fps = 0usize;
    let mut curve: Vec<(f64, f64)> = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < events.len() {
        // All detections sharing a score enter together.
        let score = events[i].0;
        while i < events.len() && events[i].0 == score {
            match &events[i].1 {
                None => fps += 1,
                Some(hits) => {
                    for &g in hits {
                        if !found[g] {
                            found[g] = true;
                            n_found += 1;
                        }
                    }
                }
            }
            i += 1;
        }
        let sens = if total_gts == 0 {
            0.0
        } else {
            n_found as f64 / total_gts as f64
        };
        let fp_rate = fps as f64 / n_scans;
        match curve.last_mut() {
            Some(last) if last.0 == fp_rate => last.1 = last.1.max(sens),
            _ => curve.push((fp_rate, sens)),
        }
    }

    let sensitivities: Vec<f64> = FROC_FP_RATES.iter().map(|&x| interpolate(&curve, x)).collect();
    let froc = sensitivities.iter().sum::<f64>() / sensitivities.len() as f64;
    Ok(FrocResult {
        froc,
        fp_rates: FROC_FP_RATES.to_vec(),
        sensitivities,
        curve,
    })
}

fn interpolate(curve: &[(f64, f64)], x: f64) -> f64 {
    let last = curve[curve.len() - 1];
    if x >= last.0 {
        return last.1;
    }
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x <= x1 {
            return y0 + (y1 - y0) * (x - x0) / (x1 - x0);
        }
    }
    last.1
}
