//! Weakly supervised EM for detection: the weak-label likelihood (a truncated
//! half-Gaussian over slices times a logistic lobe model), the posterior over
//! filtered proposals, MAP and sampling inference, and the EM training loop
//! against an abstract [`Detector`].

use std::collections::BTreeSet;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::detection::{
    filter_detections, froc, hard_negative_mine, Box3, Detection, HitRule, ScanResult, DETECTION_LOGIT_THRESHOLD,
    NMS_IOU,
};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::synth::{self, Extents, Scenario};
use crate::tensor::{sigmoid_scalar, Tensor};

/// Minimal nodule radius; slice offsets up to this are not penalized.
pub const SLICE_TRUNCATION_MU: f64 = 1.63;
pub const LOCATIONS: usize = 6;
pub const LOBE_FEATURES: usize = 4;
/// Proposals at or below this logit are dropped before NMS.
pub const PROPOSAL_LOGIT_THRESHOLD: f64 = -3.0;
pub const DEFAULT_WEAK_FRACTION: f64 = 1.0 / 16.0;
/// Proposals drawn per weak label in sampling mode.
pub const DEFAULT_SAMPLES: usize = 2;
/// Smoothed intensity above which a local maximum becomes a candidate.
pub const CANDIDATE_THRESHOLD: f64 = 0.3;

/// Lobe location (1 to 6) and central slice of a nodule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeakLabel {
    pub loc: u8,
    pub z: usize,
}

impl WeakLabel {
    pub fn new(loc: u8, z: usize, extents: &Extents) -> Result<Self> {
        if !(1..=LOCATIONS as u8).contains(&loc) {
            return Err(Error::InvalidArgument(format!("lobe location {loc} outside 1..=6")));
        }
        if z >= extents.z {
            return Err(Error::InvalidArgument(format!(
                "slice {z} outside a volume of {} slices",
                extents.z
            )));
        }
        Ok(Self { loc, z })
    }
}

/// Wire form of one weak annotation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeakLabelRecord {
    pub scan_id: String,
    pub loc: u8,
    pub z: usize,
}

/// Half-Gaussian over the slice offset with a flat top of half-width `mu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfGaussianModel {
    pub sigma: f64,
    pub mu: f64,
}

impl HalfGaussianModel {
    pub fn new(sigma: f64, mu: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) || !(mu >= 0.0 && mu.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "need sigma > 0 and mu >= 0, got {sigma}, {mu}"
            )));
        }
        Ok(Self { sigma, mu })
    }

    /// `sigma` set to the (population) standard deviation of `radii`.
    pub fn from_radii(radii: &[f64]) -> Result<Self> {
        if radii.len() < 2 {
            return Err(Error::InvalidArgument(
                "need at least two radii to estimate sigma".into(),
            ));
        }
        let n = radii.len() as f64;
        let mean = radii.iter().sum::<f64>() / n;
        let var = radii.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        Self::new(var.sqrt(), SLICE_TRUNCATION_MU)
    }

    pub fn peak(&self) -> f64 {
        2.0 / (2.0 * std::f64::consts::PI * self.sigma * self.sigma).sqrt()
    }

    pub fn density(&self, dz: f64) -> f64 {
        let delta = (dz.abs() - self.mu).max(0.0);
        self.peak() * (-delta * delta / (2.0 * self.sigma * self.sigma)).exp()
    }

    /// Slice distance beyond which a proposal counts as far from a weak
    /// annotation: `mu + 3 sigma`.
    pub fn exclusion_radius(&self) -> f64 {
        self.mu + 3.0 * self.sigma
    }
}

pub fn slice_likelihood(z_weak: f64, bbox: &Box3, model: &HalfGaussianModel) -> f64 {
    model.density(z_weak - bbox.z)
}

/// `(x/x_I, y/y_I, z/z_I, 1)`.
pub fn lobe_features(bbox: &Box3, extents: &Extents) -> [f64; LOBE_FEATURES] {
    let [nx, ny, nz] = extents.as_f64();
    [bbox.x / nx, bbox.y / ny, bbox.z / nz, 1.0]
}

/// Softmax regression from lobe features to the six locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LobeModel {
    pub theta: [[f64; LOBE_FEATURES]; LOCATIONS],
}

impl Default for LobeModel {
    fn default() -> Self {
        Self {
            theta: [[0.0; LOBE_FEATURES]; LOCATIONS],
        }
    }
}

impl LobeModel {
    pub fn probabilities(&self, f: &[f64; LOBE_FEATURES]) -> [f64; LOCATIONS] {
        let logits = self.theta.map(|row| row.iter().zip(f).map(|(a, b)| a * b).sum::<f64>());
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e = logits.map(|l| (l - m).exp());
        let s: f64 = e.iter().sum();
        e.map(|v| v / s)
    }

    /// Mean negative log-likelihood of `samples`.
    pub fn nll(&self, samples: &[LobeSample]) -> f64 {
        samples
            .iter()
            .map(|s| -self.probabilities(&lobe_features(&s.bbox, &s.extents))[s.loc as usize - 1].ln())
            .sum::<f64>()
            / samples.len().max(1) as f64
    }
}

pub fn lobe_likelihood(loc: u8, bbox: &Box3, extents: &Extents, model: &LobeModel) -> Result<f64> {
    if !(1..=LOCATIONS as u8).contains(&loc) {
        return Err(Error::InvalidArgument(format!("lobe location {loc} outside 1..=6")));
    }
    Ok(model.probabilities(&lobe_features(bbox, extents))[loc as usize - 1])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LobeSample {
    pub bbox: Box3,
    pub extents: Extents,
    pub loc: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LobeFit {
    pub model: LobeModel,
    /// Training NLL before each step and after the last.
    pub nll_trace: Vec<f64>,
}

/// Full-batch gradient descent on the multinomial NLL from `theta = 0`.
pub fn fit_lobe_regression(samples: &[LobeSample], steps: usize, lr: f64) -> Result<LobeFit> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no lobe samples".into()));
    }
    if let Some(s) = samples.iter().find(|s| !(1..=LOCATIONS as u8).contains(&s.loc)) {
        return Err(Error::InvalidArgument(format!("lobe location {} outside 1..=6", s.loc)));
    }
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {lr}")));
    }
    let feats: Vec<[f64; LOBE_FEATURES]> = samples.iter().map(|s| lobe_features(&s.bbox, &s.extents)).collect();
    let inv_n = 1.0 / samples.len() as f64;
    let mut model = LobeModel::default();
    let mut nll_trace = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        nll_trace.push(model.nll(samples));
        let mut grad = [[0.0; LOBE_FEATURES]; LOCATIONS];
        for (f, s) in feats.iter().zip(samples) {
            let p = model.probabilities(f);
            for (c, row) in grad.iter_mut().enumerate() {
                let err = p[c] - (c + 1 == s.loc as usize) as u8 as f64;
                for (g, x) in row.iter_mut().zip(f) {
                    *g += inv_n * err * x;
                }
            }
        }
        for (row, g) in model.theta.iter_mut().zip(&grad) {
            for (t, d) in row.iter_mut().zip(g) {
                *t -= lr * d;
            }
        }
    }
    nll_trace.push(model.nll(samples));
    Ok(LobeFit { model, nll_trace })
}

/// Confidence threshold then NMS.
pub fn filter_proposals(proposals: &[Detection], logit_thr: f64, nms_iou: f64) -> Result<Vec<Detection>> {
    filter_detections(proposals, logit_thr, nms_iou)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub proposals: Vec<Box3>,
    /// Detector probability of each proposal.
    pub priors: Vec<f64>,
    /// Unnormalized `prior * slice * lobe`.
    pub joint: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Posterior {
    /// Builds a posterior from unnormalized weights.
    pub fn from_unnormalized(proposals: Vec<Box3>, priors: Vec<f64>, joint: Vec<f64>) -> Result<Self> {
        if proposals.is_empty() {
            return Err(Error::InvalidArgument("posterior over no proposals".into()));
        }
        if proposals.len() != joint.len() || proposals.len() != priors.len() {
            return Err(Error::InvalidArgument("misaligned posterior inputs".into()));
        }
        if joint.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(
                "posterior weights must be finite and >= 0".into(),
            ));
        }
        let total: f64 = joint.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InconsistentWeakLabel);
        }
        let weights = joint.iter().map(|w| w / total).collect();
        Ok(Self {
            proposals,
            priors,
            joint,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }
}

/// `P(H | I, z, loc) ∝ P(H | I) P(z | H) P(loc | H)` over the proposals.
pub fn weak_posterior(
    proposals: &[Detection],
    weak: &WeakLabel,
    extents: &Extents,
    hg: &HalfGaussianModel,
    lobe: &LobeModel,
) -> Result<Posterior> {
    if proposals.is_empty() {
        return Err(Error::InvalidArgument("posterior over no proposals".into()));
    }
    let mut joint = Vec::with_capacity(proposals.len());
    for p in proposals {
        let lik = slice_likelihood(weak.z as f64, &p.bbox, hg) * lobe_likelihood(weak.loc, &p.bbox, extents, lobe)?;
        joint.push(p.score * lik);
    }
    Posterior::from_unnormalized(
        proposals.iter().map(|p| p.bbox).collect(),
        proposals.iter().map(|p| p.score).collect(),
        joint,
    )
}

/// Index of the largest weight, ties to the lowest index.
pub fn map_index(post: &Posterior) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, &w) in post.weights.iter().enumerate() {
        if best.is_none_or(|b| w > post.weights[b]) {
            best = Some(i);
        }
    }
    best.ok_or(Error::InvalidArgument("empty posterior".into()))
}

pub fn infer_map(post: &Posterior) -> Result<Box3> {
    Ok(post.proposals[map_index(post)?])
}

/// `m_hat` independent draws with replacement; returns proposal indices.
pub fn sample_indices(post: &Posterior, m_hat: usize, rng: &mut SplitMix64) -> Result<Vec<usize>> {
    if post.is_empty() {
        return Err(Error::InvalidArgument("empty posterior".into()));
    }
    if m_hat == 0 {
        return Err(Error::InvalidArgument("m_hat must be >= 1".into()));
    }
    Ok((0..m_hat).map(|_| rng.categorical(&post.weights)).collect())
}

pub fn infer_sampling(post: &Posterior, m_hat: usize, rng: &mut SplitMix64) -> Result<Vec<Box3>> {
    Ok(sample_indices(post, m_hat, rng)?
        .into_iter()
        .map(|i| post.proposals[i])
        .collect())
}

/// Blob features followed by the resampled intensity patch.
pub fn detector_features(volume: &Tensor, bbox: &Box3) -> Result<Vec<f64>> {
    let mut f = synth::blob_features(volume, bbox)?;
    f.extend(synth::patch_features(volume, bbox)?);
    Ok(f)
}

/// A scan reduced to what detectors consume: candidate boxes with cached
/// features, plus the volume itself when it is still needed.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanData {
    pub extents: Extents,
    pub candidates: Vec<Box3>,
    pub candidate_features: Vec<Vec<f64>>,
    /// Ground truth, when the scan is fully labeled.
    pub gts: Vec<Box3>,
    pub volume: Option<Tensor>,
}

impl ScanData {
    /// Extracts candidates and their features; keeps the volume only if asked.
    pub fn from_volume(volume: Tensor, gts: Vec<Box3>, keep_volume: bool) -> Result<Self> {
        let extents = match volume.shape() {
            &[z, y, x] => Extents { x, y, z },
            s => {
                return Err(Error::InvalidArgument(format!(
                    "expected a [z, y, x] volume, got {s:?}"
                )))
            }
        };
        let candidates: Vec<Box3> = synth::find_candidates(&volume, CANDIDATE_THRESHOLD)?
            .into_iter()
            .map(|(b, _)| b)
            .collect();
        let candidate_features = candidates
            .iter()
            .map(|b| detector_features(&volume, b))
            .collect::<Result<_>>()?;
        Ok(Self {
            extents,
            candidates,
            candidate_features,
            gts,
            volume: keep_volume.then_some(volume),
        })
    }

    pub fn features(&self, bbox: &Box3) -> Result<Vec<f64>> {
        if let Some(i) = self.candidates.iter().position(|c| c == bbox) {
            return Ok(self.candidate_features[i].clone());
        }
        match &self.volume {
            Some(v) => detector_features(v, bbox),
            None => Err(Error::InvalidArgument(
                "box is not a candidate and the volume was dropped".into(),
            )),
        }
    }

    /// Candidate indices that hit a ground-truth nodule.
    pub fn positive_candidates(&self, rule: HitRule) -> Vec<bool> {
        self.candidates
            .iter()
            .map(|c| self.gts.iter().any(|g| rule.hits(c, g)))
            .collect()
    }
}

/// One training example for [`Detector::update`].
#[derive(Debug, Clone, Copy)]
pub struct LabeledBox<'a> {
    pub scan: &'a ScanData,
    pub bbox: Box3,
    pub positive: bool,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdateReport {
    /// Objective before each step and after the last.
    pub objective_trace: Vec<f64>,
}

impl UpdateReport {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().unwrap_or(&f64::NAN)
    }
}

/// Any parametric scorer of candidate boxes.
pub trait Detector {
    /// Probability that `bbox` is a nodule.
    fn score(&self, scan: &ScanData, bbox: &Box3) -> Result<f64>;

    /// Scored proposals for a scan.
    fn propose(&self, scan: &ScanData) -> Result<Vec<Detection>>;

    /// Ascends the class-balanced log-likelihood
    /// `mean_pos w log p + mean_neg w log(1 - p)` of `batch`.
    fn update(&mut self, batch: &[LabeledBox<'_>]) -> Result<UpdateReport>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    /// Gradient steps per update.
    pub steps: usize,
    pub lr: f64,
    /// Weight decay on the non-bias weights.
    pub l2: f64,
    /// Adds all pairwise products of the standardized blob features.
    pub quadratic: bool,
    /// Adds the resampled intensity patch as linear features.
    pub patch: bool,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            steps: 40,
            lr: 0.05,
            l2: 1e-4,
            quadratic: true,
            patch: true,
        }
    }
}

const PATCH_LEN: usize = synth::PATCH_SIDE * synth::PATCH_SIDE * synth::PATCH_SIDE;

/// Blob feature indices used for scoring; position is left to the weak model.
const SCORED_FEATURES: [usize; 9] = [0, 1, 2, 3, 7, 8, 9, 10, 11];

/// Logistic regression over (optionally quadratic) standardized blob
/// features; the reference detector for the synthetic experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticBlobDetector {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Standardization of the expanded features.
    phi_mean: Vec<f64>,
    phi_scale: Vec<f64>,
    weights: Vec<f64>,
    bias: f64,
    config: LogisticConfig,
}

impl LogisticBlobDetector {
    /// Zero weights; standardization fitted on every candidate of `scans`.
    pub fn new(scans: &[ScanData], config: LogisticConfig) -> Result<Self> {
        let rows: Vec<&Vec<f64>> = scans.iter().flat_map(|s| s.candidate_features.iter()).collect();
        if rows.is_empty() {
            return Err(Error::InvalidArgument("no candidates to standardize on".into()));
        }
        let n = rows.len() as f64;
        let k = SCORED_FEATURES.len();
        let mut mean = vec![0.0; k];
        let mut scale = vec![0.0; k];
        for r in &rows {
            for (j, &f) in SCORED_FEATURES.iter().enumerate() {
                mean[j] += r[f] / n;
            }
        }
        for r in &rows {
            for (j, &f) in SCORED_FEATURES.iter().enumerate() {
                scale[j] += (r[f] - mean[j]).powi(2) / n;
            }
        }
        let scale = scale.into_iter().map(|v| v.sqrt().max(1e-6)).collect();
        let dim = if config.quadratic { k + k * (k + 1) / 2 } else { k } + if config.patch { PATCH_LEN } else { 0 };
        let mut det = Self {
            mean,
            scale,
            phi_mean: vec![0.0; dim],
            phi_scale: vec![1.0; dim],
            weights: vec![0.0; dim],
            bias: 0.0,
            config,
        };
        let phis: Vec<Vec<f64>> = rows.iter().map(|r| det.expand(r)).collect();
        let (mut m, mut v) = (vec![0.0; dim], vec![0.0; dim]);
        for phi in &phis {
            for j in 0..dim {
                m[j] += phi[j] / n;
            }
        }
        for phi in &phis {
            for j in 0..dim {
                v[j] += (phi[j] - m[j]).powi(2) / n;
            }
        }
        det.phi_mean = m;
        det.phi_scale = v.into_iter().map(|x| x.sqrt().max(1e-6)).collect();
        Ok(det)
    }

    pub fn config(&self) -> &LogisticConfig {
        &self.config
    }

    pub fn parameters(&self) -> (&[f64], f64) {
        (&self.weights, self.bias)
    }

    fn expand(&self, raw: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = SCORED_FEATURES
            .iter()
            .enumerate()
            .map(|(j, &f)| (raw[f] - self.mean[j]) / self.scale[j])
            .collect();
        let mut out = z.clone();
        if self.config.quadratic {
            for i in 0..z.len() {
                for j in i..z.len() {
                    out.push(z[i] * z[j]);
                }
            }
        }
        if self.config.patch {
            out.extend_from_slice(&raw[synth::BLOB_FEATURE_LEN..synth::BLOB_FEATURE_LEN + PATCH_LEN]);
        }
        for ((o, m), sc) in out.iter_mut().zip(&self.phi_mean).zip(&self.phi_scale) {
            *o = (*o - m) / sc;
        }
        out
    }

    fn logit_of(&self, phi: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(phi).map(|(w, x)| w * x).sum::<f64>()
    }

    fn objective(&self, phis: &[Vec<f64>], batch: &[LabeledBox<'_>], norm: (f64, f64)) -> f64 {
        let mut q = 0.0;
        for (phi, ex) in phis.iter().zip(batch) {
            let l = self.logit_of(phi);
            // log sigmoid(l) and log(1 - sigmoid(l)) in stable form
            let log_p = -softplus(-l);
            let log_q = -softplus(l);
            q += if ex.positive {
                ex.weight * log_p / norm.0
            } else {
                ex.weight * log_q / norm.1
            };
        }
        q - 0.5 * self.config.l2 * self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Detector for LogisticBlobDetector {
    fn score(&self, scan: &ScanData, bbox: &Box3) -> Result<f64> {
        Ok(sigmoid_scalar(self.logit_of(&self.expand(&scan.features(bbox)?))))
    }

    fn propose(&self, scan: &ScanData) -> Result<Vec<Detection>> {
        Ok(scan
            .candidates
            .iter()
            .zip(&scan.candidate_features)
            .map(|(b, f)| Detection::from_logit(*b, self.logit_of(&self.expand(f))))
            .collect())
    }

    fn update(&mut self, batch: &[LabeledBox<'_>]) -> Result<UpdateReport> {
        let phis: Vec<Vec<f64>> = batch
            .iter()
            .map(|ex| Ok(self.expand(&ex.scan.features(&ex.bbox)?)))
            .collect::<Result<_>>()?;
        let pos: f64 = batch.iter().filter(|e| e.positive).map(|e| e.weight).sum();
        let neg: f64 = batch.iter().filter(|e| !e.positive).map(|e| e.weight).sum();
        // An absent class contributes nothing; the guard avoids 0/0.
        let norm = (pos.max(f64::MIN_POSITIVE), neg.max(f64::MIN_POSITIVE));
        let mut trace = Vec::with_capacity(self.config.steps + 1);
        for _ in 0..self.config.steps {
            trace.push(self.objective(&phis, batch, norm));
            let mut gw: Vec<f64> = self.weights.iter().map(|w| -self.config.l2 * w).collect();
            let mut gb = 0.0;
            for (phi, ex) in phis.iter().zip(batch) {
                let p = sigmoid_scalar(self.logit_of(phi));
                let r = if ex.positive {
                    ex.weight * (1.0 - p) / norm.0
                } else {
                    -ex.weight * p / norm.1
                };
                gb += r;
                for (g, x) in gw.iter_mut().zip(phi) {
                    *g += r * x;
                }
            }
            for (w, g) in self.weights.iter_mut().zip(&gw) {
                *w += self.config.lr * g;
            }
            self.bias += self.config.lr * gb;
        }
        trace.push(self.objective(&phis, batch, norm));
        Ok(UpdateReport { objective_trace: trace })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    Map,
    Sampling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub epochs: usize,
    pub mode: InferenceMode,
    /// Draws per weak label in sampling mode.
    pub m_hat: usize,
    /// Share of weak scans visited per epoch.
    pub weak_fraction: f64,
    pub proposal_logit_threshold: f64,
    pub nms_iou: f64,
    /// Hard negatives mined per weak scan.
    pub hard_negatives: usize,
    /// Slice distance from every weak `z` required of a mined negative;
    /// `None` means `mu + 3 sigma`.
    pub exclusion_radius: Option<f64>,
    pub hit_rule: HitRule,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            epochs: 16,
            mode: InferenceMode::Map,
            m_hat: DEFAULT_SAMPLES,
            weak_fraction: DEFAULT_WEAK_FRACTION,
            proposal_logit_threshold: PROPOSAL_LOGIT_THRESHOLD,
            nms_iou: NMS_IOU,
            hard_negatives: 8,
            exclusion_radius: None,
            hit_rule: HitRule::CenterInSphere,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeakScan {
    pub scan: ScanData,
    pub labels: Vec<WeakLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Expected complete-data log-likelihood after the weak M-step (0 when no
    /// weak scan contributed).
    pub q_objective: f64,
    pub froc_val: f64,
    pub weak_scans: usize,
    pub pseudo_boxes: usize,
    pub skipped_labels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmReport {
    /// Validation FROC after the supervised initialization.
    pub initial_froc_val: f64,
    pub epochs: Vec<EpochReport>,
    pub skipped_labels: usize,
}

impl EmReport {
    pub fn final_froc_val(&self) -> f64 {
        self.epochs.last().map_or(self.initial_froc_val, |e| e.froc_val)
    }
}

/// Detector FROC on fully labeled scans after the standard filter.
pub fn evaluate_froc<D: Detector + ?Sized>(detector: &D, scans: &[ScanData], rule: HitRule) -> Result<f64> {
    let results = scans
        .iter()
        .map(|s| {
            let dets = filter_detections(&detector.propose(s)?, DETECTION_LOGIT_THRESHOLD, NMS_IOU)?;
            Ok(ScanResult {
                dets: dets.into_iter().map(|d| (d.bbox, d.score)).collect(),
                gts: s.gts.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(froc(&results, rule)?.froc)
}

/// Every candidate of every fully labeled scan, labeled by the hit rule.
pub fn supervised_batch(full: &[ScanData], rule: HitRule) -> Vec<LabeledBox<'_>> {
    full.iter()
        .flat_map(|s| {
            let pos = s.positive_candidates(rule);
            s.candidates.iter().zip(pos).map(move |(b, p)| LabeledBox {
                scan: s,
                bbox: *b,
                positive: p,
                weight: 1.0,
            })
        })
        .collect()
}

/// Pseudo-labels for one weak scan: inferred positives plus hard negatives far
/// from every weak slice. Returns the batch, the mean weak log-likelihood of
/// the chosen boxes, and the number of skipped labels.
fn weak_scan_batch<'a, D: Detector + ?Sized>(
    detector: &D,
    weak: &'a WeakScan,
    hg: &HalfGaussianModel,
    lobe: &LobeModel,
    config: &EmConfig,
    rng: &mut SplitMix64,
) -> Result<(Vec<LabeledBox<'a>>, f64, usize)> {
    let scan = &weak.scan;
    let proposals = detector.propose(scan)?;
    let filtered = filter_proposals(&proposals, config.proposal_logit_threshold, config.nms_iou)?;
    let mut batch = Vec::new();
    let mut weak_ll = 0.0;
    let mut skipped = 0;
    for label in &weak.labels {
        let post = match weak_posterior(&filtered, label, &scan.extents, hg, lobe) {
            Ok(p) => p,
            Err(Error::InconsistentWeakLabel) | Err(Error::InvalidArgument(_)) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let chosen = match config.mode {
            InferenceMode::Map => vec![map_index(&post)?],
            InferenceMode::Sampling => sample_indices(&post, config.m_hat, rng)?,
        };
        let w = 1.0 / chosen.len() as f64;
        for i in chosen {
            let bbox = post.proposals[i];
            let lik =
                slice_likelihood(label.z as f64, &bbox, hg) * lobe_likelihood(label.loc, &bbox, &scan.extents, lobe)?;
            weak_ll += w * lik.max(f64::MIN_POSITIVE).ln();
            batch.push(LabeledBox {
                scan,
                bbox,
                positive: true,
                weight: w,
            });
        }
    }

    let radius = config.exclusion_radius.unwrap_or_else(|| hg.exclusion_radius());
    let far: Vec<usize> = (0..scan.candidates.len())
        .filter(|&i| {
            weak.labels
                .iter()
                .all(|l| (scan.candidates[i].z - l.z as f64).abs() > radius)
        })
        .collect();
    let scores: Vec<f64> = far.iter().map(|&i| proposals[i].score).collect();
    let n = config.hard_negatives.min(far.len());
    for j in hard_negative_mine(&scores, n)? {
        batch.push(LabeledBox {
            scan,
            bbox: scan.candidates[far[j]],
            positive: false,
            weight: 1.0,
        });
    }
    Ok((batch, weak_ll, skipped))
}

/// EM training: a supervised initialization, then per epoch an E-step on a
/// random share of weak scans, a weak M-step, and a supervised update.
///
/// With no weak data this is plain supervised training with the same number
/// of updates, which is the baseline.
#[allow(clippy::too_many_arguments)]
pub fn em_train<D: Detector + ?Sized>(
    detector: &mut D,
    full: &[ScanData],
    weak: &[WeakScan],
    val: &[ScanData],
    hg: &HalfGaussianModel,
    lobe: &LobeModel,
    config: &EmConfig,
    rng: &mut SplitMix64,
) -> Result<EmReport> {
    if !(config.weak_fraction > 0.0 && config.weak_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "weak fraction must be in (0, 1], got {}",
            config.weak_fraction
        )));
    }
    if config.mode == InferenceMode::Sampling && config.m_hat == 0 {
        return Err(Error::InvalidArgument("m_hat must be >= 1".into()));
    }
    let full_batch = supervised_batch(full, config.hit_rule);
    if full_batch.is_empty() {
        return Err(Error::InvalidArgument("fully labeled data has no candidates".into()));
    }
    detector.update(&full_batch)?;
    let initial_froc_val = evaluate_froc(detector, val, config.hit_rule)?;

    let per_epoch = if weak.is_empty() {
        0
    } else {
        ((weak.len() as f64 * config.weak_fraction).ceil() as usize).clamp(1, weak.len())
    };
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut skipped_total = 0;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..weak.len()).collect();
        rng.shuffle(&mut order);
        let visited: BTreeSet<usize> = order.into_iter().take(per_epoch).collect();

        let mut batch = Vec::new();
        let mut weak_ll = 0.0;
        let mut n_labels = 0usize;
        let mut skipped = 0;
        for &i in &visited {
            let (b, ll, s) = weak_scan_batch(detector, &weak[i], hg, lobe, config, rng)?;
            batch.extend(b);
            weak_ll += ll;
            n_labels += weak[i].labels.len() - s;
            skipped += s;
        }
        if skipped > 0 {
            warn!("epoch {epoch}: skipped {skipped} weak labels inconsistent with proposals");
        }
        skipped_total += skipped;
        let pseudo_boxes = batch.iter().filter(|b| b.positive).count();
        let q_objective = if batch.iter().any(|b| b.positive) {
            let report = detector.update(&batch)?;
            report.final_objective() + weak_ll / n_labels.max(1) as f64
        } else {
            0.0
        };
        detector.update(&full_batch)?;
        let froc_val = evaluate_froc(detector, val, config.hit_rule)?;
        debug!("epoch {epoch}: q = {q_objective:.6}, froc = {froc_val:.4}");
        epochs.push(EpochReport {
            epoch,
            q_objective,
            froc_val,
            weak_scans: visited.len(),
            pseudo_boxes,
            skipped_labels: skipped,
        });
    }
    Ok(EmReport {
        initial_froc_val,
        epochs,
        skipped_labels: skipped_total,
    })
}

/// Scan counts for the synthetic weak-supervision experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub full: usize,
    pub weak: usize,
    pub val: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            full: 20,
            weak: 200,
            val: 40,
        }
    }
}

/// Fully labeled, weakly labeled and validation scans drawn from one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSplit {
    pub full: Vec<ScanData>,
    pub weak: Vec<WeakScan>,
    pub val: Vec<ScanData>,
}

impl SyntheticSplit {
    /// Each scan gets its own generator forked from `scenario.seed`.
    pub fn generate(scenario: &Scenario, sizes: SplitSizes) -> Result<Self> {
        let mut rng = scenario.rng();
        let mut make = |n: usize| -> Result<Vec<ScanData>> {
            (0..n)
                .map(|_| {
                    let mut scan_rng = rng.fork();
                    let g = synth::gen_volume(scenario, &mut scan_rng)?;
                    ScanData::from_volume(g.volume, g.nodules, false)
                })
                .collect()
        };
        let full = make(sizes.full)?;
        let weak_full = make(sizes.weak)?;
        let val = make(sizes.val)?;
        let weak = weak_full
            .into_iter()
            .map(|mut scan| {
                let labels = scan
                    .gts
                    .iter()
                    .map(|g| synth::derive_weak_label(g, &scan.extents, &scenario.partition))
                    .collect::<Result<_>>()?;
                // Weak scans keep no boxes.
                scan.gts.clear();
                Ok(WeakScan { scan, labels })
            })
            .collect::<Result<_>>()?;
        Ok(Self { full, weak, val })
    }

    /// Lobe samples from the fully labeled ground truth.
    pub fn lobe_samples(&self, scenario: &Scenario) -> Result<Vec<LobeSample>> {
        self.full
            .iter()
            .flat_map(|s| s.gts.iter().map(move |g| (s, g)))
            .map(|(s, g)| {
                Ok(LobeSample {
                    bbox: *g,
                    extents: s.extents,
                    loc: scenario.partition.locate(g.center(), &s.extents)?,
                })
            })
            .collect()
    }
}

/// Outcome of baseline and EM training on one split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentOutcome {
    pub baseline: EmReport,
    pub em: EmReport,
    pub lift: f64,
}

/// Fits the weak-label models on the fully labeled data, then trains a
/// supervised baseline and an EM detector from identical initial states.
pub fn run_experiment(
    split: &SyntheticSplit,
    scenario: &Scenario,
    detector_config: LogisticConfig,
    config: &EmConfig,
    seed: u64,
) -> Result<ExperimentOutcome> {
    let radii: Vec<f64> = split
        .full
        .iter()
        .flat_map(|s| s.gts.iter().map(|g| g.d / 2.0))
        .collect();
    let hg = HalfGaussianModel::from_radii(&radii)?;
    let lobe = fit_lobe_regression(&split.lobe_samples(scenario)?, 500, 5.0)?.model;

    let mut base_det = LogisticBlobDetector::new(&split.full, detector_config)?;
    let mut em_det = base_det.clone();
    let baseline = em_train(
        &mut base_det,
        &split.full,
        &[],
        &split.val,
        &hg,
        &lobe,
        config,
        &mut SplitMix64::new(seed),
    )?;
    let em = em_train(
        &mut em_det,
        &split.full,
        &split.weak,
        &split.val,
        &hg,
        &lobe,
        config,
        &mut SplitMix64::new(seed),
    )?;
    let lift = em.final_froc_val() - baseline.final_froc_val();
    Ok(ExperimentOutcome { baseline, em, lift })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn det(x: f64, z: f64, logit: f64) -> Detection {
        Detection::from_logit(Box3::new(x, 10.0, z, 4.0).unwrap(), logit)
    }

    #[test]
    fn slice_likelihood_examples() {
        let hg = HalfGaussianModel::new(2.0, SLICE_TRUNCATION_MU).unwrap();
        let b = Box3::new(0.0, 0.0, 10.0, 4.0).unwrap();
        let peak = 2.0 / (2.0 * std::f64::consts::PI * 4.0f64).sqrt();
        assert_abs_diff_eq!(slice_likelihood(10.0, &b, &hg), peak, epsilon = 1e-15);
        assert_eq!(slice_likelihood(11.63, &b, &hg), slice_likelihood(10.0, &b, &hg));
        assert_eq!(slice_likelihood(8.5, &b, &hg), slice_likelihood(10.0, &b, &hg));
        assert_abs_diff_eq!(
            slice_likelihood(13.63, &b, &hg) / peak,
            0.6065306597126334,
            epsilon = 1e-12
        );
        assert!(HalfGaussianModel::new(0.0, 1.0).is_err());
    }

    #[test]
    fn lobe_feature_examples() {
        let e = Extents { x: 100, y: 200, z: 50 };
        let f = lobe_features(&Box3::new(25.0, 100.0, 25.0, 4.0).unwrap(), &e);
        assert_eq!(f, [0.25, 0.5, 0.5, 1.0]);
        let m = LobeModel::default();
        for loc in 1..=6 {
            assert_abs_diff_eq!(
                lobe_likelihood(loc, &Box3::new(1.0, 1.0, 1.0, 2.0).unwrap(), &e, &m).unwrap(),
                1.0 / 6.0,
                epsilon = 1e-15
            );
        }
        assert!(lobe_likelihood(7, &Box3::new(1.0, 1.0, 1.0, 2.0).unwrap(), &e, &m).is_err());
    }

    #[test]
    fn lobe_softmax_matches_scalar_form() {
        let mut m = LobeModel::default();
        m.theta[0] = [1.0, 0.0, 0.0, 0.0];
        m.theta[3] = [0.0, 0.0, 2.0, -1.0];
        let f = [0.5, 0.2, 0.8, 1.0];
        let logits = [0.5, 0.0, 0.0, 0.6, 0.0, 0.0];
        let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
        let p = m.probabilities(&f);
        for c in 0..6 {
            assert_abs_diff_eq!(p[c], logits[c].exp() / z, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn lobe_regression_fits_partitioned_volumes() {
        let e = Extents::cube(60);
        let part = synth::LobePartition::default();
        let mut rng = SplitMix64::new(5);
        let samples: Vec<LobeSample> = (0..300)
            .map(|_| {
                let b = Box3::new(
                    rng.uniform(2.0, 58.0),
                    rng.uniform(2.0, 58.0),
                    rng.uniform(2.0, 58.0),
                    4.0,
                )
                .unwrap();
                LobeSample {
                    bbox: b,
                    extents: e,
                    loc: part.locate(b.center(), &e).unwrap(),
                }
            })
            .collect();
        let fit = fit_lobe_regression(&samples, 3000, 5.0).unwrap();
        assert!(fit.nll_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        let correct = samples
            .iter()
            .filter(|s| {
                let p = fit.model.probabilities(&lobe_features(&s.bbox, &s.extents));
                let best = (0..6).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
                best + 1 == s.loc as usize
            })
            .count();
        assert!(correct as f64 / samples.len() as f64 >= 0.95, "{correct}");
        assert!(fit_lobe_regression(&[], 10, 1.0).is_err());
    }

    #[test]
    fn single_class_lobe_fit_concentrates() {
        let e = Extents::cube(32);
        let s = vec![LobeSample {
            bbox: Box3::new(3.0, 3.0, 3.0, 2.0).unwrap(),
            extents: e,
            loc: 2,
        }];
        let short = fit_lobe_regression(&s, 10, 1.0).unwrap().model;
        let long = fit_lobe_regression(&s, 2000, 1.0).unwrap().model;
        let p = |m: &LobeModel| m.probabilities(&lobe_features(&s[0].bbox, &e))[1];
        assert!(p(&long) > p(&short));
        assert!(p(&long) > 0.99);
    }

    #[test]
    fn filter_examples() {
        assert!(filter_proposals(&[det(0.0, 0.0, -5.0), det(9.0, 9.0, -5.0)], -3.0, 0.1)
            .unwrap()
            .is_empty());
        assert_eq!(
            filter_proposals(&[det(0.0, 0.0, -5.0), det(9.0, 9.0, 1.0)], -3.0, 0.1)
                .unwrap()
                .len(),
            1
        );
    }

    #[test]
    fn posterior_examples() {
        let e = Extents::cube(40);
        let hg = HalfGaussianModel::new(1.5, SLICE_TRUNCATION_MU).unwrap();
        let lobe = LobeModel::default();
        let weak = WeakLabel::new(1, 10, &e).unwrap();
        let one = weak_posterior(&[det(5.0, 30.0, 0.0)], &weak, &e, &hg, &lobe).unwrap();
        assert_eq!(one.weights, vec![1.0]);

        let near = det(5.0, 10.0, 0.0);
        let far = det(5.0, 16.0, 0.0);
        let post = weak_posterior(&[near, far], &weak, &e, &hg, &lobe).unwrap();
        let ratio = slice_likelihood(10.0, &near.bbox, &hg) / slice_likelihood(10.0, &far.bbox, &hg);
        assert_abs_diff_eq!(post.weights[0] / post.weights[1], ratio, epsilon = 1e-9 * ratio);
        assert_abs_diff_eq!(post.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);

        let hopeless = weak_posterior(
            &[det(5.0, 39.0, 0.0)],
            &weak,
            &e,
            &HalfGaussianModel::new(0.01, 0.0).unwrap(),
            &lobe,
        );
        assert_eq!(hopeless, Err(Error::InconsistentWeakLabel));
    }

    #[test]
    fn map_examples() {
        let b = |x: f64| Box3::new(x, 0.0, 0.0, 1.0).unwrap();
        let post =
            Posterior::from_unnormalized(vec![b(0.0), b(1.0), b(2.0)], vec![0.5; 3], vec![0.2, 0.7, 0.1]).unwrap();
        assert_eq!(infer_map(&post).unwrap(), b(1.0));
        let uniform = Posterior::from_unnormalized(vec![b(0.0), b(1.0)], vec![0.5; 2], vec![1.0, 1.0]).unwrap();
        assert_eq!(map_index(&uniform).unwrap(), 0);
    }

    #[test]
    fn sampling_examples() {
        let b = |x: f64| Box3::new(x, 0.0, 0.0, 1.0).unwrap();
        let degenerate = Posterior::from_unnormalized(vec![b(0.0), b(1.0)], vec![0.5; 2], vec![0.0, 3.0]).unwrap();
        let mut rng = SplitMix64::new(1);
        assert_eq!(infer_sampling(&degenerate, 2, &mut rng).unwrap(), vec![b(1.0), b(1.0)]);

        let post = Posterior::from_unnormalized(vec![b(0.0), b(1.0)], vec![0.5; 2], vec![0.9, 0.1]).unwrap();
        let draws = sample_indices(&post, 100_000, &mut SplitMix64::new(2)).unwrap();
        let freq = draws.iter().filter(|&&i| i == 0).count() as f64 / 1e5;
        assert!((freq - 0.9).abs() < 0.01, "{freq}");
        let again = sample_indices(&post, 100_000, &mut SplitMix64::new(2)).unwrap();
        assert_eq!(draws, again);
        assert!(sample_indices(&post, 0, &mut rng).is_err());
    }

    fn tiny_split(seed: u64) -> (Scenario, SyntheticSplit) {
        let scenario = Scenario {
            seed,
            extents: Extents::cube(32),
            ..Scenario::default()
        };
        let split = SyntheticSplit::generate(
            &scenario,
            SplitSizes {
                full: 4,
                weak: 8,
                val: 3,
            },
        )
        .unwrap();
        (scenario, split)
    }

    #[test]
    fn weak_m_step_ascends_q() {
        let (scenario, split) = tiny_split(3);
        let radii: Vec<f64> = split
            .full
            .iter()
            .flat_map(|s| s.gts.iter().map(|g| g.d / 2.0))
            .collect();
        let hg = HalfGaussianModel::from_radii(&radii).unwrap();
        let lobe = fit_lobe_regression(&split.lobe_samples(&scenario).unwrap(), 200, 5.0)
            .unwrap()
            .model;
        let cfg = LogisticConfig {
            steps: 25,
            lr: 0.01,
            ..LogisticConfig::default()
        };
        let mut d = LogisticBlobDetector::new(&split.full, cfg).unwrap();
        d.update(&supervised_batch(&split.full, HitRule::default())).unwrap();
        let em_cfg = EmConfig {
            weak_fraction: 1.0,
            ..EmConfig::default()
        };
        let mut batch = Vec::new();
        for w in &split.weak {
            batch.extend(
                weak_scan_batch(&d, w, &hg, &lobe, &em_cfg, &mut SplitMix64::new(0))
                    .unwrap()
                    .0,
            );
        }
        assert!(batch.iter().any(|b| b.positive));
        let trace = d.update(&batch).unwrap().objective_trace;
        assert!(trace.windows(2).all(|w| w[1] >= w[0] - 1e-12), "{trace:?}");
    }

    #[test]
    fn hard_negatives_stay_far_from_weak_slices() {
        let (scenario, split) = tiny_split(4);
        let radii: Vec<f64> = split
            .full
            .iter()
            .flat_map(|s| s.gts.iter().map(|g| g.d / 2.0))
            .collect();
        let hg = HalfGaussianModel::from_radii(&radii).unwrap();
        let lobe = fit_lobe_regression(&split.lobe_samples(&scenario).unwrap(), 100, 5.0)
            .unwrap()
            .model;
        let d = LogisticBlobDetector::new(&split.full, LogisticConfig::default()).unwrap();
        let cfg = EmConfig::default();
        for w in &split.weak {
            let (batch, _, _) = weak_scan_batch(&d, w, &hg, &lobe, &cfg, &mut SplitMix64::new(0)).unwrap();
            for b in batch.iter().filter(|b| !b.positive) {
                for l in &w.labels {
                    assert!((b.bbox.z - l.z as f64).abs() > hg.mu + 3.0 * hg.sigma);
                }
            }
        }
    }

    #[test]
    fn no_weak_data_reduces_to_baseline() {
        let (scenario, split) = tiny_split(5);
        let empty = SyntheticSplit {
            weak: vec![],
            ..split.clone()
        };
        let cfg = EmConfig {
            epochs: 3,
            ..EmConfig::default()
        };
        let out = run_experiment(&empty, &scenario, LogisticConfig::default(), &cfg, 9).unwrap();
        assert_eq!(out.baseline, out.em);
        assert_eq!(out.lift, 0.0);
        let zero = EmConfig { epochs: 0, ..cfg };
        let out = run_experiment(&split, &scenario, LogisticConfig::default(), &zero, 9).unwrap();
        assert!(out.em.epochs.is_empty());
        assert_eq!(out.em.final_froc_val(), out.baseline.final_froc_val());
    }

    #[test]
    fn split_generation_is_deterministic() {
        let (_, a) = tiny_split(6);
        let (_, b) = tiny_split(6);
        assert_eq!(a, b);
        assert!(a.weak.iter().all(|w| w.scan.gts.is_empty() && w.scan.volume.is_none()));
    }
}
