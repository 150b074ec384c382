//! Multi-instance learning heads for whole-image classification.
//!
//! A shared logistic regression scores every patch of a feature map; three
//! bag-level losses turn the patch probabilities `r` into a training signal.
//! All losses take probabilities (not logits) and return gradients w.r.t. `r`;
//! [`PatchScoring::backward`] chains those into the feature map and the
//! logistic parameters.

use crate::error::{Error, Result};
use crate::losses::{LossOutput, PROB_FLOOR};
use crate::tensor::{sigmoid_scalar, Tensor};

/// Per-patch malignancy probabilities, flattened row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchScores(Tensor);

impl PatchScores {
    pub fn new(r: Tensor) -> Result<Self> {
        if let Some(bad) = r.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("patch score {bad} outside [0, 1]")));
        }
        let m = r.len();
        Ok(Self(r.reshape(&[m])?))
    }

    pub fn from_vec(r: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::vector(r)?)
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BagLabel {
    Negative,
    Positive,
}

impl BagLabel {
    pub fn from_binary(y: u8) -> Result<Self> {
        match y {
            0 => Ok(Self::Negative),
            1 => Ok(Self::Positive),
            _ => Err(Error::InvalidArgument(format!("bag label {y} is not 0/1"))),
        }
    }

    fn is_positive(self) -> bool {
        self == Self::Positive
    }
}

/// Forward pass of the shared patch scorer, retaining what the backward pass
/// needs.
#[derive(Debug, Clone)]
pub struct PatchScoring {
    pub scores: PatchScores,
    features: Tensor,
    weights: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchScoringGrads {
    pub features: Tensor,
    pub weights: Tensor,
    pub bias: f64,
}

/// `r_ij = sigmoid(a · F_ij + b)` for an `[H × W × C]` feature map.
pub fn patch_scores(features: &Tensor, a: &Tensor, b: f64) -> Result<PatchScoring> {
    if features.rank() != 3 {
        return Err(Error::InvalidArgument(format!(
            "features must be [H x W x C], got {:?}",
            features.shape()
        )));
    }
    let channels = features.shape()[2];
    a.expect_shape(&[channels])?;
    let r: Vec<f64> = features
        .data()
        .chunks_exact(channels)
        .map(|f| sigmoid_scalar(f.iter().zip(a.data()).map(|(x, w)| x * w).sum::<f64>() + b))
        .collect();
    Ok(PatchScoring {
        scores: PatchScores::from_vec(r)?,
        features: features.clone(),
        weights: a.clone(),
    })
}

impl PatchScoring {
    /// Pulls `dL/dr` back to the features, weights and bias.
    pub fn backward(&self, upstream: &Tensor) -> Result<PatchScoringGrads> {
        upstream.expect_shape(&[self.scores.len()])?;
        let channels = self.weights.len();
        let mut d_features = vec![0.0; self.features.len()];
        let mut d_weights = vec![0.0; channels];
        let mut d_bias = 0.0;
        for (patch, (&r, &up)) in self.scores.values().iter().zip(upstream.data()).enumerate() {
            let d_logit = up * r * (1.0 - r);
            d_bias += d_logit;
            let f = &self.features.data()[patch * channels..(patch + 1) * channels];
            for c in 0..channels {
                d_weights[c] += d_logit * f[c];
                d_features[patch * channels + c] = d_logit * self.weights.data()[c];
            }
        }
        Ok(PatchScoringGrads {
            features: Tensor::new(self.features.shape().to_vec(), d_features)?,
            weights: Tensor::new(vec![channels], d_weights)?,
            bias: d_bias,
        })
    }
}

/// Stable descending sort. Returns the ranked scores and, for each rank, the
/// original patch index.
pub fn rank_scores(r: &PatchScores) -> Result<(Vec<f64>, Vec<usize>)> {
    if r.is_empty() {
        return Err(Error::InvalidArgument("cannot rank an empty bag".into()));
    }
    let mut perm: Vec<usize> = (0..r.len()).collect();
    perm.sort_by(|&a, &b| r.values()[b].total_cmp(&r.values()[a]));
    Ok((perm.iter().map(|&i| r.values()[i]).collect(), perm))
}

/// `-ln p(label | r)` with the floor applied, and its derivative w.r.t. `r`.
fn patch_nll(r: f64, positive: bool) -> (f64, f64) {
    let p = if positive { r } else { 1.0 - r };
    if p <= PROB_FLOOR {
        return (-PROB_FLOOR.ln(), 0.0);
    }
    let d = if positive { -1.0 / p } else { 1.0 / p };
    (-p.ln(), d)
}

fn argmax_lowest_index(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Bag probability is the largest patch score; the gradient flows only to
/// that patch (lowest index among ties).
pub fn max_pool_mil_loss(r: &PatchScores, y: BagLabel) -> Result<LossOutput> {
    if r.is_empty() {
        return Err(Error::InvalidArgument("empty bag".into()));
    }
    let top = argmax_lowest_index(r.values());
    let (value, d) = patch_nll(r.values()[top], y.is_positive());
    let mut grad = vec![0.0; r.len()];
    grad[top] = d;
    Ok(LossOutput {
        value,
        grad: Tensor::new(vec![r.len()], grad)?,
    })
}

/// Top-`k` ranked patches take the bag label, the rest are negatives; the
/// per-patch cross-entropies are averaged over all `m` patches.
pub fn label_assign_mil_loss(r: &PatchScores, y: BagLabel, k: usize) -> Result<LossOutput> {
    let m = r.len();
    if k < 1 || k > m {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={m}")));
    }
    let (_, perm) = rank_scores(r)?;
    let inv_m = 1.0 / m as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; m];
    for (rank, &patch) in perm.iter().enumerate() {
        let positive = rank < k && y.is_positive();
        let (v, d) = patch_nll(r.values()[patch], positive);
        value += inv_m * v;
        grad[patch] = inv_m * d;
    }
    Ok(LossOutput {
        value,
        grad: Tensor::new(vec![m], grad)?,
    })
}

/// Max-pooling loss plus `mu` times the L1 norm of the scores.
pub fn sparse_mil_loss(r: &PatchScores, y: BagLabel, mu: f64) -> Result<LossOutput> {
    if !(mu >= 0.0) {
        return Err(Error::InvalidArgument(format!("mu must be >= 0, got {mu}")));
    }
    let base = max_pool_mil_loss(r, y)?;
    // Scores are nonnegative, so |r|_1 = Σ r and its gradient is 1.
    let l1: f64 = r.values().iter().sum();
    Ok(LossOutput {
        value: base.value + mu * l1,
        grad: base.grad.map(|g| g + mu)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MilScheme {
    MaxPool,
    LabelAssign { k: usize },
    Sparse { mu: f64 },
}

impl MilScheme {
    pub fn loss(&self, r: &PatchScores, y: BagLabel) -> Result<LossOutput> {
        match *self {
            Self::MaxPool => max_pool_mil_loss(r, y),
            Self::LabelAssign { k } => label_assign_mil_loss(r, y, k),
            Self::Sparse { mu } => sparse_mil_loss(r, y, mu),
        }
    }
}

/// The `k` grid used for label-assignment model selection.
pub const K_GRID: [usize; 5] = [1, 2, 4, 6, 8];

/// Evaluates label-assignment loss over bags for each `k` in the grid that is
/// valid for every bag. Returns `(k, mean loss)` pairs.
pub fn k_grid_losses(bags: &[(PatchScores, BagLabel)]) -> Result<Vec<(usize, f64)>> {
    let min_m = bags
        .iter()
        .map(|(r, _)| r.len())
        .min()
        .ok_or_else(|| Error::InvalidArgument("no bags".into()))?;
    K_GRID
        .iter()
        .filter(|&&k| k <= min_m)
        .map(|&k| {
            let total = bags
                .iter()
                .map(|(r, y)| label_assign_mil_loss(r, *y, k).map(|o| o.value))
                .sum::<Result<f64>>()?;
            Ok((k, total / bags.len() as f64))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use approx::assert_abs_diff_eq;

    fn scores(v: &[f64]) -> PatchScores {
        PatchScores::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn patch_scores_examples() {
        let f = Tensor::new(vec![2, 2, 3], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        let out = patch_scores(&f, &Tensor::zeros(&[3]), 0.0).unwrap();
        assert!(out.scores.values().iter().all(|&r| r == 0.5));

        let mut onehot = vec![0.0; 12];
        onehot[3 + 1] = 1.0; // pixel (0,1), channel 1
        let f = Tensor::new(vec![2, 2, 3], onehot).unwrap();
        let a = Tensor::vector(vec![0.0, 3.0, 0.0]).unwrap();
        let out = patch_scores(&f, &a, 0.0).unwrap();
        assert_eq!(out.scores.values()[1], sigmoid_scalar(3.0));
        assert_eq!(out.scores.values()[0], 0.5);
        assert!(patch_scores(&f, &Tensor::zeros(&[2]), 0.0).is_err());
    }

    #[test]
    fn patch_scores_chain_rule() {
        let f = Tensor::new(
            vec![2, 3, 2],
            vec![0.3, -0.2, 1.1, 0.4, -0.7, 0.9, 0.05, 0.6, -1.2, 0.8, 0.2, -0.3],
        )
        .unwrap();
        let a = Tensor::vector(vec![0.7, -1.3]).unwrap();
        let b = 0.2;
        let upstream = Tensor::vector(vec![0.5, -1.0, 2.0, 0.3, -0.4, 1.5]).unwrap();
        let objective =
            |f: &Tensor, a: &Tensor, b: f64| patch_scores(f, a, b).unwrap().scores.tensor().dot(&upstream).unwrap();
        let grads = patch_scores(&f, &a, b).unwrap().backward(&upstream).unwrap();
        let rf = grad_check(|x| objective(x, &a, b), &grads.features, &f, 1e-5).unwrap();
        let ra = grad_check(|x| objective(&f, x, b), &grads.weights, &a, 1e-5).unwrap();
        let bt = Tensor::vector(vec![b]).unwrap();
        let rb = grad_check(
            |x| objective(&f, &a, x.data()[0]),
            &Tensor::vector(vec![grads.bias]).unwrap(),
            &bt,
            1e-5,
        )
        .unwrap();
        assert!(rf.max_rel_err < 1e-4 && ra.max_rel_err < 1e-4 && rb.max_rel_err < 1e-4);
    }

    #[test]
    fn ranking() {
        let (sorted, perm) = rank_scores(&scores(&[0.2, 0.9, 0.5])).unwrap();
        assert_eq!(sorted, vec![0.9, 0.5, 0.2]);
        assert_eq!(perm, vec![1, 2, 0]);
        let (_, perm) = rank_scores(&scores(&[0.5, 0.5])).unwrap();
        assert_eq!(perm, vec![0, 1]);
        assert!(rank_scores(&PatchScores(Tensor::zeros(&[1]).reshape(&[1]).unwrap())).is_ok());
        assert!(PatchScores::from_vec(vec![1.5]).is_err());
    }

    #[test]
    fn max_pool_examples() {
        let out = max_pool_mil_loss(&scores(&[0.2, 1.0, 0.4]), BagLabel::Positive).unwrap();
        assert_eq!(out.value, 0.0);
        let out = max_pool_mil_loss(&scores(&[0.3, 0.7]), BagLabel::Negative).unwrap();
        assert_abs_diff_eq!(out.value, 1.203_972_804_325_936, epsilon = 1e-14);
        assert_eq!(out.grad.data()[0], 0.0);
        assert!(out.grad.data()[1] > 0.0);
    }

    #[test]
    fn max_pool_ties_route_to_lowest_index() {
        let out = max_pool_mil_loss(&scores(&[0.1, 0.6, 0.6]), BagLabel::Positive).unwrap();
        assert_eq!(out.grad.data()[2], 0.0);
        assert!(out.grad.data()[1] < 0.0);
    }

    #[test]
    fn label_assign_examples() {
        let r = scores(&[0.2, 0.9, 0.5, 0.7]);
        let all = label_assign_mil_loss(&r, BagLabel::Positive, 4).unwrap();
        let mean_bce = r.values().iter().map(|v| -v.ln()).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(all.value, mean_bce, epsilon = 1e-12);

        let neg: Vec<f64> = (1..=4)
            .map(|k| label_assign_mil_loss(&r, BagLabel::Negative, k).unwrap().value)
            .collect();
        let expected = r.values().iter().map(|v| -(1.0 - v).ln()).sum::<f64>() / 4.0;
        for v in neg {
            assert_abs_diff_eq!(v, expected, epsilon = 1e-12);
        }

        let single = scores(&[0.35]);
        assert_eq!(
            label_assign_mil_loss(&single, BagLabel::Positive, 1).unwrap(),
            max_pool_mil_loss(&single, BagLabel::Positive).unwrap()
        );
        assert!(label_assign_mil_loss(&r, BagLabel::Positive, 0).is_err());
        assert!(label_assign_mil_loss(&r, BagLabel::Positive, 5).is_err());
    }

    #[test]
    fn sparse_examples() {
        let r = scores(&[0.3, 0.8, 0.1]);
        assert_eq!(
            sparse_mil_loss(&r, BagLabel::Positive, 0.0).unwrap(),
            max_pool_mil_loss(&r, BagLabel::Positive).unwrap()
        );
        let out = sparse_mil_loss(&scores(&[1.0, 0.0, 0.0]), BagLabel::Positive, 1e-5).unwrap();
        assert_eq!(out.value, 1e-5);
        assert!(sparse_mil_loss(&r, BagLabel::Positive, -1.0).is_err());
    }

    #[test]
    fn mil_gradients_match_finite_differences() {
        let r = scores(&[0.31, 0.82, 0.13, 0.57, 0.44]);
        for y in [BagLabel::Positive, BagLabel::Negative] {
            for scheme in [
                MilScheme::MaxPool,
                MilScheme::LabelAssign { k: 2 },
                MilScheme::Sparse { mu: 0.05 },
            ] {
                let out = scheme.loss(&r, y).unwrap();
                let report = grad_check(
                    |x| scheme.loss(&PatchScores(x.clone()), y).unwrap().value,
                    &out.grad,
                    r.tensor(),
                    1e-5,
                )
                .unwrap();
                assert!(report.max_rel_err < 1e-4, "{scheme:?} {y:?} {report:?}");
            }
        }
    }

    #[test]
    fn k_grid_skips_infeasible_k() {
        let bags = vec![
            (scores(&[0.1, 0.9, 0.4, 0.3, 0.2, 0.8]), BagLabel::Positive),
            (scores(&[0.2, 0.1, 0.05, 0.3, 0.2, 0.1, 0.0]), BagLabel::Negative),
        ];
        let grid = k_grid_losses(&bags).unwrap();
        assert_eq!(grid.iter().map(|g| g.0).collect::<Vec<_>>(), vec![1, 2, 4, 6]);
    }
}
