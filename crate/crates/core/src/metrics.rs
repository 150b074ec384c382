//! Evaluation metrics: Dice overlap, trimap boundary accuracy, 95th
//! percentile Hausdorff distance and Cohen's kappa.
//!
//! Everything outside a mask's extent counts as background.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A 2D or 3D binary mask with optional per-axis voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    tensor: Tensor,
    spacing: Option<Vec<f64>>,
}

impl BinaryMask {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if !(2..=3).contains(&tensor.rank()) {
            return Err(Error::InvalidArgument(format!(
                "masks must be 2D or 3D, got rank {}",
                tensor.rank()
            )));
        }
        if let Some(i) = tensor.data().iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(format!(
                "mask value {} at {i} is not 0 or 1",
                tensor.data()[i]
            )));
        }
        Ok(Self { tensor, spacing: None })
    }

    pub fn with_spacing(mut self, spacing: Vec<f64>) -> Result<Self> {
        if spacing.len() != self.tensor.rank() || spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "spacing {spacing:?} invalid for rank {}",
                self.tensor.rank()
            )));
        }
        self.spacing = Some(spacing);
        Ok(self)
    }

    /// Builds a 2D mask from rows of 0/1 values.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let data: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        Self::new(Tensor::from_rows(&data)?)
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn spacing(&self) -> Option<&[f64]> {
        self.spacing.as_deref()
    }

    pub fn get(&self, flat: usize) -> bool {
        self.tensor.data()[flat] != 0.0
    }

    pub fn count(&self) -> usize {
        self.tensor.data().iter().filter(|&&v| v != 0.0).count()
    }

    /// Value at a signed coordinate; out-of-bounds is background.
    fn at(&self, coord: &[isize]) -> bool {
        match flat_index(self.shape(), coord) {
            Some(i) => self.get(i),
            None => false,
        }
    }
}

fn flat_index(shape: &[usize], coord: &[isize]) -> Option<usize> {
    let mut idx = 0usize;
    for (&c, &n) in coord.iter().zip(shape) {
        if c < 0 || c as usize >= n {
            return None;
        }
        idx = idx * n + c as usize;
    }
    Some(idx)
}

fn coord_of(shape: &[usize], mut flat: usize) -> Vec<isize> {
    let mut out = vec![0isize; shape.len()];
    for (axis, &n) in shape.iter().enumerate().rev() {
        out[axis] = (flat % n) as isize;
        flat /= n;
    }
    out
}

fn check_shapes(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape().to_vec(),
            actual: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `2TP / (2TP + FP + FN)`; two empty masks score 1.
pub fn dice_coefficient(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for i in 0..pred.tensor.len() {
        match (pred.get(i), gt.get(i)) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    })
}

/// Neighborhood shape used to build the trimap band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandMetric {
    /// Square (cubic) structuring element of side `2w + 1`.
    #[default]
    Chebyshev,
    /// Disc (ball) of radius `w`.
    Euclidean,
}

fn offsets(rank: usize, w: usize, metric: BandMetric) -> Vec<Vec<isize>> {
    let w = w as isize;
    let mut out = vec![vec![]];
    for _ in 0..rank {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (-w..=w).map(move |d| {
                    let mut p = prefix.clone();
                    p.push(d);
                    p
                })
            })
            .collect();
    }
    if metric == BandMetric::Euclidean {
        out.retain(|o| o.iter().map(|d| d * d).sum::<isize>() <= w * w);
    }
    out
}

/// Pixels within distance `w` of the ground-truth boundary: the dilation of
/// `gt` minus its erosion.
pub fn trimap_band(gt: &BinaryMask, w: usize, metric: BandMetric) -> Result<Vec<bool>> {
    if w == 0 {
        return Err(Error::InvalidArgument("trimap width must be >= 1".into()));
    }
    let offs = offsets(gt.shape().len(), w, metric);
    Ok((0..gt.tensor.len())
        .map(|i| {
            let c = coord_of(gt.shape(), i);
            let (mut any_fg, mut any_bg) = (false, false);
            for o in &offs {
                let n: Vec<isize> = c.iter().zip(o).map(|(a, b)| a + b).collect();
                if gt.at(&n) {
                    any_fg = true;
                } else {
                    any_bg = true;
                }
                if any_fg && any_bg {
                    return true;
                }
            }
            false
        })
        .collect())
}

/// Fraction of trimap-band pixels on which `pred` agrees with `gt`.
pub fn trimap_accuracy(pred: &BinaryMask, gt: &BinaryMask, w: usize, metric: BandMetric) -> Result<f64> {
    check_shapes(pred, gt)?;
    let band = trimap_band(gt, w, metric)?;
    let (mut n, mut agree) = (0usize, 0usize);
    for (i, _) in band.iter().enumerate().filter(|(_, &b)| b) {
        n += 1;
        agree += (pred.get(i) == gt.get(i)) as usize;
    }
    if n == 0 {
        return Err(Error::EmptyBand);
    }
    Ok(agree as f64 / n as f64)
}

/// Foreground voxels with at least one background face neighbour.
pub fn surface_voxels(mask: &BinaryMask) -> Vec<Vec<isize>> {
    let rank = mask.shape().len();
    (0..mask.tensor.len())
        .filter(|&i| mask.get(i))
        .map(|i| coord_of(mask.shape(), i))
        .filter(|c| {
            (0..rank).any(|axis| {
                [-1isize, 1].iter().any(|&d| {
                    let mut n = c.clone();
                    n[axis] += d;
                    !mask.at(&n)
                })
            })
        })
        .collect()
}

fn directed_distances(from: &[Vec<isize>], to: &[Vec<isize>], spacing: &[f64]) -> Vec<f64> {
    from.iter()
        .map(|a| {
            to.iter()
                .map(|b| {
                    a.iter()
                        .zip(b)
                        .zip(spacing)
                        .map(|((p, q), s)| ((p - q) as f64 * s).powi(2))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Nearest-rank percentile, `q` in (0, 1].
pub fn nearest_rank_percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Ok(v[rank - 1])
}

/// Symmetric 95th percentile surface distance, in units of `spacing`
/// (defaults to the mask's own spacing, then to 1 per axis).
pub fn hausdorff95(pred: &BinaryMask, gt: &BinaryMask, spacing: Option<&[f64]>) -> Result<f64> {
    check_shapes(pred, gt)?;
    let rank = pred.shape().len();
    let spacing: Vec<f64> = match spacing.or(gt.spacing()).or(pred.spacing()) {
        Some(s) if s.len() == rank && s.iter().all(|&v| v > 0.0) => s.to_vec(),
        Some(s) => return Err(Error::InvalidArgument(format!("spacing {s:?} invalid for rank {rank}"))),
        None => vec![1.0; rank],
    };
    let sa = surface_voxels(pred);
    if sa.is_empty() {
        return Err(Error::EmptyMask("prediction"));
    }
    let sb = surface_voxels(gt);
    if sb.is_empty() {
        return Err(Error::EmptyMask("ground truth"));
    }
    let ab = nearest_rank_percentile(&directed_distances(&sa, &sb, &spacing), 0.95)?;
    let ba = nearest_rank_percentile(&directed_distances(&sb, &sa, &spacing), 0.95)?;
    Ok(ab.max(ba))
}

/// Agreement between two raters corrected for chance.
pub fn cohen_kappa<T: Ord + Clone>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: vec![a.len()],
            actual: vec![b.len()],
        });
    }
    if a.is_empty() {
        return Err(Error::EmptyReduction);
    }
    let n = a.len() as f64;
    let mut ca: BTreeMap<T, usize> = BTreeMap::new();
    let mut cb: BTreeMap<T, usize> = BTreeMap::new();
    let mut agree = 0usize;
    for (x, y) in a.iter().zip(b) {
        *ca.entry(x.clone()).or_default() += 1;
        *cb.entry(y.clone()).or_default() += 1;
        agree += (x == y) as usize;
    }
    let p_o = agree as f64 / n;
    let p_e: f64 = ca
        .iter()
        .map(|(k, &na)| na as f64 / n * cb.get(k).copied().unwrap_or(0) as f64 / n)
        .sum();
    if p_e >= 1.0 {
        // Both raters used one identical label throughout.
        return Ok(1.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn square(n: usize, lo: usize, hi: usize, shift: usize) -> BinaryMask {
        let rows = (0..n)
            .map(|r| {
                (0..n)
                    .map(|c| (r >= lo && r < hi && c >= lo + shift && c < hi + shift) as u8)
                    .collect()
            })
            .collect::<Vec<_>>();
        BinaryMask::from_rows(&rows).unwrap()
    }

    fn cube(n: usize, lo: [usize; 3], side: usize) -> BinaryMask {
        let mut data = vec![0.0; n * n * n];
        for z in 0..side {
            for y in 0..side {
                for x in 0..side {
                    data[((lo[0] + z) * n + lo[1] + y) * n + lo[2] + x] = 1.0;
                }
            }
        }
        BinaryMask::new(Tensor::new(vec![n, n, n], data).unwrap()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = square(8, 2, 6, 0);
        assert_eq!(dice_coefficient(&a, &a).unwrap(), 1.0);
        let far = square(8, 0, 2, 0);
        let other = square(8, 6, 8, 0);
        assert_eq!(dice_coefficient(&far, &other).unwrap(), 0.0);
        let p = BinaryMask::from_rows(&[vec![1, 1, 1, 1, 0, 0]]).unwrap();
        let q = BinaryMask::from_rows(&[vec![0, 0, 1, 1, 1, 1]]).unwrap();
        assert_eq!(dice_coefficient(&p, &q).unwrap(), 0.5);
        let empty = square(4, 0, 0, 0);
        assert_eq!(dice_coefficient(&empty, &empty).unwrap(), 1.0);
        assert!(dice_coefficient(&empty, &a).is_err());
        assert!(BinaryMask::from_rows(&[vec![2]]).is_err());
    }

    #[test]
    fn trimap_shifted_square() {
        // 4x4 square at rows/cols 2..6 in an 8x8 grid, prediction shifted right.
        let gt = square(8, 2, 6, 0);
        let pred = square(8, 2, 6, 1);
        let band = trimap_band(&gt, 1, BandMetric::Chebyshev).unwrap();
        // Band for w=1: the 6x6 ring 1..7 minus the 2x2 core 3..5.
        let expected: Vec<bool> = (0..64)
            .map(|i| {
                let (r, c) = (i / 8, i % 8);
                let outer = (1..7).contains(&r) && (1..7).contains(&c);
                let core = (3..5).contains(&r) && (3..5).contains(&c);
                outer && !core
            })
            .collect();
        assert_eq!(band, expected);
        // Disagreements in the band: column 2 (rows 2..6) and column 6 (rows 2..6).
        assert_abs_diff_eq!(
            trimap_accuracy(&pred, &gt, 1, BandMetric::Chebyshev).unwrap(),
            24.0 / 32.0,
            epsilon = 1e-15
        );
        assert_eq!(trimap_accuracy(&gt, &gt, 3, BandMetric::Chebyshev).unwrap(), 1.0);
        let b2 = trimap_band(&gt, 2, BandMetric::Chebyshev).unwrap();
        assert!(band.iter().zip(&b2).all(|(a, b)| !a || *b));
        assert_eq!(
            trimap_accuracy(&square(4, 0, 0, 0), &square(4, 0, 0, 0), 1, BandMetric::Chebyshev),
            Err(Error::EmptyBand)
        );
    }

    #[test]
    fn hausdorff_examples() {
        let a = cube(8, [2, 2, 2], 3);
        assert_eq!(hausdorff95(&a, &a, None).unwrap(), 0.0);
        let mut p = vec![0.0; 25];
        let mut q = vec![0.0; 25];
        p[0] = 1.0;
        q[3] = 1.0;
        let p = BinaryMask::new(Tensor::new(vec![5, 5], p).unwrap()).unwrap();
        let q = BinaryMask::new(Tensor::new(vec![5, 5], q).unwrap()).unwrap();
        assert_eq!(hausdorff95(&p, &q, None).unwrap(), 3.0);
        let b = cube(8, [3, 2, 2], 3);
        assert_eq!(hausdorff95(&a, &b, None).unwrap(), 1.0);
        assert_eq!(hausdorff95(&a, &b, Some(&[2.5, 1.0, 1.0])).unwrap(), 2.5);
        let empty = cube(8, [0, 0, 0], 0);
        assert_eq!(hausdorff95(&empty, &a, None), Err(Error::EmptyMask("prediction")));
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(nearest_rank_percentile(&v, 0.95).unwrap(), 19.0);
        assert_eq!(nearest_rank_percentile(&[4.0], 0.95).unwrap(), 4.0);
        assert_eq!(nearest_rank_percentile(&v[..10], 0.95).unwrap(), 10.0);
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(cohen_kappa(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap(), 1.0);
        assert_eq!(cohen_kappa(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap(), 0.0);
        assert_eq!(cohen_kappa(&[3, 3], &[3, 3]).unwrap(), 1.0);
        // Perfect disagreement on a balanced binary task.
        assert_eq!(cohen_kappa(&[0, 1], &[1, 0]).unwrap(), -1.0);
        assert!(cohen_kappa::<u8>(&[], &[]).is_err());
        assert!(cohen_kappa(&[0], &[0, 1]).is_err());
    }
}
