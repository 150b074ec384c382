//! Fully connected pairwise CRF over pixels with Gaussian appearance and
//! spatial kernels, solved by mean-field iterations.
//!
//! Distributions `q` and unaries `ψ_u` are `[L × N]` tensors (label-major).
//! Kernels are dense `N × N` matrices; the diagonal is stored but never
//! contributes a message.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::PROB_FLOOR;
use crate::tensor::{softmax, Tensor};

/// Simplex tolerance accepted on input distributions.
pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanFieldMode {
    /// `softmax(-ψ_u - q̂)`.
    Standard,
    /// `softmax(exp(-ψ_u) - q̂)`, the update exactly as printed in the
    /// original formulation.
    PaperLiteral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrfParams {
    /// `w^(m)` for the appearance and spatial kernels, in that order.
    pub kernel_weights: Vec<f64>,
    /// `μ(l, l')`, `L × L`.
    pub compatibility: Tensor,
    pub appearance_bandwidth: f64,
    pub spatial_bandwidth: f64,
    pub iterations_train: usize,
    pub iterations_test: usize,
}

impl CrfParams {
    /// Potts compatibility `1 - δ(l, l')` for `labels` labels, unit
    /// bandwidths and unit kernel weights.
    pub fn potts(labels: usize) -> Self {
        let mut mu = vec![1.0; labels * labels];
        for l in 0..labels {
            mu[l * labels + l] = 0.0;
        }
        Self {
            kernel_weights: vec![1.0, 1.0],
            compatibility: Tensor::new(vec![labels, labels], mu).expect("finite"),
            appearance_bandwidth: 1.0,
            spatial_bandwidth: 1.0,
            iterations_train: 5,
            iterations_test: 10,
        }
    }

    pub fn labels(&self) -> usize {
        self.compatibility.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.compatibility.shape();
        if l.len() != 2 || l[0] != l[1] {
            return Err(Error::InvalidArgument(format!(
                "compatibility must be square, got {l:?}"
            )));
        }
        if !(self.appearance_bandwidth > 0.0 && self.spatial_bandwidth > 0.0) {
            return Err(Error::InvalidArgument("bandwidths must be positive".into()));
        }
        if self.iterations_train == 0 || self.iterations_test == 0 {
            return Err(Error::InvalidArgument("iterations must be >= 1".into()));
        }
        if self.kernel_weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument("kernel weights must be finite".into()));
        }
        Ok(())
    }
}

impl Default for CrfParams {
    fn default() -> Self {
        Self::potts(2)
    }
}

/// `ψ_u` as an `[L × N]` field.
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryField(pub Tensor);

impl UnaryField {
    pub fn new(psi: Tensor) -> Result<Self> {
        if psi.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "unary field must be [L x N], got {:?}",
                psi.shape()
            )));
        }
        Ok(Self(psi))
    }

    /// `-ln p`, floored, from a probability map.
    pub fn from_probs(p: &Tensor) -> Result<Self> {
        Self::new(p.map(|v| -v.max(PROB_FLOOR).ln())?)
    }

    pub fn labels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn pixels(&self) -> usize {
        self.0.shape()[1]
    }
}

/// Per-pixel foreground prior weights in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionPrior(pub Tensor);

/// Dense Gaussian kernels, one `N × N` matrix per feature type.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSet {
    pub kernels: Vec<Tensor>,
}

impl KernelSet {
    pub fn pixels(&self) -> usize {
        self.kernels.first().map_or(0, |k| k.shape()[0])
    }
}

fn gaussian_matrix(n: usize, sq_dist: impl Fn(usize, usize) -> f64, bandwidth: f64) -> Tensor {
    let scale = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        data[i * n + i] = 1.0;
        for j in 0..i {
            let k = (-sq_dist(i, j) * scale).exp();
            data[i * n + j] = k;
            data[j * n + i] = k;
        }
    }
    Tensor::from_parts_unchecked(vec![n, n], data)
}

/// Appearance kernel `exp(-|I_i - I_j|² / 2σ_a²)` and spatial kernel
/// `exp(-‖p_i - p_j‖² / 2σ_s²)`.
pub fn gaussian_kernels(intensities: &Tensor, positions: &Tensor, params: &CrfParams) -> Result<KernelSet> {
    params.validate()?;
    let n = intensities.len();
    if positions.rank() != 2 || positions.shape()[0] != n {
        return Err(Error::ShapeMismatch {
            expected: vec![n, 2],
            actual: positions.shape().to_vec(),
        });
    }
    let dims = positions.shape()[1];
    let iv = intensities.data();
    let pv = positions.data();
    let appearance = gaussian_matrix(n, |i, j| (iv[i] - iv[j]).powi(2), params.appearance_bandwidth);
    let spatial = gaussian_matrix(
        n,
        |i, j| (0..dims).map(|d| (pv[i * dims + d] - pv[j * dims + d]).powi(2)).sum(),
        params.spatial_bandwidth,
    );
    Ok(KernelSet {
        kernels: vec![appearance, spatial],
    })
}

/// Row-major pixel grid coordinates `(row, col)` for an `h × w` image.
pub fn grid_positions(h: usize, w: usize) -> Tensor {
    let data = (0..h)
        .flat_map(|r| (0..w).flat_map(move |c| [r as f64, c as f64]))
        .collect();
    Tensor::from_parts_unchecked(vec![h * w, 2], data)
}

/// Laplace-smoothed (`s = 1`) foreground frequency per pixel.
pub fn estimate_position_prior(masks: &[Tensor]) -> Result<PositionPrior> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidArgument("no masks for the position prior".into()))?;
    let mut counts = vec![0.0; first.len()];
    for mask in masks {
        mask.expect_shape(first.shape())?;
        for (c, &v) in counts.iter_mut().zip(mask.data()) {
            if v != 0.0 && v != 1.0 {
                return Err(Error::InvalidArgument(format!("mask value {v} is not binary")));
            }
            *c += v;
        }
    }
    let total = masks.len() as f64;
    let w = counts.iter().map(|c| (c + 1.0) / (total + 2.0)).collect();
    Ok(PositionPrior(Tensor::new(first.shape().to_vec(), w)?))
}

/// Scales foreground by `w_i`, background by `1 - w_i` and renormalizes.
pub fn apply_position_prior(p_fcn: &Tensor, prior: &PositionPrior) -> Result<Tensor> {
    if p_fcn.rank() != 2 || p_fcn.shape()[0] != 2 {
        return Err(Error::InvalidArgument(format!(
            "position prior needs a [2 x N] map, got {:?}",
            p_fcn.shape()
        )));
    }
    let n = p_fcn.shape()[1];
    if prior.0.len() != n {
        return Err(Error::ShapeMismatch {
            expected: vec![n],
            actual: prior.0.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; 2 * n];
    for i in 0..n {
        let w = prior.0.data()[i];
        let bg = (1.0 - w) * p_fcn.data()[i];
        let fg = w * p_fcn.data()[n + i];
        let z = bg + fg;
        if z <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "pixel {i} has zero mass after the prior"
            )));
        }
        out[i] = bg / z;
        out[n + i] = fg / z;
    }
    Tensor::new(vec![2, n], out)
}

/// `ψ_u = Σ_u' w_u' ψ_u'`.
pub fn combine_unaries(unaries: &[UnaryField], weights: &[f64]) -> Result<UnaryField> {
    let first = unaries
        .first()
        .ok_or_else(|| Error::InvalidArgument("no unaries to combine".into()))?;
    if weights.len() != unaries.len() {
        return Err(Error::InvalidArgument(format!(
            "{} unaries but {} weights",
            unaries.len(),
            weights.len()
        )));
    }
    let mut acc = vec![0.0; first.0.len()];
    for (u, &w) in unaries.iter().zip(weights) {
        u.0.expect_shape(first.0.shape())?;
        for (a, &v) in acc.iter_mut().zip(u.0.data()) {
            *a += w * v;
        }
    }
    UnaryField::new(Tensor::new(first.0.shape().to_vec(), acc)?)
}

/// Maximum `|Σ_l q(l) - 1|` over pixels.
pub fn simplex_residual(q: &Tensor) -> f64 {
    let (labels, n) = (q.shape()[0], q.shape()[1]);
    (0..n)
        .map(|i| ((0..labels).map(|l| q.data()[l * n + i]).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn check_simplex(q: &Tensor) -> Result<()> {
    let (labels, n) = (q.shape()[0], q.shape()[1]);
    for i in 0..n {
        let mut total = 0.0;
        for l in 0..labels {
            let v = q.data()[l * n + i];
            if v < -SIMPLEX_TOL {
                return Err(Error::OffSimplex {
                    column: i,
                    residual: -v,
                });
            }
            total += v;
        }
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::OffSimplex {
                column: i,
                residual: (total - 1.0).abs(),
            });
        }
    }
    Ok(())
}

fn check_inputs(psi: &UnaryField, kernels: &KernelSet, params: &CrfParams) -> Result<()> {
    params.validate()?;
    if psi.labels() != params.labels() {
        return Err(Error::InvalidArgument(format!(
            "unaries have {} labels, compatibility {}",
            psi.labels(),
            params.labels()
        )));
    }
    if kernels.kernels.len() != params.kernel_weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} kernels but {} kernel weights",
            kernels.kernels.len(),
            params.kernel_weights.len()
        )));
    }
    let n = psi.pixels();
    for k in &kernels.kernels {
        k.expect_shape(&[n, n])?;
    }
    Ok(())
}

/// One mean-field update: message passing, re-weighting, compatibility
/// transform, unary addition and normalization.
pub fn meanfield_step(
    q: &Tensor,
    psi: &UnaryField,
    kernels: &KernelSet,
    params: &CrfParams,
    mode: MeanFieldMode,
) -> Result<Tensor> {
    check_inputs(psi, kernels, params)?;
    q.expect_shape(psi.0.shape())?;
    check_simplex(q)?;
    let (labels, n) = (psi.labels(), psi.pixels());

    // Pixel-major copy of q so each kernel row streams contiguously.
    let mut q_pix = vec![0.0; n * labels];
    for l in 0..labels {
        for j in 0..n {
            q_pix[j * labels + l] = q.data()[l * n + j];
        }
    }

    // q̌_i(l) = Σ_m w^(m) Σ_{j≠i} K^(m)_ij q_j(l)
    let mut reweighted = vec![0.0; n * labels];
    let mut message = vec![0.0; labels];
    for (kernel, &w) in kernels.kernels.iter().zip(&params.kernel_weights) {
        if w == 0.0 {
            continue;
        }
        let k = kernel.data();
        for i in 0..n {
            message.iter_mut().for_each(|m| *m = 0.0);
            let row = &k[i * n..(i + 1) * n];
            for (j, &kij) in row.iter().enumerate() {
                if j == i {
                    continue;
                }
                let qj = &q_pix[j * labels..(j + 1) * labels];
                for (m, &v) in message.iter_mut().zip(qj) {
                    *m += kij * v;
                }
            }
            for (r, m) in reweighted[i * labels..(i + 1) * labels].iter_mut().zip(&message) {
                *r += w * m;
            }
        }
    }

    let mu = params.compatibility.data();
    let mut logits = vec![0.0; labels * n];
    for i in 0..n {
        let checked = &reweighted[i * labels..(i + 1) * labels];
        for l in 0..labels {
            let compat: f64 = (0..labels).map(|lp| mu[l * labels + lp] * checked[lp]).sum();
            let psi_l = psi.0.data()[l * n + i];
            let unary = match mode {
                MeanFieldMode::Standard => -psi_l,
                MeanFieldMode::PaperLiteral => (-psi_l).exp(),
            };
            logits[l * n + i] = unary - compat;
        }
    }
    softmax(&Tensor::new(vec![labels, n], logits)?, 0)
}

/// `q_0 = softmax(-ψ_u)`.
pub fn meanfield_init(psi: &UnaryField) -> Result<Tensor> {
    softmax(&psi.0.scale(-1.0)?, 0)
}

/// Runs `iterations` mean-field steps from the unary initialization.
pub fn meanfield_infer(
    psi: &UnaryField,
    kernels: &KernelSet,
    params: &CrfParams,
    iterations: usize,
    mode: MeanFieldMode,
) -> Result<Tensor> {
    meanfield_infer_traced(psi, kernels, params, iterations, mode).map(|(q, _)| q)
}

/// As [`meanfield_infer`], also returning the simplex residual after each
/// iteration.
pub fn meanfield_infer_traced(
    psi: &UnaryField,
    kernels: &KernelSet,
    params: &CrfParams,
    iterations: usize,
    mode: MeanFieldMode,
) -> Result<(Tensor, Vec<f64>)> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("mean-field needs at least one iteration".into()));
    }
    check_inputs(psi, kernels, params)?;
    let mut q = meanfield_init(psi)?;
    let mut residuals = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        q = meanfield_step(&q, psi, kernels, params, mode)?;
        residuals.push(simplex_residual(&q));
    }
    Ok((q, residuals))
}
