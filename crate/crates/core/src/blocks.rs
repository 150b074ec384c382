//! Forward algebra for the squeeze-and-excitation residual block and the
//! dual-path connection.
//!
//! Feature volumes are `[K × S × H × W]` tensors (channel-major). Residual
//! branches are caller-supplied closures; [`ChannelMix`] is a small linear
//! branch with a known Jacobian, used to check the block's chain rule.

use crate::error::{Error, Result};
use crate::tensor::{sigmoid_scalar, Tensor};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
pub const DEFAULT_REDUCTION: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume(Tensor);

impl FeatureVolume {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 4 {
            return Err(Error::InvalidArgument(format!(
                "feature volume must be [K x S x H x W], got {:?}",
                data.shape()
            )));
        }
        Ok(Self(data))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    /// Voxels per channel.
    pub fn spatial_len(&self) -> usize {
        self.0.len() / self.channels()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    fn len_total(&self) -> usize {
        self.0.len()
    }

    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.spatial_len();
        &self.0.data()[k * n..(k + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeWeights {
    /// `[K/r × K]`
    pub w1: Tensor,
    /// `[K × K/r]`
    pub w2: Tensor,
    pub reduction: usize,
    pub leaky_slope: f64,
}

impl SeWeights {
    pub fn new(w1: Tensor, w2: Tensor, reduction: usize, leaky_slope: f64) -> Result<Self> {
        if w1.rank() != 2 || w2.rank() != 2 {
            return Err(Error::InvalidArgument("excitation weights must be matrices".into()));
        }
        let (hidden, k) = (w1.shape()[0], w1.shape()[1]);
        if reduction == 0 || k % reduction != 0 || hidden != k / reduction {
            return Err(Error::InvalidArgument(format!(
                "W1 is {hidden}x{k}, inconsistent with reduction {reduction}"
            )));
        }
        w2.expect_shape(&[k, hidden])?;
        if !(leaky_slope > 0.0 && leaky_slope < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "leaky slope {leaky_slope} not in (0, 1)"
            )));
        }
        Ok(Self {
            w1,
            w2,
            reduction,
            leaky_slope,
        })
    }

    pub fn channels(&self) -> usize {
        self.w1.shape()[1]
    }

    fn hidden(&self) -> usize {
        self.w1.shape()[0]
    }
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

fn leaky_relu_grad(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        slope
    }
}

fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    let cols = m.shape()[1];
    m.data()
        .chunks_exact(cols)
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn matvec_t(m: &Tensor, v: &[f64]) -> Vec<f64> {
    let cols = m.shape()[1];
    let mut out = vec![0.0; cols];
    for (row, &s) in m.data().chunks_exact(cols).zip(v) {
        for (o, &a) in out.iter_mut().zip(row) {
            *o += a * s;
        }
    }
    out
}

/// Global average pool per channel.
pub fn squeeze(xr: &FeatureVolume) -> Tensor {
    let n = xr.spatial_len() as f64;
    let z = (0..xr.channels())
        .map(|k| xr.channel(k).iter().sum::<f64>() / n)
        .collect();
    Tensor::from_parts_unchecked(vec![xr.channels()], z)
}

/// `s = sigmoid(W2 · LeakyReLU(W1 · z))`.
pub fn excite(z: &Tensor, w: &SeWeights) -> Result<Tensor> {
    z.expect_shape(&[w.channels()])?;
    let hidden: Vec<f64> = matvec(&w.w1, z.data())
        .into_iter()
        .map(|h| leaky_relu(h, w.leaky_slope))
        .collect();
    let s = matvec(&w.w2, &hidden).into_iter().map(sigmoid_scalar).collect();
    Tensor::new(vec![w.channels()], s)
}

/// `Y = LeakyReLU(s ⊙ F(X) + X)` with `s = excite(squeeze(F(X)))`.
pub fn se_block_forward<F>(x: &FeatureVolume, residual: F, w: &SeWeights) -> Result<FeatureVolume>
where
    F: Fn(&FeatureVolume) -> Result<FeatureVolume>,
{
    if x.channels() != w.channels() {
        return Err(Error::InvalidArgument(format!(
            "volume has {} channels, weights expect {}",
            x.channels(),
            w.channels()
        )));
    }
    let xr = residual(x)?;
    xr.tensor().expect_shape(x.tensor().shape())?;
    let s = excite(&squeeze(&xr), w)?;
    let n = x.spatial_len();
    let y: Vec<f64> = (0..x.len_total())
        .map(|i| {
            let k = i / n;
            leaky_relu(s.data()[k] * xr.0.data()[i] + x.0.data()[i], w.leaky_slope)
        })
        .collect();
    FeatureVolume::new(Tensor::new(x.tensor().shape().to_vec(), y)?)
}

/// Linear residual branch mixing channels voxel-wise: `X^r_k = Σ_j A_kj X_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMix {
    pub matrix: Tensor,
}

impl ChannelMix {
    pub fn forward(&self, x: &FeatureVolume) -> Result<FeatureVolume> {
        let k = x.channels();
        self.matrix.expect_shape(&[k, k])?;
        let n = x.spatial_len();
        let mut out = vec![0.0; k * n];
        for row in 0..k {
            for col in 0..k {
                let a = self.matrix.data()[row * k + col];
                for (o, &v) in out[row * n..(row + 1) * n].iter_mut().zip(x.channel(col)) {
                    *o += a * v;
                }
            }
        }
        FeatureVolume::new(Tensor::new(x.tensor().shape().to_vec(), out)?)
    }

    /// Vector-Jacobian product: `Aᵀ` applied voxel-wise.
    fn vjp(&self, upstream: &[f64], k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; k * n];
        for row in 0..k {
            for col in 0..k {
                let a = self.matrix.data()[row * k + col];
                for v in 0..n {
                    out[col * n + v] += a * upstream[row * n + v];
                }
            }
        }
        out
    }
}

/// Gradient of `Σ upstream ⊙ se_block_forward(x, mix, w)` w.r.t. `x`.
pub fn se_block_input_grad(x: &FeatureVolume, mix: &ChannelMix, w: &SeWeights, upstream: &Tensor) -> Result<Tensor> {
    upstream.expect_shape(x.tensor().shape())?;
    let (k, n) = (x.channels(), x.spatial_len());
    let xr = mix.forward(x)?;
    let z = squeeze(&xr);
    let h = matvec(&w.w1, z.data());
    let a: Vec<f64> = h.iter().map(|&v| leaky_relu(v, w.leaky_slope)).collect();
    let s: Vec<f64> = matvec(&w.w2, &a).into_iter().map(sigmoid_scalar).collect();

    let mut d_pre = vec![0.0; k * n];
    let mut d_s = vec![0.0; k];
    for c in 0..k {
        for v in 0..n {
            let i = c * n + v;
            let pre = s[c] * xr.0.data()[i] + x.0.data()[i];
            d_pre[i] = upstream.data()[i] * leaky_relu_grad(pre, w.leaky_slope);
            d_s[c] += d_pre[i] * xr.0.data()[i];
        }
    }
    let d_o: Vec<f64> = d_s.iter().zip(&s).map(|(g, s)| g * s * (1.0 - s)).collect();
    let d_a = matvec_t(&w.w2, &d_o);
    let d_h: Vec<f64> = d_a
        .iter()
        .zip(&h)
        .map(|(g, &hv)| g * leaky_relu_grad(hv, w.leaky_slope))
        .collect();
    debug_assert_eq!(d_h.len(), w.hidden());
    let d_z = matvec_t(&w.w1, &d_h);

    let mut d_xr = vec![0.0; k * n];
    for c in 0..k {
        for v in 0..n {
            d_xr[c * n + v] = d_pre[c * n + v] * s[c] + d_z[c] / n as f64;
        }
    }
    let from_branch = mix.vjp(&d_xr, k, n);
    let grad = d_pre.iter().zip(&from_branch).map(|(a, b)| a + b).collect();
    Tensor::new(x.tensor().shape().to_vec(), grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Self::Identity => x,
            Self::Relu => x.max(0.0),
            Self::LeakyRelu(slope) => leaky_relu(x, slope),
        }
    }
}

/// `G([x[:d], F(x)[:d], F(x)[d:] + x[d:]])` along the channel axis.
///
/// `x` and `fx` are channel-major with identical trailing extents and equal
/// channel counts.
pub fn dual_path_forward(x: &Tensor, fx: &Tensor, d: usize, activation: Activation) -> Result<Tensor> {
    if x.rank() == 0 {
        return Err(Error::InvalidArgument("dual path needs a channel axis".into()));
    }
    let c = x.shape()[0];
    if fx.rank() == 0 || fx.shape()[0] != c {
        return Err(Error::InvalidArgument(format!(
            "residual part needs equal channels, got x {:?} and F(x) {:?}",
            x.shape(),
            fx.shape()
        )));
    }
    fx.expect_shape(x.shape())?;
    if d > c {
        return Err(Error::InvalidArgument(format!("d = {d} exceeds {c} channels")));
    }
    let n = x.len() / c;
    let (xd, fd) = (x.data(), fx.data());
    let mut out = Vec::with_capacity((c + d) * n);
    out.extend(xd[..d * n].iter().map(|&v| activation.apply(v)));
    out.extend(fd[..d * n].iter().map(|&v| activation.apply(v)));
    out.extend(
        fd[d * n..]
            .iter()
            .zip(&xd[d * n..])
            .map(|(&f, &v)| activation.apply(f + v)),
    );
    let mut shape = x.shape().to_vec();
    shape[0] = c + d;
    Tensor::new(shape, out)
}
