//! Dense row-major `f64` arrays, elementwise activations, reductions and the
//! central-difference gradient oracle that every loss is checked against.
//!
//! A [`Tensor`] always satisfies `product(shape) == data.len()` and holds only
//! finite values. The empty shape `[]` is a scalar.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Floor of the relative-error denominator `max(|a|, |n|, floor)`.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor", into = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Wire form of the `tjson` document.
#[derive(Serialize, Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl From<Tensor> for RawTensor {
    fn from(t: Tensor) -> Self {
        RawTensor {
            shape: t.shape,
            data: t.data,
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape { len: data.len(), shape });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(value.is_finite());
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![], vec![value])
    }

    /// One-dimensional tensor.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Builds a `[rows × cols]` tensor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() || index.iter().zip(&self.shape).any(|(i, e)| i >= e) {
            return Err(Error::InvalidArgument(format!(
                "index {index:?} out of bounds for shape {:?}",
                self.shape
            )));
        }
        Ok(index.iter().zip(self.strides()).map(|(i, s)| i * s).sum())
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_shape(other.shape())?;
        Self::new(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn scale(&self, c: f64) -> Result<Self> {
        self.map(|v| c * v)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_shape(other.shape())?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn expect_shape(&self, expected: &[usize]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::ShapeMismatch {
                expected: expected.to_vec(),
                actual: self.shape.clone(),
            });
        }
        Ok(())
    }

    /// Copy with one element replaced; used by perturbation oracles.
    pub fn with_element(&self, flat: usize, value: f64) -> Self {
        let mut out = self.clone();
        out.data[flat] = value;
        out
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn to_tjson(&self) -> String {
        serde_json::to_string(self).expect("tensor serialization is infallible")
    }

    pub fn from_tjson(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(t: &Tensor) -> Tensor {
    Tensor::from_parts_unchecked(t.shape.clone(), t.data.iter().map(|&x| sigmoid_scalar(x)).collect())
}

/// Splits `shape` around `axis` into (outer, extent, inner) counts.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::AxisOutOfRange {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Log-sum-exp stabilized softmax along `axis`.
pub fn softmax(t: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, extent, inner) = axis_split(&t.shape, axis)?;
    let mut out = vec![0.0; t.len()];
    let mut buf = vec![0.0; extent];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * extent + k) * inner + i;
            let max = (0..extent).map(|k| t.data[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (k, slot) in buf.iter_mut().enumerate() {
                *slot = (t.data[at(k)] - max).exp();
                total += *slot;
            }
            for (k, v) in buf.iter().enumerate() {
                out[at(k)] = v / total;
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(t.shape.clone(), out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// Reduces over `axis` (dropping it) or over everything into a scalar.
pub fn reduce(t: &Tensor, op: ReduceOp, axis: Option<usize>) -> Result<Tensor> {
    let fold = |values: &mut dyn Iterator<Item = f64>, count: usize| -> Result<f64> {
        match op {
            ReduceOp::Sum => Ok(values.sum()),
            ReduceOp::Mean => Ok(values.sum::<f64>() / count as f64),
            ReduceOp::Max => values.reduce(f64::max).ok_or(Error::EmptyReduction),
        }
    };
    match axis {
        None => {
            let v = fold(&mut t.data.iter().copied(), t.len())?;
            Tensor::scalar(v)
        }
        Some(axis) => {
            let (outer, extent, inner) = axis_split(&t.shape, axis)?;
            let mut shape = t.shape.clone();
            shape.remove(axis);
            let mut out = Vec::with_capacity(outer * inner);
            for o in 0..outer {
                for i in 0..inner {
                    let mut it = (0..extent).map(|k| t.data[(o * extent + k) * inner + i]);
                    out.push(fold(&mut it, extent)?);
                }
            }
            Tensor::new(shape, out)
        }
    }
}

/// Central finite-difference gradient of a scalar function.
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let up = f(&probe);
        probe.data[i] = orig - h;
        let down = f(&probe);
        probe.data[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape.clone(), grad)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_err < rel_tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares an analytic gradient with central differences of `f` at `x`.
pub fn grad_check<F>(f: F, analytic: &Tensor, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> f64,
{
    analytic.expect_shape(x.shape())?;
    let numeric = finite_diff_grad(f, x, h)?;
    let mut report = GradCheckReport {
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        entries: Vec::with_capacity(x.len()),
    };
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        report.max_abs_err = report.max_abs_err.max((a - n).abs());
        report.max_rel_err = report.max_rel_err.max(relative_error(a, n));
        report.entries.push(GradCheckEntry {
            analytic: a,
            numeric: n,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_shapes_and_non_finite() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert_eq!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite { index: 1 })
        );
    }

    #[test]
    fn sigmoid_examples() {
        let t = Tensor::vector(vec![0.0, -2.0, 3.0, -3.0]).unwrap();
        let s = sigmoid(&t);
        assert_eq!(s.data()[0], 0.5);
        // -2 logit is the 0.12 probability cut used before NMS.
        assert_abs_diff_eq!(s.data()[1], 0.119_202_922_022_118, epsilon = 1e-12);
        assert_abs_diff_eq!(s.data()[2], 0.952_574_126_822_433_4, epsilon = 1e-12);
        assert_abs_diff_eq!(s.data()[3], 0.047_425_873_177_566_78, epsilon = 1e-12);
    }

    #[test]
    fn sigmoid_series_cross_check() {
        // exp(-3) from its Taylor series, independent of f64::exp.
        let mut term = 1.0;
        let mut e = 1.0;
        for k in 1..60 {
            term *= -3.0 / k as f64;
            e += term;
        }
        assert_abs_diff_eq!(sigmoid_scalar(3.0), 1.0 / (1.0 + e), epsilon = 1e-14);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::vector(vec![0.0, 0.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::vector(vec![1000.0, 0.0]).unwrap(), 0).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] < 1e-300);
        let s = softmax(&Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap(), 0).unwrap();
        for (got, want) in s.data().iter().zip([
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_64,
            0.665_240_955_774_821_9,
        ]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_along_first_axis_of_matrix() {
        let t = Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, -1.0]]).unwrap();
        let s = softmax(&t, 0).unwrap();
        assert_eq!(s.get(&[0, 0]).unwrap(), 0.5);
        assert_abs_diff_eq!(s.get(&[0, 1]).unwrap() + s.get(&[1, 1]).unwrap(), 1.0, epsilon = 1e-15);
        assert!(softmax(&t, 2).is_err());
    }

    #[test]
    fn reduce_examples() {
        let t = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(reduce(&t, ReduceOp::Sum, None).unwrap().data(), &[6.0]);
        let t = Tensor::vector(vec![-1.0, 4.0, 2.0]).unwrap();
        assert_eq!(reduce(&t, ReduceOp::Max, None).unwrap().data(), &[4.0]);
        let fives = Tensor::filled(&[2, 3, 3], 5.0);
        let m = reduce(&fives, ReduceOp::Mean, Some(0)).unwrap();
        assert_eq!(m.shape(), &[3, 3]);
        assert!(m.data().iter().all(|&v| v == 5.0));
        assert!(reduce(&fives, ReduceOp::Max, Some(3)).is_err());
    }

    #[test]
    fn finite_diff_examples() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-5).unwrap();
        assert_abs_diff_eq!(g.data()[0], 2.0, epsilon = 1e-6);
        assert_abs_diff_eq!(g.data()[1], 4.0, epsilon = 1e-6);
        let g = finite_diff_grad(|_| 7.0, &x, 1e-5).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
        assert!(finite_diff_grad(|t| t.data()[0].ln() - 1.0 / 0.0, &x, 1e-5).is_err());
        assert!(finite_diff_grad(|_| 0.0, &x, 0.0).is_err());
    }

    #[test]
    fn tjson_roundtrip_and_validation() {
        let t = Tensor::from_rows(&[vec![1.0, 2.5], vec![-3.0, 0.0]]).unwrap();
        let text = t.to_tjson();
        assert_eq!(text, r#"{"shape":[2,2],"data":[1.0,2.5,-3.0,0.0]}"#);
        assert_eq!(Tensor::from_tjson(&text).unwrap(), t);
        assert!(Tensor::from_tjson(r#"{"shape":[3],"data":[1.0]}"#).is_err());
    }

    proptest! {
        #[test]
        fn softmax_columns_normalized(values in proptest::collection::vec(-50.0f64..50.0, 12)) {
            let t = Tensor::new(vec![3, 4], values).unwrap();
            let s = softmax(&t, 0).unwrap();
            for col in 0..4 {
                let total: f64 = (0..3).map(|r| s.get(&[r, col]).unwrap()).sum();
                prop_assert!((total - 1.0).abs() <= 1e-12);
                let arg_in = (0..3).max_by(|&a, &b| t.get(&[a, col]).unwrap().total_cmp(&t.get(&[b, col]).unwrap())).unwrap();
                let arg_out = (0..3).max_by(|&a, &b| s.get(&[a, col]).unwrap().total_cmp(&s.get(&[b, col]).unwrap())).unwrap();
                prop_assert_eq!(arg_in, arg_out);
            }
        }

        #[test]
        fn sigmoid_is_odd_around_half(x in -40.0f64..40.0) {
            prop_assert!((sigmoid_scalar(x) + sigmoid_scalar(-x) - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn quadratic_form_gradient(a in proptest::collection::vec(-3.0f64..3.0, 9), x in proptest::collection::vec(-2.0f64..2.0, 3)) {
            // f(x) = x^T A x, grad = (A + A^T) x
            let f = |t: &Tensor| {
                let v = t.data();
                (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| v[i] * a[i * 3 + j] * v[j]).sum::<f64>()
            };
            let xt = Tensor::vector(x.clone()).unwrap();
            let analytic: Vec<f64> = (0..3).map(|i| (0..3).map(|j| (a[i * 3 + j] + a[j * 3 + i]) * x[j]).sum()).collect();
            let report = grad_check(f, &Tensor::vector(analytic).unwrap(), &xt, 1e-5).unwrap();
            prop_assert!(report.entries.len() == 3);
            for e in &report.entries {
                prop_assert!((e.analytic - e.numeric).abs() <= 1e-6 * e.analytic.abs().max(1.0));
            }
        }

        #[test]
        fn ops_are_bit_reproducible(values in proptest::collection::vec(-5.0f64..5.0, 6)) {
            let t = Tensor::new(vec![2, 3], values).unwrap();
            prop_assert_eq!(softmax(&t, 1).unwrap(), softmax(&t, 1).unwrap());
            prop_assert_eq!(sigmoid(&t), sigmoid(&t));
        }
    }
}
