//! Dense row-major `f64` tensors and the numeric kernels the networks need.
//!
//! Activations use `(batch, channels, height, width)`, convolution kernels
//! `(out_channels, in_channels, kh, kw)`. Broadcasting is limited to scalar
//! operands (every dimension equal to one).

mod conv;
pub(crate) mod gemm;

pub use conv::{
    avg_pool2d, avg_pool2d_backward, conv2d, conv2d_backward_input, conv2d_backward_kernel,
    global_avg_pool, global_avg_pool_backward, pad2d,
};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use gemm::{gemm, MatRef};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("expects {numel} elements, buffer has {}", data.len()),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Panics on an invalid shape; for shapes known to be valid by construction.
    pub fn full(shape: &[usize], value: f64) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(&[n], data).expect("empty vector")
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(&other.shape)
    }

    /// Normal entries with standard deviation `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            let z: f64 = rng.sample(StandardNormal);
            *v = z * std;
        }
        t
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = rng.gen_range(lo..hi);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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

    /// True when every dimension is one.
    pub fn is_scalar(&self) -> bool {
        self.shape.iter().all(|&d| d == 1)
    }

    pub fn item(&self) -> Option<f64> {
        self.is_scalar().then(|| self.data[0])
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "expected rank 4 (batch, channels, height, width)".into(),
            }),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "expected rank 2".into(),
            }),
        }
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        self.expect_same_shape(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Element-wise product; a scalar-shaped operand broadcasts.
    pub fn elementwise_mul(&self, other: &Tensor) -> Result<Self> {
        if self.shape == other.shape {
            return self.zip_map(other, "elementwise_mul", |a, b| a * b);
        }
        if let Some(s) = other.item() {
            return Ok(self.map(|a| a * s));
        }
        if let Some(s) = self.item() {
            return Ok(other.map(|b| s * b));
        }
        Err(self.mismatch(other, "elementwise_mul"))
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|a| a * s)
    }

    pub fn add_scalar(&self, s: f64) -> Self {
        self.map(|a| a + s)
    }

    pub fn relu(&self) -> Self {
        self.map(|a| if a > 0.0 { a } else { 0.0 })
    }

    /// `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Matrix product of `(m, k)` and `(k, n)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(self.mismatch(other, "matmul"));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            MatRef::row_major(&self.data, m, k),
            MatRef::row_major(&other.data, k, n),
            0.0,
            &mut out,
        );
        Self::new(&[m, n], out)
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(&[c, r], out)
    }

    /// Row-wise softmax of a `(rows, classes)` tensor.
    pub fn softmax_rows(&self) -> Result<Self> {
        let (rows, cols) = self.dims2()?;
        let mut out = self.data.clone();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Self::new(&self.shape, out)
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(self.mismatch(other, op))
        }
    }

    fn mismatch(&self, other: &Tensor, op: &'static str) -> Error {
        Error::ShapeMismatch {
            op,
            left: self.shape.clone(),
            right: other.shape.clone(),
        }
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "every tensor needs at least one dimension, all >= 1".into(),
        });
    }
    Ok(())
}

/// Per-term multiplier in a [`gated_sum`].
#[derive(Clone, Debug, PartialEq)]
pub enum Gate {
    Scalar(f64),
    /// Same shape as the gated term; entries are normally 0 or 1.
    Mask(Tensor),
}

impl Gate {
    fn at(&self, i: usize) -> f64 {
        match self {
            Gate::Scalar(s) => *s,
            Gate::Mask(m) => m.data[i],
        }
    }

    fn check(&self, term: &Tensor) -> Result<()> {
        match self {
            Gate::Scalar(_) => Ok(()),
            Gate::Mask(m) => m.expect_same_shape(term, "gated_sum"),
        }
    }
}

/// `sum_t gate_t * term_t`, evaluated element by element in term order.
///
/// A gate value of exactly 0 skips the term and exactly 1 adds it unscaled,
/// so `[(x, 1), (fx, 1)]` and `[(x, mask of ones), (fx, mask of ones)]`
/// produce bit-identical sums.
pub fn gated_sum(terms: &[(&Tensor, &Gate)]) -> Result<Tensor> {
    let first = terms.first().ok_or_else(|| Error::InvalidShape {
        shape: vec![],
        reason: "gated_sum needs at least one term".into(),
    })?;
    let shape = first.0.shape().to_vec();
    for (t, g) in terms {
        first.0.expect_same_shape(t, "gated_sum")?;
        g.check(t)?;
    }
    let mut out = vec![0.0; first.0.len()];
    for (t, g) in terms {
        for (i, acc) in out.iter_mut().enumerate() {
            let w = g.at(i);
            if w == 0.0 {
                continue;
            }
            *acc += if w == 1.0 { t.data[i] } else { w * t.data[i] };
        }
    }
    Tensor::new(&shape, out)
}

/// Gradient flowing into one term of a [`gated_sum`].
pub(crate) fn gated_term_grad(grad_out: &Tensor, gate: &Gate) -> Tensor {
    match gate {
        Gate::Scalar(s) => grad_out.scale(*s),
        Gate::Mask(m) => Tensor {
            shape: grad_out.shape.clone(),
            data: grad_out
                .data
                .iter()
                .zip(&m.data)
                .map(|(g, w)| g * w)
                .collect(),
        },
    }
}

/// Mean softmax cross-entropy over the batch. Returns `(loss, probabilities)`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (rows, cols) = logits.dims2()?;
    if labels.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            left: logits.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
        return Err(Error::Dataset(format!(
            "label {bad} out of range for {cols} classes"
        )));
    }
    let probs = logits.softmax_rows()?;
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        // log-sum-exp form keeps tiny probabilities finite
        let row = &logits.data()[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
    }
    Ok((loss / rows as f64, probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn construction_checks_invariants() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::new(&[], vec![]).is_err());
        assert_eq!(t(&[2, 3], &[0.0; 6]).len(), 6);
    }

    #[test]
    fn elementwise_mul_examples() {
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let b = Tensor::from_vec(vec![0.0, 1.0, 2.0]);
        assert_eq!(a.elementwise_mul(&b).unwrap().data(), &[0.0, 2.0, 6.0]);

        let x = t(&[2, 2], &[1.5, -2.0, 3.25, 4.0]);
        assert_eq!(x.elementwise_mul(&Tensor::ones(&[2, 2])).unwrap(), x);
        let zero = Tensor::zeros(&[1, 1]);
        let z = zero.elementwise_mul(&x).unwrap();
        assert_eq!(z.shape(), &[2, 2]);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn elementwise_mul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 2]);
        assert!(matches!(
            a.elementwise_mul(&b),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn softmax_cross_entropy_uniform_logits() {
        let logits = Tensor::zeros(&[2, 4]);
        let (loss, probs) = softmax_cross_entropy(&logits, &[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert!(probs.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        assert!(softmax_cross_entropy(&logits, &[4, 0]).is_err());
    }

    #[test]
    fn matmul_matches_hand_product() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[5.0, 6.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
        assert!(b.matmul(&a).is_err());
    }

    fn small_int_tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
        let n: usize = shape.iter().product();
        prop::collection::vec(-20i32..20, n)
            .prop_map(move |v| t(&shape, &v.into_iter().map(f64::from).collect::<Vec<_>>()))
    }

    proptest! {
        #[test]
        fn mul_commutative_and_associative(
            (a, b, c) in prop::collection::vec(1usize..4, 1..4).prop_flat_map(|s| {
                (small_int_tensor(s.clone()), small_int_tensor(s.clone()), small_int_tensor(s))
            })
        ) {
            prop_assert_eq!(
                a.elementwise_mul(&b).unwrap(), b.elementwise_mul(&a).unwrap());
            let left = a.elementwise_mul(&b).unwrap().elementwise_mul(&c).unwrap();
            let right = a.elementwise_mul(&b.elementwise_mul(&c).unwrap()).unwrap();
            prop_assert_eq!(left, right);
        }

        #[test]
        fn elementwise_output_shape_follows_inputs(shape in prop::collection::vec(1usize..5, 1..5)) {
            let a = Tensor::ones(&shape);
            prop_assert_eq!(a.elementwise_mul(&a).unwrap().shape().to_vec(), shape.clone());
            prop_assert_eq!(
                a.add(&a).unwrap().shape().to_vec(), shape.clone());
            prop_assert_eq!(
                a.relu().shape().to_vec(), shape.clone());
            prop_assert_eq!(
                a.elementwise_mul(&Tensor::scalar(2.0)).unwrap().shape().to_vec(), shape.clone());
        }
    }
}
