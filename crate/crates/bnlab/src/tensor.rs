//! Minimal dense tensor arithmetic.
//!
//! Row-major, batch-first `f64` storage. A 2-D tensor `[m, d]` holds `m`
//! examples of `d` features; feature maps use `[m, c, p, q]`. There is no
//! autodiff here; gradients are hand-written in the layers that need them.
//!
//! Broadcasting is deliberately limited to "length-`d` vector across the rows
//! of an `[m, d]` matrix" so that shape errors stay loud.

use crate::error::{Error, Result};

/// Dense row-major tensor of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Builds a tensor from raw data, checking that the element count matches.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::dim(
                "from_vec",
                format!("shape {shape:?} needs {expect} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// 1-D tensor from a vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// 2-D tensor from rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(m * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::dim(
                    "from_rows",
                    format!("row length {} != {}", r.len(), d),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            shape: vec![m, d],
            data,
        })
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    /// Borrow row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.shape[1];
        &self.data[i * d..(i + 1) * d]
    }

    /// Copy of column `j` of a 2-D tensor.
    pub fn col(&self, j: usize) -> Vec<f64> {
        let d = self.shape[1];
        self.data.iter().skip(j).step_by(d).copied().collect()
    }

    /// Extracts the given rows into a new `[k, d]` tensor.
    pub fn take_rows(&self, indices: &[usize]) -> Tensor {
        let d = self.shape[1];
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![indices.len(), d],
            data,
        }
    }

    fn check_matrix(&self, op: &'static str) -> Result<()> {
        if self.ndim() != 2 {
            return Err(Error::dim(op, format!("expected 2-D, got {:?}", self.shape)));
        }
        Ok(())
    }

    /// Errors if any element is NaN or infinite.
    pub fn ensure_finite(&self, context: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context))
        }
    }

    /// Standard matrix product `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.check_matrix("matmul")?;
        other.check_matrix("matmul")?;
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::dim2("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let crow = &mut out[i * n..(i + 1) * n];
            for (kk, &aik) in arow.iter().enumerate() {
                let brow = &other.data[kk * n..(kk + 1) * n];
                for (c, &b) in crow.iter_mut().zip(brow) {
                    *c += aik * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor {
            shape: vec![n, m],
            data: out,
        }
    }

    /// Per-column mean of an `[m, d]` tensor: `out[j] = (1/m) sum_i a[i, j]`.
    pub fn reduce_mean_axis0(&self) -> Result<Tensor> {
        let sums = self.reduce_sum_axis0()?;
        let m = self.shape[0] as f64;
        Ok(sums.map(|v| v / m))
    }

    /// Per-column sum of an `[m, d]` tensor.
    pub fn reduce_sum_axis0(&self) -> Result<Tensor> {
        self.check_matrix("reduce_sum_axis0")?;
        let (m, d) = (self.shape[0], self.shape[1]);
        if m == 0 {
            return Err(Error::EmptyBatch("reduce_sum_axis0"));
        }
        let mut out = vec![0.0; d];
        for row in self.data.chunks_exact(d) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Ok(Tensor::vector(out))
    }

    fn zip_same_shape(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::dim2(op, &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same_shape(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same_shape(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same_shape(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same_shape(other, "div", |a, b| a / b)
    }

    fn zip_row_broadcast(
        &self,
        v: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.check_matrix(op)?;
        if v.ndim() != 1 || v.len() != self.shape[1] {
            return Err(Error::dim2(op, &self.shape, &v.shape));
        }
        let d = self.shape[1];
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(d) {
            data.extend(row.iter().zip(&v.data).map(|(&a, &b)| f(a, b)));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Adds a length-`d` vector to every row of an `[m, d]` tensor.
    pub fn add_row(&self, v: &Tensor) -> Result<Tensor> {
        self.zip_row_broadcast(v, "add_row", |a, b| a + b)
    }

    pub fn sub_row(&self, v: &Tensor) -> Result<Tensor> {
        self.zip_row_broadcast(v, "sub_row", |a, b| a - b)
    }

    pub fn mul_row(&self, v: &Tensor) -> Result<Tensor> {
        self.zip_row_broadcast(v, "mul_row", |a, b| a * b)
    }

    pub fn div_row(&self, v: &Tensor) -> Result<Tensor> {
        self.zip_row_broadcast(v, "div_row", |a, b| a / b)
    }

    /// Applies a scalar map to every element.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.map(|v| v + s)
    }

    pub fn sqrt(&self) -> Tensor {
        self.map(f64::sqrt)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// In-place `self += s * other`. Used by the optimizer; everything else
    /// treats tensors as immutable.
    pub fn add_scaled_in_place(&mut self, s: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim2("add_scaled_in_place", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// In-place `self = s * self`.
    pub fn scale_in_place(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let eye = t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let a = t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(eye.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let a = t2(&[vec![1.0, 2.0]]);
        let b = t2(&[vec![3.0], vec![4.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let z = Tensor::zeros(&[2, 2]);
        let a = t2(&[vec![5.0, -1.0, 2.0], vec![0.5, 9.0, 7.0]]);
        let c = z.matmul(&a).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn mean_axis0_hand_arithmetic() {
        let a = t2(&[vec![1.0], vec![3.0]]);
        assert_eq!(a.reduce_mean_axis0().unwrap().data(), &[2.0]);
    }

    #[test]
    fn mean_axis0_single_row_is_identity() {
        let a = t2(&[vec![4.0, -2.5, 0.0]]);
        assert_eq!(a.reduce_mean_axis0().unwrap().data(), &[4.0, -2.5, 0.0]);
    }

    #[test]
    fn mean_axis0_constant_columns() {
        let a = t2(&[vec![1.0, 2.0], vec![1.0, 2.0]]);
        assert_eq!(a.reduce_mean_axis0().unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn mean_axis0_empty_batch_errors() {
        let a = Tensor::zeros(&[0, 3]);
        assert!(matches!(
            a.reduce_mean_axis0(),
            Err(Error::EmptyBatch(_))
        ));
    }

    #[test]
    fn broadcast_add() {
        let a = t2(&[vec![1.0, 1.0]]);
        let v = Tensor::vector(vec![1.0, 2.0]);
        assert_eq!(a.add_row(&v).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn broadcast_rejects_wrong_length() {
        let a = Tensor::zeros(&[2, 3]);
        let v = Tensor::vector(vec![1.0, 2.0]);
        assert!(matches!(a.add_row(&v), Err(Error::Dim { .. })));
    }

    #[test]
    fn mul_by_one_is_identity() {
        let a = t2(&[vec![1.5, -2.0], vec![0.0, 7.0]]);
        let ones = Tensor::filled(&[2, 2], 1.0);
        assert_eq!(a.mul(&ones).unwrap(), a);
    }

    #[test]
    fn sqrt_perfect_square() {
        let a = t2(&[vec![4.0]]);
        assert_eq!(a.sqrt().data(), &[2.0]);
    }

    #[test]
    fn ensure_finite_catches_nan() {
        let a = Tensor::vector(vec![1.0, f64::NAN]);
        assert!(matches!(
            a.ensure_finite("test"),
            Err(Error::NonFinite("test"))
        ));
    }

    fn small_matrix(m: usize, n: usize) -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(-10.0f64..10.0, m * n)
            .prop_map(move |data| Tensor::from_vec(&[m, n], data).unwrap())
    }

    fn max_rel_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
            .fold(0.0, f64::max)
    }

    proptest! {
        #[test]
        fn matmul_associative(
            a in small_matrix(3, 4),
            b in small_matrix(4, 2),
            c in small_matrix(2, 5),
        ) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            prop_assert!(max_rel_diff(&left, &right) < 1e-12);
        }

        #[test]
        fn mean_of_constant_recovers_it(c in -100.0f64..100.0, m in 1usize..20, d in 1usize..8) {
            let a = Tensor::filled(&[m, d], c);
            let mean = a.reduce_mean_axis0().unwrap();
            // summation roundoff allows a few ulps of drift
            prop_assert!(mean.data().iter().all(|&v| (v - c).abs() <= 1e-13 * c.abs().max(1.0)));
        }

        #[test]
        fn broadcast_add_commutes_with_mean(
            a in small_matrix(5, 3),
            v in proptest::collection::vec(-10.0f64..10.0, 3),
        ) {
            let v = Tensor::vector(v);
            let lhs = a.add_row(&v).unwrap().reduce_mean_axis0().unwrap();
            let rhs = a.reduce_mean_axis0().unwrap().add(&v).unwrap();
            prop_assert!(max_rel_diff(&lhs, &rhs) < 1e-12);
        }
    }
}
