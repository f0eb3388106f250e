//! Dense row-major f64 tensors and the kernels the tape is built from.
//!
//! Every constructor and kernel rejects non-finite output, so a `Tensor`
//! observed anywhere in the crate holds only finite values.

use crate::error::{GradError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(GradError::NonFinite { op })
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(GradError::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        check_finite("Tensor::new", &data)?;
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor from a computed buffer, rejecting non-finite values in the name of `op`.
    pub(crate) fn computed(op: &'static str, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        check_finite(op, &data)?;
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; numel])
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(vec![], vec![value])
    }

    pub fn vector(values: &[f64]) -> Result<Self> {
        Tensor::new(vec![values.len()], values.to_vec())
    }

    /// Stacks equal-length rows into a `[rows, cols]` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(GradError::shape(
                    "Tensor::from_rows",
                    format!("row {i} has {} values, expected {cols}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), cols], data)
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(GradError::NonScalarLoss(self.shape.clone()))
        }
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(GradError::shape(op, format!("expected a matrix, got {other:?}"))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape.last().copied().unwrap_or(1);
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(GradError::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Self> {
        Tensor::computed(op, self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(GradError::shape(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::computed(op, self.shape.clone(), data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Result<Self> {
        self.map("scale", |v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Largest absolute entry, 0 for an empty tensor.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// `a @ b` for `[m, k] x [k, n]`.
    pub fn matmul(&self, b: &Tensor) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = b.dims2("matmul")?;
        if k != k2 {
            return Err(GradError::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape, b.shape),
            ));
        }
        let out = gemm(m, k, n, &self.data, (k, 1), &b.data, (n, 1));
        Tensor::computed("matmul", vec![m, n], out)
    }

    /// `a^T @ b` for `[k, m] x [k, n]`.
    pub fn matmul_tn(&self, b: &Tensor) -> Result<Self> {
        let (k, m) = self.dims2("matmul_tn")?;
        let (k2, n) = b.dims2("matmul_tn")?;
        if k != k2 {
            return Err(GradError::shape(
                "matmul_tn",
                format!("{:?}^T x {:?}", self.shape, b.shape),
            ));
        }
        let out = gemm(m, k, n, &self.data, (1, m), &b.data, (n, 1));
        Tensor::computed("matmul_tn", vec![m, n], out)
    }

    /// `a @ b^T` for `[m, k] x [n, k]`.
    pub fn matmul_nt(&self, b: &Tensor) -> Result<Self> {
        let (m, k) = self.dims2("matmul_nt")?;
        let (n, k2) = b.dims2("matmul_nt")?;
        if k != k2 {
            return Err(GradError::shape(
                "matmul_nt",
                format!("{:?} x {:?}^T", self.shape, b.shape),
            ));
        }
        let out = gemm(m, k, n, &self.data, (k, 1), &b.data, (1, k));
        Tensor::computed("matmul_nt", vec![m, n], out)
    }

    /// Adds a `[n]` bias to every row of a `[m, n]` matrix.
    pub fn add_row(&self, bias: &Tensor) -> Result<Self> {
        let (m, n) = self.dims2("add_row")?;
        if bias.shape != [n] {
            return Err(GradError::shape(
                "add_row",
                format!("bias {:?} for matrix {:?}", bias.shape, self.shape),
            ));
        }
        let mut out = self.data.clone();
        for row in out.chunks_exact_mut(n) {
            for (o, b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Tensor::computed("add_row", vec![m, n], out)
    }

    /// Column sums of a `[m, n]` matrix, shape `[n]`.
    pub fn sum_rows(&self) -> Result<Self> {
        let (_, n) = self.dims2("sum_rows")?;
        let mut out = vec![0.0; n];
        for row in self.data.chunks_exact(n.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Tensor::computed("sum_rows", vec![n], out)
    }
}

/// Row-major product through `matrixmultiply`; strides are `(row, col)` in elements.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: strides describe in-bounds views of `a` ([m, k]), `b` ([k, n]) and `c` ([m, n]),
    // all of which were shape-checked by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shape_and_non_finite() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::NAN]),
            Err(GradError::NonFinite { .. })
        ));
        assert!(Tensor::vector(&[1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn transposed_products_agree_with_plain_loops() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let ab = a.matmul(&b).unwrap();
        assert_eq!(ab.data(), &[58., 64., 139., 154.]);
        // a^T (3x2) @ a (2x3)
        let ata = a.matmul_tn(&a).unwrap();
        assert_eq!(ata.shape(), &[3, 3]);
        assert_eq!(ata.data()[0], 1. + 16.);
        assert_eq!(ata.data()[1], 2. + 20.);
        // a @ a^T
        let aat = a.matmul_nt(&a).unwrap();
        assert_eq!(aat.data(), &[14., 32., 32., 77.]);
    }

    #[test]
    fn overflow_is_reported() {
        let a = Tensor::vector(&[f64::MAX]).unwrap();
        assert!(a.scale(10.0).is_err());
    }
}
