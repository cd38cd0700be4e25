use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major `f64` tensor.
///
/// Almost everything in the model is a matrix (`[rows, cols]`). Scalars are
/// rank-0 (`[]`) tensors holding a single value.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("tensor", "ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
            requires_grad: false,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Self::zeros(other.shape.clone())
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let cols = self.cols();
        self.data[i * cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_vecs(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.is_matrix() {
            Ok((self.shape[0], self.shape[1]))
        } else {
            Err(Error::dim(
                op,
                format!("expected a matrix, got shape {:?}", self.shape),
            ))
        }
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} differ", self.shape, other.shape),
            ))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            requires_grad: false,
        })
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.expect_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::matrix(c, r, out)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = self.expect_matrix("matmul")?;
        let (k2, m) = other.expect_matrix("matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions {} and {} differ", k, k2),
            ));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b = &other.data[p * m..(p + 1) * m];
                for (o, &bv) in row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Tensor::matrix(n, m, out)
    }

    /// Column-wise concatenation `[self | other]`.
    pub fn concat_cols(&self, other: &Tensor) -> Result<Tensor> {
        let (r, c1) = self.expect_matrix("concat")?;
        let (r2, c2) = other.expect_matrix("concat")?;
        if r != r2 {
            return Err(Error::dim(
                "concat",
                format!("row counts {} and {} differ", r, r2),
            ));
        }
        let mut out = Vec::with_capacity(r * (c1 + c2));
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c1..(i + 1) * c1]);
            out.extend_from_slice(&other.data[i * c2..(i + 1) * c2]);
        }
        Tensor::matrix(r, c1 + c2, out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}
