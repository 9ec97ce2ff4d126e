use crate::error::{Error, Result};

/// Dense row-major `f64` buffer with a shape. Only the handful of 1D/2D
/// operations the attention network needs are provided.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor { shape: vec![rows, cols], data }
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

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() > 1 {
            self.shape[1]
        } else {
            1
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Dimension(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · rhs`
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let (n, k, m) = (self.rows(), self.cols(), rhs.cols());
        debug_assert_eq!(k, rhs.rows());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let o = &mut out[i * m..(i + 1) * m];
            for (p, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in o.iter_mut().zip(rhs.row(p)) {
                    *o += a * b;
                }
            }
        }
        Tensor { shape: vec![n, m], data: out }
    }

    /// `selfᵀ · rhs`
    pub fn t_matmul(&self, rhs: &Tensor) -> Tensor {
        let (k, n, m) = (self.rows(), self.cols(), rhs.cols());
        debug_assert_eq!(k, rhs.rows());
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let b = rhs.row(p);
            for (i, &a) in self.row(p).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out[i * m..(i + 1) * m].iter_mut().zip(b) {
                    *o += a * b;
                }
            }
        }
        Tensor { shape: vec![n, m], data: out }
    }

    /// `self · rhsᵀ`
    pub fn matmul_t(&self, rhs: &Tensor) -> Tensor {
        let (n, m) = (self.rows(), rhs.rows());
        debug_assert_eq!(self.cols(), rhs.cols());
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let a = self.row(i);
            for j in 0..m {
                out.push(a.iter().zip(rhs.row(j)).map(|(x, y)| x * y).sum());
            }
        }
        Tensor { shape: vec![n, m], data: out }
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_row_bias(&mut self, bias: &Tensor) {
        let c = self.cols();
        debug_assert_eq!(bias.len(), c);
        for row in self.data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
    }

    /// Column sums, i.e. the gradient of a row-broadcast bias.
    pub fn sum_rows(&self) -> Tensor {
        let c = self.cols();
        let mut out = vec![0.0; c];
        for row in self.data.chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Tensor { shape: vec![c], data: out }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// Rows `start..start+count` as a new tensor.
    pub fn slice_rows(&self, start: usize, count: usize) -> Tensor {
        let c = self.cols();
        Tensor { shape: vec![count, c], data: self.data[start * c..(start + count) * c].to_vec() }
    }

    /// Stacks two matrices with equal column counts vertically.
    pub fn vstack(top: &Tensor, bottom: &Tensor) -> Tensor {
        debug_assert_eq!(top.cols(), bottom.cols());
        let mut data = top.data.clone();
        data.extend_from_slice(&bottom.data);
        Tensor { shape: vec![top.rows() + bottom.rows(), top.cols()], data }
    }
}
