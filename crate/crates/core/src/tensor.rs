use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense row-major `f64` array with an explicit shape.
///
/// All numeric state in the crate lives in this type. Invariants:
/// `data.len()` equals the product of `shape`, and every committed value is
/// finite (constructors and the graph evaluator check this).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        let t = Tensor { shape, data };
        t.check_finite("tensor")?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    /// 2-D constructor from rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dim("tensor", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::dim("tensor", format!("item() on shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    /// Number of rows when the tensor is viewed as `[rows, last_dim]`.
    pub fn leading(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.data.len() / self.shape[self.shape.len() - 1]
        }
    }

    /// Size of the last dimension (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Borrow row `r` of the `[rows, last_dim]` view.
    pub fn row(&self, r: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[r * d..(r + 1) * d]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let d = self.last_dim();
        &mut self.data[r * d..(r + 1) * d]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j] = v;
    }

    pub fn check_finite(&self, node: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::numeric(node, format!("non-finite value {} at flat index {}", v, i)));
            }
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Euclidean norm of row `r` (left-to-right summation).
    pub fn row_norm(&self, r: usize) -> f64 {
        let mut s = 0.0;
        for &v in self.row(r) {
            s += v * v;
        }
        s.sqrt()
    }

    /// Index of the maximum value in `slice[lo..hi)`, relative to `lo`;
    /// ties resolve to the first maximum.
    pub fn argmax_slice(slice: &[f64]) -> usize {
        let mut best = 0;
        for (i, &v) in slice.iter().enumerate() {
            if v > slice[best] {
                best = i;
            }
        }
        best
    }
}

/// Dot product with fixed left-to-right summation order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Cosine similarity with a zero-norm guard: each norm is floored at `eps`.
pub fn cosine(a: &[f64], b: &[f64], eps: f64) -> f64 {
    let na = dot(a, a).sqrt().max(eps);
    let nb = dot(b, b).sqrt().max(eps);
    dot(a, b) / (na * nb)
}

/// Guard epsilon shared by every cosine computation in the crate.
pub const COSINE_EPS: f64 = 1e-12;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn row_views() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.row(0), &[1.0, 2.0, 3.0]);
        assert_eq!(t.row(1), &[4.0, 5.0, 6.0]);
        assert_eq!(t.leading(), 2);
        assert_eq!(t.get2(1, 2), 6.0);
    }

    #[test]
    fn cosine_of_parallel_vectors_is_one() {
        let c = cosine(&[3.0, 4.0], &[6.0, 8.0], COSINE_EPS);
        assert!((c - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_zero_norm_guard() {
        let c = cosine(&[0.0, 0.0], &[1.0, 0.0], COSINE_EPS);
        assert_eq!(c, 0.0);
    }

    #[test]
    fn argmax_first_tie_wins() {
        assert_eq!(Tensor::argmax_slice(&[1.0, 3.0, 3.0, 2.0]), 1);
    }
}
