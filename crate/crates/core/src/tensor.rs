//! Dense row-major tensors and the handful of vector kernels shared by the
//! rest of the crate.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    /// Stacks equal-length rows into a `[rows.len(), d]` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let d = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            let r = r.as_ref();
            if r.len() != d {
                return Err(Error::shape(
                    "from_rows",
                    format!("row length {} != {}", r.len(), d),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            shape: vec![rows.len(), d],
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

    /// Row `i` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.data.len() / self.shape[0];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        let w = if self.shape.is_empty() || self.shape[0] == 0 {
            1
        } else {
            self.data.len() / self.shape[0]
        };
        self.data.chunks(w.max(1))
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        all_finite(&self.data)
    }
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four independent accumulators in a fixed order: fast and reproducible.
    let mut acc = [0.0f64; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ar.iter().zip(br) {
        s += x * y;
    }
    s
}

/// Row-major transpose of an `[rows, cols]` block.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut t = vec![0.0; a.len()];
    for (r, row) in a.chunks_exact(cols).enumerate() {
        for (c, v) in row.iter().enumerate() {
            t[c * rows + r] = *v;
        }
    }
    t
}

/// `y[n, m] += a[n, k] · b[k, m]`.
///
/// Every output entry is accumulated over `k` in increasing order, so the
/// result for a row never depends on the other rows in the batch.
pub fn matmul_acc(a: &[f64], b: &[f64], y: &mut [f64], n: usize, k: usize, m: usize) {
    const R: usize = 4;
    const C: usize = 8;
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(y.len(), n * m);
    let full_rows = n - n % R;
    let full_cols = m - m % C;
    let mut panel = vec![0.0; k * R];
    for i0 in (0..full_rows).step_by(R) {
        for (kk, p) in panel.chunks_exact_mut(R).enumerate() {
            for (r, v) in p.iter_mut().enumerate() {
                *v = a[(i0 + r) * k + kk];
            }
        }
        for j0 in (0..full_cols).step_by(C) {
            let mut acc = [[0.0f64; C]; R];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&y[(i0 + r) * m + j0..(i0 + r) * m + j0 + C]);
            }
            for (p, brow) in panel.chunks_exact(R).zip(b.chunks_exact(m)) {
                let bk: &[f64; C] = brow[j0..j0 + C].try_into().expect("C wide");
                let p: &[f64; R] = p.try_into().expect("R wide");
                for r in 0..R {
                    for c in 0..C {
                        acc[r][c] += p[r] * bk[c];
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                y[(i0 + r) * m + j0..(i0 + r) * m + j0 + C].copy_from_slice(row);
            }
        }
        for i in i0..i0 + R {
            matmul_tail(a, b, y, i, k, m, full_cols);
        }
    }
    for i in full_rows..n {
        matmul_tail(a, b, y, i, k, m, 0);
    }
}

/// Columns `from..m` of row `i`, same summation order as the tiled path.
fn matmul_tail(a: &[f64], b: &[f64], y: &mut [f64], i: usize, k: usize, m: usize, from: usize) {
    if from == m {
        return;
    }
    let yr = &mut y[i * m + from..(i + 1) * m];
    for kk in 0..k {
        let ai = a[i * k + kk];
        for (v, bj) in yr.iter_mut().zip(&b[kk * m + from..(kk + 1) * m]) {
            *v += ai * bj;
        }
    }
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm2(v: &[f64]) -> f64 {
    libm::sqrt(dot(v, v))
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scale(a: &[f64], c: f64) -> Vec<f64> {
    a.iter().map(|x| x * c).collect()
}

/// `max_i |a_i - b_i| / max(max_i |b_i|, floor)`
pub fn max_rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let denom = b.iter().fold(floor, |m, x| m.max(x.abs()));
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / denom
}

pub(crate) fn check_len(op: &'static str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::shape(op, format!("length {} != {}", got, want)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_of_shape_must_match() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::scalar(1.0).len(), 1);
    }

    #[test]
    fn matmul_matches_naive_for_ragged_sizes() {
        for (n, k, m) in [(1, 1, 1), (5, 3, 9), (8, 7, 16), (3, 4, 2), (9, 2, 17)] {
            let a: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * m).map(|i| (i as f64 * 0.11).cos()).collect();
            let mut y = vec![0.5; n * m];
            matmul_acc(&a, &b, &mut y, n, k, m);
            for i in 0..n {
                for j in 0..m {
                    let mut want = 0.5;
                    for kk in 0..k {
                        want += a[i * k + kk] * b[kk * m + j];
                    }
                    assert_eq!(y[i * m + j], want);
                }
            }
        }
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..11).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..11).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn from_rows_rejects_ragged() {
        assert!(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.row(1), &[3.0, 4.0]);
    }
}
