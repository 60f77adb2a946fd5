//! Dense row-major f64 tensors. Only rank 1 and rank 2 are used by the model.

use std::cell::RefCell;

use rand::Rng;

use crate::error::{Error, Result};

/// Buffers smaller than this many values are left to the allocator.
const POOL_MIN_LEN: usize = 1 << 14;
const POOL_MAX_VALUES: usize = 128 << 20;

thread_local! {
    // Large activations are recycled per thread: fresh pages cost more than the arithmetic on them.
    static POOL: RefCell<(Vec<Vec<f64>>, usize)> = const { RefCell::new((Vec::new(), 0)) };
}

/// A buffer of `len` values with unspecified contents.
fn pooled(len: usize) -> Vec<f64> {
    if len >= POOL_MIN_LEN {
        let hit = POOL
            .try_with(|p| {
                let (bufs, held) = &mut *p.borrow_mut();
                let best = bufs
                    .iter()
                    .enumerate()
                    .filter(|(_, b)| b.capacity() >= len && b.capacity() <= 2 * len)
                    .min_by_key(|(_, b)| b.capacity())
                    .map(|(i, _)| i)?;
                let mut b = bufs.swap_remove(best);
                *held -= b.capacity();
                b.resize(len, 0.0);
                b.truncate(len);
                Some(b)
            })
            .ok()
            .flatten();
        if let Some(b) = hit {
            return b;
        }
    }
    vec![0.0; len]
}

fn recycle(buf: Vec<f64>) {
    if buf.capacity() < POOL_MIN_LEN {
        return;
    }
    let _ = POOL.try_with(|p| {
        let (bufs, held) = &mut *p.borrow_mut();
        if *held + buf.capacity() <= POOL_MAX_VALUES {
            *held += buf.capacity();
            bufs.push(buf);
        }
    });
}

#[derive(Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        let mut data = pooled(self.data.len());
        data.copy_from_slice(&self.data);
        Self {
            shape: self.shape.clone(),
            data,
        }
    }
}

impl Drop for Tensor {
    fn drop(&mut self) {
        recycle(std::mem::take(&mut self.data));
    }
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut data = pooled(shape.iter().product());
        data.fill(value);
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// A tensor whose every entry the caller overwrites.
    pub(crate) fn scratch(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: pooled(shape.iter().product()),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::shape(
                "from_vec",
                format!("{} values for shape {shape:?}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("from_rows", "ragged rows"));
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data: rows.concat(),
        })
    }

    pub fn scalar(x: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![x],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Glorot/Xavier uniform initialisation for a `fan_in x fan_out` weight.
    pub fn glorot<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..=a)).collect();
        Self {
            shape: vec![fan_in, fan_out],
            data,
        }
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

    pub fn into_data(mut self) -> Vec<f64> {
        std::mem::take(&mut self.data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a matrix; a vector counts as one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, x: f64) {
        let c = self.cols();
        self.data[i * c + j] = x;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let mut out = Tensor::scratch(&self.shape);
        for (o, &x) in out.data.iter_mut().zip(&self.data) {
            *o = f(x);
        }
        out
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for a in &mut self.data {
            *a *= k;
        }
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Tensor {
            shape: vec![rows.len(), c],
            data,
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul(self, false, other, false)
    }
}

/// `op(a) * op(b)` where `op` optionally transposes; both operands must be matrices.
pub fn matmul(a: &Tensor, a_t: bool, b: &Tensor, b_t: bool) -> Result<Tensor> {
    if !a.is_matrix() || !b.is_matrix() {
        return Err(Error::shape(
            "matmul",
            format!("operands must be matrices, got {:?} and {:?}", a.shape, b.shape),
        ));
    }
    let (m, k) = if a_t {
        (a.cols(), a.rows())
    } else {
        (a.rows(), a.cols())
    };
    let (k2, n) = if b_t {
        (b.cols(), b.rows())
    } else {
        (b.rows(), b.cols())
    };
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!(
                "{:?}{} x {:?}{}",
                a.shape,
                if a_t { "^T" } else { "" },
                b.shape,
                if b_t { "^T" } else { "" }
            ),
        ));
    }
    // beta = 0 overwrites every entry
    let mut out = Tensor::scratch(&[m, n]);
    gemm_into(a, a_t, b, b_t, &mut out.data, m, k, n, 0.0);
    Ok(out)
}

/// `c = op(a) * op(b) + beta * c`, shapes already validated by the caller.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into(
    a: &Tensor,
    a_t: bool,
    b: &Tensor,
    b_t: bool,
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    beta: f64,
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in c.iter_mut() {
            *x = if beta == 0.0 { 0.0 } else { *x * beta };
        }
        return;
    }
    let (ars, acs) = if a_t {
        (1isize, a.cols() as isize)
    } else {
        (a.cols() as isize, 1isize)
    };
    let (brs, bcs) = if b_t {
        (1isize, b.cols() as isize)
    } else {
        (b.cols() as isize, 1isize)
    };
    // SAFETY: pointers come from live slices whose lengths match the strides given:
    // a is m*k (or k*m), b is k*n (or n*k), c is m*n, checked by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            ars,
            acs,
            b.data.as_ptr(),
            brs,
            bcs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(&[a.rows(), b.cols()]);
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn matmul_matches_naive_in_all_orientations() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::glorot(5, 3, &mut rng);
        let b = Tensor::glorot(3, 4, &mut rng);
        let expect = naive(&a, &b);
        let cases = [
            matmul(&a, false, &b, false).unwrap(),
            matmul(&a.transpose(), true, &b, false).unwrap(),
            matmul(&a, false, &b.transpose(), true).unwrap(),
            matmul(&a.transpose(), true, &b.transpose(), true).unwrap(),
        ];
        for got in cases {
            for (x, y) in got.data().iter().zip(expect.data()) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn matmul_shape_errors() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(a.matmul(&Tensor::zeros(&[2, 3])).is_err());
        assert!(a.matmul(&Tensor::zeros(&[3])).is_err());
        assert!(Tensor::from_vec(&[2, 2], vec![1.0]).is_err());
    }

    #[test]
    fn empty_inner_dimension() {
        let a = Tensor::zeros(&[2, 0]);
        let b = Tensor::zeros(&[0, 3]);
        assert_eq!(a.matmul(&b).unwrap(), Tensor::zeros(&[2, 3]));
    }
}
