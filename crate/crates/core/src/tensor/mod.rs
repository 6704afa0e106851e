//! Dense f64 tensors and a define-by-run reverse-mode differentiation tape.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Row-major dense array of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1, 1],
            data: vec![v],
        }
    }

    /// A 1 x n row.
    pub fn row(v: Vec<f64>) -> Self {
        Tensor {
            shape: vec![1, v.len()],
            data: v,
        }
    }

    /// Builds an m x n matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            if r.len() != n {
                return Err(Error::shape("Tensor::from_rows", &[m, n], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            shape: vec![m, n],
            data,
        })
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
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

    /// Rows of a 2-D tensor (1-D tensors count as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Runs `$body` through an AVX2-enabled copy when the CPU has it. Both copies
/// perform the same per-element multiply and add, so results are identical.
macro_rules! dispatch_avx2 {
    ($generic:ident, $avx:ident, ($($arg:ident: $ty:ty),*)) => {{
        #[cfg(target_arch = "x86_64")]
        {
            #[target_feature(enable = "avx2")]
            unsafe fn $avx($($arg: $ty),*) {
                $generic($($arg),*)
            }
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the feature was detected at runtime.
                unsafe { $avx($($arg),*) };
                return;
            }
        }
        $generic($($arg),*)
    }};
}

/// C += A(m x k) * B(k x n)
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    dispatch_avx2!(gemm_nn_kernel, gemm_nn_avx2, (a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize))
}

#[inline(always)]
fn gemm_nn_kernel(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    row_blocks(out, m, n, k, |p, i| a[i * k + p], b);
}

const TILE: usize = 8;
const ROWS: usize = 4;

/// `out[i, :] += sum_p coef(p, i) * b[p, :]` with the sum taken in ascending
/// `p` for every element. Rows are processed in blocks of four so each load
/// of a row of `b` feeds several accumulator strips.
#[inline(always)]
fn row_blocks(out: &mut [f64], m: usize, n: usize, k: usize, coef: impl Fn(usize, usize) -> f64, b: &[f64]) {
    let b = &b[..k * n];
    let mut packed = Vec::with_capacity(k * ROWS);
    let mut i = 0;
    while i + ROWS <= m {
        pack(&mut packed, i, ROWS, k, &coef);
        block::<ROWS>(&mut out[i * n..(i + ROWS) * n], n, &packed, b);
        i += ROWS;
    }
    while i < m {
        pack(&mut packed, i, 1, k, &coef);
        block::<1>(&mut out[i * n..(i + 1) * n], n, &packed, b);
        i += 1;
    }
}

/// Gathers `coef(p, i0 + r)` for `r < rows` into `p`-major order.
#[inline(always)]
fn pack(packed: &mut Vec<[f64; ROWS]>, i0: usize, rows: usize, k: usize, coef: &impl Fn(usize, usize) -> f64) {
    packed.clear();
    for p in 0..k {
        let mut v = [0.0; ROWS];
        for (r, x) in v[..rows].iter_mut().enumerate() {
            *x = coef(p, i0 + r);
        }
        packed.push(v);
    }
}

#[inline(always)]
fn block<const R: usize>(out: &mut [f64], n: usize, packed: &[[f64; ROWS]], b: &[f64]) {
    let full = n / TILE * TILE;
    let mut j0 = 0;
    while j0 < full {
        let mut acc = [[0.0; TILE]; R];
        for (r, a) in acc.iter_mut().enumerate() {
            a.copy_from_slice(&out[r * n + j0..r * n + j0 + TILE]);
        }
        for (av, brow) in packed.iter().zip(b.chunks_exact(n)) {
            let av: &[f64; R] = av[..R].try_into().unwrap();
            if av.iter().all(|&v| v == 0.0) {
                continue;
            }
            let bs: &[f64; TILE] = brow[j0..j0 + TILE].try_into().unwrap();
            for r in 0..R {
                for l in 0..TILE {
                    acc[r][l] += av[r] * bs[l];
                }
            }
        }
        for (r, a) in acc.iter().enumerate() {
            out[r * n + j0..r * n + j0 + TILE].copy_from_slice(a);
        }
        j0 += TILE;
    }
    if full < n {
        for r in 0..R {
            let orow = &mut out[r * n + full..(r + 1) * n];
            for (av, brow) in packed.iter().zip(b.chunks_exact(n)) {
                if av[r] == 0.0 {
                    continue;
                }
                for (o, &bv) in orow.iter_mut().zip(&brow[full..]) {
                    *o += av[r] * bv;
                }
            }
        }
    }
}

/// C += A(m x k) * B(n x k)^T
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    dispatch_avx2!(gemm_nt_kernel, gemm_nt_avx2, (a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize))
}

const NT_ROWS: usize = 2;
const NT_COLS: usize = 4;

#[inline(always)]
fn gemm_nt_kernel(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i < m {
        let r = if i + NT_ROWS <= m { NT_ROWS } else { 1 };
        let mut j = 0;
        while j < n {
            let c = if j + NT_COLS <= n { NT_COLS } else { 1 };
            match (r, c) {
                (NT_ROWS, NT_COLS) => dots::<NT_ROWS, NT_COLS>(a, b, out, i, j, k, n),
                (NT_ROWS, _) => dots::<NT_ROWS, 1>(a, b, out, i, j, k, n),
                (_, NT_COLS) => dots::<1, NT_COLS>(a, b, out, i, j, k, n),
                _ => dots::<1, 1>(a, b, out, i, j, k, n),
            }
            j += c;
        }
        i += r;
    }
}

/// `out[i0 + r][j0 + c] += <a row, b row>` for an R x C block. Each dot keeps
/// four interleaved partial sums that are combined in a fixed order.
#[inline(always)]
fn dots<const R: usize, const C: usize>(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    i0: usize,
    j0: usize,
    k: usize,
    n: usize,
) {
    let arows: [&[f64]; R] = std::array::from_fn(|r| &a[(i0 + r) * k..(i0 + r + 1) * k]);
    let brows: [&[f64]; C] = std::array::from_fn(|c| &b[(j0 + c) * k..(j0 + c + 1) * k]);
    let mut acc = [[[0.0; 4]; C]; R];
    let full = k / 4 * 4;
    let mut p = 0;
    while p < full {
        let av: [&[f64; 4]; R] = std::array::from_fn(|r| arows[r][p..p + 4].try_into().unwrap());
        let bv: [&[f64; 4]; C] = std::array::from_fn(|c| brows[c][p..p + 4].try_into().unwrap());
        for r in 0..R {
            for c in 0..C {
                for l in 0..4 {
                    acc[r][c][l] += av[r][l] * bv[c][l];
                }
            }
        }
        p += 4;
    }
    for r in 0..R {
        for c in 0..C {
            let v = &acc[r][c];
            let mut s = (v[0] + v[2]) + (v[1] + v[3]);
            for q in full..k {
                s += arows[r][q] * brows[c][q];
            }
            out[(i0 + r) * n + j0 + c] += s;
        }
    }
}

/// C += A(k x m)^T * B(k x n)
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    dispatch_avx2!(gemm_tn_kernel, gemm_tn_avx2, (a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize))
}

#[inline(always)]
fn gemm_tn_kernel(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    row_blocks(out, m, n, k, |p, i| a[p * m + i], b);
}
