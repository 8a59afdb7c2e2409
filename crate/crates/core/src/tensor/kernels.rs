//! Raw slice kernels. Matrix products go through `matrixmultiply`, whose
//! single-threaded blocking fixes the summation order; everything else
//! reduces sequentially. Results are bit-reproducible on a given machine.

use crate::error::{Error, Result};

/// Reference triple loop, `a[m,k] * b[k,n]`.
pub fn matmul_naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// `c[m,n] = a[m,k] * b[k,n] + beta * c` over `(data, row_stride, col_stride)`
/// views; `beta = 0` never reads `c`.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.0.len() >= (m - 1) * a.1 + k.saturating_sub(1) * a.2 + usize::from(k > 0));
    assert!(b.0.len() >= k.saturating_sub(1) * b.1 + (n - 1) * b.2 + usize::from(k > 0));
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out[m,n] = a[m,k] * b[k,n]`, overwriting `out`.
pub fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    gemm(m, k, n, (a, k, 1), (b, n, 1), 0.0, out);
}

/// `out[m,n] = a[m,k] * b[n,k]^T`.
pub(crate) fn matmul_bt_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(m, k, n, (a, k, 1), (b, 1, k), 0.0, out);
}

/// `ga[m,k] += g[m,n] * b[k,n]^T`
pub(crate) fn acc_grad_lhs(g: &[f64], b: &[f64], ga: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(m, n, k, (g, n, 1), (b, 1, n), 1.0, ga);
}

/// `gb[k,n] += a[m,k]^T * g[m,n]`
pub(crate) fn acc_grad_rhs(a: &[f64], g: &[f64], gb: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(k, m, n, (a, 1, k), (g, n, 1), 1.0, gb);
}

/// `ga[m,k] += g[m,n] * b[n,k]` (lhs gradient of `a * b^T`).
pub(crate) fn acc_grad_lhs_bt(g: &[f64], b: &[f64], ga: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(m, n, k, (g, n, 1), (b, k, 1), 1.0, ga);
}

/// `gb[n,k] += g[m,n]^T * a[m,k]` (rhs gradient of `a * b^T`).
pub(crate) fn acc_grad_rhs_bt(a: &[f64], g: &[f64], gb: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(n, m, k, (g, 1, n), (a, k, 1), 1.0, gb);
}

/// Element strides of a row-major shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Iteration plan for a numpy-style broadcast of two operands.
#[derive(Clone, Debug)]
pub(crate) struct Broadcast {
    pub out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl Broadcast {
    pub fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len()).max(1);
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x == y || y == 1 {
                out.push(x);
            } else if x == 1 {
                out.push(y);
            } else {
                return Err(Error::shape(op, a, b));
            }
        }
        let bstr = |p: &[usize]| {
            let st = strides(p);
            p.iter()
                .zip(st)
                .map(|(&d, s)| if d == 1 { 0 } else { s })
                .collect::<Vec<_>>()
        };
        Ok(Self {
            a_strides: bstr(&pa),
            b_strides: bstr(&pb),
            out_shape: out,
        })
    }

    pub fn numel(&self) -> usize {
        self.out_shape.iter().product()
    }

    /// Calls `f(out_offset, a_offset, b_offset, row_len, a_step, b_step)` once per
    /// innermost row, in row-major order.
    pub fn for_each_row(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
        let rank = self.out_shape.len();
        let inner = self.out_shape[rank - 1];
        let (sa, sb) = (self.a_strides[rank - 1], self.b_strides[rank - 1]);
        if inner == 0 {
            return;
        }
        let rows: usize = self.out_shape[..rank - 1].iter().product();
        let mut idx = vec![0usize; rank - 1];
        let (mut oa, mut ob) = (0usize, 0usize);
        for r in 0..rows {
            f(r * inner, oa, ob, inner, sa, sb);
            // odometer increment over the outer dims
            let mut d = rank - 1;
            while d > 0 {
                d -= 1;
                idx[d] += 1;
                oa += self.a_strides[d];
                ob += self.b_strides[d];
                if idx[d] < self.out_shape[d] {
                    break;
                }
                oa -= self.a_strides[d] * idx[d];
                ob -= self.b_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}

/// Source offsets such that `out[i] = src[map[i]]` realises an axis permutation.
pub(crate) fn permute_map(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let perm_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let rank = shape.len();
    if rank == 0 {
        return vec![0];
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += perm_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= perm_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}
