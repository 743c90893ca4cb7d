//! Slice-level kernels. All reductions run in ascending index order.

use super::Scalar;

/// `c[m×n] = a[m×k] · b[k×n]`
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in row.iter_mut().zip(brow) {
                *cj = *cj + aip * bj;
            }
        }
    }
    c
}

/// `c[m×k] = a[m×n] · b[k×n]ᵀ`
pub(crate) fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            c[i * k + p] = acc;
        }
    }
    c
}

/// `c[k×n] = a[m×k]ᵀ · b[m×n]`
pub(crate) fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj = *cj + aip * bj;
            }
        }
    }
    c
}

/// In-place numerically stable softmax of one row.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Softmax Jacobian-vector product for one row: `dx = p ⊙ (dy − ⟨dy, p⟩)`.
pub(crate) fn softmax_row_backward<T: Scalar>(p: &[T], dy: &[T], dx: &mut [T]) {
    let mut dot = T::zero();
    for (&pi, &gi) in p.iter().zip(dy) {
        dot = dot + pi * gi;
    }
    for ((d, &pi), &gi) in dx.iter_mut().zip(p).zip(dy) {
        *d = pi * (gi - dot);
    }
}

/// Geometry of a block-diagonal multi-head attention call.
#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnGeom {
    pub samples: usize,
    pub seq: usize,
    pub heads: usize,
    pub d_head: usize,
}

impl AttnGeom {
    pub fn width(&self) -> usize {
        self.heads * self.d_head
    }
}

/// Softmax attention per (sample, head) block of `q`, `k`, `v` laid out as
/// `[samples·seq × heads·d_head]`. Returns `(z, probs)` where probs is
/// `[samples][heads][seq][seq]`.
pub(crate) fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    g: AttnGeom,
    score_scale: T,
) -> (Vec<T>, Vec<T>) {
    let w = g.width();
    let n = g.seq;
    let mut z = vec![T::zero(); g.samples * n * w];
    let mut probs = vec![T::zero(); g.samples * g.heads * n * n];
    for s in 0..g.samples {
        for h in 0..g.heads {
            let col = h * g.d_head;
            let pbase = (s * g.heads + h) * n * n;
            for i in 0..n {
                let qi = (s * n + i) * w + col;
                let prow = &mut probs[pbase + i * n..pbase + (i + 1) * n];
                for (j, pj) in prow.iter_mut().enumerate() {
                    let kj = (s * n + j) * w + col;
                    let mut acc = T::zero();
                    for c in 0..g.d_head {
                        acc = acc + q[qi + c] * k[kj + c];
                    }
                    *pj = acc * score_scale;
                }
                softmax_in_place(prow);
                let zi = (s * n + i) * w + col;
                for j in 0..n {
                    let pij = probs[pbase + i * n + j];
                    let vj = (s * n + j) * w + col;
                    for c in 0..g.d_head {
                        z[zi + c] = z[zi + c] + pij * v[vj + c];
                    }
                }
            }
        }
    }
    (z, probs)
}

/// Gradients of [`attention_forward`] with respect to `q`, `k`, `v`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dz: &[T],
    g: AttnGeom,
    score_scale: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let w = g.width();
    let n = g.seq;
    let len = g.samples * n * w;
    let (mut dq, mut dk, mut dv) = (vec![T::zero(); len], vec![T::zero(); len], vec![T::zero(); len]);
    let mut dp = vec![T::zero(); n];
    let mut ds = vec![T::zero(); n];
    for s in 0..g.samples {
        for h in 0..g.heads {
            let col = h * g.d_head;
            let pbase = (s * g.heads + h) * n * n;
            for i in 0..n {
                let zi = (s * n + i) * w + col;
                let prow = &probs[pbase + i * n..pbase + (i + 1) * n];
                for j in 0..n {
                    let vj = (s * n + j) * w + col;
                    let mut acc = T::zero();
                    for c in 0..g.d_head {
                        acc = acc + dz[zi + c] * v[vj + c];
                        dv[vj + c] = dv[vj + c] + prow[j] * dz[zi + c];
                    }
                    dp[j] = acc;
                }
                softmax_row_backward(prow, &dp, &mut ds);
                let qi = zi;
                for j in 0..n {
                    let kj = (s * n + j) * w + col;
                    let dsij = ds[j] * score_scale;
                    for c in 0..g.d_head {
                        dq[qi + c] = dq[qi + c] + dsij * k[kj + c];
                        dk[kj + c] = dk[kj + c] + dsij * q[qi + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3×4
        let c = matmul(&a, &b, 2, 3, 4);
        // bᵀ laid out 4×3
        let mut bt = vec![0.0; 12];
        for r in 0..3 {
            for c2 in 0..4 {
                bt[c2 * 3 + r] = b[r * 4 + c2];
            }
        }
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 4), c);
        let mut at = vec![0.0; 6];
        for r in 0..2 {
            for c2 in 0..3 {
                at[c2 * 2 + r] = a[r * 3 + c2];
            }
        }
        assert_eq!(matmul_tn(&at, &b, 3, 2, 4), c);
    }

    #[test]
    fn softmax_row_sums_to_one() {
        let mut r = vec![1.0f64, 2.0, 3.0, -40.0];
        softmax_in_place(&mut r);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }
}
