//! Dense matrix kernels for the convolution and classifier ops.
//!
//! Every output element is accumulated in ascending order of the reduction
//! index, starting from whatever the output buffer already holds, so results
//! are identical to a plain triple loop.

use crate::tensor::Real;

const MR: usize = 4;
const NR: usize = 16;

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
pub(crate) fn gemm_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let b = &b[..k * n];
    let full_cols = n - n % NR;
    let mut panel = vec![T::zero(); k * MR];
    let mut i = 0;
    while i + MR <= m {
        // Interleave MR rows of `a` so the inner loop reads one contiguous run.
        for r in 0..MR {
            for (p, &v) in a[(i + r) * k..(i + r + 1) * k].iter().enumerate() {
                panel[p * MR + r] = v;
            }
        }
        let mut j = 0;
        while j < full_cols {
            tile(panel.chunks_exact(MR), b, n, j, &mut c[i * n..(i + MR) * n]);
            j += NR;
        }
        if full_cols < n {
            edge(panel.chunks_exact(MR), b, n, full_cols, &mut c[i * n..(i + MR) * n]);
        }
        i += MR;
    }
    for r in i..m {
        row_acc(a[r * k..(r + 1) * k].iter().copied(), b, n, &mut c[r * n..(r + 1) * n]);
    }
}

/// `c[k×n] += aᵀ · b` for `a[m×k]` and `b[m×n]`, all row-major.
pub(crate) fn gemm_tn_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= m * n && c.len() >= k * n);
    let (a, b) = (&a[..m * k], &b[..m * n]);
    let full_cols = n - n % NR;
    let mut p = 0;
    while p + MR <= k {
        let steps = a.chunks_exact(k).map(|row| &row[p..p + MR]);
        let mut j = 0;
        while j < full_cols {
            tile(steps.clone(), b, n, j, &mut c[p * n..(p + MR) * n]);
            j += NR;
        }
        if full_cols < n {
            edge(steps, b, n, full_cols, &mut c[p * n..(p + MR) * n]);
        }
        p += MR;
    }
    for q in p..k {
        row_acc(a.chunks_exact(k).map(|row| row[q]), b, n, &mut c[q * n..(q + 1) * n]);
    }
}

/// One output row: `crow += Σ_p a_p · b[p, :]`.
fn row_acc<T: Real>(a: impl Iterator<Item = T>, b: &[T], n: usize, crow: &mut [T]) {
    for (av, brow) in a.zip(b.chunks_exact(n)) {
        for (cv, &bv) in crow.iter_mut().zip(brow) {
            *cv = *cv + av * bv;
        }
    }
}

/// `MR × NR` block of `c` at column `j`; `steps` yields the `MR` left-hand
/// values for each reduction step.
#[inline(always)]
fn tile<'a, T: Real>(steps: impl Iterator<Item = &'a [T]>, b: &[T], n: usize, j: usize, c: &mut [T]) {
    let mut acc = [[T::zero(); NR]; MR];
    for (r, out) in acc.iter_mut().enumerate() {
        out.copy_from_slice(&c[r * n + j..r * n + j + NR]);
    }
    for (ap, brow) in steps.zip(b.chunks_exact(n)) {
        let ap: &[T; MR] = ap.try_into().unwrap();
        let bv: &[T; NR] = brow[j..j + NR].try_into().unwrap();
        for r in 0..MR {
            for q in 0..NR {
                acc[r][q] = acc[r][q] + ap[r] * bv[q];
            }
        }
    }
    for (r, out) in acc.iter().enumerate() {
        c[r * n + j..r * n + j + NR].copy_from_slice(out);
    }
}

/// Columns `from..n` of an `MR`-row block of `c`.
fn edge<'a, T: Real>(steps: impl Iterator<Item = &'a [T]>, b: &[T], n: usize, from: usize, c: &mut [T]) {
    for (ap, brow) in steps.zip(b.chunks_exact(n)) {
        for (r, &av) in ap.iter().enumerate() {
            for (cv, &bv) in c[r * n + from..(r + 1) * n].iter_mut().zip(&brow[from..]) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// Row-major transpose of an `r × c` matrix.
pub(crate) fn transpose<T: Real>(r: usize, c: usize, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Init, Tensor};

    fn oracle(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
        for i in 0..m {
            for j in 0..n {
                let mut s = c[i * n + j];
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
    }

    #[test]
    fn matches_triple_loop_bit_exactly() {
        for &(m, k, n) in &[(1, 1, 1), (4, 3, 16), (7, 5, 33), (9, 27, 16), (13, 64, 40), (2, 8, 70)] {
            let a = Tensor::<f64>::new(&[m * k], Init::Uniform { bound: 1.0, seed: 1 }).unwrap();
            let b = Tensor::<f64>::new(&[k * n], Init::Uniform { bound: 1.0, seed: 2 }).unwrap();
            let c0 = Tensor::<f64>::new(&[m * n], Init::Uniform { bound: 1.0, seed: 3 }).unwrap();
            let mut fast = c0.data().to_vec();
            let mut slow = c0.data().to_vec();
            gemm_acc(m, k, n, a.data(), b.data(), &mut fast);
            oracle(m, k, n, a.data(), b.data(), &mut slow);
            assert_eq!(fast, slow, "{m}x{k}x{n}");
        }
    }

    #[test]
    fn transposed_variant_matches_oracle() {
        for &(m, k, n) in &[(1, 1, 1), (5, 4, 16), (33, 7, 20), (64, 9, 32)] {
            let a = Tensor::<f64>::new(&[m * k], Init::Uniform { bound: 1.0, seed: 4 }).unwrap();
            let b = Tensor::<f64>::new(&[m * n], Init::Uniform { bound: 1.0, seed: 5 }).unwrap();
            let c0 = Tensor::<f64>::new(&[k * n], Init::Uniform { bound: 1.0, seed: 6 }).unwrap();
            let mut fast = c0.data().to_vec();
            let mut slow = c0.data().to_vec();
            gemm_tn_acc(m, k, n, a.data(), b.data(), &mut fast);
            oracle(k, m, n, &transpose(m, k, a.data()), b.data(), &mut slow);
            assert_eq!(fast, slow, "{m}x{k}x{n}");
        }
    }

    #[test]
    fn transpose_round_trip() {
        let x: Vec<f64> = (0..6).map(f64::from).collect();
        let t = transpose(2, 3, &x);
        assert_eq!(t, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert_eq!(transpose(3, 2, &t), x);
    }
}
