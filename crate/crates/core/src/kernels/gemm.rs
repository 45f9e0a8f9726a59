use rayon::prelude::*;

use crate::tensor::Scalar;

const COL_BLOCK: usize = 256;
const DEPTH_BLOCK: usize = 256;
// Below this many multiply-adds the rayon split costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 22;

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major and contiguous.
///
/// Each output element accumulates its `k` products in ascending `p` order on
/// top of the value already in `c`, so the result equals the naive triple loop
/// exactly.
pub fn gemm_acc<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let work = m * n * k;
    if work >= PAR_THRESHOLD && m >= 8 && rayon::current_num_threads() > 1 {
        let rows = m.div_ceil(rayon::current_num_threads() * 2).max(4);
        c.par_chunks_mut(rows * n)
            .zip(a.par_chunks(rows * k))
            .for_each(|(c_rows, a_rows)| gemm_serial(c_rows.len() / n, n, k, a_rows, b, c_rows));
    } else {
        gemm_serial(m, n, k, a, b, c);
    }
}

fn gemm_serial<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for j0 in (0..n).step_by(COL_BLOCK) {
        let j1 = (j0 + COL_BLOCK).min(n);
        for p0 in (0..k).step_by(DEPTH_BLOCK) {
            let p1 = (p0 + DEPTH_BLOCK).min(k);
            let mut i = 0;
            while i + 4 <= m {
                let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
                let (c1, rest) = rest.split_at_mut(n);
                let (c2, c3) = rest.split_at_mut(n);
                let (c0, c1, c2, c3) = (&mut c0[j0..j1], &mut c1[j0..j1], &mut c2[j0..j1], &mut c3[j0..j1]);
                for p in p0..p1 {
                    let a0 = a[i * k + p];
                    let a1 = a[(i + 1) * k + p];
                    let a2 = a[(i + 2) * k + p];
                    let a3 = a[(i + 3) * k + p];
                    let brow = &b[p * n + j0..p * n + j1];
                    for (jj, &bv) in brow.iter().enumerate() {
                        c0[jj] += a0 * bv;
                        c1[jj] += a1 * bv;
                        c2[jj] += a2 * bv;
                        c3[jj] += a3 * bv;
                    }
                }
                i += 4;
            }
            while i < m {
                let crow = &mut c[i * n + j0..i * n + j1];
                for p in p0..p1 {
                    let ap = a[i * k + p];
                    let brow = &b[p * n + j0..p * n + j1];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += ap * bv;
                    }
                }
                i += 1;
            }
        }
    }
}

/// Row-major transpose of an `rows×cols` matrix.
pub fn transpose<T: Scalar>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut dst = vec![T::zero(); rows * cols];
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
    dst
}
