use rayon::prelude::*;

use super::Real;

/// Output rows per parallel task. Fixed so chunk boundaries, and therefore the
/// floating-point result, never depend on the thread count.
const ROW_CHUNK: usize = 64;
const PAR_THRESHOLD: usize = 1 << 18;

/// Strided matrix operand: `(data, row_stride, col_stride)`.
pub type Operand<'a, T> = (&'a [T], isize, isize);

/// `C[m×n] (+)= A[m×k] · B[k×n]` with `C` contiguous row-major.
///
/// When `accumulate` is false `C` is overwritten. Large products are split
/// into fixed row blocks that run on the rayon pool.
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: Operand<'_, T>,
    b: Operand<'_, T>,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|x| *x = T::zero());
        }
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    let (ad, rsa, csa) = a;
    let (bd, rsb, csb) = b;
    let run = |row0: usize, rows: usize, out: &mut [T]| unsafe {
        T::gemm_raw(
            rows,
            k,
            n,
            T::one(),
            ad.as_ptr().offset(row0 as isize * rsa),
            rsa,
            csa,
            bd.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        )
    };
    if m * k * n >= PAR_THRESHOLD && m > ROW_CHUNK && rayon::current_num_threads() > 1 {
        c[..m * n]
            .par_chunks_mut(ROW_CHUNK * n)
            .enumerate()
            .for_each(|(i, out)| run(i * ROW_CHUNK, out.len() / n, out));
    } else {
        run(0, m, &mut c[..m * n]);
    }
}

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `src` (shape `shape`) into a new buffer whose axes are reordered by
/// `perm`, i.e. output axis `i` is input axis `perm[i]`.
pub(crate) fn permute<T: Copy>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let stride_for_out: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let rank = shape.len();
    if rank == 0 {
        return src.to_vec();
    }
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    let inner_len = out_shape[last];
    let inner_stride = stride_for_out[last];
    let total = src.len();
    if total == 0 {
        return out;
    }
    loop {
        let base: usize = idx[..last]
            .iter()
            .zip(&stride_for_out[..last])
            .map(|(i, s)| i * s)
            .sum();
        for j in 0..inner_len {
            out.push(src[base + j * inner_stride]);
        }
        // advance the multi-index over all axes but the last
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_and_parallel_blocks_agree() {
        let (m, k, n) = (300, 40, 50);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, (&a, k as isize, 1), (&b, n as isize, 1), &mut c, false);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert_eq!(c[i * n + j], want);
            }
        }
        // transposed operand via strides
        let mut ct = vec![0.0; n * m];
        gemm(n, k, m, (&b, 1, n as isize), (&a, 1, k as isize), &mut ct, false);
        for i in 0..m {
            for j in 0..n {
                assert_eq!(ct[j * m + i], c[i * n + j]);
            }
        }
    }

    #[test]
    fn permute_swaps_axes() {
        let src: Vec<u32> = (0..24).collect();
        let out = permute(&src, &[2, 3, 4], &[1, 0, 2]);
        // out[j, i, l] = src[i, j, l]
        for i in 0..2 {
            for j in 0..3 {
                for l in 0..4 {
                    assert_eq!(out[j * 8 + i * 4 + l], src[i * 12 + j * 4 + l]);
                }
            }
        }
        let back = permute(&out, &[3, 2, 4], &inverse_perm(&[1, 0, 2]));
        assert_eq!(back, src);
    }
}
