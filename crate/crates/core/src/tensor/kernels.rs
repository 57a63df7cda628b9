//! Plain loops behind the tape ops.

use super::Real;
use crate::par;

/// Below this many multiply-adds a kernel stays on the calling thread.
const PAR_WORK: usize = 1 << 15;

pub(crate) fn rows_mut<T, F>(data: &mut [T], width: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    if work >= PAR_WORK {
        par::for_each_row(data, width, f);
    } else {
        data.chunks_mut(width).enumerate().for_each(|(i, r)| f(i, r));
    }
}

/// `a (n×k) · b (k×m)`.
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    rows_mut(&mut out, m, n * k * m, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let br = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `a (n×k) · bᵀ` where `b` is `m×k`.
pub(crate) fn matmul_nt<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    rows_mut(&mut out, m, n * k * m, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            *o = ar.iter().zip(br).map(|(&x, &y)| x * y).sum();
        }
    });
    out
}

/// `aᵀ · b` where `a` is `n×k` and `b` is `n×m`; result `k×m`.
pub(crate) fn matmul_tn<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * m];
    rows_mut(&mut out, m, n * k * m, |p, row| {
        for i in 0..n {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let br = &b[i * m..(i + 1) * m];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    });
    out
}

pub(crate) fn transpose<T: Real>(a: &[T], n: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}
