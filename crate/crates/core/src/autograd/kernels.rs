//! Dense matrix-product kernels. Every output row is computed by one thread with a
//! fixed accumulation order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::scalar::Scalar;

const PARALLEL_FLOPS: usize = 1 << 16;

/// `out[m,n] += a[m,k] · b[k,n]`
pub fn mm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |(i, o): (usize, &mut [T])| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            let br = &b[p * n..(p + 1) * n];
            for (oj, &bj) in o.iter_mut().zip(br) {
                *oj += av * bj;
            }
        }
    };
    if n == 0 {
        return;
    }
    if m * k * n >= PARALLEL_FLOPS {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn mm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let row = |(i, o): (usize, &mut [T])| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, oj) in o.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in ar.iter().zip(br) {
                acc += x * y;
            }
            *oj += acc;
        }
    };
    if n == 0 {
        return;
    }
    if m * k * n >= PARALLEL_FLOPS {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `out[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn mm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |(i, o): (usize, &mut [T])| {
        for p in 0..k {
            let av = a[p * m + i];
            let br = &b[p * n..(p + 1) * n];
            for (oj, &bj) in o.iter_mut().zip(br) {
                *oj += av * bj;
            }
        }
    };
    if n == 0 {
        return;
    }
    if m * k * n >= PARALLEL_FLOPS {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}
