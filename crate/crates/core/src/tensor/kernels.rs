//! Plain-loop matrix kernels. All accumulate into `c`.

use super::Real;

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn mm_nn<R: Real>(a: &[R], b: &[R], c: &mut [R], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == R::ZERO {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn mm_nt<R: Real>(a: &[R], b: &[R], c: &mut [R], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = R::ZERO;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
pub(crate) fn mm_tn<R: Real>(a: &[R], b: &[R], c: &mut [R], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == R::ZERO {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}
