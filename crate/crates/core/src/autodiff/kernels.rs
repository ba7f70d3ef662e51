//! Dense loops shared by forward and backward rules.

use crate::scalar::Scalar;

/// `out[n,m] = a[n,k] * b[k,m]`.
pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize, out: &mut [T]) {
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let x = a[i * k + p];
            if x == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &y) in orow.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
}

/// `da[n,k] += g[n,m] * b[k,m]^T`.
pub(crate) fn matmul_nt_acc<T: Scalar>(g: &[T], b: &[T], n: usize, m: usize, k: usize, da: &mut [T]) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            da[i * k + p] += dot(grow, &b[p * m..(p + 1) * m]);
        }
    }
}

/// `db[k,m] += a[n,k]^T * g[n,m]`.
pub(crate) fn matmul_tn_acc<T: Scalar>(a: &[T], g: &[T], n: usize, k: usize, m: usize, db: &mut [T]) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let x = a[i * k + p];
            if x == T::zero() {
                continue;
            }
            axpy(&mut db[p * m..(p + 1) * m], grow, x);
        }
    }
}

#[inline]
pub(crate) fn axpy<T: Scalar>(y: &mut [T], x: &[T], alpha: T) {
    for (a, &b) in y.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
pub(crate) fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_K) * x * x * x);
    T::of(0.5) * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_K) * x * x * x);
    let th = u.tanh();
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_K) * x * x);
    T::of(0.5) * (T::one() + th) + T::of(0.5) * x * (T::one() - th * th) * du
}
