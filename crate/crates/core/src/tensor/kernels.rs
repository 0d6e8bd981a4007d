//! Raw numeric kernels on row-major slices.
//!
//! Accumulation order is fixed by the loop structure alone, so results do not
//! depend on batch size or on how many rows a call covers.

use super::Real;

const LANES: usize = 8;

#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); LANES];
    let full = a.len() / LANES * LANES;
    for (ca, cb) in a[..full].chunks_exact(LANES).zip(b[..full].chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut s = F::zero();
    for v in acc {
        s += v;
    }
    for i in full..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy<F: Real>(y: &mut [F], alpha: F, x: &[F]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            axpy(crow, av, &b[p * n..(p + 1) * n]);
        }
    }
    c
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    // transposing first keeps the inner loop a contiguous axpy
    let mut bt = vec![F::zero(); k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    matmul(a, &bt, m, k, n)
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn_acc<F: Real>(c: &mut [F], a: &[F], b: &[F], k: usize, m: usize, n: usize) {
    for r in 0..k {
        let arow = &a[r * m..(r + 1) * m];
        let brow = &b[r * n..(r + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            axpy(&mut c[i * n..(i + 1) * n], av, brow);
        }
    }
}

/// In-place softmax over one row. Entries equal to `-inf` map to exactly zero.
/// Returns `false` when every entry is masked.
pub fn softmax_row<F: Real>(row: &mut [F]) -> bool {
    let mut max = F::neg_infinity();
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    if max == F::neg_infinity() {
        return false;
    }
    let mut sum = F::zero();
    for v in row.iter_mut() {
        if *v == F::neg_infinity() {
            *v = F::zero();
        } else {
            *v = (*v - max).exp();
            sum += *v;
        }
    }
    let inv = F::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
    true
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub fn gelu<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let inner = c * (x + F::of(0.044715) * x * x * x);
    F::of(0.5) * x * (F::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let inner = c * (x + F::of(0.044715) * x * x * x);
    let t = inner.tanh();
    let dinner = c * (F::one() + F::of(3.0 * 0.044715) * x * x);
    F::of(0.5) * (F::one() + t) + F::of(0.5) * x * (F::one() - t * t) * dinner
}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect(); // 3x4
        let b: Vec<f64> = (0..8).map(|v| (v as f64).sin()).collect(); // 4x2
        let c = matmul(&a, &b, 3, 4, 2);
        // b transposed: 2x4
        let mut bt = vec![0.0; 8];
        for p in 0..4 {
            for j in 0..2 {
                bt[j * 4 + p] = b[p * 2 + j];
            }
        }
        let c2 = matmul_nt(&a, &bt, 3, 4, 2);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
        // aᵀ with a viewed as 4x3 ... check (a^T)^T b path via tn on the transpose
        let mut at = vec![0.0; 12];
        for i in 0..3 {
            for p in 0..4 {
                at[p * 3 + i] = a[i * 4 + p];
            }
        }
        let mut c3 = vec![0.0; 6];
        matmul_tn_acc(&mut c3, &at, &b, 4, 3, 2);
        for (x, y) in c.iter().zip(&c3) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_row_masks_and_rejects_full_mask() {
        let mut r = [1.0f64, f64::NEG_INFINITY, 1.0];
        assert!(softmax_row(&mut r));
        assert_eq!(r, [0.5, 0.0, 0.5]);
        let mut all = [f32::NEG_INFINITY; 3];
        assert!(!softmax_row(&mut all));
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
