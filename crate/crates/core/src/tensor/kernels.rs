use crate::scalar::Scalar;

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
///
/// Loop order i-p-j so the innermost loop is an axpy over a row of `b`,
/// which keeps the reduction order fixed and lets the compiler vectorize.
#[inline]
pub fn matmul_2d<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[k×n] += aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
#[inline]
pub(crate) fn matmul_at_b<S: Scalar>(a: &[S], g: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let a_row = &a[r * k..(r + 1) * k];
        let g_row = &g[r * n..(r + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &gv) in c_row.iter_mut().zip(g_row) {
                *cv += av * gv;
            }
        }
    }
}

/// Row-major transpose of an `rows×cols` matrix.
pub fn transpose_2d<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `c[m×k] += g[m×n] · bᵀ` where `b` is `k×n`.
#[inline]
pub(crate) fn matmul_a_bt<S: Scalar>(g: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    let bt = transpose_2d(b, k, n);
    matmul_2d(g, &bt, c, m, n, k);
}

#[inline]
pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let c = S::lit(0.797_884_560_802_865_4); // sqrt(2/pi)
    let inner = c * (x + S::lit(0.044715) * x * x * x);
    S::lit(0.5) * x * (S::one() + inner.tanh())
}

#[inline]
pub(crate) fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::lit(0.797_884_560_802_865_4);
    let x2 = x * x;
    let inner = c * (x + S::lit(0.044715) * x2 * x);
    let t = inner.tanh();
    let dinner = c * (S::one() + S::lit(3.0 * 0.044715) * x2);
    S::lit(0.5) * (S::one() + t) + S::lit(0.5) * x * (S::one() - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_multiplied_product() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        matmul_2d(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_variants_agree_with_plain_product() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2x3
        let g: Vec<f64> = (0..8).map(|v| 0.5 * v as f64).collect(); // 2x4
        let mut c1 = vec![0.0; 12];
        matmul_at_b(&a, &g, &mut c1, 2, 3, 4);
        let at = transpose_2d(&a, 2, 3);
        let mut c2 = vec![0.0; 12];
        matmul_2d(&at, &g, &mut c2, 3, 2, 4);
        assert_eq!(c1, c2);

        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.25).collect(); // 3x4
        let mut d1 = vec![0.0; 6];
        matmul_a_bt(&g, &b, &mut d1, 2, 3, 4);
        let mut d2 = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                d2[i * 3 + j] = (0..4).map(|t| g[i * 4 + t] * b[j * 4 + t]).sum();
            }
        }
        assert_eq!(d1, d2);
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
