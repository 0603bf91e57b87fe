//! Small dense-math helpers shared across modules.

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Backward pass of softmax: given `p = softmax(s)` and `dL/dp`, return `dL/ds`.
pub fn softmax_backward(p: &[f64], grad_p: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(grad_p).map(|(&pi, &gi)| pi * gi).sum();
    p.iter().zip(grad_p).map(|(&pi, &gi)| pi * (gi - dot)).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Dense row-major matrix-vector product: `out = m * v` where `m` is `rows x cols`.
pub fn matvec(m: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(v.len(), cols);
    (0..rows).map(|r| dot(&m[r * cols..(r + 1) * cols], v)).collect()
}

/// Transposed product: `out = m^T * v` where `m` is `rows x cols` and `v` has `rows` entries.
pub fn matvec_t(m: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(v.len(), rows);
    let mut out = vec![0.0; cols];
    for r in 0..rows {
        axpy(v[r], &m[r * cols..(r + 1) * cols], &mut out);
    }
    out
}

/// Accumulate the outer product `grad += a * b^T` into a `rows x cols` matrix.
pub fn outer_acc(grad: &mut [f64], a: &[f64], b: &[f64]) {
    let cols = b.len();
    debug_assert_eq!(grad.len(), a.len() * cols);
    for (r, &ar) in a.iter().enumerate() {
        axpy(ar, b, &mut grad[r * cols..(r + 1) * cols]);
    }
}

/// Solve the dense square system `a * x = b` in place via Gaussian
/// elimination with partial pivoting; `a` is `n x n` row-major. Returns
/// `None` when a pivot vanishes (singular system).
pub fn solve(mut a: Vec<f64>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    debug_assert_eq!(a.len(), n * n);
    for col in 0..n {
        let pivot = (col..n).max_by(|&r, &s| {
            a[r * n + col].abs().partial_cmp(&a[s * n + col].abs()).unwrap()
        })?;
        if a[pivot * n + col] == 0.0 {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            b.swap(col, pivot);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            for j in col..n {
                a[row * n + j] -= f * a[col * n + j];
            }
            b[row] -= f * b[col];
        }
    }
    for col in (0..n).rev() {
        b[col] /= a[col * n + col];
        for row in 0..col {
            b[row] -= a[row * n + col] * b[col];
        }
    }
    Some(b)
}

/// Standard normal draw via Box-Muller.
pub fn randn<R: rand::Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[0.3, -1.2, 4.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let p = softmax(&[0.0; 4]);
        for &v in &p {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let s = [0.4, -0.7, 1.3];
        let grad_out = [0.9, -0.2, 0.5];
        let p = softmax(&s);
        let analytic = softmax_backward(&p, &grad_out);
        let h = 1e-6;
        for i in 0..s.len() {
            let mut sp = s;
            sp[i] += h;
            let mut sm = s;
            sm[i] -= h;
            let f = |v: &[f64]| -> f64 { dot(&softmax(v), &grad_out) };
            let numeric = (f(&sp) - f(&sm)) / (2.0 * h);
            assert!((analytic[i] - numeric).abs() < 1e-8);
        }
    }

    #[test]
    fn matvec_transpose_agree() {
        let m = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let v = [1.0, -1.0, 0.5];
        let out = matvec(&m, 2, 3, &v);
        assert_eq!(out, vec![0.5, 2.0]);
        let vt = [2.0, -1.0];
        let out_t = matvec_t(&m, 2, 3, &vt);
        assert_eq!(out_t, vec![-2.0, -1.0, 0.0]);
    }

    #[test]
    fn solve_recovers_known_solution() {
        // a * x = b with x = [2, -1, 0.5]
        let a = vec![3.0, 1.0, -2.0, 1.0, 4.0, 0.0, -1.0, 2.0, 5.0];
        let x = [2.0, -1.0, 0.5];
        let b: Vec<f64> = (0..3).map(|r| dot(&a[r * 3..(r + 1) * 3], &x)).collect();
        let got = solve(a, b).unwrap();
        for (g, w) in got.iter().zip(&x) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn solve_rejects_singular_matrix() {
        let a = vec![1.0, 2.0, 2.0, 4.0];
        assert!(solve(a, vec![1.0, 2.0]).is_none());
    }

    #[test]
    fn population_stats() {
        let (mean, std) = mean_std(&[0.0, 0.0, 0.0, 1.0]);
        assert!((mean - 0.25).abs() < 1e-12);
        assert!((std - 0.4330127018922193).abs() < 1e-12);
    }
}
