//! Small dense linear-algebra kernels over row-major slices.

use nalgebra::DMatrix;

/// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m x k`,
/// `op(b)` is `k x n` and `c` is `m x n`, all row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // Stored a is m x k (or k x m when transposed); same for b.
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Replaces `m` (n x n, row-major) by `(m + m^T) / 2`.
pub fn symmetrize(m: &mut [f64], n: usize) {
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = v;
            m[j * n + i] = v;
        }
    }
}

/// Maximum absolute asymmetry `|m_ij - m_ji|`.
pub fn asymmetry(m: &[f64], n: usize) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[i * n + j] - m[j * n + i]).abs());
        }
    }
    worst
}

/// Inverse of a symmetric positive-definite matrix through a Cholesky
/// factorization. On failure returns an eigenvalue-based condition estimate.
pub fn spd_inverse(m: &[f64], n: usize) -> Result<Vec<f64>, f64> {
    let mat = DMatrix::from_row_slice(n, n, m);
    match mat.clone().cholesky() {
        Some(chol) => {
            let inv = chol.inverse();
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    out[i * n + j] = inv[(i, j)];
                }
            }
            symmetrize(&mut out, n);
            if out.iter().all(|v| v.is_finite()) {
                Ok(out)
            } else {
                Err(condition_estimate(mat))
            }
        }
        None => Err(condition_estimate(mat)),
    }
}

fn condition_estimate(mat: DMatrix<f64>) -> f64 {
    let eig = mat.symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &[f64], n: usize) -> f64 {
    let mat = DMatrix::from_row_slice(n, n, m);
    mat.symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |acc, v| acc.min(*v))
}

/// Dense Kronecker product of `a` (p x p) and `b` (r x r).
pub fn kron(a: &[f64], p: usize, b: &[f64], r: usize) -> Vec<f64> {
    let n = p * r;
    let mut out = vec![0.0; n * n];
    for i in 0..p {
        for j in 0..p {
            let aij = a[i * p + j];
            if aij == 0.0 {
                continue;
            }
            for k in 0..r {
                let row = (i * r + k) * n + j * r;
                for l in 0..r {
                    out[row + l] = aij * b[k * r + l];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_handles_transposes() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let mut c = [0.0; 4];
        gemm(2, 3, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);

        // a^T a with a stored 2x3 -> 3x3
        let mut g = [0.0; 9];
        gemm(3, 2, 3, 1.0, &a, true, &a, false, 0.0, &mut g);
        assert_eq!(g, [17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);

        // a b^T with b stored 2x3
        let mut h = [0.0; 4];
        gemm(2, 3, 2, 1.0, &a, false, &a, true, 0.0, &mut h);
        assert_eq!(h, [14.0, 32.0, 32.0, 77.0]);
    }

    #[test]
    fn spd_inverse_of_diagonal() {
        let inv = spd_inverse(&[2.0, 0.0, 0.0, 4.0], 2).unwrap();
        for (got, want) in inv.iter().zip([0.5, 0.0, 0.0, 0.25]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn spd_inverse_rejects_indefinite() {
        let err = spd_inverse(&[1.0, 0.0, 0.0, -1.0], 2).unwrap_err();
        assert!(err.is_infinite());
    }

    #[test]
    fn kron_layout() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [0.0, 1.0, 1.0, 0.0];
        let k = kron(&a, 2, &b, 2);
        assert_eq!(
            k,
            vec![
                0.0, 1.0, 0.0, 2.0, //
                1.0, 0.0, 2.0, 0.0, //
                0.0, 3.0, 0.0, 4.0, //
                3.0, 0.0, 4.0, 0.0,
            ]
        );
    }
}
