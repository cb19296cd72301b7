//! Small dense linear algebra for the per-voxel solvers.
//!
//! Tall least-squares systems go through Householder QR rather than normal
//! equations; the regularized 7x7 systems in the ADMM fitting block are SPD
//! by construction and use Cholesky.

use crate::fmath;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LinalgError {
    /// Effective rank of the matrix is below the number of columns.
    RankDeficient { col: usize },
    /// Matrix is not positive definite (Cholesky pivot failed).
    NotPositiveDefinite { col: usize },
    BadShape,
}

impl fmt::Display for LinalgError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinalgError::RankDeficient { col } => {
                write!(f, "matrix is rank deficient (column {col})")
            }
            LinalgError::NotPositiveDefinite { col } => {
                write!(f, "matrix is not positive definite (pivot {col})")
            }
            LinalgError::BadShape => write!(f, "inconsistent matrix dimensions"),
        }
    }
}

impl core::error::Error for LinalgError {}

/// Relative pivot threshold below which a QR factor is declared rank deficient.
const RANK_TOL: f64 = 1e-12;

/// Least-squares solve of `a x = y` for a row-major `m x n` matrix, `m >= n`.
///
/// Householder QR with implicit application to the right-hand side. Returns
/// the minimizing `x` (length n) or a rank-deficiency diagnostic.
pub fn lstsq(a: &[f64], m: usize, n: usize, y: &[f64]) -> Result<Vec<f64>, LinalgError> {
    if a.len() != m * n || y.len() != m || m < n || n == 0 {
        return Err(LinalgError::BadShape);
    }
    let mut r = a.to_vec();
    let mut b = y.to_vec();

    let mut max_diag: f64 = 0.0;
    for k in 0..n {
        // Householder vector for column k, rows k..m.
        let mut norm2 = 0.0;
        for i in k..m {
            let v = r[i * n + k];
            norm2 += v * v;
        }
        let norm = fmath::sqrt(norm2);
        let akk = r[k * n + k];
        let alpha = if akk >= 0.0 { -norm } else { norm };
        let diag = fmath::abs(alpha);
        max_diag = if diag > max_diag { diag } else { max_diag };
        if diag <= RANK_TOL * if max_diag > 0.0 { max_diag } else { 1.0 } {
            return Err(LinalgError::RankDeficient { col: k });
        }
        // v = a_k - alpha e_k; store in place of the column.
        r[k * n + k] = akk - alpha;
        let mut vnorm2 = 0.0;
        for i in k..m {
            let v = r[i * n + k];
            vnorm2 += v * v;
        }
        if vnorm2 > 0.0 {
            let inv = 2.0 / vnorm2;
            // Reflect remaining columns.
            for j in (k + 1)..n {
                let mut dot = 0.0;
                for i in k..m {
                    dot += r[i * n + k] * r[i * n + j];
                }
                let s = dot * inv;
                for i in k..m {
                    r[i * n + j] -= s * r[i * n + k];
                }
            }
            // Reflect the rhs.
            let mut dot = 0.0;
            for i in k..m {
                dot += r[i * n + k] * b[i];
            }
            let s = dot * inv;
            for i in k..m {
                b[i] -= s * r[i * n + k];
            }
        }
        r[k * n + k] = alpha;
    }

    // Back substitution on the upper-triangular factor.
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let mut s = b[k];
        for j in (k + 1)..n {
            s -= r[k * n + j] * x[j];
        }
        x[k] = s / r[k * n + k];
    }
    Ok(x)
}

/// Cholesky solve of a symmetric positive-definite 7x7 system.
pub fn cholesky_solve7(a: &[[f64; 7]; 7], b: &[f64; 7]) -> Result<[f64; 7], LinalgError> {
    let mut l = [[0.0f64; 7]; 7];
    for j in 0..7 {
        let mut d = a[j][j];
        for k in 0..j {
            d -= l[j][k] * l[j][k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { col: j });
        }
        let dj = fmath::sqrt(d);
        l[j][j] = dj;
        for i in (j + 1)..7 {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            l[i][j] = s / dj;
        }
    }
    // Forward then backward substitution.
    let mut y = [0.0f64; 7];
    for i in 0..7 {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = [0.0f64; 7];
    for i in (0..7).rev() {
        let mut s = y[i];
        for k in (i + 1)..7 {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    Ok(x)
}

/// Compensated summation (Kahan-Babuska / Neumaier variant, which also
/// survives terms larger than the running sum); keeps reductions
/// deterministic and accurate independent of chunking.
pub fn kahan_sum<I: IntoIterator<Item = f64>>(it: I) -> f64 {
    let mut s = 0.0;
    let mut c = 0.0;
    for x in it {
        let t = s + x;
        if fmath::abs(s) >= fmath::abs(x) {
            c += (s - t) + x;
        } else {
            c += (x - t) + s;
        }
        s = t;
    }
    s + c
}

// 3x3 helpers used by the tensor code.

pub fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    c
}

pub fn mat3_transpose(a: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

pub fn mat3_det(a: &[[f64; 3]; 3]) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

#[inline]
pub fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm3(a: [f64; 3]) -> f64 {
    fmath::sqrt(dot3(a, a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Oracle: solve the normal equations by Gaussian elimination with partial
    // pivoting. Independent of the QR path above.
    fn normal_eq_solve(a: &[f64], m: usize, n: usize, y: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; n * (n + 1)];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for r in 0..m {
                    s += a[r * n + i] * a[r * n + j];
                }
                g[i * (n + 1) + j] = s;
            }
            let mut s = 0.0;
            for r in 0..m {
                s += a[r * n + i] * y[r];
            }
            g[i * (n + 1) + n] = s;
        }
        for col in 0..n {
            let mut p = col;
            for r in (col + 1)..n {
                if g[r * (n + 1) + col].abs() > g[p * (n + 1) + col].abs() {
                    p = r;
                }
            }
            if p != col {
                for j in 0..=n {
                    g.swap(col * (n + 1) + j, p * (n + 1) + j);
                }
            }
            let piv = g[col * (n + 1) + col];
            for r in 0..n {
                if r != col {
                    let f = g[r * (n + 1) + col] / piv;
                    for j in col..=n {
                        g[r * (n + 1) + j] -= f * g[col * (n + 1) + j];
                    }
                }
            }
        }
        (0..n).map(|i| g[i * (n + 1) + n] / g[i * (n + 1) + i]).collect()
    }

    #[test]
    fn lstsq_matches_normal_equations_on_random_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..50 {
            let m = 7 + trial % 10;
            let n = 7;
            let a: Vec<f64> = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = lstsq(&a, m, n, &y).unwrap();
            let x_ref = normal_eq_solve(&a, m, n, &y);
            for j in 0..n {
                assert!(
                    (x[j] - x_ref[j]).abs() < 1e-8,
                    "trial {trial} col {j}: {} vs {}",
                    x[j],
                    x_ref[j]
                );
            }
        }
    }

    #[test]
    fn lstsq_exact_on_square_systems() {
        // 3x3 with known solution.
        let a = [2.0, 0.0, 1.0, 0.0, 3.0, -1.0, 1.0, 1.0, 1.0];
        let x_true = [1.0, -2.0, 0.5];
        let y: Vec<f64> = (0..3)
            .map(|i| (0..3).map(|j| a[i * 3 + j] * x_true[j]).sum())
            .collect();
        let x = lstsq(&a, 3, 3, &y).unwrap();
        for j in 0..3 {
            assert!((x[j] - x_true[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn lstsq_flags_rank_deficiency() {
        // Two identical columns.
        let mut a = vec![0.0; 8 * 3];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for r in 0..8 {
            let u: f64 = rng.gen_range(-1.0..1.0);
            let v: f64 = rng.gen_range(-1.0..1.0);
            a[r * 3] = u;
            a[r * 3 + 1] = v;
            a[r * 3 + 2] = u; // duplicate
        }
        let y = vec![1.0; 8];
        match lstsq(&a, 8, 3, &y) {
            Err(LinalgError::RankDeficient { .. }) => {}
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn cholesky_solves_spd_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            // SPD via B^T B + I.
            let b: Vec<f64> = (0..49).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut a = [[0.0; 7]; 7];
            for i in 0..7 {
                for j in 0..7 {
                    let mut s = if i == j { 1.0 } else { 0.0 };
                    for k in 0..7 {
                        s += b[k * 7 + i] * b[k * 7 + j];
                    }
                    a[i][j] = s;
                }
            }
            let x_true: [f64; 7] = core::array::from_fn(|_| rng.gen_range(-2.0..2.0));
            let mut rhs = [0.0; 7];
            for i in 0..7 {
                for j in 0..7 {
                    rhs[i] += a[i][j] * x_true[j];
                }
            }
            let x = cholesky_solve7(&a, &rhs).unwrap();
            for j in 0..7 {
                assert!((x[j] - x_true[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let mut a = [[0.0; 7]; 7];
        for i in 0..7 {
            a[i][i] = 1.0;
        }
        a[3][3] = -1.0;
        assert!(matches!(
            cholesky_solve7(&a, &[1.0; 7]),
            Err(LinalgError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn kahan_beats_naive_on_adversarial_sums() {
        let xs = vec![1.0e16, 1.0, -1.0e16, 1.0];
        assert_eq!(kahan_sum(xs.iter().copied()), 2.0);
    }
}
