//! Small dense linear-algebra kernels: LU factorization with partial
//! pivoting, triangular solves (plain and transposed), inversion, and a
//! one-norm condition number. Matrices are row-major `Vec<f64>` with an
//! explicit dimension; sizes here are a few hundred at most, so O(n^3) is
//! fine.

/// Packed LU factors of a square matrix, `P A = L U`.
pub(crate) struct Lu {
    n: usize,
    /// L below the diagonal (unit diagonal implicit), U on and above.
    lu: Vec<f64>,
    /// `perm[i]` = original row index now in position i.
    perm: Vec<usize>,
    pub(crate) singular: bool,
}

impl Lu {
    /// Factor a row-major n-by-n matrix. Never fails; check `singular`
    /// before trusting solves.
    pub(crate) fn factor(a: &[f64], n: usize) -> Lu {
        assert_eq!(a.len(), n * n);
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut singular = false;
        let scale = a.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1.0);
        for k in 0..n {
            let mut p = k;
            let mut best = lu[k * n + k].abs();
            for r in k + 1..n {
                let v = lu[r * n + k].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best <= 1e-13 * scale {
                singular = true;
                continue;
            }
            if p != k {
                for c in 0..n {
                    lu.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
            }
            let pivot = lu[k * n + k];
            for r in k + 1..n {
                let m = lu[r * n + k] / pivot;
                lu[r * n + k] = m;
                for c in k + 1..n {
                    lu[r * n + c] -= m * lu[k * n + c];
                }
            }
        }
        Lu { n, lu, perm, singular }
    }

    /// Smallest pivot magnitude on the U diagonal (0 when singular).
    pub(crate) fn min_abs_diag(&self) -> f64 {
        if self.singular {
            return 0.0;
        }
        (0..self.n)
            .map(|k| self.lu[k * self.n + k].abs())
            .fold(f64::INFINITY, f64::min)
    }

    /// |det A|, the product of pivot magnitudes.
    #[cfg(test)]
    pub(crate) fn det_abs(&self) -> f64 {
        if self.singular {
            return 0.0;
        }
        (0..self.n).map(|k| self.lu[k * self.n + k].abs()).product()
    }

    /// Solve `A x = b`.
    pub(crate) fn solve(&self, b: &[f64]) -> Option<Vec<f64>> {
        if self.singular {
            return None;
        }
        let n = self.n;
        let mut x: Vec<f64> = (0..n).map(|i| b[self.perm[i]]).collect();
        for i in 1..n {
            for j in 0..i {
                x[i] -= self.lu[i * n + j] * x[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                x[i] -= self.lu[i * n + j] * x[j];
            }
            x[i] /= self.lu[i * n + i];
        }
        Some(x)
    }

    /// Solve `A^T x = b` using the same factors: `A^T = U^T L^T P`.
    pub(crate) fn solve_transposed(&self, b: &[f64]) -> Option<Vec<f64>> {
        if self.singular {
            return None;
        }
        let n = self.n;
        // U^T z = b, forward substitution.
        let mut z = b.to_vec();
        for i in 0..n {
            for j in 0..i {
                z[i] -= self.lu[j * n + i] * z[j];
            }
            z[i] /= self.lu[i * n + i];
        }
        // L^T w = z, back substitution with unit diagonal.
        for i in (0..n).rev() {
            for j in i + 1..n {
                z[i] -= self.lu[j * n + i] * z[j];
            }
        }
        // x = P^T w.
        let mut x = vec![0.0; n];
        for i in 0..n {
            x[self.perm[i]] = z[i];
        }
        Some(x)
    }

    /// Columns of `A^{-1}` via n unit-vector solves.
    pub(crate) fn inverse(&self) -> Option<Vec<f64>> {
        if self.singular {
            return None;
        }
        let n = self.n;
        let mut inv = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for c in 0..n {
            e[c] = 1.0;
            let col = self.solve(&e)?;
            e[c] = 0.0;
            for r in 0..n {
                inv[r * n + c] = col[r];
            }
        }
        Some(inv)
    }
}

/// Maximum column sum of absolute values.
pub(crate) fn norm1(a: &[f64], n: usize) -> f64 {
    (0..n)
        .map(|c| (0..n).map(|r| a[r * n + c].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// One-norm condition number, infinite if the matrix is singular.
pub(crate) fn cond1(a: &[f64], n: usize) -> f64 {
    let lu = Lu::factor(a, n);
    match lu.inverse() {
        Some(inv) => norm1(a, n) * norm1(&inv, n),
        None => f64::INFINITY,
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn solves_a_known_system() {
        // A = [[2,1],[1,3]], b = [5,10] -> x = [1,3]
        let a = [2.0, 1.0, 1.0, 3.0];
        let lu = Lu::factor(&a, 2);
        let x = lu.solve(&[5.0, 10.0]).unwrap();
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn transposed_solve_matches_explicit_transpose() {
        let a = [3.0, -1.0, 2.0, 0.5, 4.0, -2.0, 1.0, 1.0, 1.0];
        let at = [3.0, 0.5, 1.0, -1.0, 4.0, 1.0, 2.0, -2.0, 1.0];
        let b = [1.0, 2.0, -1.0];
        let x1 = Lu::factor(&a, 3).solve_transposed(&b).unwrap();
        let x2 = Lu::factor(&at, 3).solve(&b).unwrap();
        for (u, v) in x1.iter().zip(&x2) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-10);
        }
    }

    #[test]
    fn flags_singular_matrix() {
        let a = [1.0, 2.0, 2.0, 4.0];
        let lu = Lu::factor(&a, 2);
        assert!(lu.singular);
        assert!(lu.solve(&[1.0, 1.0]).is_none());
        assert!(cond1(&a, 2).is_infinite());
    }

    #[test]
    fn condition_number_of_identity_is_one() {
        let a = [1.0, 0.0, 0.0, 1.0];
        assert_abs_diff_eq!(cond1(&a, 2), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn inverse_roundtrip() {
        let a = [0.6, 0.4, 0.4, 0.6];
        let inv = Lu::factor(&a, 2).inverse().unwrap();
        // A * A^{-1} = I
        for r in 0..2 {
            for c in 0..2 {
                let v: f64 = (0..2).map(|k| a[r * 2 + k] * inv[k * 2 + c]).sum();
                let want = if r == c { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(v, want, epsilon = 1e-12);
            }
        }
    }
}
