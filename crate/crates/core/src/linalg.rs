//! Dense LU factorization with partial pivoting for the small systems the
//! TPS fits produce.

use crate::{Error, Result};

/// Systems whose pivot-magnitude ratio exceeds this are rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// Row-major square LU factors `P A = L U`, unit lower triangle implied.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    condition: f64,
}

impl Lu {
    pub fn factor(a: &[f64], n: usize) -> Result<Lu> {
        let lu = Lu::factor_unchecked(a, n)?;
        if !(lu.condition <= MAX_CONDITION) {
            return Err(Error::Singular {
                condition: lu.condition,
            });
        }
        Ok(lu)
    }

    /// Like `factor` but rejects only zero or non-finite pivots, for callers
    /// that judge conditioning on a rescaled copy.
    pub fn factor_unchecked(a: &[f64], n: usize) -> Result<Lu> {
        if a.len() != n * n {
            return Err(Error::Shape(format!(
                "expected {n}x{n} matrix, got {} entries",
                a.len()
            )));
        }
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let mut piv = col;
            let mut best = lu[col * n + col].abs();
            for r in col + 1..n {
                let v = lu[r * n + col].abs();
                if v > best {
                    best = v;
                    piv = r;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return Err(Error::Singular {
                    condition: f64::INFINITY,
                });
            }
            if piv != col {
                for c in 0..n {
                    lu.swap(col * n + c, piv * n + c);
                }
                perm.swap(col, piv);
            }
            let d = lu[col * n + col];
            for r in col + 1..n {
                let f = lu[r * n + col] / d;
                lu[r * n + col] = f;
                if f != 0.0 {
                    for c in col + 1..n {
                        lu[r * n + c] -= f * lu[col * n + c];
                    }
                }
            }
        }
        let (lo, hi) = (0..n).fold((f64::INFINITY, 0.0f64), |(lo, hi), i| {
            let v = lu[i * n + i].abs();
            (lo.min(v), hi.max(v))
        });
        Ok(Lu {
            n,
            lu,
            perm,
            condition: hi / lo,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Pivot-ratio condition estimate.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// Solves `A X = B` for row-major `B` with `k` columns.
    pub fn solve(&self, b: &[f64], k: usize) -> Vec<f64> {
        let n = self.n;
        assert_eq!(b.len(), n * k);
        let mut x = vec![0.0; n * k];
        for (i, &p) in self.perm.iter().enumerate() {
            x[i * k..(i + 1) * k].copy_from_slice(&b[p * k..(p + 1) * k]);
        }
        for i in 0..n {
            for j in 0..i {
                let f = self.lu[i * n + j];
                if f != 0.0 {
                    for c in 0..k {
                        x[i * k + c] -= f * x[j * k + c];
                    }
                }
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                let f = self.lu[i * n + j];
                if f != 0.0 {
                    for c in 0..k {
                        x[i * k + c] -= f * x[j * k + c];
                    }
                }
            }
            let d = self.lu[i * n + i];
            for c in 0..k {
                x[i * k + c] /= d;
            }
        }
        x
    }

    /// Solves `A^T X = B`.
    pub fn solve_transpose(&self, b: &[f64], k: usize) -> Vec<f64> {
        let n = self.n;
        assert_eq!(b.len(), n * k);
        // A^T = U^T L^T P, so solve U^T z = b, L^T w = z, then x = P^T w.
        let mut z = b.to_vec();
        for i in 0..n {
            for j in 0..i {
                let f = self.lu[j * n + i];
                if f != 0.0 {
                    for c in 0..k {
                        z[i * k + c] -= f * z[j * k + c];
                    }
                }
            }
            let d = self.lu[i * n + i];
            for c in 0..k {
                z[i * k + c] /= d;
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                let f = self.lu[j * n + i];
                if f != 0.0 {
                    for c in 0..k {
                        z[i * k + c] -= f * z[j * k + c];
                    }
                }
            }
        }
        let mut x = vec![0.0; n * k];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p * k..(p + 1) * k].copy_from_slice(&z[i * k..(i + 1) * k]);
        }
        x
    }
}

/// Row-major `n x m` times `m x k`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let row = &mut out[i * k..(i + 1) * k];
        for j in 0..m {
            let f = a[i * m + j];
            if f != 0.0 {
                for (o, &bv) in row.iter_mut().zip(&b[j * k..(j + 1) * k]) {
                    *o += f * bv;
                }
            }
        }
    }
    out
}

/// Inverse of a 4x4 row-major matrix via LU.
pub fn invert4(m: &[f64; 16]) -> Result<[f64; 16]> {
    let lu = Lu::factor(m, 4)?;
    let mut eye = [0.0; 16];
    for i in 0..4 {
        eye[i * 5] = 1.0;
    }
    let inv = lu.solve(&eye, 4);
    let mut out = [0.0; 16];
    out.copy_from_slice(&inv);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let mut a: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for i in 0..n {
            a[i * n + i] += n as f64;
        }
        a
    }

    #[test]
    fn unchecked_factor_accepts_badly_scaled_systems() {
        let a = [1e14, 0.0, 0.0, 1.0];
        assert!(matches!(Lu::factor(&a, 2), Err(Error::Singular { .. })));
        let lu = Lu::factor_unchecked(&a, 2).unwrap();
        assert_eq!(lu.condition(), 1e14);
        assert_eq!(lu.solve(&[1e14, 2.0], 1), vec![1.0, 2.0]);
        assert!(Lu::factor_unchecked(&[0.0; 4], 2).is_err());
    }

    #[test]
    fn solve_and_transpose_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1, 2, 5, 9] {
            let a = random_matrix(&mut rng, n);
            let b: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let lu = Lu::factor(&a, n).unwrap();
            let x = lu.solve(&b, 2);
            let ax = matmul(&a, &x, n, n, 2);
            for (u, v) in ax.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12);
            }
            let y = lu.solve_transpose(&b, 2);
            let mut at = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    at[j * n + i] = a[i * n + j];
                }
            }
            let aty = matmul(&at, &y, n, n, 2);
            for (u, v) in aty.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pivoting_handles_zero_diagonal() {
        let a = [0.0, 1.0, 1.0, 0.0];
        let lu = Lu::factor(&a, 2).unwrap();
        assert_eq!(lu.solve(&[2.0, 3.0], 1), vec![3.0, 2.0]);
    }

    #[test]
    fn singular_rejected() {
        let a = [1.0, 2.0, 2.0, 4.0];
        assert!(matches!(Lu::factor(&a, 2), Err(Error::Singular { .. })));
        let b = [1.0, 0.0, 0.0, 1e-14];
        assert!(matches!(Lu::factor(&b, 2), Err(Error::Singular { .. })));
    }

    #[test]
    fn inverse_4x4() {
        let m = [
            2.0, 0.1, 0.0, 5.0, 0.0, 1.5, -0.3, 1.0, 0.2, 0.0, 0.9, -2.0, 0.0, 0.0, 0.0, 1.0,
        ];
        let inv = invert4(&m).unwrap();
        let prod = matmul(&m, &inv, 4, 4, 4);
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[i * 4 + j] - want).abs() < 1e-14);
            }
        }
    }
}
