//! Dense LU factorization with partial pivoting for the small systems the
//! solver builds (at most 13x13).

use crate::error::{Error, Result};

/// Square row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Matrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(n);
        for r in 0..n {
            for c in 0..n {
                m.data[r * n + c] = f(r, c);
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.n + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.n + c] = v;
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|r| (0..self.n).map(|c| self.get(r, c) * x[c]).sum())
            .collect()
    }

    /// Maximum absolute column sum.
    pub fn norm1(&self) -> f64 {
        (0..self.n)
            .map(|c| (0..self.n).map(|r| self.get(r, c).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// `PA = LU` with unit lower-triangular `L`.
#[derive(Debug, Clone)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    norm1: f64,
}

impl Lu {
    /// Fails only on an exactly zero pivot; near-singularity is reported
    /// through [`Lu::condition_estimate`].
    pub fn factor(a: &Matrix) -> Result<Lu> {
        let n = a.n;
        let mut lu = a.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut piv = k;
            let mut best = lu[k * n + k].abs();
            for r in (k + 1)..n {
                let v = lu[r * n + k].abs();
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
            if piv != k {
                for c in 0..n {
                    lu.swap(k * n + c, piv * n + c);
                }
                perm.swap(k, piv);
            }
            let d = lu[k * n + k];
            for r in (k + 1)..n {
                let f = lu[r * n + k] / d;
                lu[r * n + k] = f;
                if f != 0.0 {
                    for c in (k + 1)..n {
                        lu[r * n + c] -= f * lu[k * n + c];
                    }
                }
            }
        }
        Ok(Lu {
            n,
            lu,
            perm,
            norm1: a.norm1(),
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for r in 0..n {
            let mut s = y[r];
            for c in 0..r {
                s -= self.lu[r * n + c] * y[c];
            }
            y[r] = s;
        }
        for r in (0..n).rev() {
            let mut s = y[r];
            for c in (r + 1)..n {
                s -= self.lu[r * n + c] * y[c];
            }
            y[r] = s / self.lu[r * n + r];
        }
        y
    }

    /// Solves `A^T x = b` without forming the transpose.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        // U^T z = b
        let mut z = b.to_vec();
        for r in 0..n {
            let mut s = z[r];
            for c in 0..r {
                s -= self.lu[c * n + r] * z[c];
            }
            z[r] = s / self.lu[r * n + r];
        }
        // L^T w = z
        for r in (0..n).rev() {
            let mut s = z[r];
            for c in (r + 1)..n {
                s -= self.lu[c * n + r] * z[c];
            }
            z[r] = s;
        }
        let mut x = vec![0.0; n];
        for (i, &p) in self.perm.iter().enumerate() {
            x[p] = z[i];
        }
        x
    }

    /// 1-norm condition number `||A||_1 ||A^-1||_1`, computed from the
    /// factorization column by column. Exact for the dimensions used here.
    pub fn condition_estimate(&self) -> f64 {
        let n = self.n;
        let mut inv_norm: f64 = 0.0;
        let mut e = vec![0.0; n];
        for k in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[k] = 1.0;
            let col = self.solve(&e);
            inv_norm = inv_norm.max(col.iter().map(|v| v.abs()).sum());
        }
        let cond = self.norm1 * inv_norm;
        if cond.is_finite() {
            cond
        } else {
            f64::INFINITY
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Matrix {
        Matrix::from_fn(3, |r, c| {
            [[2.0, 1.0, -1.0], [-3.0, -1.0, 2.0], [-2.0, 1.0, 2.0]][r][c]
        })
    }

    #[test]
    fn solves_known_system() {
        let lu = Lu::factor(&sample()).unwrap();
        let x = lu.solve(&[8.0, -11.0, -3.0]);
        for (got, want) in x.iter().zip([2.0, 3.0, -1.0]) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn transpose_solve_matches_explicit_transpose() {
        let a = sample();
        let at = Matrix::from_fn(3, |r, c| a.get(c, r));
        let b = [1.0, -2.0, 0.5];
        let x1 = Lu::factor(&a).unwrap().solve_transpose(&b);
        let x2 = Lu::factor(&at).unwrap().solve(&b);
        for (u, v) in x1.iter().zip(&x2) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_pivot_is_singular() {
        let a = Matrix::from_fn(2, |_, _| 1.0);
        assert!(matches!(Lu::factor(&a), Err(Error::Singular { .. })));
    }

    #[test]
    fn condition_of_identity_is_one() {
        let lu = Lu::factor(&Matrix::from_fn(4, |r, c| if r == c { 1.0 } else { 0.0 })).unwrap();
        assert_eq!(lu.condition_estimate(), 1.0);
    }
}
