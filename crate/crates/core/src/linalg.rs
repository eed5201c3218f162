//! Banded direct solver and a conjugate-gradient iteration.
//!
//! Every operator of the scheme couples a cell only to its axis neighbours, so
//! with row-major cell ordering the matrices are banded with half-bandwidth
//! `nx` (2D) or 1 (1D, where the factorization reduces to tridiagonal
//! elimination). Factorization is done without pivoting: the operators are
//! diagonally dominant by rows or columns, and for M-matrices elimination
//! without pivoting keeps every intermediate sign, so a nonnegative
//! right-hand side yields a nonnegative solution in floating point too.

use crate::error::{Error, Result};

/// Square matrix with `bw` sub- and super-diagonals, stored row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct BandMatrix {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (2 * bw + 1)],
        }
    }

    pub fn identity_scaled(n: usize, bw: usize, scale: f64) -> Self {
        let mut m = Self::zeros(n, bw);
        for i in 0..n {
            m.add(i, i, scale);
        }
        m
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        debug_assert!(i.abs_diff(j) <= self.bw, "({i},{j}) outside band {}", self.bw);
        i * (2 * self.bw + 1) + (j + self.bw - i)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i.abs_diff(j) > self.bw {
            0.0
        } else {
            self.data[self.slot(i, j)]
        }
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, value: f64) {
        let s = self.slot(i, j);
        self.data[s] += value;
    }

    pub fn add_diagonal(&mut self, diag: &[f64]) {
        assert_eq!(diag.len(), self.n);
        for (i, d) in diag.iter().enumerate() {
            self.add(i, i, *d);
        }
    }

    /// `self += alpha * other` for matrices of identical shape.
    pub fn axpy(&mut self, alpha: f64, other: &BandMatrix) {
        assert_eq!((self.n, self.bw), (other.n, other.bw));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        i.saturating_sub(self.bw)..(i + self.bw + 1).min(self.n)
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..self.n)
            .map(|i| self.row_range(i).map(|j| self.get(i, j) * x[j]).sum())
            .collect()
    }

    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            for j in self.row_range(i) {
                y[j] += self.get(i, j) * x[i];
            }
        }
        y
    }

    pub fn transpose(&self) -> BandMatrix {
        let mut t = BandMatrix::zeros(self.n, self.bw);
        for i in 0..self.n {
            for j in self.row_range(i) {
                t.add(j, i, self.get(i, j));
            }
        }
        t
    }

    /// In-place LU factorization without pivoting.
    pub fn factor(mut self) -> Result<BandLu> {
        let n = self.n;
        let bw = self.bw;
        let scale = self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        for k in 0..n {
            let pivot = self.get(k, k);
            if !pivot.is_finite() || pivot.abs() <= 1e-14 * scale.max(f64::MIN_POSITIVE) {
                return Err(Error::LinearSolver {
                    reason: format!("zero or non-finite pivot at row {k}"),
                    residual: f64::NAN,
                });
            }
            let last = (k + bw).min(n - 1);
            for i in (k + 1)..=last {
                let si = self.slot(i, k);
                let l = self.data[si] / pivot;
                if l == 0.0 {
                    continue;
                }
                self.data[si] = l;
                for j in (k + 1)..=last {
                    let kj = self.data[self.slot(k, j)];
                    if kj != 0.0 {
                        let s = self.slot(i, j);
                        self.data[s] -= l * kj;
                    }
                }
            }
        }
        Ok(BandLu { lu: self })
    }

    pub fn solve(self, b: &[f64]) -> Result<Vec<f64>> {
        self.factor()?.solve(b)
    }
}

/// Packed LU factors (unit lower triangle implied).
#[derive(Debug, Clone)]
pub struct BandLu {
    lu: BandMatrix,
}

impl BandLu {
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let m = &self.lu;
        assert_eq!(b.len(), m.n);
        let mut x = b.to_vec();
        for i in 0..m.n {
            let mut acc = x[i];
            for j in i.saturating_sub(m.bw)..i {
                acc -= m.get(i, j) * x[j];
            }
            x[i] = acc;
        }
        for i in (0..m.n).rev() {
            let mut acc = x[i];
            for j in (i + 1)..(i + m.bw + 1).min(m.n) {
                acc -= m.get(i, j) * x[j];
            }
            x[i] = acc / m.get(i, i);
        }
        check_finite(&x)?;
        Ok(x)
    }

    /// Solves `Aᵀ x = b` with the factors of `A`.
    pub fn solve_transpose(&self, b: &[f64]) -> Result<Vec<f64>> {
        let m = &self.lu;
        assert_eq!(b.len(), m.n);
        let mut x = b.to_vec();
        // Uᵀ y = b
        for i in 0..m.n {
            let mut acc = x[i];
            for j in i.saturating_sub(m.bw)..i {
                acc -= m.get(j, i) * x[j];
            }
            x[i] = acc / m.get(i, i);
        }
        // Lᵀ x = y
        for i in (0..m.n).rev() {
            let mut acc = x[i];
            for j in (i + 1)..(i + m.bw + 1).min(m.n) {
                acc -= m.get(j, i) * x[j];
            }
            x[i] = acc;
        }
        check_finite(&x)?;
        Ok(x)
    }
}

fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::LinearSolver {
            reason: "non-finite solution".into(),
            residual: f64::NAN,
        })
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Conjugate gradients for a symmetric positive-definite operator. Stops when
/// `‖b − A x‖₂ ≤ rel_tol · ‖b‖₂`; iteration order is fixed, so results are
/// reproducible bit for bit.
pub fn conjugate_gradient<F>(apply: F, b: &[f64], rel_tol: f64, max_iter: usize) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let n = b.len();
    let bnorm = norm2(b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    for _ in 0..max_iter {
        if rr.sqrt() <= rel_tol * bnorm {
            return Ok(x);
        }
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            return Err(Error::LinearSolver {
                reason: "operator is not positive definite".into(),
                residual: rr.sqrt() / bnorm,
            });
        }
        let a = rr / pap;
        for i in 0..n {
            x[i] += a * p[i];
            r[i] -= a * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    // recompute the true residual before giving up
    let ax = apply(&x);
    let res: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let rel = norm2(&res) / bnorm;
    if rel <= rel_tol {
        Ok(x)
    } else {
        Err(Error::LinearSolver {
            reason: format!("conjugate gradient reached {max_iter} iterations"),
            residual: rel,
        })
    }
}
