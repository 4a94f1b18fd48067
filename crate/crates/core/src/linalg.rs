//! Dense complex matrices and the Hermitian solves the LS machinery needs.

use std::fmt;
use std::ops::{Index, IndexMut};

use num_complex::Complex64;

use crate::error::{dim_err, Error, Result};

/// Gram matrices whose 1-norm condition number exceeds this are rejected.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Row-major dense complex matrix.
#[derive(Clone, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<Complex64>,
}

impl fmt::Debug for ComplexMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ComplexMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            write!(f, "  ")?;
            for c in 0..self.cols {
                let z = self[(r, c)];
                write!(f, "{:+.4}{:+.4}j ", z.re, z.im)?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl ComplexMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<Complex64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return dim_err(format!("matrix must be non-empty, got {rows}x{cols}"));
        }
        if rows * cols != entries.len() {
            return dim_err(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                entries.len()
            ));
        }
        Ok(Self { rows, cols, entries })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must be non-empty");
        Self {
            rows,
            cols,
            entries: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| {
            if r == c {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must be non-empty");
        let mut entries = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                entries.push(f(r, c));
            }
        }
        Self { rows, cols, entries }
    }

    pub fn column_vector(values: Vec<Complex64>) -> Result<Self> {
        let n = values.len();
        Self::new(n, 1, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn entries(&self) -> &[Complex64] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Complex64] {
        &mut self.entries
    }

    pub fn column(&self, c: usize) -> Vec<Complex64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[Complex64]) {
        assert_eq!(values.len(), self.rows);
        for (r, v) in values.iter().enumerate() {
            self[(r, c)] = *v;
        }
    }

    pub fn row(&self, r: usize) -> &[Complex64] {
        &self.entries[r * self.cols..(r + 1) * self.cols]
    }

    /// Conjugate transpose.
    pub fn hermitian(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)].conj())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return dim_err(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            ));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            let lhs_row = self.row(r);
            let out_row = &mut out.entries[r * rhs.cols..(r + 1) * rhs.cols];
            for (k, a) in lhs_row.iter().enumerate() {
                if a.re == 0.0 && a.im == 0.0 {
                    continue;
                }
                for (o, b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn scale(&self, factor: Complex64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            entries: self.entries.iter().map(|z| z * factor).collect(),
        }
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, |a, b| a - b)
    }

    fn zip_with(&self, rhs: &Self, f: impl Fn(Complex64, Complex64) -> Complex64) -> Result<Self> {
        if self.shape() != rhs.shape() {
            return dim_err(format!("shape {:?} vs {:?}", self.shape(), rhs.shape()));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            entries: self.entries.iter().zip(&rhs.entries).map(|(a, b)| f(*a, *b)).collect(),
        })
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.entries.iter().map(Complex64::norm_sqr).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// `self * self^H`.
    pub fn gram(&self) -> Self {
        let mut out = Self::zeros(self.rows, self.rows);
        for i in 0..self.rows {
            for j in i..self.rows {
                let v: Complex64 = self.row(i).iter().zip(self.row(j)).map(|(a, b)| a * b.conj()).sum();
                out[(i, j)] = v;
                out[(j, i)] = v.conj();
            }
        }
        out
    }

    fn one_norm(&self) -> f64 {
        (0..self.cols)
            .map(|c| (0..self.rows).map(|r| self[(r, c)].norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Inverse of a Hermitian positive-definite matrix via Cholesky.
    ///
    /// Fails with [`Error::Singular`] when a pivot collapses or the 1-norm
    /// condition number exceeds [`CONDITION_LIMIT`].
    pub fn hermitian_inverse(&self) -> Result<Self> {
        let n = self.rows;
        if n != self.cols {
            return dim_err(format!("inverse of non-square {}x{}", self.rows, self.cols));
        }
        let scale = (0..n).map(|i| self[(i, i)].re.abs()).fold(0.0, f64::max);
        if scale == 0.0 || !scale.is_finite() {
            return Err(Error::Singular("zero or non-finite diagonal".into()));
        }
        // A = L L^H, L lower triangular with real positive diagonal.
        let mut l = Self::zeros(n, n);
        for j in 0..n {
            let mut d = self[(j, j)].re;
            for k in 0..j {
                d -= l[(j, k)].norm_sqr();
            }
            if d <= scale * 1e-14 {
                return Err(Error::Singular(format!(
                    "matrix is not positive definite (pivot {d:.3e} at {j})"
                )));
            }
            let d = d.sqrt();
            l[(j, j)] = Complex64::new(d, 0.0);
            for i in j + 1..n {
                let mut s = self[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)].conj();
                }
                l[(i, j)] = s / d;
            }
        }
        // Solve A X = I column by column.
        let mut inv = Self::zeros(n, n);
        let mut y = vec![Complex64::new(0.0, 0.0); n];
        for c in 0..n {
            for i in 0..n {
                let mut s = if i == c {
                    Complex64::new(1.0, 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                };
                for k in 0..i {
                    s -= l[(i, k)] * y[k];
                }
                y[i] = s / l[(i, i)];
            }
            for i in (0..n).rev() {
                let mut s = y[i];
                for k in i + 1..n {
                    s -= l[(k, i)].conj() * inv[(k, c)];
                }
                inv[(i, c)] = s / l[(i, i)];
            }
        }
        let cond = self.one_norm() * inv.one_norm();
        if !(cond <= CONDITION_LIMIT) {
            return Err(Error::Singular(format!(
                "condition number {cond:.3e} exceeds {CONDITION_LIMIT:.0e}"
            )));
        }
        Ok(inv)
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = Complex64;

    fn index(&self, (r, c): (usize, usize)) -> &Complex64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.entries[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut Complex64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.entries[r * self.cols + c]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> ComplexMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ComplexMatrix::from_fn(rows, cols, |_, _| {
            Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        })
    }

    #[test]
    fn hermitian_inverse_recovers_identity() {
        let a = random(5, 9, 3);
        let g = a.gram();
        let inv = g.hermitian_inverse().unwrap();
        let prod = g.matmul(&inv).unwrap();
        assert!(prod.max_abs_diff(&ComplexMatrix::identity(5)) < 1e-10);
    }

    #[test]
    fn rank_deficient_gram_is_singular() {
        let mut a = random(3, 4, 1);
        let r0 = a.row(0).to_vec();
        for (c, v) in r0.iter().enumerate() {
            a[(2, c)] = *v * 2.0;
        }
        assert!(matches!(a.gram().hermitian_inverse(), Err(Error::Singular(_))));
    }

    #[test]
    fn ill_conditioned_gram_is_rejected() {
        let mut g = ComplexMatrix::identity(2);
        g[(1, 1)] = Complex64::new(1e-13, 0.0);
        assert!(g.hermitian_inverse().is_err());
    }

    #[test]
    fn matmul_rejects_mismatch() {
        assert!(random(2, 3, 0).matmul(&random(2, 3, 1)).is_err());
    }
}
