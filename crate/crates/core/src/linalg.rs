//! Minimal dense symmetric linear algebra for the logistic solver.
//!
//! Matrices are small (one row/column per model term), so a plain
//! `Vec<f64>` row-major layout with Cholesky factorization is enough.

/// Row-major square matrix view helpers.
#[derive(Debug, Clone)]
pub struct SymMatrix {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        SymMatrix {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.dim + j] = v;
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.dim + j] += v;
    }

    /// Lower-triangular Cholesky factor, or the indices of columns whose
    /// pivot collapses (numerically dependent columns).
    pub fn cholesky(&self) -> Result<SymMatrix, Vec<usize>> {
        let n = self.dim;
        let mut l = SymMatrix::zeros(n);
        let mut bad = Vec::new();
        // relative pivot tolerance anchored to the largest diagonal entry
        let scale = (0..n).map(|i| self.get(i, i).abs()).fold(0.0, f64::max);
        let tol = 1e-10 * scale.max(1e-300);
        for j in 0..n {
            let mut d = self.get(j, j);
            for k in 0..j {
                d -= l.get(j, k) * l.get(j, k);
            }
            if d <= tol {
                bad.push(j);
                continue;
            }
            let dj = d.sqrt();
            l.set(j, j, dj);
            for i in (j + 1)..n {
                let mut s = self.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, s / dj);
            }
        }
        if bad.is_empty() {
            Ok(l)
        } else {
            Err(bad)
        }
    }

    /// Solve `A x = b` for symmetric positive definite `A`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, Vec<usize>> {
        let l = self.cholesky()?;
        Ok(l.solve_with_factor(b))
    }

    /// Forward/back substitution given `self` is a lower Cholesky factor.
    fn solve_with_factor(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.get(i, k) * y[k];
            }
            y[i] = s / self.get(i, i);
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.get(k, i) * x[k];
            }
            x[i] = s / self.get(i, i);
        }
        x
    }

    /// Full inverse via Cholesky; used for coefficient standard errors.
    pub fn inverse(&self) -> Result<SymMatrix, Vec<usize>> {
        let l = self.cholesky()?;
        let n = self.dim;
        let mut inv = SymMatrix::zeros(n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = l.solve_with_factor(&e);
            for i in 0..n {
                inv.set(i, j, col[i]);
            }
            e[j] = 0.0;
        }
        Ok(inv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_spd_system() {
        let mut a = SymMatrix::zeros(2);
        a.set(0, 0, 4.0);
        a.set(0, 1, 1.0);
        a.set(1, 0, 1.0);
        a.set(1, 1, 3.0);
        let x = a.solve(&[1.0, 2.0]).unwrap();
        // solution of [[4,1],[1,3]] x = [1,2]
        assert!((x[0] - 1.0 / 11.0).abs() < 1e-12);
        assert!((x[1] - 7.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn flags_dependent_columns() {
        let mut a = SymMatrix::zeros(2);
        // second column is twice the first: singular
        a.set(0, 0, 1.0);
        a.set(0, 1, 2.0);
        a.set(1, 0, 2.0);
        a.set(1, 1, 4.0);
        let bad = a.cholesky().unwrap_err();
        assert_eq!(bad, vec![1]);
    }

    #[test]
    fn inverse_matches_hand_computation() {
        let mut a = SymMatrix::zeros(2);
        a.set(0, 0, 2.0);
        a.set(1, 1, 8.0);
        let inv = a.inverse().unwrap();
        assert!((inv.get(0, 0) - 0.5).abs() < 1e-14);
        assert!((inv.get(1, 1) - 0.125).abs() < 1e-14);
        assert!(inv.get(0, 1).abs() < 1e-14);
    }
}
