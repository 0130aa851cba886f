//! Weighted least squares for the small dense designs used here (a handful
//! of columns, at most a few thousand rows). Normal equations are factored
//! with a diagonally pivoted Cholesky decomposition so that rank deficiency
//! is detected column by column.

use crate::error::{Error, Result};

/// Relative pivot below which a design is declared singular.
pub const SINGULAR_PIVOT: f64 = 1e-12;
/// Relative pivot below which a covariate column is dropped as collinear.
pub const COLLINEAR_PIVOT: f64 = 1e-10;

/// Row-major dense design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    cols: usize,
    data: Vec<f64>,
}

impl Design {
    pub fn new(cols: usize) -> Self {
        Self { cols, data: Vec::new() }
    }

    pub fn with_capacity(cols: usize, rows: usize) -> Self {
        Self {
            cols,
            data: Vec::with_capacity(cols * rows),
        }
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.cols, "row length does not match design width");
        self.data.extend_from_slice(row);
    }

    pub fn rows(&self) -> usize {
        if self.cols == 0 {
            0
        } else {
            self.data.len() / self.cols
        }
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// How rank deficiency is handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Collinearity {
    /// Any deficient column is an error.
    Fail,
    /// The first `protected` columns must be independent; later columns that
    /// are (numerically) spanned by earlier ones are dropped.
    Drop { protected: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WlsFit {
    /// Coefficients in original column order; dropped columns are zero.
    pub coef: Vec<f64>,
    /// `(Xᵀ Ω X)⁻¹` restricted to kept columns, zero elsewhere (p × p, row-major).
    pub bread: Vec<f64>,
    /// Original indices of dropped columns.
    pub dropped: Vec<usize>,
}

impl WlsFit {
    pub fn p(&self) -> usize {
        self.coef.len()
    }

    pub fn fitted(&self, row: &[f64]) -> f64 {
        row.iter().zip(&self.coef).map(|(x, b)| x * b).sum()
    }

    /// `xᵀ (Xᵀ Ω X)⁻¹ x`.
    pub fn bread_form(&self, row: &[f64]) -> f64 {
        let p = self.p();
        let mut acc = 0.0;
        for j in 0..p {
            if row[j] == 0.0 {
                continue;
            }
            let mut inner = 0.0;
            for k in 0..p {
                inner += self.bread[j * p + k] * row[k];
            }
            acc += row[j] * inner;
        }
        acc
    }
}

/// Fits `y ~ X` by weighted least squares with nonnegative weights `w`.
pub fn wls(x: &Design, y: &[f64], w: &[f64], mode: Collinearity) -> Result<WlsFit> {
    let n = x.rows();
    let p = x.cols();
    assert_eq!(y.len(), n);
    assert_eq!(w.len(), n);
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    for i in 0..n {
        let wi = w[i];
        if wi == 0.0 {
            continue;
        }
        let row = x.row(i);
        for j in 0..p {
            let a = wi * row[j];
            if a == 0.0 {
                continue;
            }
            xty[j] += a * y[i];
            for k in 0..=j {
                xtx[j * p + k] += a * row[k];
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            xtx[k * p + j] = xtx[j * p + k];
        }
    }
    solve_normal(&xtx, &xty, p, mode)
}

/// Solves `A c = b` for symmetric positive semi-definite `A` via pivoted Cholesky.
pub fn solve_normal(a_in: &[f64], b_in: &[f64], p: usize, mode: Collinearity) -> Result<WlsFit> {
    let (protected, tol) = match mode {
        Collinearity::Fail => (0, SINGULAR_PIVOT),
        Collinearity::Drop { protected } => (protected.min(p), COLLINEAR_PIVOT),
    };
    let orig: Vec<f64> = (0..p).map(|j| a_in[j * p + j]).collect();
    let mut a = a_in.to_vec();
    let mut perm: Vec<usize> = (0..p).collect();
    let mut rank = p;
    for k in 0..p {
        let relative = |a: &[f64], j: usize, perm: &[usize]| {
            let o = orig[perm[j]];
            if o > 0.0 {
                a[j * p + j] / o
            } else {
                0.0
            }
        };
        // earliest remaining column that is still independent; residual
        // diagonals only shrink, so a column skipped here stays dependent
        let pivot = if k < protected {
            k
        } else {
            (k..p)
                .filter(|&j| relative(&a, j, &perm) > tol)
                .min_by_key(|&j| perm[j])
                .unwrap_or(k)
        };
        if pivot != k {
            swap_sym(&mut a, p, k, pivot);
            perm.swap(k, pivot);
        }
        if relative(&a, k, &perm) <= tol {
            rank = k;
            break;
        }
        let d = a[k * p + k].sqrt();
        a[k * p + k] = d;
        for i in k + 1..p {
            a[i * p + k] /= d;
            a[k * p + i] = a[i * p + k];
        }
        // keep the trailing block fully symmetric so pivot swaps stay valid
        for j in k + 1..p {
            let ljk = a[j * p + k];
            for i in k + 1..p {
                a[i * p + j] -= a[i * p + k] * ljk;
            }
        }
    }
    if rank < p {
        let bad = perm[rank];
        match mode {
            Collinearity::Fail => {
                return Err(Error::SingularDesign(format!("column {bad} is linearly dependent")))
            }
            Collinearity::Drop { protected } if rank < protected => {
                return Err(Error::SingularDesign(format!(
                    "leading column {bad} is linearly dependent"
                )))
            }
            _ => {}
        }
    }
    // L occupies the lower triangle of a[0..rank, 0..rank]
    let solve = |rhs: &[f64]| -> Vec<f64> {
        let mut z = rhs.to_vec();
        for i in 0..rank {
            let mut s = z[i];
            for k in 0..i {
                s -= a[i * p + k] * z[k];
            }
            z[i] = s / a[i * p + i];
        }
        for i in (0..rank).rev() {
            let mut s = z[i];
            for k in i + 1..rank {
                s -= a[k * p + i] * z[k];
            }
            z[i] = s / a[i * p + i];
        }
        z
    };
    let b_perm: Vec<f64> = perm[..rank].iter().map(|&j| b_in[j]).collect();
    let c = solve(&b_perm);
    let mut coef = vec![0.0; p];
    for (k, &j) in perm[..rank].iter().enumerate() {
        coef[j] = c[k];
    }
    let mut bread = vec![0.0; p * p];
    for col in 0..rank {
        let mut e = vec![0.0; rank];
        e[col] = 1.0;
        let inv_col = solve(&e);
        for (row, v) in inv_col.iter().enumerate() {
            bread[perm[row] * p + perm[col]] = *v;
        }
    }
    let mut dropped: Vec<usize> = perm[rank..].to_vec();
    dropped.sort_unstable();
    Ok(WlsFit { coef, bread, dropped })
}

fn swap_sym(a: &mut [f64], p: usize, i: usize, j: usize) {
    for k in 0..p {
        a.swap(i * p + k, j * p + k);
    }
    for k in 0..p {
        a.swap(k * p + i, k * p + j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_fit_recovers_coefficients() {
        let mut x = Design::new(3);
        let mut y = vec![];
        let mut w = vec![];
        for i in 0..12 {
            let (a, b) = (i as f64, ((i * 7) % 5) as f64);
            x.push_row(&[1.0, a, b]);
            y.push(2.0 - 0.5 * a + 3.0 * b);
            w.push(1.0 + (i % 3) as f64);
        }
        let fit = wls(&x, &y, &w, Collinearity::Fail).unwrap();
        for (c, e) in fit.coef.iter().zip([2.0, -0.5, 3.0]) {
            assert!((c - e).abs() < 1e-10);
        }
        assert!(fit.dropped.is_empty());
    }

    #[test]
    fn collinear_column_is_dropped_or_rejected() {
        let mut x = Design::new(3);
        let mut y = vec![];
        for i in 0..8 {
            let a = i as f64;
            x.push_row(&[1.0, a, 2.0 * a + 1.0]);
            y.push(1.0 + a);
        }
        let w = vec![1.0; 8];
        assert!(matches!(wls(&x, &y, &w, Collinearity::Fail), Err(Error::SingularDesign(_))));
        let fit = wls(&x, &y, &w, Collinearity::Drop { protected: 2 }).unwrap();
        assert_eq!(fit.dropped, vec![2]);
        assert!((fit.coef[0] - 1.0).abs() < 1e-10);
        assert!((fit.coef[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn bread_is_inverse() {
        let a = [4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0];
        let fit = solve_normal(&a, &[1.0, 2.0, 3.0], 3, Collinearity::Fail).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| a[i * 3 + k] * fit.bread[k * 3 + j]).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }
}
