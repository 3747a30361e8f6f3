//! Centralized generalized least squares.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Error covariance of the stacked observations.
#[derive(Debug, Clone)]
pub enum Covariance {
    Full(DMatrix<f64>),
    Diagonal(DVector<f64>),
}

impl Covariance {
    fn dim(&self) -> usize {
        match self {
            Covariance::Full(m) => m.nrows(),
            Covariance::Diagonal(d) => d.len(),
        }
    }

    /// `Ω⁻¹ v` for every column of `v`.
    fn solve(&self, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Covariance::Diagonal(d) => {
                if let Some(q) = d.iter().position(|x| *x <= 0.0) {
                    return Err(Error::Singular(format!("Ω has nonpositive diagonal entry {q}")));
                }
                let mut out = v.clone();
                for (r, mut row) in out.row_iter_mut().enumerate() {
                    row /= d[r];
                }
                Ok(out)
            }
            Covariance::Full(m) => {
                let chol = m
                    .clone()
                    .cholesky()
                    .ok_or_else(|| Error::Singular("Ω is not positive definite".into()))?;
                Ok(chol.solve(v))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlsSolution {
    pub w_hat: DVector<f64>,
    /// `(XᵀΩ⁻¹X)⁻¹`, or its pseudo-inverse for the min-norm solution.
    pub cov: DMatrix<f64>,
    /// `‖y − X ŵ‖`.
    pub residual_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

impl GlsSolution {
    /// Two-sided normal intervals `ŵ_j ± z_{(1+level)/2} √cov_jj`.
    pub fn ci(&self, level: f64) -> Result<Vec<Interval>> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::config(format!("confidence level {level} outside (0, 1)")));
        }
        let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
        Ok(self
            .w_hat
            .iter()
            .zip(self.cov.diagonal().iter())
            .map(|(w, v)| {
                let h = z * v.max(0.0).sqrt();
                Interval { lo: w - h, hi: w + h }
            })
            .collect())
    }
}

fn check_dims(x: &DMatrix<f64>, omega: &Covariance, y: &DVector<f64>) -> Result<()> {
    if x.nrows() != y.len() || omega.dim() != y.len() {
        return Err(Error::config(format!(
            "GLS dimensions disagree: X is {}x{}, Ω is {}, y has {}",
            x.nrows(),
            x.ncols(),
            omega.dim(),
            y.len()
        )));
    }
    Ok(())
}

fn normal_equations(x: &DMatrix<f64>, omega: &Covariance, y: &DVector<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    check_dims(x, omega, y)?;
    let oinv_x = omega.solve(x)?;
    let a = x.transpose() * &oinv_x;
    let a = (&a + a.transpose()) * 0.5;
    let b = oinv_x.transpose() * y;
    Ok((a, b))
}

/// `ŵ = (XᵀΩ⁻¹X)⁻¹ XᵀΩ⁻¹ y`. Fails when the normal matrix is singular.
pub fn gls_solve(x: &DMatrix<f64>, omega: &Covariance, y: &DVector<f64>) -> Result<GlsSolution> {
    let (a, b) = normal_equations(x, omega, y)?;
    let eig = a.clone().symmetric_eigen();
    let top = eig.eigenvalues.amax();
    let deficient: Vec<String> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, v)| **v <= 1e-12 * top.max(f64::MIN_POSITIVE))
        .map(|(k, _)| {
            let dir: Vec<String> = eig.eigenvectors.column(k).iter().map(|c| format!("{c:.3}")).collect();
            format!("[{}]", dir.join(", "))
        })
        .collect();
    if !deficient.is_empty() {
        return Err(Error::Singular(format!(
            "XᵀΩ⁻¹X is singular along {}",
            deficient.join(" and ")
        )));
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Singular("XᵀΩ⁻¹X is not positive definite".into()))?;
    let w_hat = chol.solve(&b);
    let cov = chol.inverse();
    let residual_error = (y - x * &w_hat).norm();
    Ok(GlsSolution { w_hat, cov, residual_error })
}

/// Minimum-norm minimizer through the pseudo-inverse of `XᵀΩ⁻¹X`.
pub fn gls_solve_min_norm(x: &DMatrix<f64>, omega: &Covariance, y: &DVector<f64>) -> Result<GlsSolution> {
    let (a, b) = normal_equations(x, omega, y)?;
    let eig = a.symmetric_eigen();
    let tol = 1e-10 * eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let inv = eig.eigenvalues.map(|v| if v > tol { 1.0 / v } else { 0.0 });
    let cov = &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose();
    let w_hat = &cov * b;
    let residual_error = (y - x * &w_hat).norm();
    Ok(GlsSolution { w_hat, cov, residual_error })
}

/// `½ (y − Xw)ᵀ Ω⁻¹ (y − Xw)`.
pub fn centralized_loss(w: &DVector<f64>, x: &DMatrix<f64>, omega: &Covariance, y: &DVector<f64>) -> Result<f64> {
    check_dims(x, omega, y)?;
    let r = y - x * w;
    let rm = DMatrix::from_column_slice(r.len(), 1, r.as_slice());
    let s = omega.solve(&rm)?;
    Ok(0.5 * r.dot(&s.column(0)))
}

/// One line of the GLS-versus-SGN coefficient table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub coefficient: String,
    pub gls: f64,
    pub sgn: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub in_ci: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientTable {
    pub level: f64,
    pub rows: Vec<CoefficientRow>,
    pub gls_residual_error: f64,
    pub sgn_residual_error: f64,
    pub in_ci_count: usize,
}

pub fn coefficient_table(
    names: &[String],
    gls: &GlsSolution,
    sgn: &DVector<f64>,
    sgn_residual_error: f64,
    level: f64,
) -> Result<CoefficientTable> {
    let ci = gls.ci(level)?;
    let rows: Vec<CoefficientRow> = names
        .iter()
        .zip(ci)
        .enumerate()
        .map(|(j, (name, iv))| CoefficientRow {
            coefficient: name.clone(),
            gls: gls.w_hat[j],
            sgn: sgn[j],
            ci_lo: iv.lo,
            ci_hi: iv.hi,
            in_ci: iv.contains(sgn[j]),
        })
        .collect();
    Ok(CoefficientTable {
        level,
        in_ci_count: rows.iter().filter(|r| r.in_ci).count(),
        rows,
        gls_residual_error: gls.residual_error,
        sgn_residual_error,
    })
}
