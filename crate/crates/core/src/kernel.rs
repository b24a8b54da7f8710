//! Gaussian log-densities for covariances of the form `Λ Λ' + Ψ`.
//!
//! With `M = I_d + Λ'Ψ⁻¹Λ` the Woodbury identity gives
//! `Σ⁻¹ = Ψ⁻¹ − Ψ⁻¹Λ M⁻¹ Λ'Ψ⁻¹` and the determinant lemma gives
//! `log|Σ| = log|Ψ| + log|M|`, so nothing larger than `d × d` is factorized.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::model::MfaParams;

/// Reciprocal condition estimate below which `M` is treated as singular.
pub const RCOND_MIN: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct ComponentKernel {
    mean: DVector<f64>,
    loadings: DMatrix<f64>,
    noise_diag: DVector<f64>,
    inv_noise: DVector<f64>,
    /// `Λ'Ψ⁻¹`, d × p.
    scaled_loadings_t: DMatrix<f64>,
    inner_chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl ComponentKernel {
    pub fn new(mean: DVector<f64>, loadings: DMatrix<f64>, noise_diag: DVector<f64>) -> Result<Self> {
        let p = mean.len();
        let d = loadings.ncols();
        assert_eq!(loadings.nrows(), p);
        assert_eq!(noise_diag.len(), p);
        let inv_noise = noise_diag.map(|v| 1.0 / v);
        let mut scaled_loadings_t = loadings.transpose();
        for (j, mut col) in scaled_loadings_t.column_iter_mut().enumerate() {
            col *= inv_noise[j];
        }
        let inner = DMatrix::identity(d, d) + &scaled_loadings_t * &loadings;
        let inner_chol = Cholesky::new(inner).ok_or(Error::SingularInnerMatrix { rcond: 0.0 })?;
        let diag = inner_chol.l_dirty().diagonal();
        if d > 0 {
            let (lo, hi) = diag
                .iter()
                .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let rcond = (lo / hi).powi(2);
            if !(rcond >= RCOND_MIN) {
                return Err(Error::SingularInnerMatrix { rcond });
            }
        }
        let log_det =
            noise_diag.iter().map(|v| v.ln()).sum::<f64>() + 2.0 * diag.iter().map(|v| v.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(Error::SingularInnerMatrix { rcond: 0.0 });
        }
        Ok(Self {
            mean,
            loadings,
            noise_diag,
            inv_noise,
            scaled_loadings_t,
            inner_chol,
            log_det,
        })
    }

    pub fn from_params(params: &MfaParams, g: usize) -> Result<Self> {
        Self::new(
            params.means()[g].clone(),
            params.loadings()[g].clone(),
            params.noise_diag()[g].clone(),
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn n_factors(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn loadings(&self) -> &DMatrix<f64> {
        &self.loadings
    }

    pub fn noise_diag(&self) -> &DVector<f64> {
        &self.noise_diag
    }

    /// `log |Λ Λ' + Ψ|`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Mahalanobis form `r' Σ⁻¹ r`.
    fn quad_form(&self, r: &DVector<f64>) -> f64 {
        let diag_part: f64 = r.iter().zip(self.inv_noise.iter()).map(|(a, w)| a * a * w).sum();
        let mut t = &self.scaled_loadings_t * r;
        self.inner_chol.l_dirty().solve_lower_triangular_mut(&mut t);
        diag_part - t.norm_squared()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let r = x - &self.mean;
        let p = self.dim() as f64;
        -0.5 * (p * (2.0 * PI).ln() + self.log_det + self.quad_form(&r))
    }

    /// Log-density of every row of an `n × p` matrix.
    pub fn log_density_rows(&self, data: &DMatrix<f64>) -> Vec<f64> {
        let (n, p) = data.shape();
        let mut centered = data.clone();
        for j in 0..p {
            let m = self.mean[j];
            centered.column_mut(j).add_scalar_mut(-m);
        }
        let mut t = &self.scaled_loadings_t * centered.transpose();
        self.inner_chol.l_dirty().solve_lower_triangular_mut(&mut t);
        let constant = p as f64 * (2.0 * PI).ln() + self.log_det;
        (0..n)
            .map(|i| {
                let diag_part: f64 = (0..p)
                    .map(|j| centered[(i, j)] * centered[(i, j)] * self.inv_noise[j])
                    .sum();
                let q = diag_part - t.column(i).norm_squared();
                -0.5 * (constant + q)
            })
            .collect()
    }

    /// `γ = Λ'Σ⁻¹` (d × p) and `I_d − γΛ` (d × d).
    pub fn factor_projection(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        // Λ'Σ⁻¹ = M⁻¹ Λ'Ψ⁻¹
        let gamma = self.inner_chol.solve(&self.scaled_loadings_t);
        let d = self.n_factors();
        let residual = DMatrix::identity(d, d) - &gamma * &self.loadings;
        (gamma, residual)
    }

    /// `Ξ = I_d − γΛ + γ(x − μ)(x − μ)'γ'` for an arbitrary centre `mu`.
    pub fn xi_matrix(&self, x: &DVector<f64>, mu: &DVector<f64>) -> DMatrix<f64> {
        let (gamma, residual) = self.factor_projection();
        let u = gamma * (x - mu);
        residual + &u * u.transpose()
    }
}

/// Dense reference path: forms `Σ` explicitly and uses a `p × p` Cholesky.
pub mod dense {
    use super::*;

    pub fn covariance(loadings: &DMatrix<f64>, noise_diag: &DVector<f64>) -> DMatrix<f64> {
        loadings * loadings.transpose() + DMatrix::from_diagonal(noise_diag)
    }

    pub fn log_density(
        mean: &DVector<f64>,
        loadings: &DMatrix<f64>,
        noise_diag: &DVector<f64>,
        x: &DVector<f64>,
    ) -> Option<f64> {
        let sigma = covariance(loadings, noise_diag);
        let chol = Cholesky::new(sigma)?;
        let r = x - mean;
        let mut z = r.clone();
        chol.l_dirty().solve_lower_triangular_mut(&mut z);
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let p = mean.len() as f64;
        Some(-0.5 * (p * (2.0 * PI).ln() + log_det + z.norm_squared()))
    }

    pub fn log_det(loadings: &DMatrix<f64>, noise_diag: &DVector<f64>) -> Option<f64> {
        let chol = Cholesky::new(covariance(loadings, noise_diag))?;
        Some(2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>())
    }
}
