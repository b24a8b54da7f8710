//! Parameter types for a mixture of Gaussian factor analyzers.
//!
//! Component `g` has density `N(μ_g, Λ_g Λ_g' + Ψ_g)` with `Λ_g` a `p × d`
//! loading matrix and `Ψ_g` diagonal. Parameters are value objects; nothing
//! here mutates after construction except through the engine's updates.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `Σ π_g = 1`.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Full parameter vector of a `G`-component mixture of factor analyzers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsRecord", into = "ParamsRecord")]
pub struct MfaParams {
    weights: DVector<f64>,
    means: Vec<DVector<f64>>,
    loadings: Vec<DMatrix<f64>>,
    noise_diag: Vec<DVector<f64>>,
}

impl MfaParams {
    pub fn new(
        weights: DVector<f64>,
        means: Vec<DVector<f64>>,
        loadings: Vec<DMatrix<f64>>,
        noise_diag: Vec<DVector<f64>>,
    ) -> Result<Self> {
        let params = Self {
            weights,
            means,
            loadings,
            noise_diag,
        };
        params.validate()?;
        Ok(params)
    }

    fn validate(&self) -> Result<()> {
        let g = self.weights.len();
        if g == 0 {
            return Err(Error::InvalidParams("no components".into()));
        }
        if self.means.len() != g || self.loadings.len() != g || self.noise_diag.len() != g {
            return Err(Error::InvalidParams(format!(
                "component counts disagree: {} weights, {} means, {} loadings, {} noise vectors",
                g,
                self.means.len(),
                self.loadings.len(),
                self.noise_diag.len()
            )));
        }
        let p = self.means[0].len();
        let d = self.loadings[0].ncols();
        if d == 0 || d >= p {
            return Err(Error::InvalidParams(format!(
                "need 1 <= d < p, got d = {d}, p = {p}"
            )));
        }
        for k in 0..g {
            let w = self.weights[k];
            if !(w > 0.0 && w <= 1.0) {
                return Err(Error::InvalidParams(format!("weight {k} = {w} not in (0, 1]")));
            }
            if self.means[k].len() != p
                || self.loadings[k].nrows() != p
                || self.loadings[k].ncols() != d
                || self.noise_diag[k].len() != p
            {
                return Err(Error::InvalidParams(format!("component {k} has inconsistent shapes")));
            }
            if self.means[k].iter().any(|v| !v.is_finite())
                || self.loadings[k].iter().any(|v| !v.is_finite())
            {
                return Err(Error::InvalidParams(format!("component {k} has non-finite entries")));
            }
            if let Some(v) = self.noise_diag[k].iter().find(|v| !(**v > 0.0 && v.is_finite())) {
                return Err(Error::InvalidParams(format!(
                    "component {k} has non-positive noise variance {v}"
                )));
            }
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_SUM_TOL * g as f64 {
            return Err(Error::InvalidParams(format!("weights sum to {total}")));
        }
        Ok(())
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    /// Observed dimension `p`.
    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Number of latent factors `d`.
    pub fn n_factors(&self) -> usize {
        self.loadings[0].ncols()
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn loadings(&self) -> &[DMatrix<f64>] {
        &self.loadings
    }

    pub fn noise_diag(&self) -> &[DVector<f64>] {
        &self.noise_diag
    }

    /// `Λ_g Λ_g' + diag(ψ_g)`.
    pub fn component_covariance(&self, g: usize) -> DMatrix<f64> {
        let lambda = &self.loadings[g];
        let mut cov = lambda * lambda.transpose();
        for (j, psi) in self.noise_diag[g].iter().enumerate() {
            cov[(j, j)] += psi;
        }
        cov
    }

    /// Reorder components so that component `k` of the result is component
    /// `order[k]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            weights: DVector::from_iterator(order.len(), order.iter().map(|&k| self.weights[k])),
            means: order.iter().map(|&k| self.means[k].clone()).collect(),
            loadings: order.iter().map(|&k| self.loadings[k].clone()).collect(),
            noise_diag: order.iter().map(|&k| self.noise_diag[k].clone()).collect(),
        }
    }

    /// Number of free parameters of a `(p, d, G)` model, counting loadings
    /// modulo rotation.
    pub fn parameter_count(p: usize, d: usize, g: usize) -> usize {
        parameter_count(p, d, g)
    }
}

/// Free-parameter count: weights, means, rotation-identified loadings and
/// noise diagonals.
pub fn parameter_count(p: usize, d: usize, g: usize) -> usize {
    assert!(d < p, "parameter_count requires d < p");
    (g - 1) + g * p + g * (p * d - d * (d - 1) / 2) + g * p
}

#[derive(Serialize, Deserialize)]
struct ParamsRecord {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    /// `loadings[g][j][k]` is row `j`, factor `k` of `Λ_g`.
    loadings: Vec<Vec<Vec<f64>>>,
    noise_diag: Vec<Vec<f64>>,
}

impl From<MfaParams> for ParamsRecord {
    fn from(p: MfaParams) -> Self {
        Self {
            weights: p.weights.iter().copied().collect(),
            means: p.means.iter().map(|m| m.iter().copied().collect()).collect(),
            loadings: p
                .loadings
                .iter()
                .map(|l| {
                    (0..l.nrows())
                        .map(|j| l.row(j).iter().copied().collect())
                        .collect()
                })
                .collect(),
            noise_diag: p.noise_diag.iter().map(|m| m.iter().copied().collect()).collect(),
        }
    }
}

impl TryFrom<ParamsRecord> for MfaParams {
    type Error = Error;

    fn try_from(r: ParamsRecord) -> Result<Self> {
        let mut loadings = Vec::with_capacity(r.loadings.len());
        for (g, rows) in r.loadings.iter().enumerate() {
            let p = rows.len();
            let d = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|row| row.len() != d) {
                return Err(Error::InvalidParams(format!("loadings {g} are ragged")));
            }
            loadings.push(DMatrix::from_fn(p, d, |j, k| rows[j][k]));
        }
        MfaParams::new(
            DVector::from_vec(r.weights),
            r.means.into_iter().map(DVector::from_vec).collect(),
            loadings,
            r.noise_diag.into_iter().map(DVector::from_vec).collect(),
        )
    }
}

/// Upper bounds on noise-variance and loading-eigenvalue ratios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintBounds {
    pub c_noise: f64,
    pub c_load: f64,
}

impl ConstraintBounds {
    /// Stand-in for "no constraint": large but finite.
    pub const UNCONSTRAINED: f64 = 1e10;

    pub fn new(c_noise: f64, c_load: f64) -> Result<Self> {
        let b = Self { c_noise, c_load };
        b.validate()?;
        Ok(b)
    }

    pub fn unconstrained() -> Self {
        Self {
            c_noise: Self::UNCONSTRAINED,
            c_load: Self::UNCONSTRAINED,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, c) in [("c_noise", self.c_noise), ("c_load", self.c_load)] {
            if !(c.is_finite() && c >= 1.0) {
                return Err(Error::InvalidConfig(format!("{name} = {c} must be finite and >= 1")));
            }
        }
        Ok(())
    }
}

/// Outcome of [`check_constraints`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintReport {
    /// max ψ / min ψ over every coordinate of every component.
    pub noise_ratio: f64,
    /// max / min over the top-`d` eigenvalues of every `Λ_g Λ_g'`.
    pub load_ratio: f64,
    pub noise_ok: bool,
    pub load_ok: bool,
}

impl ConstraintReport {
    pub fn satisfied(&self) -> bool {
        self.noise_ok && self.load_ok
    }
}

/// Default relative slack for [`check_constraints`].
pub const CONSTRAINT_TOL: f64 = 1e-8;

/// Top-`d` eigenvalues of `Λ Λ'`, i.e. squared singular values of `Λ`,
/// in decreasing order.
pub fn loading_eigenvalues(lambda: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = lambda.singular_values().iter().map(|s| s * s).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

fn ratio(max: f64, min: f64) -> f64 {
    if max == 0.0 {
        1.0
    } else if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn check_constraints(params: &MfaParams, bounds: &ConstraintBounds, tol: f64) -> ConstraintReport {
    let (mut psi_min, mut psi_max) = (f64::INFINITY, 0.0_f64);
    for psi in params.noise_diag() {
        for &v in psi.iter() {
            psi_min = psi_min.min(v);
            psi_max = psi_max.max(v);
        }
    }
    let (mut ev_min, mut ev_max) = (f64::INFINITY, 0.0_f64);
    for lambda in params.loadings() {
        for v in loading_eigenvalues(lambda) {
            ev_min = ev_min.min(v);
            ev_max = ev_max.max(v);
        }
    }
    let noise_ratio = ratio(psi_max, psi_min);
    let load_ratio = ratio(ev_max, ev_min);
    ConstraintReport {
        noise_ratio,
        load_ratio,
        noise_ok: noise_ratio <= bounds.c_noise * (1.0 + tol),
        load_ok: load_ratio <= bounds.c_load * (1.0 + tol),
    }
}

/// An `n × p` matrix of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrix {
    values: DMatrix<f64>,
    column_names: Option<Vec<String>>,
}

impl DataMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        Self::with_names(values, None)
    }

    pub fn with_names(values: DMatrix<f64>, column_names: Option<Vec<String>>) -> Result<Self> {
        if let Some((idx, _)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let (row, col) = (idx % values.nrows(), idx / values.nrows());
            return Err(Error::InvalidData(format!(
                "non-finite value at row {row}, column {col}"
            )));
        }
        if let Some(names) = &column_names {
            if names.len() != values.ncols() {
                return Err(Error::InvalidData(format!(
                    "{} column names for {} columns",
                    names.len(),
                    values.ncols()
                )));
            }
        }
        Ok(Self {
            values,
            column_names,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::InvalidData("ragged rows".into()));
        }
        Self::new(DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]))
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn column_names(&self) -> Option<&[String]> {
        self.column_names.as_deref()
    }

    pub fn row(&self, i: usize) -> DVector<f64> {
        self.values.row(i).transpose()
    }

    /// Rows stacked below `self`.
    pub fn append_rows(&self, extra: &DMatrix<f64>) -> Self {
        assert_eq!(extra.ncols(), self.n_cols());
        let n = self.n_rows();
        let values = DMatrix::from_fn(n + extra.nrows(), self.n_cols(), |i, j| {
            if i < n {
                self.values[(i, j)]
            } else {
                extra[(i - n, j)]
            }
        });
        Self {
            values,
            column_names: self.column_names.clone(),
        }
    }
}
