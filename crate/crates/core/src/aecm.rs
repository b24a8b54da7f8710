//! Trimmed, constrained AECM estimation.
//!
//! One iteration runs two cycles. The first re-selects the trimmed set
//! (concentration step), computes posteriors and updates weights and means.
//! The second concentrates again under the half-updated parameters, forms the
//! factor-posterior moments and updates loadings and noise variances, which
//! are then projected onto the ratio-constrained space.
//!
//! The returned target is the trimmed mixture log-likelihood
//! `Σ_{i kept} log Σ_g π_g φ(x_i; μ_g, Λ_gΛ_g' + Ψ_g)`, which never decreases
//! from one full iteration to the next.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::{enforce_loading_constraint, enforce_noise_constraint};
use crate::error::{Error, Result};
use crate::kernel::ComponentKernel;
use crate::model::{loading_eigenvalues, ConstraintBounds, DataMatrix, MfaParams};
use crate::rng::{substream, StreamRng};

/// Components whose posterior mass falls below this abort the start.
pub const MIN_COMPONENT_MASS: f64 = 1e-8;
/// Fresh factor draws attempted when `U'U` is singular during initialization.
pub const INIT_RETRIES: usize = 10;
/// Step halvings tried when the projected loading update lowers the
/// second-cycle objective.
pub const MAX_STEP_HALVINGS: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub n_components: usize,
    pub n_factors: usize,
    pub alpha: f64,
    pub bounds: ConstraintBounds,
    pub n_starts: usize,
    pub max_iter: usize,
    pub tol_target: f64,
    pub seed: u64,
}

impl FitConfig {
    pub fn new(n_components: usize, n_factors: usize) -> Self {
        Self {
            n_components,
            n_factors,
            alpha: 0.0,
            bounds: ConstraintBounds::unconstrained(),
            n_starts: 10,
            max_iter: 200,
            tol_target: 1e-8,
            seed: 0,
        }
    }

    pub fn alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn bounds(mut self, c_noise: f64, c_load: f64) -> Self {
        self.bounds = ConstraintBounds { c_noise, c_load };
        self
    }

    pub fn starts(mut self, n: usize) -> Self {
        self.n_starts = n;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_components == 0 {
            return Err(Error::InvalidConfig("need at least one component".into()));
        }
        if self.n_factors == 0 {
            return Err(Error::InvalidConfig("need at least one factor".into()));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha = {} not in [0, 1)", self.alpha)));
        }
        if self.n_starts == 0 || self.max_iter == 0 {
            return Err(Error::InvalidConfig("n_starts and max_iter must be positive".into()));
        }
        if !(self.tol_target > 0.0) {
            return Err(Error::InvalidConfig("tol_target must be positive".into()));
        }
        self.bounds.validate()
    }

    pub fn validate_for(&self, data: &DataMatrix) -> Result<()> {
        self.validate()?;
        let (n, p) = (data.n_rows(), data.n_cols());
        if self.n_factors >= p {
            return Err(Error::InvalidConfig(format!(
                "{} factors need more than {} variables",
                self.n_factors, p
            )));
        }
        let need = self.n_components * (p + 1);
        if n < need || kept_count(n, self.alpha) < need {
            return Err(Error::InvalidData(format!(
                "{} observations ({} kept at alpha = {}) are too few for {} components in {} dimensions; need {}",
                n,
                kept_count(n, self.alpha),
                self.alpha,
                self.n_components,
                p,
                need
            )));
        }
        Ok(())
    }
}

/// `⌊n(1 − α)⌋`, guarded against representation error in `1 − α`.
pub fn kept_count(n: usize, alpha: f64) -> usize {
    ((n as f64) * (1.0 - alpha) + 1e-9).floor() as usize
}

/// Result of a trimming E-step.
#[derive(Debug, Clone, PartialEq)]
pub struct EStep {
    /// `kept[i]` is the trimming indicator `z(x_i)`.
    pub kept: Vec<bool>,
    /// n × G; rows of trimmed points are zero.
    pub posteriors: DMatrix<f64>,
    /// `log D_i` for every observation, kept or not.
    pub log_mixture: Vec<f64>,
    /// `Σ_{i kept} log D_i`, summed in index order.
    pub target: f64,
}

impl EStep {
    pub fn target_terms(&self) -> Vec<f64> {
        self.kept
            .iter()
            .zip(&self.log_mixture)
            .map(|(&k, &v)| if k { v } else { 0.0 })
            .collect()
    }
}

/// `log D_g(x_i) = log π_g + log φ(x_i; μ_g, Σ_g)` as an n × G matrix.
pub fn component_log_densities(data: &DataMatrix, params: &MfaParams) -> Result<DMatrix<f64>> {
    let n = data.n_rows();
    let g_count = params.n_components();
    let mut out = DMatrix::zeros(n, g_count);
    for g in 0..g_count {
        let kernel = ComponentKernel::from_params(params, g)?;
        let log_w = params.weights()[g].ln();
        for (i, v) in kernel.log_density_rows(data.values()).into_iter().enumerate() {
            out[(i, g)] = v + log_w;
        }
    }
    Ok(out)
}

fn log_sum_exp(row: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = row.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Concentration step: keep the `⌊n(1 − α)⌋` observations with the largest
/// mixture density (earlier index wins ties) and compute their posteriors.
pub fn e_step_trim(data: &DataMatrix, params: &MfaParams, alpha: f64) -> Result<EStep> {
    let n = data.n_rows();
    let g_count = params.n_components();
    let log_dg = component_log_densities(data, params)?;
    let log_mixture: Vec<f64> = (0..n)
        .map(|i| log_sum_exp(log_dg.row(i).iter().copied()))
        .collect();
    if let Some(i) = log_mixture.iter().position(|v| v.is_nan()) {
        return Err(Error::DensityUnderflow { index: i });
    }
    let h = kept_count(n, alpha);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| log_mixture[b].total_cmp(&log_mixture[a]).then(a.cmp(&b)));
    let mut kept = vec![false; n];
    for &i in &order[..h] {
        kept[i] = true;
    }
    let mut posteriors = DMatrix::zeros(n, g_count);
    let mut target = 0.0;
    for i in 0..n {
        if !kept[i] {
            continue;
        }
        let ld = log_mixture[i];
        if !ld.is_finite() {
            return Err(Error::DensityUnderflow { index: i });
        }
        target += ld;
        for g in 0..g_count {
            posteriors[(i, g)] = (log_dg[(i, g)] - ld).exp();
        }
    }
    Ok(EStep {
        kept,
        posteriors,
        log_mixture,
        target,
    })
}

/// Trimmed log-likelihood of `params` with the optimal trimmed set.
pub fn trimmed_target(data: &DataMatrix, params: &MfaParams, alpha: f64) -> Result<f64> {
    Ok(e_step_trim(data, params, alpha)?.target)
}

fn component_masses(posteriors: &DMatrix<f64>) -> Result<Vec<f64>> {
    posteriors
        .column_iter()
        .enumerate()
        .map(|(g, col)| {
            let mass = col.sum();
            if mass < MIN_COMPONENT_MASS {
                Err(Error::EmptyComponent { component: g, mass })
            } else {
                Ok(mass)
            }
        })
        .collect()
}

/// First-cycle CM step: `π_g = n_g / ⌊n(1−α)⌋`, `μ_g = Σ_i τ_ig x_i / n_g`.
pub fn cm_step_1(
    data: &DataMatrix,
    posteriors: &DMatrix<f64>,
    alpha: f64,
) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
    let h = kept_count(data.n_rows(), alpha) as f64;
    let masses = component_masses(posteriors)?;
    let sums = data.values().transpose() * posteriors;
    let weights = DVector::from_iterator(masses.len(), masses.iter().map(|m| m / h));
    let means = masses
        .iter()
        .enumerate()
        .map(|(g, m)| sums.column(g) / *m)
        .collect();
    Ok((weights, means))
}

/// τ-weighted scatter `S_g` about `mean`.
fn weighted_scatter(data: &DMatrix<f64>, weights: &[f64], mass: f64, mean: &DVector<f64>) -> DMatrix<f64> {
    let (n, p) = data.shape();
    let mut scaled = DMatrix::zeros(n, p);
    for i in 0..n {
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        let s = w.sqrt();
        for j in 0..p {
            scaled[(i, j)] = s * (data[(i, j)] - mean[j]);
        }
    }
    let mut scatter = scaled.tr_mul(&scaled) / mass;
    // symmetrize against rounding
    scatter = (&scatter + scatter.transpose()) * 0.5;
    scatter
}

/// Per-component sufficient statistics of the second cycle.
struct FactorMoments {
    mass: f64,
    scatter: DMatrix<f64>,
    gamma: DMatrix<f64>,
    xi: DMatrix<f64>,
}

impl FactorMoments {
    /// `diag E[(x − μ − ΛU)(x − μ − ΛU)']` for a given `Λ`.
    fn residual_diag(&self, lambda: &DMatrix<f64>) -> DVector<f64> {
        let cross = lambda * (&self.gamma * &self.scatter);
        let quad = lambda * &self.xi * lambda.transpose();
        DVector::from_fn(self.scatter.nrows(), |j, _| {
            self.scatter[(j, j)] - 2.0 * cross[(j, j)] + quad[(j, j)]
        })
    }

    /// Expected complete-data log-likelihood terms that depend on `(Λ, Ψ)`,
    /// up to a constant.
    fn q_value(&self, lambda: &DMatrix<f64>, psi: &DVector<f64>) -> f64 {
        let resid = self.residual_diag(lambda);
        let sum: f64 = psi.iter().zip(resid.iter()).map(|(v, r)| v.ln() + r / v).sum();
        -0.5 * self.mass * sum
    }
}

/// Noise variances maximizing the second-cycle objective for fixed
/// loadings, subject to the noise constraint.
fn constrained_noise(
    moments: &[FactorMoments],
    loadings: &[DMatrix<f64>],
    weights: &[f64],
    c_noise: f64,
) -> Result<Vec<DVector<f64>>> {
    let raw: Vec<DVector<f64>> = moments
        .iter()
        .zip(loadings)
        .map(|(m, l)| m.residual_diag(l).map(|v| v.max(0.0)))
        .collect();
    enforce_noise_constraint(&raw, weights, c_noise)
}

fn total_q(moments: &[FactorMoments], loadings: &[DMatrix<f64>], noise: &[DVector<f64>]) -> f64 {
    moments
        .iter()
        .zip(loadings.iter().zip(noise))
        .map(|(m, (l, p))| m.q_value(l, p))
        .sum()
}

/// Second-cycle CM step. `half` carries the updated weights and means with
/// the previous loadings and noise variances.
///
/// Loadings are updated to `S γ' Ξ⁻¹` and projected onto the loading
/// constraint; noise variances are then the constrained maximizer given the
/// projected loadings, built from `diag(S − 2ΛγS + ΛΞΛ')`, which equals
/// `diag(S − ΛγS)` whenever the loading projection is inactive. Both
/// projections weight components by their second-cycle masses.
///
/// The loading projection is not an exact constrained maximizer. If the
/// projected update lowers the second-cycle objective below what the
/// previous loadings achieve with re-optimized noise variances, the step
/// from the previous loadings towards the update is halved until it does
/// not, and the previous loadings are kept if no step qualifies.
pub fn cm_step_2(
    data: &DataMatrix,
    posteriors: &DMatrix<f64>,
    half: &MfaParams,
    bounds: &ConstraintBounds,
) -> Result<(Vec<DMatrix<f64>>, Vec<DVector<f64>>)> {
    let g_count = half.n_components();
    let masses = component_masses(posteriors)?;
    let total_mass: f64 = masses.iter().sum();
    let weights: Vec<f64> = masses.iter().map(|m| m / total_mass).collect();
    let mut moments = Vec::with_capacity(g_count);
    let mut unconstrained = Vec::with_capacity(g_count);
    for g in 0..g_count {
        let tau: Vec<f64> = posteriors.column(g).iter().copied().collect();
        let mean = &half.means()[g];
        let scatter = weighted_scatter(data.values(), &tau, masses[g], mean);
        let kernel = ComponentKernel::from_params(half, g)?;
        let (gamma, residual) = kernel.factor_projection();
        let xi = residual + &gamma * &scatter * gamma.transpose();
        let xi = (&xi + xi.transpose()) * 0.5;
        let chol = Cholesky::new(xi.clone()).ok_or(Error::SingularXi { component: g })?;
        // Λ = S γ' Ξ⁻¹ = (Ξ⁻¹ γ S)'
        let lambda = chol.solve(&(&gamma * &scatter)).transpose();
        if lambda.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularXi { component: g });
        }
        unconstrained.push(lambda);
        moments.push(FactorMoments {
            mass: masses[g],
            scatter,
            gamma,
            xi,
        });
    }
    let previous = half.loadings();
    let kept_noise = constrained_noise(&moments, previous, &weights, bounds.c_noise)?;
    let baseline = total_q(&moments, previous, &kept_noise);
    let mut step = 1.0;
    for _ in 0..=MAX_STEP_HALVINGS {
        let candidate: Vec<DMatrix<f64>> = previous
            .iter()
            .zip(&unconstrained)
            .map(|(old, new)| old + (new - old) * step)
            .collect();
        let loadings = enforce_loading_constraint(&candidate, &weights, bounds.c_load)?;
        let noise = constrained_noise(&moments, &loadings, &weights, bounds.c_noise)?;
        if total_q(&moments, &loadings, &noise) >= baseline {
            return Ok((loadings, noise));
        }
        step *= 0.5;
    }
    Ok((previous.to_vec(), kept_noise))
}

/// Estimate one component from a `(p+1) × p` subsample and a
/// `(p+1) × d` matrix of factor draws. `None` if `U'U` is singular.
pub(crate) fn init_component(
    subsample: &DMatrix<f64>,
    factors: &DMatrix<f64>,
) -> Option<(DVector<f64>, DMatrix<f64>, DVector<f64>)> {
    let rows = subsample.nrows();
    let mean = subsample.row_mean().transpose();
    let mut centered = subsample.clone();
    for j in 0..centered.ncols() {
        centered.column_mut(j).add_scalar_mut(-mean[j]);
    }
    let utu = factors.tr_mul(factors);
    let chol = Cholesky::new(utu)?;
    // (U'U)⁻¹ U' X_c is d × p
    let coef = chol.solve(&factors.tr_mul(&centered));
    if coef.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let resid = &centered - factors * &coef;
    let psi = DVector::from_fn(centered.ncols(), |j, _| {
        let col = resid.column(j);
        let m = col.mean();
        col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / rows as f64
    });
    Some((mean, coef.transpose(), psi))
}

fn violates(loadings: &[DMatrix<f64>], noise: &[DVector<f64>], bounds: &ConstraintBounds) -> bool {
    let extent = |vals: &mut dyn Iterator<Item = f64>| {
        vals.fold((f64::INFINITY, 0.0_f64), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let (psi_lo, psi_hi) = extent(&mut noise.iter().flat_map(|v| v.iter().copied()));
    let (ev_lo, ev_hi) = extent(&mut loadings.iter().flat_map(loading_eigenvalues));
    !(psi_lo > 0.0 && psi_hi <= bounds.c_noise * psi_lo && ev_lo > 0.0 && ev_hi <= bounds.c_load * ev_lo)
}

/// Random start: per component, a subsample of `p + 1` rows regressed on
/// random standard-normal factors; weights uniform on the simplex.
pub fn initialize(data: &DataMatrix, config: &FitConfig, rng: &mut StreamRng) -> Result<MfaParams> {
    initialize_with(data, config, rng, |rng, rows, d| {
        DMatrix::from_fn(rows, d, |_, _| rng.sample(StandardNormal))
    })
}

/// [`initialize`] with an injectable source of factor draws.
pub fn initialize_with<F>(
    data: &DataMatrix,
    config: &FitConfig,
    rng: &mut StreamRng,
    mut draw_factors: F,
) -> Result<MfaParams>
where
    F: FnMut(&mut StreamRng, usize, usize) -> DMatrix<f64>,
{
    let (n, p) = (data.n_rows(), data.n_cols());
    let (g_count, d) = (config.n_components, config.n_factors);
    if n < p + 1 {
        return Err(Error::InvalidData(format!("{n} observations cannot seed a start in {p} dimensions")));
    }
    let mut means = Vec::with_capacity(g_count);
    let mut loadings = Vec::with_capacity(g_count);
    let mut noise = Vec::with_capacity(g_count);
    for _ in 0..g_count {
        let idx = sample_indices(rng, n, p + 1);
        let subsample = DMatrix::from_fn(p + 1, p, |r, j| data.values()[(idx.index(r), j)]);
        let mut found = None;
        for _ in 0..=INIT_RETRIES {
            let u = draw_factors(rng, p + 1, d);
            if let Some(est) = init_component(&subsample, &u) {
                found = Some(est);
                break;
            }
        }
        let (mu, lambda, psi) = found.ok_or(Error::SingularInit { retries: INIT_RETRIES })?;
        means.push(mu);
        loadings.push(lambda);
        noise.push(psi);
    }
    let raw: Vec<f64> = (0..g_count).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    if violates(&loadings, &noise, &config.bounds) {
        noise = enforce_noise_constraint(&noise, &weights, config.bounds.c_noise)?;
        loadings = enforce_loading_constraint(&loadings, &weights, config.bounds.c_load)?;
    }
    MfaParams::new(DVector::from_vec(weights), means, loadings, noise)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: MfaParams,
    /// `z(x_i)`: 1 kept, 0 trimmed.
    pub trim_indicator: Vec<u8>,
    #[serde(with = "matrix_rows")]
    pub posteriors: DMatrix<f64>,
    /// MAP component for kept points, `None` for trimmed ones.
    pub labels: Vec<Option<usize>>,
    /// `log D_i` at the returned parameters, for every observation.
    pub log_mixture: Vec<f64>,
    pub target: f64,
    /// Target after initialization and after each full iteration.
    pub target_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub start_index: usize,
    /// Starts of the multistart run that met the convergence test.
    pub n_converged_starts: usize,
}

impl FitResult {
    pub fn n_trimmed(&self) -> usize {
        self.trim_indicator.iter().filter(|&&z| z == 0).count()
    }
}

mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(serde::de::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }
}

fn map_labels(es: &EStep) -> Vec<Option<usize>> {
    es.posteriors
        .row_iter()
        .zip(&es.kept)
        .map(|(row, &k)| k.then(|| row.transpose().argmax().0))
        .collect()
}

/// Run AECM iterations from given starting parameters.
pub fn fit_from(data: &DataMatrix, config: &FitConfig, init: MfaParams) -> Result<FitResult> {
    let alpha = config.alpha;
    let mut params = init;
    let mut es = e_step_trim(data, &params, alpha)?;
    let mut trace = vec![es.target];
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=config.max_iter {
        iterations = it;
        let (weights, means) = cm_step_1(data, &es.posteriors, alpha)?;
        let half = MfaParams::new(weights, means, params.loadings().to_vec(), params.noise_diag().to_vec())?;
        let es_half = e_step_trim(data, &half, alpha)?;
        let (loadings, noise) = cm_step_2(data, &es_half.posteriors, &half, &config.bounds)?;
        params = MfaParams::new(half.weights().clone(), half.means().to_vec(), loadings, noise)?;
        let es_new = e_step_trim(data, &params, alpha)?;
        let change = (es_new.target - es.target).abs() / es.target.abs().max(f64::MIN_POSITIVE);
        let same_set = es_new.kept == es.kept;
        trace.push(es_new.target);
        es = es_new;
        if change < config.tol_target && same_set {
            converged = true;
            break;
        }
    }
    Ok(FitResult {
        trim_indicator: es.kept.iter().map(|&k| k as u8).collect(),
        labels: map_labels(&es),
        posteriors: es.posteriors,
        log_mixture: es.log_mixture,
        target: es.target,
        target_trace: trace,
        params,
        iterations,
        converged,
        start_index: 0,
        n_converged_starts: converged as usize,
    })
}

/// A single random start.
pub fn fit_once(data: &DataMatrix, config: &FitConfig, rng: &mut StreamRng) -> Result<FitResult> {
    config.validate_for(data)?;
    let init = initialize(data, config, rng)?;
    fit_from(data, config, init)
}

/// Multistart fit. Start `s` draws from stream `s` of `config.seed`. The
/// start with the largest target wins (lowest index on ties), whether or not
/// it met the convergence test within `max_iter`; every iteration is
/// monotone, so a larger target is always the better solution.
pub fn fit(data: &DataMatrix, config: &FitConfig) -> Result<FitResult> {
    config.validate_for(data)?;
    let outcomes: Vec<Result<FitResult>> = (0..config.n_starts)
        .into_par_iter()
        .map(|s| {
            let mut rng = substream(config.seed, s as u64);
            fit_once(data, config, &mut rng).map(|mut r| {
                r.start_index = s;
                r
            })
        })
        .collect();
    select_best(outcomes)
}

fn select_best(outcomes: Vec<Result<FitResult>>) -> Result<FitResult> {
    let n_starts = outcomes.len();
    let mut causes = Vec::new();
    let mut n_converged = 0;
    let mut best: Option<FitResult> = None;
    for outcome in outcomes {
        match outcome {
            Ok(r) => {
                n_converged += r.converged as usize;
                if best.as_ref().is_none_or(|b| r.target > b.target) {
                    best = Some(r);
                }
            }
            Err(e) => causes.push(e.to_string()),
        }
    }
    let mut best = best.ok_or(Error::AllStartsFailed { n_starts, causes })?;
    best.n_converged_starts = n_converged;
    Ok(best)
}

/// Labels for every observation; trimmed ones go to the component with the
/// largest `π_g φ(x; μ_g, Σ_g)`.
pub fn classify_trimmed(data: &DataMatrix, result: &FitResult) -> Result<Vec<usize>> {
    let log_dg = component_log_densities(data, &result.params)?;
    Ok(result
        .labels
        .iter()
        .enumerate()
        .map(|(i, label)| label.unwrap_or_else(|| log_dg.row(i).transpose().argmax().0))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{benchmark_truth, ScenarioSpec};
    use crate::model::{check_constraints, CONSTRAINT_TOL};
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    fn standard_normal_1d() -> MfaParams {
        // p = 2 so that d = 1 < p; the second coordinate is identical for all points
        MfaParams::new(
            DVector::from_element(1, 1.0),
            vec![DVector::zeros(2)],
            vec![DMatrix::zeros(2, 1)],
            vec![DVector::from_element(2, 1.0)],
        )
        .unwrap()
    }

    #[test]
    fn trimming_drops_the_extremes() {
        let data = DataMatrix::from_rows(&[
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![10.0, 0.0],
            vec![-10.0, 0.0],
        ])
        .unwrap();
        let es = e_step_trim(&data, &standard_normal_1d(), 0.4).unwrap();
        assert_eq!(es.kept, vec![true, true, true, false, false]);
        assert_eq!(es.posteriors.row(3).sum(), 0.0);
        assert_eq!(es.posteriors.row(0).sum(), 1.0);
        assert_eq!(es.target_terms()[4], 0.0);
    }

    #[test]
    fn ties_keep_the_earlier_index() {
        let data = DataMatrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let es = e_step_trim(&data, &standard_normal_1d(), 0.3).unwrap();
        assert_eq!(es.kept, vec![true, false, true]);
    }

    #[test]
    fn no_trimming_keeps_everything() {
        let truth = benchmark_truth();
        let s = ScenarioSpec::benchmark(60).with_seed(3).generate().unwrap();
        let es = e_step_trim(&s.data, &truth, 0.0).unwrap();
        assert!(es.kept.iter().all(|&k| k));
        for row in es.posteriors.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hard_posteriors_give_group_means() {
        let data = DataMatrix::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0], vec![10.0, 10.0], vec![12.0, 14.0]])
            .unwrap();
        let post = dmatrix![1.0, 0.0; 1.0, 0.0; 0.0, 1.0; 0.0, 1.0];
        let (w, mu) = cm_step_1(&data, &post, 0.0).unwrap();
        assert_eq!(w.as_slice(), &[0.5, 0.5]);
        assert_eq!(mu[0].as_slice(), &[1.0, 2.0]);
        assert_eq!(mu[1].as_slice(), &[11.0, 12.0]);
    }

    #[test]
    fn uniform_posteriors_give_global_mean() {
        let s = ScenarioSpec::benchmark(40).with_seed(1).generate().unwrap();
        let post = DMatrix::from_element(40, 4, 0.25);
        let (w, mu) = cm_step_1(&s.data, &post, 0.0).unwrap();
        let global = s.data.values().row_mean().transpose();
        for g in 0..4 {
            assert!((w[g] - 0.25).abs() < 1e-15);
            assert!((&mu[g] - &global).abs().max() < 1e-12);
        }
    }

    #[test]
    fn empty_component_aborts() {
        let data = DataMatrix::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0]]).unwrap();
        let post = dmatrix![1.0, 0.0; 1.0, 0.0];
        assert!(matches!(cm_step_1(&data, &post, 0.0), Err(Error::EmptyComponent { component: 1, .. })));
    }

    #[test]
    fn zero_loadings_cannot_grow_factors() {
        let s = ScenarioSpec::benchmark(100).with_seed(4).generate().unwrap();
        let half = MfaParams::new(
            DVector::from_element(1, 1.0),
            vec![s.data.values().row_mean().transpose()],
            vec![DMatrix::zeros(6, 2)],
            vec![DVector::from_element(6, 1.0)],
        )
        .unwrap();
        let post = DMatrix::from_element(100, 1, 1.0);
        // c_load is irrelevant only if the projection accepts all-zero spectra;
        // with G = 1 that is the degenerate-threshold error.
        let out = cm_step_2(&s.data, &post, &half, &ConstraintBounds::unconstrained());
        assert_eq!(out, Err(Error::DegenerateThreshold));
        // The raw update itself is zero.
        let kernel = ComponentKernel::from_params(&half, 0).unwrap();
        let (gamma, residual) = kernel.factor_projection();
        assert_eq!(gamma.abs().max(), 0.0);
        assert_eq!(residual, DMatrix::identity(2, 2));
    }

    #[test]
    fn single_point_scatter_is_raised_by_noise_constraint() {
        let data = DataMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![5.0, 5.0, 5.0]]).unwrap();
        let post = dmatrix![1.0, 0.0; 0.0, 1.0];
        let half = MfaParams::new(
            DVector::from_vec(vec![0.5, 0.5]),
            vec![data.row(0), data.row(1)],
            vec![dmatrix![1.0; 0.0; 0.0], dmatrix![0.0; 1.0; 0.0]],
            vec![DVector::from_element(3, 1.0); 2],
        )
        .unwrap();
        let out = cm_step_2(&data, &post, &half, &ConstraintBounds::new(2.0, 2.0).unwrap());
        // All scatter entries are zero, so both projections have nothing positive to anchor on.
        assert_eq!(out, Err(Error::DegenerateThreshold));
    }

    #[test]
    fn ones_factor_gives_zero_loadings_and_column_variances() {
        let sub = dmatrix![1.0, 2.0, 0.0; 3.0, 1.0, 1.0; 2.0, 2.0, 5.0; 0.0, 4.0, 2.0];
        let ones = DMatrix::from_element(4, 1, 1.0);
        let (mu, lambda, psi) = init_component(&sub, &ones).unwrap();
        assert!(lambda.abs().max() < 1e-14);
        for j in 0..3 {
            let col = sub.column(j);
            let m = col.mean();
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 4.0;
            assert!((psi[j] - var).abs() < 1e-12);
            assert!((mu[j] - m).abs() < 1e-15);
        }
    }

    #[test]
    fn singular_factor_draws_exhaust_retries() {
        let s = ScenarioSpec::benchmark(60).with_seed(2).generate().unwrap();
        let config = FitConfig::new(2, 2);
        let err = initialize_with(&s.data, &config, &mut substream(0, 0), |_, rows, d| DMatrix::zeros(rows, d));
        assert_eq!(err, Err(Error::SingularInit { retries: INIT_RETRIES }));
    }

    #[test]
    fn initialization_respects_bounds_and_seed() {
        let s = ScenarioSpec::benchmark(150).with_seed(5).generate().unwrap();
        let config = FitConfig::new(3, 2).bounds(5.0, 3.0);
        for seed in 0..20 {
            let a = initialize(&s.data, &config, &mut substream(seed, 0)).unwrap();
            let b = initialize(&s.data, &config, &mut substream(seed, 0)).unwrap();
            assert_eq!(a, b);
            assert!(check_constraints(&a, &config.bounds, CONSTRAINT_TOL).satisfied());
        }
    }

    #[test]
    fn separated_point_masses_are_recovered() {
        let mut rows = Vec::new();
        for (g, centre) in [0.0, 50.0, 100.0].iter().enumerate() {
            for i in 0..20 {
                let jitter = ((i * 7 + g * 3) % 11) as f64 * 0.01;
                rows.push(vec![centre + jitter, centre - jitter, centre + 0.5 * jitter, *centre]);
            }
        }
        let data = DataMatrix::from_rows(&rows).unwrap();
        let config = FitConfig::new(3, 1).bounds(100.0, 100.0).starts(10).seed(3);
        let r = fit(&data, &config).unwrap();
        for block in 0..3 {
            let first = r.labels[block * 20];
            assert!((block * 20..block * 20 + 20).all(|i| r.labels[i] == first));
        }
        let distinct: std::collections::HashSet<_> = r.labels.iter().collect();
        assert_eq!(distinct.len(), 3);
    }

    #[test]
    fn one_start_equals_fit_once_on_stream_zero() {
        let s = ScenarioSpec::benchmark(150).with_seed(8).generate().unwrap();
        let config = FitConfig::new(3, 2).bounds(5.0, 3.0).starts(1).seed(21);
        let multi = fit(&s.data, &config).unwrap();
        let single = fit_once(&s.data, &config, &mut substream(21, 0)).unwrap();
        assert_eq!(multi.params, single.params);
        assert_eq!(multi.target, single.target);
    }

    #[test]
    fn single_component_mean_is_sample_mean() {
        let s = ScenarioSpec::benchmark(150).with_seed(9).generate().unwrap();
        let config = FitConfig::new(1, 2).starts(3).seed(1);
        let r = fit(&s.data, &config).unwrap();
        let mean = s.data.values().row_mean().transpose();
        assert!((&r.params.means()[0] - mean).abs().max() < 1e-8);
        // target is the plain factor-analysis log-likelihood of the returned params
        let kernel = ComponentKernel::from_params(&r.params, 0).unwrap();
        let ll: f64 = kernel.log_density_rows(s.data.values()).iter().sum();
        assert!((ll - r.target).abs() < 1e-8 * ll.abs());
    }

    #[test]
    fn relabelled_start_gives_relabelled_fit() {
        let s = ScenarioSpec::benchmark(150).with_seed(10).generate().unwrap();
        let config = FitConfig::new(3, 2).bounds(5.0, 3.0).alpha(0.06);
        let init = initialize(&s.data, &config, &mut substream(4, 0)).unwrap();
        let order = [2, 0, 1];
        let a = fit_from(&s.data, &config, init.clone()).unwrap();
        let b = fit_from(&s.data, &config, init.permuted(&order)).unwrap();
        let a_perm = a.params.permuted(&order);
        for g in 0..3 {
            assert!((&a_perm.means()[g] - &b.params.means()[g]).abs().max() < 1e-8);
            let la = &a_perm.loadings()[g];
            let lb = &b.params.loadings()[g];
            assert!((la * la.transpose() - lb * lb.transpose()).abs().max() < 1e-8);
        }
        assert_eq!(a.trim_indicator, b.trim_indicator);
    }

    #[test]
    fn trimmed_points_get_the_dominant_component() {
        let s = ScenarioSpec::benchmark(150).with_noise(10).with_seed(12).generate().unwrap();
        let config = FitConfig::new(3, 2).bounds(5.0, 3.0).alpha(0.06).seed(5);
        let mut r = fit(&s.data, &config).unwrap();
        let full = classify_trimmed(&s.data, &r).unwrap();
        for (i, l) in r.labels.iter().enumerate() {
            if let Some(l) = l {
                assert_eq!(full[i], *l);
            }
        }
        // trimmed points follow the dense-covariance Bayes rule
        let full = classify_trimmed(&s.data, &r).unwrap();
        for i in (0..s.data.n_rows()).filter(|&i| r.labels[i].is_none()) {
            let x = s.data.row(i);
            let scores: Vec<f64> = (0..3)
                .map(|g| {
                    let p = &r.params;
                    let ld = crate::kernel::dense::log_density(&p.means()[g], &p.loadings()[g], &p.noise_diag()[g], &x);
                    p.weights()[g].ln() + ld.unwrap()
                })
                .collect();
            let best = (0..3).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
            assert_eq!(full[i], best);
        }
        r.labels.iter_mut().for_each(|l| *l = None);
        assert_eq!(classify_trimmed(&s.data, &r).unwrap(), full);
        // no trimmed points: identical to the MAP labels
        let clean = fit(&s.data, &config.clone().alpha(0.0)).unwrap();
        let all: Vec<Option<usize>> = classify_trimmed(&s.data, &clean).unwrap().into_iter().map(Some).collect();
        assert_eq!(all, clean.labels);
    }

    #[test]
    fn true_model_update_keeps_constraints_and_target() {
        let s = ScenarioSpec::benchmark(150).with_seed(13).generate().unwrap();
        let truth = benchmark_truth();
        let bounds = ConstraintBounds::new(5.0, 3.0).unwrap();
        let es = e_step_trim(&s.data, &truth, 0.0).unwrap();
        let (w, mu) = cm_step_1(&s.data, &es.posteriors, 0.0).unwrap();
        let half = MfaParams::new(w, mu, truth.loadings().to_vec(), truth.noise_diag().to_vec()).unwrap();
        let es_half = e_step_trim(&s.data, &half, 0.0).unwrap();
        let (l, psi) = cm_step_2(&s.data, &es_half.posteriors, &half, &bounds).unwrap();
        let next = MfaParams::new(half.weights().clone(), half.means().to_vec(), l, psi).unwrap();
        assert!(check_constraints(&next, &bounds, CONSTRAINT_TOL).satisfied());
        let after = trimmed_target(&s.data, &next, 0.0).unwrap();
        assert!(after >= es.target - 1e-8);
    }

    #[test]
    fn rejects_data_too_small_for_the_model() {
        let s = ScenarioSpec::benchmark(20).with_seed(1).generate().unwrap();
        assert!(matches!(fit(&s.data, &FitConfig::new(3, 2)), Err(Error::InvalidData(_))));
        let s = ScenarioSpec::benchmark(100).with_seed(1).generate().unwrap();
        assert!(matches!(fit(&s.data, &FitConfig::new(2, 6)), Err(Error::InvalidConfig(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn fit_invariants(seed in any::<u64>(), alpha in prop_oneof![Just(0.0), 0.0..0.2f64]) {
            let s = ScenarioSpec::benchmark(90).with_seed(seed).generate().unwrap();
            let config = FitConfig::new(3, 2).bounds(5.0, 3.0).alpha(alpha).starts(2).seed(seed);
            let r = fit(&s.data, &config).unwrap();
            let kept: usize = r.trim_indicator.iter().map(|&z| z as usize).sum();
            prop_assert_eq!(kept, kept_count(90, alpha));
            for (i, row) in r.posteriors.row_iter().enumerate() {
                let sum = row.sum();
                if r.trim_indicator[i] == 1 {
                    prop_assert!((sum - 1.0).abs() < 1e-10);
                } else {
                    prop_assert_eq!(sum, 0.0);
                }
            }
            prop_assert!(check_constraints(&r.params, &config.bounds, CONSTRAINT_TOL).satisfied());
            for pair in r.target_trace.windows(2) {
                prop_assert!(pair[1] >= pair[0] - 1e-8, "{} -> {}", pair[0], pair[1]);
            }
        }
    }
}
