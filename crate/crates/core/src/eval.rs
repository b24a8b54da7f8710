//! Misclassification error, bias/MSE summaries and the Monte-Carlo driver.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use itertools::Itertools;
use nalgebra::{DMatrix, DVector};
use pathfinding::prelude::{kuhn_munkres, Matrix};
use rand::RngCore as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aecm::{fit, FitConfig};
use crate::datagen::{Origin, ScenarioSpec};
use crate::error::{Error, Result};
use crate::model::{ConstraintBounds, MfaParams};
use crate::rng::substream;

/// Largest label count matched by exhaustive permutation search; larger
/// problems are solved as an assignment problem.
pub const MAX_EXHAUSTIVE_LABELS: usize = 8;

/// Fraction of observations labelled wrongly, minimized over relabellings of
/// the predicted clusters. Clean points must land in their (relabelled)
/// component; contaminated points must be trimmed (`None`).
pub fn misclassification_error(predicted: &[Option<usize>], truth: &[Origin]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Precondition(format!(
            "{} predicted labels for {} observations",
            predicted.len(),
            truth.len()
        )));
    }
    let n = truth.len();
    if n == 0 {
        return Ok(0.0);
    }
    let k_pred = predicted.iter().flatten().map(|&k| k + 1).max().unwrap_or(0);
    let k_true = truth
        .iter()
        .filter_map(|o| match o {
            Origin::Component(g) => Some(g + 1),
            _ => None,
        })
        .max()
        .unwrap_or(0);
    let k = k_pred.max(k_true);
    let mut counts = vec![vec![0i64; k]; k];
    let mut contaminated_trimmed = 0;
    for (p, t) in predicted.iter().zip(truth) {
        match (p, t) {
            (Some(a), Origin::Component(g)) => counts[*a][*g] += 1,
            (None, o) if o.is_contamination() => contaminated_trimmed += 1,
            _ => {}
        }
    }
    let matched = best_assignment(&counts);
    let correct = matched + contaminated_trimmed;
    Ok((n - correct as usize) as f64 / n as f64)
}

/// Maximum of `Σ_k counts[k][σ(k)]` over permutations `σ`.
fn best_assignment(counts: &[Vec<i64>]) -> i64 {
    let k = counts.len();
    if k == 0 {
        return 0;
    }
    if k <= MAX_EXHAUSTIVE_LABELS {
        (0..k)
            .permutations(k)
            .map(|perm| perm.iter().enumerate().map(|(a, &g)| counts[a][g]).sum())
            .max()
            .unwrap_or(0)
    } else {
        let weights = Matrix::from_rows(counts.iter().cloned()).expect("square count matrix");
        kuhn_munkres(&weights).0
    }
}

/// Reorder the components of `estimate` so that component `g` is the one
/// matched to truth component `g`, minimizing `Σ_g ‖μ̂_σ(g) − μ_g‖`.
/// Returns the order and the summed mean distance.
pub fn align_components(estimate: &MfaParams, truth: &MfaParams) -> (Vec<usize>, f64) {
    let g_count = truth.n_components();
    let dist = |a: usize, g: usize| (&estimate.means()[a] - &truth.means()[g]).norm();
    if g_count <= MAX_EXHAUSTIVE_LABELS {
        (0..g_count)
            .permutations(g_count)
            .map(|order| {
                let total: f64 = order.iter().enumerate().map(|(g, &a)| dist(a, g)).sum();
                (order, total)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least one component")
    } else {
        // integer costs at 1e-9 resolution for the assignment solver
        let scale = 1e9 / (0..g_count)
            .flat_map(|a| (0..g_count).map(move |g| (a, g)))
            .map(|(a, g)| dist(a, g))
            .fold(1e-300, f64::max);
        let weights = Matrix::from_fn(g_count, g_count, |(g, a)| -((dist(a, g) * scale).round() as i64));
        let (_, order) = kuhn_munkres(&weights);
        let total = order.iter().enumerate().map(|(g, &a)| dist(a, g)).sum();
        (order, total)
    }
}

/// Orthogonal `R` minimizing `‖Λ̂R − Λ‖_F`.
pub fn procrustes_rotation(estimate: &DMatrix<f64>, target: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = (estimate.transpose() * target).svd(true, true);
    svd.u.expect("requested U") * svd.v_t.expect("requested V'")
}

/// Components aligned to `truth`, each loading matrix rotated onto the
/// truth's gauge.
pub fn align_to_truth(estimate: &MfaParams, truth: &MfaParams) -> Result<MfaParams> {
    let (order, _) = align_components(estimate, truth);
    let permuted = estimate.permuted(&order);
    let loadings = permuted
        .loadings()
        .iter()
        .zip(truth.loadings())
        .map(|(l, t)| l * procrustes_rotation(l, t))
        .collect();
    MfaParams::new(
        permuted.weights().clone(),
        permuted.means().to_vec(),
        loadings,
        permuted.noise_diag().to_vec(),
    )
}

/// Bias summarized as the mean absolute coordinate bias; MSE as
/// `E‖θ̂ − θ‖² = tr Var(θ̂) + ‖bias‖²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasMse {
    pub bias: f64,
    pub mse: f64,
}

fn summarize(estimates: &[DVector<f64>], truth: &DVector<f64>) -> BiasMse {
    let r = estimates.len() as f64;
    let mut mean_err = DVector::zeros(truth.len());
    let mut mse = 0.0;
    for e in estimates {
        let err = e - truth;
        mse += err.norm_squared();
        mean_err += err;
    }
    mean_err /= r;
    BiasMse {
        bias: mean_err.abs().mean(),
        mse: mse / r,
    }
}

/// Per-component summaries. Keys are `pi_g`, `mu_g`, `psi_g`, `lambda_g`
/// (after Procrustes rotation) and `lambda_cov_g` (`ΛΛ'`), with `g` counted
/// from 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub n_estimates: usize,
    pub entries: BTreeMap<String, BiasMse>,
}

impl ParameterSummary {
    pub fn get(&self, block: &str, component: usize) -> Option<BiasMse> {
        self.entries.get(&format!("{block}_{}", component + 1)).copied()
    }
}

/// Bias and MSE of already aligned estimates.
pub fn bias_mse(estimates: &[MfaParams], truth: &MfaParams) -> Result<ParameterSummary> {
    if estimates.len() < 2 {
        return Err(Error::Precondition(format!("bias/MSE needs at least 2 estimates, got {}", estimates.len())));
    }
    if let Some(bad) = estimates.iter().find(|e| {
        e.n_components() != truth.n_components() || e.dim() != truth.dim() || e.n_factors() != truth.n_factors()
    }) {
        return Err(Error::Precondition(format!(
            "estimate shape (G={}, p={}, d={}) differs from truth",
            bad.n_components(),
            bad.dim(),
            bad.n_factors()
        )));
    }
    let flat = |m: &DMatrix<f64>| DVector::from_column_slice(m.as_slice());
    let cov = |l: &DMatrix<f64>| flat(&(l * l.transpose()));
    let mut entries = BTreeMap::new();
    for g in 0..truth.n_components() {
        let blocks: [(&str, Box<dyn Fn(&MfaParams) -> DVector<f64>>); 5] = [
            ("pi", Box::new(|m: &MfaParams| DVector::from_element(1, m.weights()[g]))),
            ("mu", Box::new(|m: &MfaParams| m.means()[g].clone())),
            ("psi", Box::new(|m: &MfaParams| m.noise_diag()[g].clone())),
            ("lambda", Box::new(|m: &MfaParams| flat(&m.loadings()[g]))),
            ("lambda_cov", Box::new(|m: &MfaParams| cov(&m.loadings()[g]))),
        ];
        for (name, extract) in blocks {
            let values: Vec<DVector<f64>> = estimates.iter().map(&extract).collect();
            entries.insert(format!("{name}_{}", g + 1), summarize(&values, &extract(truth)));
        }
    }
    Ok(ParameterSummary {
        n_estimates: estimates.len(),
        entries,
    })
}

/// One of the constraint/trimming combinations compared in the experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub name: String,
    pub c_noise: f64,
    pub c_load: f64,
    pub alpha: f64,
}

impl Setting {
    pub fn new(name: &str, c_noise: f64, c_load: f64, alpha: f64) -> Self {
        Self {
            name: name.into(),
            c_noise,
            c_load,
            alpha,
        }
    }

    /// S1 to S6: unconstrained, noise-constrained, fully constrained; each
    /// without and with 6% trimming.
    pub fn standard() -> Vec<Setting> {
        let free = ConstraintBounds::UNCONSTRAINED;
        vec![
            Setting::new("S1", free, free, 0.0),
            Setting::new("S2", 5.0, free, 0.0),
            Setting::new("S3", 5.0, 3.0, 0.0),
            Setting::new("S4", free, free, 0.06),
            Setting::new("S5", 5.0, free, 0.06),
            Setting::new("S6", 5.0, 3.0, 0.06),
        ]
    }

    pub fn by_name(name: &str) -> Option<Setting> {
        Self::standard().into_iter().find(|s| s.name == name)
    }

    /// Trimmed settings use α = 0.12 when noise and pointwise contamination
    /// are both present, enough to discard all 20 outliers.
    pub fn adapted_to(&self, scenario: &ScenarioSpec) -> Setting {
        let mut s = self.clone();
        if s.alpha > 0.0 && scenario.n_noise > 0 && scenario.n_pointwise > 0 {
            s.alpha = s.alpha.max(0.12);
        }
        s
    }

    pub fn fit_config(&self, n_components: usize, n_factors: usize) -> FitConfig {
        FitConfig::new(n_components, n_factors)
            .bounds(self.c_noise, self.c_load)
            .alpha(self.alpha)
    }
}

/// Options of [`run_experiment`] beyond the scenario and fit configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOptions {
    pub repetitions: usize,
    pub seed: u64,
    /// Exclude repetitions whose aligned mean distance `Σ_g ‖μ̂_g − μ_g‖`
    /// exceeds this value from the bias/MSE summary. `None` keeps all
    /// finite estimates.
    pub alignment_threshold: Option<f64>,
}

impl ExperimentOptions {
    pub fn new(repetitions: usize, seed: u64) -> Self {
        Self {
            repetitions,
            seed,
            alignment_threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionRecord {
    pub repetition: usize,
    pub fit_seed: u64,
    pub eta: Option<f64>,
    pub target: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub n_trimmed: usize,
    pub alignment_distance: Option<f64>,
    /// Included in the bias/MSE summary.
    pub aligned: bool,
    /// Estimate with components and loadings aligned to the truth.
    pub estimate: Option<MfaParams>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scenario: String,
    pub setting: Option<String>,
    pub n_clean: usize,
    pub config: FitConfig,
    pub repetitions: usize,
    pub eta_mean: f64,
    pub eta_sd: f64,
    pub n_failed: usize,
    pub n_nonconverged: usize,
    pub n_excluded: usize,
    pub per_parameter_bias: BTreeMap<String, f64>,
    pub per_parameter_mse: BTreeMap<String, f64>,
    pub records: Vec<RepetitionRecord>,
}

impl ExperimentReport {
    pub fn mse(&self, block: &str, component: usize) -> Option<f64> {
        self.per_parameter_mse.get(&format!("{block}_{}", component + 1)).copied()
    }

    pub fn bias(&self, block: &str, component: usize) -> Option<f64> {
        self.per_parameter_bias.get(&format!("{block}_{}", component + 1)).copied()
    }
}

fn run_repetition(scenario: &ScenarioSpec, config: &FitConfig, options: &ExperimentOptions, rep: usize) -> RepetitionRecord {
    let mut rng = substream(options.seed, rep as u64);
    let fit_seed = rng.next_u64();
    let mut record = RepetitionRecord {
        repetition: rep,
        fit_seed,
        eta: None,
        target: None,
        converged: false,
        iterations: 0,
        n_trimmed: 0,
        alignment_distance: None,
        aligned: false,
        estimate: None,
        error: None,
    };
    let sample = match scenario.generate_with(&mut rng) {
        Ok(s) => s,
        Err(e) => {
            record.error = Some(e.to_string());
            return record;
        }
    };
    let mut config = config.clone();
    config.seed = fit_seed;
    let result = match fit(&sample.data, &config) {
        Ok(r) => r,
        Err(e) => {
            record.error = Some(e.to_string());
            return record;
        }
    };
    record.target = Some(result.target);
    record.converged = result.converged;
    record.iterations = result.iterations;
    record.n_trimmed = result.n_trimmed();
    record.eta = misclassification_error(&result.labels, &sample.origins).ok();
    let comparable = result.params.n_components() == scenario.truth.n_components()
        && result.params.n_factors() == scenario.truth.n_factors();
    if comparable {
        if let Ok(aligned) = align_to_truth(&result.params, &scenario.truth) {
            let (_, distance) = align_components(&aligned, &scenario.truth);
            record.alignment_distance = Some(distance);
            record.aligned = distance.is_finite() && options.alignment_threshold.is_none_or(|t| distance <= t);
            record.estimate = Some(aligned);
        }
    }
    record
}

/// Generate, fit and score `options.repetitions` data sets. Repetition `r`
/// draws its data and its fit seed from stream `r` of `options.seed`.
pub fn run_experiment(scenario: &ScenarioSpec, config: &FitConfig, options: &ExperimentOptions) -> Result<ExperimentReport> {
    scenario.validate()?;
    config.validate()?;
    if options.repetitions == 0 {
        return Err(Error::InvalidConfig("repetitions must be positive".into()));
    }
    let records: Vec<RepetitionRecord> = (0..options.repetitions)
        .into_par_iter()
        .map(|rep| run_repetition(scenario, config, options, rep))
        .collect();
    let etas: Vec<f64> = records.iter().filter_map(|r| r.eta).collect();
    let (eta_mean, eta_sd) = mean_sd(&etas);
    let estimates: Vec<MfaParams> = records
        .iter()
        .filter(|r| r.aligned)
        .filter_map(|r| r.estimate.clone())
        .collect();
    let (mut per_parameter_bias, mut per_parameter_mse) = (BTreeMap::new(), BTreeMap::new());
    if estimates.len() >= 2 && scenario.truth.n_components() == config.n_components {
        let summary = bias_mse(&estimates, &scenario.truth)?;
        for (k, v) in summary.entries {
            per_parameter_bias.insert(k.clone(), v.bias);
            per_parameter_mse.insert(k, v.mse);
        }
    }
    Ok(ExperimentReport {
        scenario: scenario.label(),
        setting: None,
        n_clean: scenario.n_clean,
        config: config.clone(),
        repetitions: options.repetitions,
        eta_mean,
        eta_sd,
        n_failed: records.iter().filter(|r| r.error.is_some()).count(),
        n_nonconverged: records.iter().filter(|r| r.error.is_none() && !r.converged).count(),
        n_excluded: records.iter().filter(|r| r.error.is_none() && !r.aligned).count(),
        per_parameter_bias,
        per_parameter_mse,
        records,
    })
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Table1,
    Table2,
    BiasMse,
}

impl Preset {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "table1" => Some(Self::Table1),
            "table2" => Some(Self::Table2),
            "bias-mse" => Some(Self::BiasMse),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Table1 => "table1",
            Self::Table2 => "table2",
            Self::BiasMse => "bias-mse",
        }
    }

    /// The (scenario, setting) cells of the preset, settings already adapted
    /// to their scenario.
    pub fn cells(self) -> Vec<(ScenarioSpec, Setting)> {
        let d = ScenarioSpec::benchmark(150);
        let grid = |scenarios: Vec<ScenarioSpec>| {
            scenarios
                .into_iter()
                .flat_map(|sc| {
                    Setting::standard()
                        .into_iter()
                        .map(move |s| (sc.clone(), s))
                        .collect::<Vec<_>>()
                })
                .map(|(sc, s)| {
                    let s = s.adapted_to(&sc);
                    (sc, s)
                })
                .collect()
        };
        match self {
            Self::Table1 => grid(vec![d]),
            Self::Table2 => grid(vec![
                d.clone().with_noise(10),
                d.clone().with_pointwise(10),
                d.with_noise(10).with_pointwise(10),
            ]),
            Self::BiasMse => {
                let s1 = Setting::by_name("S1").expect("S1");
                let robust = Setting::by_name("S6").expect("S6");
                let scenarios = [
                    d.clone(),
                    d.clone().with_noise(10),
                    d.clone().with_pointwise(10),
                    d.clone().with_noise(10).with_pointwise(10),
                    // the whole contaminated scenario tripled, keeping the outlier share
                    ScenarioSpec::benchmark(450).with_noise(30).with_pointwise(30),
                ];
                [s1, robust]
                    .iter()
                    .flat_map(|s| scenarios.iter().map(move |sc| (sc.clone(), s.adapted_to(sc))))
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetReport {
    pub preset: Preset,
    pub repetitions: usize,
    pub seed: u64,
    pub cells: Vec<ExperimentReport>,
}

/// Run every cell of a preset with the same repetition seeds, so settings
/// within a scenario are compared on identical data sets.
pub fn run_preset(preset: Preset, repetitions: usize, seed: u64) -> Result<PresetReport> {
    let cells = preset
        .cells()
        .into_iter()
        .map(|(scenario, setting)| {
            let config = setting.fit_config(scenario.truth.n_components(), scenario.truth.n_factors());
            let mut report = run_experiment(&scenario, &config, &ExperimentOptions::new(repetitions, seed))?;
            report.setting = Some(setting.name);
            Ok(report)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PresetReport {
        preset,
        repetitions,
        seed,
        cells,
    })
}

fn cell_column(cell: &ExperimentReport) -> String {
    let mut col = cell.scenario.clone();
    if cell.n_clean != 150 {
        col = format!("{col} n={}", cell.n_clean);
    }
    format!("{col} {}", cell.setting.as_deref().unwrap_or("-"))
}

impl PresetReport {
    pub fn find(&self, scenario: &str, setting: &str, n_clean: usize) -> Option<&ExperimentReport> {
        self.cells
            .iter()
            .find(|c| c.scenario == scenario && c.setting.as_deref() == Some(setting) && c.n_clean == n_clean)
    }

    /// Aligned text table: η by scenario and setting, or bias (MSE) by
    /// parameter and cell.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        match self.preset {
            Preset::Table1 | Preset::Table2 => {
                let settings: Vec<String> = self.cells.iter().filter_map(|c| c.setting.clone()).unique().collect();
                let scenarios: Vec<String> = self.cells.iter().map(|c| c.scenario.clone()).unique().collect();
                let _ = write!(out, "{:<10}", "eta");
                for s in &settings {
                    let _ = write!(out, "{s:>10}");
                }
                out.push('\n');
                for (label, pick) in [("c_noise", 0), ("c_load", 1), ("alpha", 2)] {
                    let _ = write!(out, "{label:<10}");
                    for s in &settings {
                        let cfg = &self.cells.iter().find(|c| c.setting.as_ref() == Some(s)).expect("cell").config;
                        let v = [cfg.bounds.c_noise, cfg.bounds.c_load, cfg.alpha][pick];
                        let text = if v >= 1e9 { format!("{v:.0e}") } else { format!("{v}") };
                        let _ = write!(out, "{text:>10}");
                    }
                    out.push('\n');
                }
                for sc in &scenarios {
                    let _ = write!(out, "{sc:<10}");
                    for s in &settings {
                        let cell = self.cells.iter().find(|c| &c.scenario == sc && c.setting.as_ref() == Some(s));
                        let _ = write!(out, "{:>10}", cell.map_or("-".into(), |c| format!("{:.4}", c.eta_mean)));
                    }
                    out.push('\n');
                }
            }
            Preset::BiasMse => {
                let width = 22;
                let _ = write!(out, "{:<14}", "parameter");
                for c in &self.cells {
                    let _ = write!(out, "{:>width$}", cell_column(c));
                }
                out.push('\n');
                let keys: Vec<&String> = self.cells.iter().flat_map(|c| c.per_parameter_mse.keys()).unique().collect();
                for key in keys {
                    let _ = write!(out, "{key:<14}");
                    for c in &self.cells {
                        let text = match (c.per_parameter_bias.get(key), c.per_parameter_mse.get(key)) {
                            (Some(b), Some(m)) => format!("{b:.3} ({m:.3})"),
                            _ => "-".into(),
                        };
                        let _ = write!(out, "{text:>width$}");
                    }
                    out.push('\n');
                }
            }
        }
        out
    }

    /// One line per repetition, for external plotting.
    pub fn repetitions_csv(&self) -> String {
        let mut out = String::from("scenario,n_clean,setting,repetition,eta,target,converged,iterations,n_trimmed\n");
        for c in &self.cells {
            for r in &c.records {
                let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    c.scenario,
                    c.n_clean,
                    c.setting.as_deref().unwrap_or(""),
                    r.repetition,
                    opt(r.eta),
                    opt(r.target),
                    r.converged,
                    r.iterations,
                    r.n_trimmed
                );
            }
        }
        out
    }
}
