//! Projection of noise variances and loading spectra onto the
//! ratio-constrained parameter space.
//!
//! Both projections clamp a pooled set of values `v` into `[m, c·m]` and pick
//! the threshold `m` minimizing
//! `f(m) = Σ_g π_g Σ_k (log [v_gk]_m + v_gk / [v_gk]_m)`.
//! Between consecutive breakpoints (the values `v` and `v / c`) the set of
//! values clamped from below and from above is fixed, `f` has the form
//! `A log m + B / m + const`, and the interval minimizer is the clamped
//! stationary point. Scanning all `2K + 1` intervals gives the global minimum.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Clamp `v` into `[m, c·m]`.
#[inline]
pub fn truncate(v: f64, m: f64, c: f64) -> f64 {
    (c * m).min(v.max(m))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruncationProblem {
    /// `(group, value)` pairs.
    pub values: Vec<(usize, f64)>,
    pub group_weights: Vec<f64>,
    pub ratio_bound: f64,
}

impl TruncationProblem {
    pub fn new(values: Vec<(usize, f64)>, group_weights: Vec<f64>, ratio_bound: f64) -> Result<Self> {
        if !(ratio_bound >= 1.0 && ratio_bound.is_finite()) {
            return Err(Error::Precondition(format!("ratio bound {ratio_bound} must be finite and >= 1")));
        }
        if let Some(&(g, v)) = values
            .iter()
            .find(|(g, v)| *g >= group_weights.len() || !(*v >= 0.0 && v.is_finite()))
        {
            return Err(Error::Precondition(format!("bad truncation value {v} in group {g}")));
        }
        if group_weights.iter().any(|w| !(*w >= 0.0)) || group_weights.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(Error::Precondition("group weights must be non-negative and sum to at most 1".into()));
        }
        Ok(Self {
            values,
            group_weights,
            ratio_bound,
        })
    }

    fn weight(&self, group: usize) -> f64 {
        self.group_weights[group]
    }

    pub fn objective(&self, m: f64) -> f64 {
        let c = self.ratio_bound;
        self.values
            .iter()
            .map(|&(g, v)| {
                let t = truncate(v, m, c);
                self.weight(g) * (t.ln() + v / t)
            })
            .sum()
    }

    /// Global minimizer of [`objective`](Self::objective) over `m > 0`.
    pub fn optimal_threshold(&self) -> Result<f64> {
        let c = self.ratio_bound;
        if !self.values.iter().any(|&(g, v)| v > 0.0 && self.weight(g) > 0.0) {
            return Err(Error::DegenerateThreshold);
        }
        let mut breaks: Vec<f64> = self
            .values
            .iter()
            .filter(|(_, v)| *v > 0.0)
            .flat_map(|&(_, v)| [v, v / c])
            .collect();
        breaks.sort_by(f64::total_cmp);
        breaks.dedup();

        let mut best_m = f64::NAN;
        let mut best_f = f64::INFINITY;
        let mut consider = |m: f64| {
            let f = self.objective(m);
            if f < best_f {
                best_f = f;
                best_m = m;
            }
        };

        let last = *breaks.last().expect("at least one positive value");
        let mut lo = 0.0;
        for hi in breaks.iter().copied().chain(std::iter::once(f64::INFINITY)) {
            let probe = if lo == 0.0 {
                hi / 2.0
            } else if hi.is_infinite() {
                2.0 * last
            } else {
                0.5 * (lo + hi)
            };
            let (mut num, mut den) = (0.0, 0.0);
            for &(g, v) in &self.values {
                let w = self.weight(g);
                if v < probe {
                    num += w * v;
                    den += w;
                } else if v > c * probe {
                    num += w * v / c;
                    den += w;
                }
            }
            let candidate = if den > 0.0 {
                let stationary = num / den;
                if stationary > 0.0 {
                    stationary.clamp(lo, hi)
                } else {
                    hi
                }
            } else {
                probe
            };
            if candidate > 0.0 && candidate.is_finite() {
                consider(candidate);
            }
            if hi.is_finite() {
                consider(hi);
            }
            lo = hi;
        }
        Ok(best_m)
    }
}

/// Pool the `d` eigenvalues of every `Λ_g Λ_g'`, truncate them at the
/// jointly optimal threshold and rebuild `Λ_g = U_g diag(√e*) V_g'` from the
/// singular value decomposition of `Λ_g`. Keeping `V_g` leaves `Λ_g`
/// unchanged whenever no eigenvalue is truncated.
pub fn enforce_loading_constraint(
    loadings: &[DMatrix<f64>],
    weights: &[f64],
    c_load: f64,
) -> Result<Vec<DMatrix<f64>>> {
    let decomps: Vec<Spectrum> = loadings.iter().map(spectrum).collect();
    let values = decomps
        .iter()
        .enumerate()
        .flat_map(|(g, s)| s.eigenvalues.iter().map(move |&e| (g, e)))
        .collect();
    let problem = TruncationProblem::new(values, weights.to_vec(), c_load)?;
    let m = problem.optimal_threshold()?;
    Ok(decomps
        .into_iter()
        .map(|s| {
            let mut left = s.left;
            for (k, e) in s.eigenvalues.into_iter().enumerate() {
                left.column_mut(k).scale_mut(truncate(e, m, c_load).sqrt());
            }
            left * s.right_t
        })
        .collect())
}

/// Thin SVD of `Λ` with `σ_k²` as the eigenvalues of `Λ Λ'`.
struct Spectrum {
    left: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    right_t: DMatrix<f64>,
}

fn spectrum(lambda: &DMatrix<f64>) -> Spectrum {
    let svd = lambda.clone().svd(true, true);
    Spectrum {
        left: svd.u.expect("requested U"),
        eigenvalues: svd.singular_values.iter().map(|s| s * s).collect(),
        right_t: svd.v_t.expect("requested V'"),
    }
}

/// Truncate every noise variance at the jointly optimal threshold.
pub fn enforce_noise_constraint(
    noise_diags: &[DVector<f64>],
    weights: &[f64],
    c_noise: f64,
) -> Result<Vec<DVector<f64>>> {
    let values = noise_diags
        .iter()
        .enumerate()
        .flat_map(|(g, psi)| psi.iter().map(move |&v| (g, v)))
        .collect();
    let problem = TruncationProblem::new(values, weights.to_vec(), c_noise)?;
    let m = problem.optimal_threshold()?;
    Ok(noise_diags
        .iter()
        .map(|psi| psi.map(|v| truncate(v, m, c_noise)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::benchmark_truth;
    use crate::model::{check_constraints, loading_eigenvalues, ConstraintBounds, MfaParams};
    use proptest::prelude::*;

    /// Log-spaced grid minimum; independent of the interval construction.
    fn grid_min(problem: &TruncationProblem) -> f64 {
        let pos: Vec<f64> = problem.values.iter().map(|v| v.1).filter(|v| *v > 0.0).collect();
        let lo = pos.iter().cloned().fold(f64::INFINITY, f64::min) / problem.ratio_bound / 10.0;
        let hi = pos.iter().cloned().fold(0.0, f64::max) * 10.0;
        let (a, b) = (lo.ln(), hi.ln());
        (0..10_000)
            .map(|i| problem.objective((a + (b - a) * i as f64 / 9_999.0).exp()))
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn truncate_cases() {
        assert_eq!(truncate(5.0, 1.0, 10.0), 5.0);
        assert_eq!(truncate(0.0, 1.0, 10.0), 1.0);
        assert_eq!(truncate(100.0, 1.0, 10.0), 10.0);
    }

    #[test]
    fn objective_cases() {
        let p = TruncationProblem::new(vec![(0, 2.0), (0, 3.0)], vec![1.0], 2.0).unwrap();
        let expected = (2.0f64.ln() + 1.0) + (3.0f64.ln() + 1.0);
        assert!((p.objective(1.5) - expected).abs() < 1e-15);
        let single = TruncationProblem::new(vec![(0, 4.0)], vec![1.0], 1.0).unwrap();
        assert!((single.objective(2.0) - (2.0f64.ln() + 2.0)).abs() < 1e-15);
    }

    #[test]
    fn equal_values_keep_their_value() {
        let p = TruncationProblem::new(vec![(0, 3.0), (1, 3.0), (1, 3.0)], vec![0.5, 0.5], 4.0).unwrap();
        let m = p.optimal_threshold().unwrap();
        assert_eq!(truncate(3.0, m, 4.0), 3.0);
    }

    #[test]
    fn two_values_unit_ratio() {
        let p = TruncationProblem::new(vec![(0, 1.0), (1, 9.0)], vec![0.5, 0.5], 1.0).unwrap();
        let m = p.optimal_threshold().unwrap();
        assert!((m - 5.0).abs() < 1e-12);
        let expected = 5.0f64.ln() + (1.0 / 5.0 + 9.0 / 5.0) / 2.0;
        assert!((p.objective(m) - expected).abs() < 1e-12);
    }

    #[test]
    fn all_zero_values_fail() {
        let p = TruncationProblem::new(vec![(0, 0.0), (0, 0.0)], vec![1.0], 3.0).unwrap();
        assert_eq!(p.optimal_threshold(), Err(Error::DegenerateThreshold));
    }

    #[test]
    fn zero_weight_group_is_still_truncated() {
        let psi = vec![DVector::from_vec(vec![1.0, 2.0]), DVector::from_vec(vec![1e-6, 50.0])];
        let out = enforce_noise_constraint(&psi, &[1.0, 0.0], 4.0).unwrap();
        let all: Vec<f64> = out.iter().flat_map(|v| v.iter().copied()).collect();
        let (lo, hi) = all.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(hi / lo <= 4.0 * (1.0 + 1e-12));
        assert_eq!(out[0], psi[0]);
    }

    #[test]
    fn benchmark_noise_is_left_alone() {
        let truth = benchmark_truth();
        let w: Vec<f64> = truth.weights().iter().copied().collect();
        let out = enforce_noise_constraint(truth.noise_diag(), &w, 5.0).unwrap();
        for (a, b) in out.iter().zip(truth.noise_diag()) {
            assert!((a - b).abs().max() < 1e-15);
        }
    }

    #[test]
    fn zero_noise_entry_is_raised() {
        let psi = vec![DVector::from_vec(vec![0.0, 1.0, 1.5])];
        let out = enforce_noise_constraint(&psi, &[1.0], 10.0).unwrap();
        // the zero pulls the threshold down until all three values are clamped:
        // m = (0 + 1/10 + 1.5/10) / 3
        let m = 0.25 / 3.0;
        assert!((out[0][0] - m).abs() < 1e-12);
        assert!((out[0][1] - 10.0 * m).abs() < 1e-12);
        assert!((out[0][2] - 10.0 * m).abs() < 1e-12);
    }

    #[test]
    fn satisfied_loadings_keep_their_outer_product() {
        let truth = benchmark_truth();
        let w: Vec<f64> = truth.weights().iter().copied().collect();
        let out = enforce_loading_constraint(truth.loadings(), &w, 3.0).unwrap();
        for (a, b) in out.iter().zip(truth.loadings()) {
            let diff = a * a.transpose() - b * b.transpose();
            assert!(diff.abs().max() < 1e-10);
        }
    }

    #[test]
    fn inflated_loading_is_pulled_in() {
        let truth = benchmark_truth();
        let mut loadings = truth.loadings().to_vec();
        loadings[1] *= 1e3;
        let w: Vec<f64> = truth.weights().iter().copied().collect();
        let out = enforce_loading_constraint(&loadings, &w, 3.0).unwrap();
        let ev: Vec<f64> = out.iter().flat_map(loading_eigenvalues).collect();
        let (lo, hi) = ev.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(hi / lo <= 3.0 * (1.0 + 1e-8));
    }

    #[test]
    fn zero_loadings_single_component_fail() {
        let out = enforce_loading_constraint(&[DMatrix::zeros(4, 2)], &[1.0], 3.0);
        assert_eq!(out, Err(Error::DegenerateThreshold));
    }

    #[test]
    fn zero_loading_component_gets_orthonormal_directions() {
        let loadings = vec![DMatrix::from_row_slice(3, 1, &[1.0, 2.0, 0.5]), DMatrix::zeros(3, 1)];
        let out = enforce_loading_constraint(&loadings, &[0.5, 0.5], 2.0).unwrap();
        let ev: Vec<f64> = out.iter().flat_map(loading_eigenvalues).collect();
        assert!(ev.iter().all(|&e| e > 0.0));
        assert!(ev[0] / ev[1] <= 2.0 * (1.0 + 1e-10));
    }

    fn arb_problem() -> impl Strategy<Value = TruncationProblem> {
        (1usize..=4, 1.0..20.0f64).prop_flat_map(|(groups, c)| {
            (
                prop::collection::vec((0..groups, prop_oneof![Just(0.0), 1e-3..1e3f64]), 1..=12),
                prop::collection::vec(0.05..1.0f64, groups),
                Just(c),
            )
                .prop_map(|(mut values, raw_w, c)| {
                    let total: f64 = raw_w.iter().sum();
                    let w: Vec<f64> = raw_w.iter().map(|x| x / total).collect();
                    if values.iter().all(|v| v.1 == 0.0) {
                        values[0].1 = 1.0;
                    }
                    TruncationProblem::new(values, w, c).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn threshold_beats_grid(problem in arb_problem()) {
            let m = problem.optimal_threshold().unwrap();
            let best = problem.objective(m);
            let grid = grid_min(&problem);
            prop_assert!(best <= grid + 1e-9 * grid.abs().max(1.0), "{best} > {grid}");
            for &(_, v) in &problem.values {
                if v > 0.0 {
                    prop_assert!(best <= problem.objective(v) + 1e-12 * best.abs().max(1.0));
                    prop_assert!(best <= problem.objective(v / problem.ratio_bound) + 1e-12 * best.abs().max(1.0));
                }
            }
        }

        #[test]
        fn truncation_is_monotone(a in 0.0..100.0f64, b in 0.0..100.0f64, m in 0.01..10.0f64, c in 1.0..10.0f64) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(truncate(lo, m, c) <= truncate(hi, m, c));
            let t = truncate(a, m, c);
            prop_assert!(t >= m && t <= c * m);
        }

        #[test]
        fn enforcement_is_idempotent_and_feasible(
            seed_entries in prop::collection::vec(-3.0..3.0f64, 3 * 5 * 2),
            psi_entries in prop::collection::vec(1e-3..10.0f64, 3 * 5),
            scales in prop::collection::vec(0.01..30.0f64, 3),
            c_noise in 1.0..10.0f64,
            c_load in 1.0..10.0f64,
        ) {
            let weights = vec![0.2, 0.3, 0.5];
            let loadings: Vec<DMatrix<f64>> = (0..3)
                .map(|g| DMatrix::from_column_slice(5, 2, &seed_entries[g * 10..(g + 1) * 10]) * scales[g])
                .collect();
            let psi: Vec<DVector<f64>> = (0..3)
                .map(|g| DVector::from_column_slice(&psi_entries[g * 5..(g + 1) * 5]))
                .collect();
            let l1 = enforce_loading_constraint(&loadings, &weights, c_load).unwrap();
            let l2 = enforce_loading_constraint(&l1, &weights, c_load).unwrap();
            for (a, b) in l1.iter().zip(&l2) {
                let scale = (a * a.transpose()).abs().max().max(1.0);
                prop_assert!((a * a.transpose() - b * b.transpose()).abs().max() < 1e-10 * scale);
            }
            let p1 = enforce_noise_constraint(&psi, &weights, c_noise).unwrap();
            let p2 = enforce_noise_constraint(&p1, &weights, c_noise).unwrap();
            for (a, b) in p1.iter().zip(&p2) {
                prop_assert!((a - b).abs().max() < 1e-10 * a.abs().max().max(1.0));
            }
            let params = MfaParams::new(
                DVector::from_vec(weights.clone()),
                vec![DVector::zeros(5); 3],
                l1,
                p1,
            ).unwrap();
            let report = check_constraints(&params, &ConstraintBounds::new(c_noise, c_load).unwrap(), 1e-8);
            prop_assert!(report.satisfied(), "{report:?}");
        }
    }
}
