//! Simulation scenarios: samples from a known mixture, optionally with
//! uniform background noise and a tight cluster of pointwise contamination.

use std::collections::HashSet;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DataMatrix, MfaParams};
use crate::rng::{substream, StreamRng};

/// Half-width of the uniform jitter around the contamination location.
pub const POINTWISE_JITTER: f64 = 0.1;
pub const DEFAULT_NOISE_EXPANSION: f64 = 0.1;
pub const DEFAULT_POINTWISE_COORD: f64 = 25.0;

/// Name of the built-in three-group truth in scenario files.
pub const BENCHMARK_TRUTH_NAME: &str = "benchmark";

/// Generating origin of a simulated observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Component(usize),
    Noise,
    Pointwise,
}

impl Origin {
    pub fn is_contamination(self) -> bool {
        !matches!(self, Origin::Component(_))
    }
}

/// Three groups in six dimensions with two factors each.
pub fn benchmark_truth() -> MfaParams {
    let l1 = DMatrix::from_row_slice(
        6,
        2,
        &[0.50, 1.00, 1.00, 0.45, 0.05, -0.50, -0.60, 0.50, 0.50, 0.10, 1.00, -0.15],
    );
    let l2 = DMatrix::from_row_slice(
        6,
        2,
        &[0.10, 0.20, 0.20, 0.50, 1.00, -1.00, -0.20, 0.50, 1.00, 0.70, 1.20, -0.30],
    );
    let l3 = DMatrix::from_row_slice(
        6,
        2,
        &[0.10, 0.20, 0.20, 0.00, 1.00, 0.00, -0.20, 0.00, 1.00, 0.00, 0.00, -1.30],
    );
    MfaParams::new(
        DVector::from_vec(vec![0.3, 0.4, 0.3]),
        vec![
            DVector::from_element(6, 0.0),
            DVector::from_element(6, 5.0),
            DVector::from_element(6, 10.0),
        ],
        vec![l1, l2, l3],
        vec![
            DVector::from_element(6, 0.1),
            DVector::from_element(6, 0.4),
            DVector::from_element(6, 0.2),
        ],
    )
    .expect("benchmark truth is valid")
}

pub fn builtin_truth(name: &str) -> Option<MfaParams> {
    (name == BENCHMARK_TRUTH_NAME).then(benchmark_truth)
}

/// Observations with their generating origins.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub data: DataMatrix,
    pub origins: Vec<Origin>,
}

impl Sample {
    fn clean_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let p = self.data.n_cols();
        let mut lo = DVector::from_element(p, f64::INFINITY);
        let mut hi = DVector::from_element(p, f64::NEG_INFINITY);
        for (i, origin) in self.origins.iter().enumerate() {
            if origin.is_contamination() {
                continue;
            }
            for j in 0..p {
                let v = self.data.values()[(i, j)];
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        (lo, hi)
    }

    fn extended(&self, extra: DMatrix<f64>, origin: Origin) -> Self {
        let mut origins = self.origins.clone();
        origins.extend(std::iter::repeat_n(origin, extra.nrows()));
        Self {
            data: self.data.append_rows(&extra),
            origins,
        }
    }
}

/// Draw `n` observations `x = μ_g + Λ_g u + e` with `g ~ Categorical(π)`.
pub fn sample_mixture(truth: &MfaParams, n: usize, rng: &mut StreamRng) -> Sample {
    let p = truth.dim();
    let d = truth.n_factors();
    let picker = WeightedIndex::new(truth.weights().iter().copied()).expect("valid weights");
    let sd: Vec<DVector<f64>> = truth.noise_diag().iter().map(|v| v.map(f64::sqrt)).collect();
    let mut values = DMatrix::zeros(n, p);
    let mut origins = Vec::with_capacity(n);
    for i in 0..n {
        let g = picker.sample(rng);
        let u = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut x = &truth.means()[g] + &truth.loadings()[g] * u;
        for j in 0..p {
            x[j] += sd[g][j] * rng.sample::<f64, _>(StandardNormal);
        }
        values.set_row(i, &x.transpose());
        origins.push(Origin::Component(g));
    }
    Sample {
        data: DataMatrix::new(values).expect("finite draws"),
        origins,
    }
}

/// Append `n_noise` points uniform on the clean data's bounding box widened
/// by `expansion · range` on each side.
pub fn add_uniform_noise(sample: &Sample, n_noise: usize, expansion: f64, rng: &mut StreamRng) -> Sample {
    if n_noise == 0 {
        return sample.clone();
    }
    let (lo, hi) = sample.clean_bounds();
    let p = lo.len();
    let mut extra = DMatrix::zeros(n_noise, p);
    for i in 0..n_noise {
        for j in 0..p {
            let range = hi[j] - lo[j];
            let (a, b) = (lo[j] - expansion * range, hi[j] + expansion * range);
            extra[(i, j)] = if b > a { rng.random_range(a..b) } else { a };
        }
    }
    sample.extended(extra, Origin::Noise)
}

/// Append `n_pw` points at `location` plus uniform jitter in
/// `[-POINTWISE_JITTER, POINTWISE_JITTER]`. The location must lie outside
/// the clean data's bounding box.
pub fn add_pointwise(
    sample: &Sample,
    n_pw: usize,
    location: &DVector<f64>,
    rng: &mut StreamRng,
) -> Result<Sample> {
    let (lo, hi) = sample.clean_bounds();
    if location.len() != lo.len() {
        return Err(Error::Precondition(format!(
            "contamination location has {} coordinates, data has {}",
            location.len(),
            lo.len()
        )));
    }
    let inside = (0..lo.len()).all(|j| location[j] >= lo[j] && location[j] <= hi[j]);
    if inside {
        return Err(Error::Precondition(
            "contamination location lies inside the data's bounding box".into(),
        ));
    }
    let p = location.len();
    let mut extra = DMatrix::zeros(n_pw, p);
    for i in 0..n_pw {
        for j in 0..p {
            extra[(i, j)] = location[j] + rng.random_range(-POINTWISE_JITTER..=POINTWISE_JITTER);
        }
    }
    Ok(sample.extended(extra, Origin::Pointwise))
}

/// A generative recipe: mixture truth plus contamination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub truth_name: String,
    pub truth: MfaParams,
    pub n_clean: usize,
    pub n_noise: usize,
    pub n_pointwise: usize,
    pub noise_box_expansion: f64,
    pub pointwise_location: Vec<f64>,
    pub seed: u64,
}

impl ScenarioSpec {
    /// Benchmark truth, `n_clean` points, no contamination.
    pub fn benchmark(n_clean: usize) -> Self {
        let truth = benchmark_truth();
        let p = truth.dim();
        Self {
            truth_name: BENCHMARK_TRUTH_NAME.into(),
            truth,
            n_clean,
            n_noise: 0,
            n_pointwise: 0,
            noise_box_expansion: DEFAULT_NOISE_EXPANSION,
            pointwise_location: vec![DEFAULT_POINTWISE_COORD; p],
            seed: 0,
        }
    }

    pub fn with_noise(mut self, n: usize) -> Self {
        self.n_noise = n;
        self
    }

    pub fn with_pointwise(mut self, n: usize) -> Self {
        self.n_pointwise = n;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Short label: `D`, `D+N`, `D+PC` or `D+N+PC`.
    pub fn label(&self) -> String {
        let mut s = String::from("D");
        if self.n_noise > 0 {
            s.push_str("+N");
        }
        if self.n_pointwise > 0 {
            s.push_str("+PC");
        }
        s
    }

    pub fn n_total(&self) -> usize {
        self.n_clean + self.n_noise + self.n_pointwise
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_total() == 0 {
            return Err(Error::InvalidConfig("scenario has no observations".into()));
        }
        if self.pointwise_location.len() != self.truth.dim() {
            return Err(Error::InvalidConfig(format!(
                "pointwise_location has {} coordinates, truth has dimension {}",
                self.pointwise_location.len(),
                self.truth.dim()
            )));
        }
        if !(self.noise_box_expansion >= 0.0 && self.noise_box_expansion.is_finite()) {
            return Err(Error::InvalidConfig("noise_box_expansion must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn generate_with(&self, rng: &mut StreamRng) -> Result<Sample> {
        self.validate()?;
        let clean = sample_mixture(&self.truth, self.n_clean, rng);
        let noisy = add_uniform_noise(&clean, self.n_noise, self.noise_box_expansion, rng);
        if self.n_pointwise == 0 {
            return Ok(noisy);
        }
        let loc = DVector::from_column_slice(&self.pointwise_location);
        add_pointwise(&noisy, self.n_pointwise, &loc, rng)
    }

    /// Generate from the scenario's own seed (stream 0).
    pub fn generate(&self) -> Result<Sample> {
        self.generate_with(&mut substream(self.seed, 0))
    }

    /// Parse the `key = value` scenario format.
    ///
    /// ```text
    /// # comment
    /// truth = benchmark
    /// n_clean = 150
    /// n_noise = 10
    /// n_pointwise = 10
    /// noise_box_expansion = 0.1
    /// pointwise_location = 25, 25, 25, 25, 25, 25
    /// seed = 42
    /// ```
    ///
    /// Only `n_clean` is required; the rest default to the benchmark truth,
    /// no contamination, expansion 0.1, location 25 in every coordinate and
    /// seed 0.
    pub fn parse(text: &str) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut truth_name = BENCHMARK_TRUTH_NAME.to_string();
        let mut n_clean = None;
        let mut n_noise = 0;
        let mut n_pointwise = 0;
        let mut expansion = DEFAULT_NOISE_EXPANSION;
        let mut location: Option<Vec<f64>> = None;
        let mut seed = 0;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let err = |message: String| Error::Scenario {
                line: line_no,
                message,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            let int = |v: &str| v.parse::<usize>().map_err(|e| err(format!("`{key}`: {e}")));
            match key {
                "truth" => {
                    if builtin_truth(value).is_none() {
                        return Err(err(format!("unknown truth `{value}`")));
                    }
                    truth_name = value.to_string();
                }
                "n_clean" => n_clean = Some(int(value)?),
                "n_noise" => n_noise = int(value)?,
                "n_pointwise" => n_pointwise = int(value)?,
                "noise_box_expansion" => {
                    expansion = value.parse().map_err(|e| err(format!("`{key}`: {e}")))?;
                }
                "pointwise_location" => {
                    let coords = value
                        .split(',')
                        .map(|c| c.trim().parse::<f64>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|e| err(format!("`{key}`: {e}")))?;
                    if coords.iter().any(|c| !c.is_finite()) {
                        return Err(err("pointwise_location must be finite".into()));
                    }
                    location = Some(coords);
                }
                "seed" => seed = value.parse().map_err(|e| err(format!("`{key}`: {e}")))?,
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        let n_clean = n_clean.ok_or(Error::Scenario {
            line: 0,
            message: "missing required key `n_clean`".into(),
        })?;
        let truth = builtin_truth(&truth_name).expect("checked above");
        let p = truth.dim();
        let spec = Self {
            truth_name,
            truth,
            n_clean,
            n_noise,
            n_pointwise,
            noise_box_expansion: expansion,
            pointwise_location: location.unwrap_or_else(|| vec![DEFAULT_POINTWISE_COORD; p]),
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let loc: Vec<String> = self.pointwise_location.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "truth = {}", self.truth_name);
        let _ = writeln!(s, "n_clean = {}", self.n_clean);
        let _ = writeln!(s, "n_noise = {}", self.n_noise);
        let _ = writeln!(s, "n_pointwise = {}", self.n_pointwise);
        let _ = writeln!(s, "noise_box_expansion = {}", self.noise_box_expansion);
        let _ = writeln!(s, "pointwise_location = {}", loc.join(", "));
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }
}
