//! CSV ingest, standardization and the `result.json` artifact.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::aecm::{trimmed_target, FitConfig, FitResult};
use crate::error::{Error, Result};
use crate::model::DataMatrix;

/// A column chosen by header name or by 1-based position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColumnRef {
    Name(String),
    Position(usize),
}

impl ColumnRef {
    /// Digits select a position, anything else a name.
    pub fn parse(text: &str) -> Self {
        match text.trim().parse::<usize>() {
            Ok(i) if i > 0 => Self::Position(i),
            _ => Self::Name(text.trim().to_string()),
        }
    }

    fn resolve(&self, header: Option<&[String]>, width: usize) -> Result<usize> {
        match self {
            Self::Position(i) if *i <= width => Ok(i - 1),
            Self::Position(i) => Err(Error::InvalidConfig(format!("column {i} out of range: the file has {width} columns"))),
            Self::Name(name) => header
                .and_then(|h| h.iter().position(|c| c == name))
                .ok_or_else(|| Error::InvalidConfig(format!("no column named {name:?} in the header"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CsvOptions {
    /// `None` detects a header: the first row is one when it has a
    /// non-numeric cell in a column that is numeric in the second row.
    pub has_header: Option<bool>,
    pub label_column: Option<ColumnRef>,
    pub ignore_columns: Vec<ColumnRef>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub data: DataMatrix,
    /// Raw values of the label column, if one was requested.
    pub labels: Option<Vec<String>>,
    pub label_name: Option<String>,
}

fn is_numeric(cell: &str) -> bool {
    cell.trim().parse::<f64>().is_ok_and(f64::is_finite)
}

fn detect_header(rows: &[csv::StringRecord]) -> bool {
    let Some(first) = rows.first() else {
        return false;
    };
    match rows.get(1) {
        Some(second) => first
            .iter()
            .zip(second.iter())
            .any(|(a, b)| !is_numeric(a) && is_numeric(b)),
        None => first.iter().any(|c| !is_numeric(c)),
    }
}

/// Parse comma-separated numeric data. Row and column numbers in errors are
/// 1-based and count the header line.
pub fn parse_csv(text: &str, options: &CsvOptions) -> Result<CsvTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv {
            row: e.position().map_or(i + 1, |p| p.line() as usize),
            column: 0,
            message: e.to_string(),
        })?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        rows.push((i + 1, record));
    }
    if rows.is_empty() {
        return Err(Error::InvalidData("the file contains no rows".into()));
    }
    let records: Vec<csv::StringRecord> = rows.iter().take(2).map(|(_, r)| r.clone()).collect();
    let has_header = options.has_header.unwrap_or_else(|| detect_header(&records));
    let width = rows[0].1.len();
    let header: Option<Vec<String>> = has_header.then(|| rows[0].1.iter().map(str::to_string).collect());
    let body = if has_header { &rows[1..] } else { &rows[..] };
    if body.is_empty() {
        return Err(Error::InvalidData("the file has a header but no data rows".into()));
    }

    let label_idx = options
        .label_column
        .as_ref()
        .map(|c| c.resolve(header.as_deref(), width))
        .transpose()?;
    let mut skip = vec![false; width];
    for c in &options.ignore_columns {
        skip[c.resolve(header.as_deref(), width)?] = true;
    }
    if let Some(l) = label_idx {
        skip[l] = true;
    }
    let keep: Vec<usize> = (0..width).filter(|&j| !skip[j]).collect();
    if keep.is_empty() {
        return Err(Error::InvalidData("no numeric columns left after removing label and ignored columns".into()));
    }

    let mut values = DMatrix::zeros(body.len(), keep.len());
    let mut labels = label_idx.map(|_| Vec::with_capacity(body.len()));
    for (r, (line, record)) in body.iter().enumerate() {
        if record.len() != width {
            return Err(Error::Csv {
                row: *line,
                column: record.len().min(width) + 1,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        for (c, &j) in keep.iter().enumerate() {
            let cell = &record[j];
            values[(r, c)] = cell
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Csv {
                    row: *line,
                    column: j + 1,
                    message: if cell.is_empty() {
                        "empty cell".into()
                    } else {
                        format!("{cell:?} is not a finite number")
                    },
                })?;
        }
        if let (Some(labels), Some(l)) = (labels.as_mut(), label_idx) {
            labels.push(record[l].to_string());
        }
    }
    let names = header.as_ref().map(|h| keep.iter().map(|&j| h[j].clone()).collect());
    Ok(CsvTable {
        data: DataMatrix::with_names(values, names)?,
        labels,
        label_name: label_idx.map(|l| header.as_ref().map_or_else(|| format!("column {}", l + 1), |h| h[l].clone())),
    })
}

pub fn read_csv(path: &Path, options: &CsvOptions) -> Result<CsvTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_csv(&text, options)
}

/// Column means and sample standard deviations (denominator `n − 1`)
/// computed on every row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardization {
    pub fn estimate(data: &DataMatrix) -> Result<Self> {
        let n = data.n_rows();
        if n < 2 {
            return Err(Error::InvalidData("standardization needs at least two rows".into()));
        }
        let mut means = Vec::with_capacity(data.n_cols());
        let mut sds = Vec::with_capacity(data.n_cols());
        for (j, col) in data.values().column_iter().enumerate() {
            let m = col.mean();
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
            if !(sd > 0.0) {
                return Err(Error::InvalidData(format!("column {} is constant and cannot be standardized", j + 1)));
            }
            means.push(m);
            sds.push(sd);
        }
        Ok(Self { means, sds })
    }

    pub fn apply(&self, data: &DataMatrix) -> Result<DataMatrix> {
        let mut values = data.values().clone();
        for (j, mut col) in values.column_iter_mut().enumerate() {
            col.apply(|v| *v = (*v - self.means[j]) / self.sds[j]);
        }
        DataMatrix::with_names(values, data.column_names().map(<[String]>::to_vec))
    }

    /// Map a point from the standardized scale back to the original one.
    pub fn invert_point(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(x.len(), |j, _| x[j] * self.sds[j] + self.means[j])
    }
}

pub const RESULT_FORMAT_VERSION: u32 = 1;

/// Everything `fit` writes to `result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub format_version: u32,
    pub input: Option<String>,
    pub column_names: Option<Vec<String>>,
    /// Present when the data were standardized before fitting; parameters
    /// are on the standardized scale.
    pub standardization: Option<Standardization>,
    pub config: FitConfig,
    pub result: FitResult,
}

impl FitReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self = serde_json::from_str(text)?;
        report.check_consistency()?;
        Ok(report)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn check_consistency(&self) -> Result<()> {
        let r = &self.result;
        let n = r.trim_indicator.len();
        let g = r.params.n_components();
        if r.labels.len() != n || r.log_mixture.len() != n || r.posteriors.nrows() != n {
            return Err(Error::InvalidData("per-observation arrays in result have different lengths".into()));
        }
        if r.posteriors.ncols() != g || r.labels.iter().flatten().any(|&l| l >= g) {
            return Err(Error::InvalidData("labels or posteriors do not match the number of components".into()));
        }
        if r.trim_indicator.iter().any(|&z| z > 1) {
            return Err(Error::InvalidData("trim indicator must be 0 or 1".into()));
        }
        if let Some(s) = &self.standardization {
            if s.means.len() != r.params.dim() || s.sds.len() != r.params.dim() {
                return Err(Error::InvalidData("standardization does not match the data dimension".into()));
            }
        }
        Ok(())
    }

    /// Trimmed target of the stored parameters on `data` (already on the
    /// fitting scale).
    pub fn recompute_target(&self, data: &DataMatrix) -> Result<f64> {
        trimmed_target(data, &self.result.params, self.config.alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aecm::fit;
    use crate::datagen::ScenarioSpec;

    #[test]
    fn header_is_detected() {
        let t = parse_csv("a,b\n1,2\n3,4\n", &CsvOptions::default()).unwrap();
        assert_eq!(t.data.n_rows(), 2);
        assert_eq!(t.data.column_names().unwrap(), ["a", "b"]);
        let t = parse_csv("1,2\n3,4\n", &CsvOptions::default()).unwrap();
        assert_eq!(t.data.n_rows(), 2);
        assert!(t.data.column_names().is_none());
    }

    #[test]
    fn text_label_column_is_not_mistaken_for_a_header() {
        let opts = CsvOptions {
            label_column: Some(ColumnRef::Position(3)),
            ..Default::default()
        };
        let t = parse_csv("1,2,f\n3,4,m\n", &opts).unwrap();
        assert_eq!(t.data.n_rows(), 2);
        assert_eq!(t.labels.unwrap(), ["f", "m"]);
    }

    #[test]
    fn label_and_ignored_columns_by_name() {
        let opts = CsvOptions {
            label_column: Some(ColumnRef::parse("Sex")),
            ignore_columns: vec![ColumnRef::parse("Sport")],
            ..Default::default()
        };
        let t = parse_csv("x,Sex,Sport,y\n1.5,f,row,2\n2.5,m,swim,3\n", &opts).unwrap();
        assert_eq!(t.data.values(), &nalgebra::dmatrix![1.5, 2.0; 2.5, 3.0]);
        assert_eq!(t.data.column_names().unwrap(), ["x", "y"]);
        assert_eq!(t.label_name.as_deref(), Some("Sex"));
    }

    #[test]
    fn errors_carry_row_and_column() {
        let err = parse_csv("a,b\n1,2\n3,x\n", &CsvOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Csv { row: 3, column: 2, .. }), "{err:?}");
        let err = parse_csv("a,b\n1,2\n3\n", &CsvOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Csv { row: 3, .. }), "{err:?}");
        let err = parse_csv("1,2\n,4\n", &CsvOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Csv { row: 2, column: 1, .. }), "{err:?}");
        assert!(parse_csv("", &CsvOptions::default()).is_err());
        assert!(parse_csv("a,b\n", &CsvOptions::default()).is_err());
        let missing = CsvOptions {
            label_column: Some(ColumnRef::parse("nope")),
            ..Default::default()
        };
        assert!(matches!(parse_csv("a,b\n1,2\n", &missing), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn standardization_uses_sample_sd() {
        let data = DataMatrix::from_rows(&[vec![1.0, 10.0], vec![2.0, 10.0], vec![3.0, 13.0]]).unwrap();
        let s = Standardization::estimate(&data).unwrap();
        assert_eq!(s.means, vec![2.0, 11.0]);
        assert!((s.sds[0] - 1.0).abs() < 1e-15);
        assert!((s.sds[1] - 3.0_f64.sqrt()).abs() < 1e-15);
        let z = s.apply(&data).unwrap();
        for col in z.values().column_iter() {
            assert!(col.mean().abs() < 1e-15);
            assert!((col.variance() * 3.0 / 2.0 - 1.0).abs() < 1e-12);
        }
        let back = s.invert_point(&z.row(2));
        assert!((back - data.row(2)).abs().max() < 1e-12);
        let constant = DataMatrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        assert!(Standardization::estimate(&constant).is_err());
    }

    #[test]
    fn result_json_round_trip_reproduces_target() {
        let s = ScenarioSpec::benchmark(150).with_noise(10).with_seed(3).generate().unwrap();
        let config = FitConfig::new(3, 2).bounds(5.0, 3.0).alpha(0.06).starts(2).seed(4);
        let result = fit(&s.data, &config).unwrap();
        let report = FitReport {
            format_version: RESULT_FORMAT_VERSION,
            input: None,
            column_names: None,
            standardization: None,
            config,
            result,
        };
        let back = FitReport::from_json(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
        let target = back.recompute_target(&s.data).unwrap();
        assert!((target - report.result.target).abs() <= 1e-10 * target.abs().max(1.0));
    }

    #[test]
    fn inconsistent_result_json_is_rejected() {
        assert!(FitReport::from_json("{}").is_err());
        assert!(FitReport::from_json("not json").is_err());
    }
}
