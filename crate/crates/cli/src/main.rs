use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use trimfa::aecm::{classify_trimmed, component_log_densities, fit, FitConfig, FitResult};
use trimfa::datagen::{Origin, ScenarioSpec};
use trimfa::eval::{misclassification_error, run_preset, Preset};
use trimfa::io::{read_csv, ColumnRef, CsvOptions, FitReport, Standardization, RESULT_FORMAT_VERSION};
use trimfa::model::ConstraintBounds;
use trimfa::Error;

/// Exit status: success.
const EXIT_OK: u8 = 0;
/// Unreadable input, invalid flags or data too small for the model.
const EXIT_INPUT: u8 = 1;
/// Every start of a fit (or of some experiment repetition) failed.
const EXIT_ALL_STARTS_FAILED: u8 = 2;
/// The selected fit did not meet the convergence test within `--max-iter`.
const EXIT_NOT_CONVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "trimfa", version, about = "Trimmed, constrained mixtures of factor analyzers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a CSV file.
    Fit(FitArgs),
    /// Run a named Monte-Carlo experiment.
    Experiment(ExperimentArgs),
    /// Generate a data set from a scenario file.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    input: PathBuf,
    /// Number of mixture components.
    #[arg(long = "g")]
    components: usize,
    /// Number of latent factors.
    #[arg(long = "d")]
    factors: usize,
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    #[arg(long, default_value_t = ConstraintBounds::UNCONSTRAINED)]
    c_noise: f64,
    #[arg(long, default_value_t = ConstraintBounds::UNCONSTRAINED)]
    c_load: f64,
    #[arg(long, default_value_t = 10)]
    starts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    /// Relative change of the trimmed target below which a start has converged.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Scale every column to zero mean and unit sample standard deviation.
    #[arg(long)]
    standardize: bool,
    /// Column (name or 1-based position) holding known classes; excluded from fitting.
    #[arg(long)]
    label_col: Option<String>,
    /// Comma-separated columns (names or positions) to leave out.
    #[arg(long, value_delimiter = ',')]
    ignore_cols: Vec<String>,
    /// Force header handling instead of detecting it.
    #[arg(long, conflicts_with = "no_header")]
    header: bool,
    #[arg(long)]
    no_header: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExperimentArgs {
    /// table1, table2 or bias-mse.
    #[arg(long)]
    preset: String,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Override the seed given in the scenario file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::AllStartsFailed { .. } => EXIT_ALL_STARTS_FAILED,
        _ => EXIT_INPUT,
    }
}

fn write(path: &Path, contents: &str) -> Result<(), Error> {
    fs::write(path, contents).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn create_out_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))
}

#[derive(Serialize)]
struct TrimmedRow {
    /// 1-based data row.
    row: usize,
    true_label: String,
    assigned_component: usize,
    /// `log π_g φ(x; μ_g, Σ_g)` for every component.
    log_component_density: Vec<f64>,
}

#[derive(Serialize)]
struct Misclassification {
    label_column: String,
    /// Trimmed observations count as errors.
    eta_map: f64,
    /// Trimmed observations assigned by the Bayes rule.
    eta_classified: f64,
    n_observations: usize,
    n_trimmed: usize,
    trimmed: Vec<TrimmedRow>,
}

fn misclassification(
    label_name: &str,
    raw: &[String],
    result: &FitResult,
    classified: &[usize],
    log_dg: &nalgebra::DMatrix<f64>,
) -> Result<Misclassification, Error> {
    let levels: Vec<&String> = raw.iter().collect::<BTreeSet<_>>().into_iter().collect();
    let truth: Vec<Origin> = raw
        .iter()
        .map(|l| Origin::Component(levels.iter().position(|v| *v == l).expect("level present")))
        .collect();
    let all: Vec<Option<usize>> = classified.iter().copied().map(Some).collect();
    let trimmed = (0..raw.len())
        .filter(|&i| result.trim_indicator[i] == 0)
        .map(|i| TrimmedRow {
            row: i + 1,
            true_label: raw[i].clone(),
            assigned_component: classified[i] + 1,
            log_component_density: log_dg.row(i).iter().copied().collect(),
        })
        .collect::<Vec<_>>();
    Ok(Misclassification {
        label_column: label_name.to_string(),
        eta_map: misclassification_error(&result.labels, &truth)?,
        eta_classified: misclassification_error(&all, &truth)?,
        n_observations: raw.len(),
        n_trimmed: trimmed.len(),
        trimmed,
    })
}

fn cmd_fit(args: &FitArgs) -> Result<u8, Error> {
    let options = CsvOptions {
        has_header: match (args.header, args.no_header) {
            (true, _) => Some(true),
            (_, true) => Some(false),
            _ => None,
        },
        label_column: args.label_col.as_deref().map(ColumnRef::parse),
        ignore_columns: args.ignore_cols.iter().map(|c| ColumnRef::parse(c)).collect(),
    };
    let table = read_csv(&args.input, &options)?;
    let standardization = args.standardize.then(|| Standardization::estimate(&table.data)).transpose()?;
    let data = match &standardization {
        Some(s) => s.apply(&table.data)?,
        None => table.data.clone(),
    };
    let mut config = FitConfig::new(args.components, args.factors)
        .alpha(args.alpha)
        .bounds(args.c_noise, args.c_load)
        .starts(args.starts)
        .seed(args.seed);
    config.max_iter = args.max_iter;
    config.tol_target = args.tol;
    let result = fit(&data, &config)?;
    create_out_dir(&args.out)?;

    let classified = classify_trimmed(&data, &result)?;
    let log_dg = component_log_densities(&data, &result.params)?;
    let mut labels = String::from("row,kept,label,classified,log_density\n");
    for i in 0..data.n_rows() {
        let _ = writeln!(
            labels,
            "{},{},{},{},{}",
            i + 1,
            result.trim_indicator[i],
            result.labels[i].map_or(String::new(), |l| (l + 1).to_string()),
            classified[i] + 1,
            result.log_mixture[i]
        );
    }
    write(&args.out.join("labels.csv"), &labels)?;

    let mut summary = format!(
        "target {}\nstart {} of {}, {} iterations, converged {} ({} of {} starts converged)\ntrimmed {} of {}\n",
        result.target,
        result.start_index + 1,
        config.n_starts,
        result.iterations,
        result.converged,
        result.n_converged_starts,
        config.n_starts,
        result.n_trimmed(),
        data.n_rows()
    );
    if let (Some(raw), Some(name)) = (&table.labels, &table.label_name) {
        let report = misclassification(name, raw, &result, &classified, &log_dg)?;
        let _ = writeln!(
            summary,
            "misclassification against {name}: {} (trimmed counted as errors), {} (trimmed assigned)",
            report.eta_map, report.eta_classified
        );
        for t in &report.trimmed {
            let _ = writeln!(summary, "  trimmed row {} ({}) -> component {}", t.row, t.true_label, t.assigned_component);
        }
        write(&args.out.join("misclassification.json"), &serde_json::to_string_pretty(&report)?)?;
    }
    let converged = result.converged;
    let report = FitReport {
        format_version: RESULT_FORMAT_VERSION,
        input: Some(args.input.display().to_string()),
        column_names: data.column_names().map(<[String]>::to_vec),
        standardization,
        config,
        result,
    };
    write(&args.out.join("result.json"), &report.to_json()?)?;
    print!("{summary}");
    Ok(if converged { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

fn cmd_experiment(args: &ExperimentArgs) -> Result<u8, Error> {
    let preset = Preset::parse(&args.preset)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown preset {:?}; use table1, table2 or bias-mse", args.preset)))?;
    let report = run_preset(preset, args.reps, args.seed)?;
    create_out_dir(&args.out)?;
    let table = report.to_table();
    write(&args.out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    write(&args.out.join("table.txt"), &table)?;
    write(&args.out.join("repetitions.csv"), &report.repetitions_csv())?;
    print!("{table}");
    let failed: usize = report.cells.iter().map(|c| c.n_failed).sum();
    let nonconverged: usize = report.cells.iter().map(|c| c.n_nonconverged).sum();
    println!("{failed} failed and {nonconverged} non-converged repetitions");
    Ok(if failed > 0 { EXIT_ALL_STARTS_FAILED } else { EXIT_OK })
}

fn cmd_simulate(args: &SimulateArgs) -> Result<u8, Error> {
    let text = fs::read_to_string(&args.scenario).map_err(|e| Error::Io(format!("{}: {e}", args.scenario.display())))?;
    let mut scenario = ScenarioSpec::parse(&text)?;
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    let sample = scenario.generate()?;
    create_out_dir(&args.out)?;
    let p = sample.data.n_cols();
    let mut csv = (1..=p).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",");
    csv.push_str(",origin\n");
    for (i, origin) in sample.origins.iter().enumerate() {
        for j in 0..p {
            let _ = write!(csv, "{},", sample.data.values()[(i, j)]);
        }
        let label = match origin {
            Origin::Component(g) => (g + 1).to_string(),
            Origin::Noise => "noise".into(),
            Origin::Pointwise => "pointwise".into(),
        };
        csv.push_str(&label);
        csv.push('\n');
    }
    write(&args.out.join("data.csv"), &csv)?;
    write(&args.out.join("scenario.txt"), &scenario.to_text())?;
    write(&args.out.join("truth.json"), &serde_json::to_string_pretty(&scenario.truth)?)?;
    println!("{} rows ({}) written to {}", sample.data.n_rows(), scenario.label(), args.out.display());
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Experiment(a) => cmd_experiment(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match outcome {
        Ok(code) => {
            if code == EXIT_NOT_CONVERGED {
                eprintln!("warning: the selected start did not converge; raise --max-iter or --tol");
            }
            ExitCode::from(code)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
