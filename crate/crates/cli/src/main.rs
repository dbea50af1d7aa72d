use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use nmem::bootstrap::bootstrap_fit;
use nmem::config::FitConfig;
use nmem::data::{ingest_csv, CovariateSchema, CsvLayout, LongitudinalDataset};
use nmem::em::{classify, fit_pipeline, Classification, FitReport, TraceEntry, Workspace};
use nmem::score::score;
use nmem::simulate::{simulate, unit_grid, SimulationDesign, Truth, EVAL_GRID_POINTS};
use nmem::Error;

#[derive(Parser)]
#[command(name = "nmem", version, about = "Cluster longitudinal trajectories with a two-group nonparametric mixed-effects mixture")]
struct Cli {
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset and its truth from the reference design.
    Simulate(SimulateArgs),
    /// Penalized fit with variable selection, then the unpenalized refit.
    Fit(FitArgs),
    /// Parametric bootstrap intervals for a saved fit.
    Bootstrap(BootstrapArgs),
    /// Classify the subjects of a dataset with a saved fit.
    Classify(ClassifyArgs),
    /// Score a fit of simulated data against its truth.
    Score(ScoreArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Number of subjects.
    #[arg(long, default_value_t = 500)]
    m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Add smooth subject-specific deviations.
    #[arg(long)]
    smooth: bool,
    /// JSON design overriding the reference design (`--m`, `--seed` and `--smooth` are then ignored).
    #[arg(long)]
    design: Option<PathBuf>,
    /// Directory receiving `data.csv` and `truth.json`.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    /// Long-format CSV, one row per subject and time.
    #[arg(long)]
    data: PathBuf,
    /// JSON covariate schema; all extra columns are inferred when omitted.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long, default_value = "id")]
    id_col: String,
    #[arg(long, default_value = "time")]
    time_col: String,
    #[arg(long, default_value = "response")]
    response_col: String,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML fit configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed of the random initial assignment.
    #[arg(long)]
    seed: Option<u64>,
    /// Posterior probability at or above which a subject joins group 1 [default: 0.5].
    #[arg(long)]
    threshold: Option<f64>,
    /// Maximum number of spline knots [default: 64].
    #[arg(long)]
    knot_cap: Option<usize>,
    /// Maximum EM iterations [default: 100].
    #[arg(long)]
    max_outer: Option<usize>,
    /// Maximum inner spline/variance passes [default: 5].
    #[arg(long)]
    max_inner: Option<usize>,
    /// Outer stopping tolerance [default: 1e-5].
    #[arg(long)]
    d_em: Option<f64>,
    /// Inner stopping tolerance [default: 1e-5].
    #[arg(long)]
    d_inner: Option<f64>,
    /// Outer denominator offset [default: 1e-5].
    #[arg(long)]
    kappa1: Option<f64>,
    /// Inner denominator offset [default: 1e-5].
    #[arg(long)]
    kappa2: Option<f64>,
    /// Cross-validation folds of the membership model [default: 10].
    #[arg(long)]
    folds: Option<usize>,
    /// Lower end of the smoothing-parameter search in log10(N·λ) [default: 0].
    #[arg(long, allow_hyphen_values = true)]
    lambda_floor: Option<f64>,
}

impl ConfigArgs {
    fn inputs(&self) -> Vec<&Path> {
        self.config.iter().map(PathBuf::as_path).collect()
    }

    fn build(&self) -> nmem::Result<FitConfig> {
        let mut cfg = match &self.config {
            Some(p) => FitConfig::from_toml_file(p)?,
            None => FitConfig::default(),
        };
        let s = &mut cfg.stopping;
        set(&mut cfg.seed, self.seed);
        set(&mut cfg.threshold, self.threshold);
        set(&mut cfg.knot_cap, self.knot_cap);
        set(&mut s.max_outer, self.max_outer);
        set(&mut s.max_inner, self.max_inner);
        set(&mut s.d_em, self.d_em);
        set(&mut s.d_inner, self.d_inner);
        set(&mut s.kappa1, self.kappa1);
        set(&mut s.kappa2, self.kappa2);
        set(&mut cfg.cv.n_folds, self.folds);
        set(&mut cfg.lambda_search.floor_log10, self.lambda_floor);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory receiving the report, classification, curve and trace files.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BootstrapArgs {
    /// Saved fit report.
    #[arg(long)]
    report: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Number of bootstrap replicates.
    #[arg(long, default_value_t = 1000)]
    replicates: usize,
    /// Replicate `b` uses seed `bootstrap_seed + b`.
    #[arg(long, default_value_t = 0)]
    bootstrap_seed: u64,
    /// Directory receiving the intervals, bands and the report with intervals attached.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    report: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    /// Fit report (the refit report written by `fit`).
    #[arg(long)]
    report: PathBuf,
    /// Truth JSON written by `simulate`.
    #[arg(long)]
    truth: PathBuf,
    /// Output JSON.
    #[arg(long)]
    out: PathBuf,
}

impl DataArgs {
    fn inputs(&self) -> Vec<&Path> {
        let mut v = vec![self.data.as_path()];
        v.extend(self.schema.as_deref());
        v
    }

    fn load(&self) -> nmem::Result<LongitudinalDataset> {
        let schema = self.schema.as_ref().map(CovariateSchema::from_json_file).transpose()?;
        let layout = CsvLayout { id_col: self.id_col.clone(), time_col: self.time_col.clone(), response_col: self.response_col.clone() };
        ingest_csv(&self.data, schema.as_ref(), &layout)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, body) = error_json(&e);
            eprintln!("{body}");
            ExitCode::from(code)
        }
    }
}

/// Exit code and machine-readable description of an error. Problems with
/// the inputs exit with 2, numerical failures with 1.
fn error_json(e: &Error) -> (u8, String) {
    let (kind, row) = match e {
        Error::Io { .. } => ("io", None),
        Error::Csv(_) => ("csv", None),
        Error::MissingColumn(_) => ("missing_column", None),
        Error::MalformedRow { row, .. } => ("malformed_row", Some(*row)),
        Error::EmptySubject(_) => ("empty_subject", None),
        Error::DegenerateTimeRange { .. } => ("degenerate_time_range", None),
        Error::TimeOutOfRange { .. } => ("time_out_of_range", None),
        Error::InvalidParameter(_) => ("invalid_parameter", None),
        Error::Serialization(_) => ("serialization", None),
        Error::Dimension(_) => ("dimension", None),
        Error::NotPositiveDefinite(_) => ("not_positive_definite", None),
        Error::Singular(_) => ("singular", None),
        Error::NonFinite(_) => ("non_finite", None),
        Error::NoConvergence(_) => ("no_convergence", None),
        Error::EmptyGroup(_) => ("empty_group", None),
    };
    let numeric = matches!(
        e,
        Error::NotPositiveDefinite(_) | Error::Singular(_) | Error::NonFinite(_) | Error::NoConvergence(_) | Error::EmptyGroup(_)
    );
    let body = serde_json::json!({ "error": { "kind": kind, "row": row, "message": e.to_string() } });
    (if numeric { 1 } else { 2 }, body.to_string())
}

fn run(cli: Cli) -> nmem::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Bootstrap(a) => cmd_bootstrap(a, cli.threads),
        Command::Classify(a) => cmd_classify(a),
        Command::Score(a) => cmd_score(a),
    }
}

/// Checks every input exists and every output location is writable before
/// any work starts.
fn check_paths(inputs: &[&Path], out_dir: Option<&Path>, out_files: &[&Path]) -> nmem::Result<()> {
    for p in inputs {
        if !p.is_file() {
            return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "input file not found")));
        }
    }
    if let Some(d) = out_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for f in out_files {
        let parent = f.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        if !parent.is_dir() {
            return Err(Error::io(f, std::io::Error::new(std::io::ErrorKind::NotFound, "output directory does not exist")));
        }
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> nmem::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> nmem::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn cmd_simulate(a: SimulateArgs) -> nmem::Result<()> {
    let inputs: Vec<&Path> = a.design.iter().map(PathBuf::as_path).collect();
    check_paths(&inputs, Some(&a.out_dir), &[])?;
    let design = match &a.design {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<SimulationDesign>(&text)?
        }
        None => SimulationDesign::reference(a.m, a.seed, a.smooth),
    };
    let sim = simulate(&design)?;
    sim.dataset.export_csv(a.out_dir.join("data.csv"))?;
    write_json(&a.out_dir.join("truth.json"), &sim.truth)
}

fn trace_rows(stage: &str, trace: &[TraceEntry]) -> Vec<Vec<String>> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    trace
        .iter()
        .map(|t| {
            vec![
                stage.to_string(),
                t.outer.to_string(),
                t.inner.map(|i| i.to_string()).unwrap_or_default(),
                t.distance.to_string(),
                opt(t.loglik_before),
                opt(t.loglik_after),
            ]
        })
        .collect()
}

fn classification_rows(c: &Classification) -> Vec<Vec<String>> {
    (0..c.subject_ids.len())
        .map(|i| vec![c.subject_ids[i].clone(), c.labels[i].to_string(), c.posteriors[i].to_string(), c.priors[i].to_string()])
        .collect()
}

const CLASSIFICATION_HEADER: [&str; 4] = ["id", "group", "posterior_group1", "prior_group1"];

fn cmd_fit(a: FitArgs) -> nmem::Result<()> {
    let mut inputs = a.data.inputs();
    inputs.extend(a.config.inputs());
    check_paths(&inputs, Some(&a.out_dir), &[])?;
    let config = a.config.build()?;
    let dataset = a.data.load()?;
    let ws = Workspace::from_dataset(&dataset, config.knot_cap)?;
    let fit = fit_pipeline(&ws, &config)?;
    let report = &fit.refit;
    write_json(&a.out_dir.join("report.json"), report)?;
    write_json(&a.out_dir.join("penalized_report.json"), &fit.penalized)?;

    let rows = (0..report.subject_ids.len()).map(|i| {
        vec![
            report.subject_ids[i].clone(),
            report.classifications[i].to_string(),
            report.state.weights[i][0].to_string(),
            report.state.priors[i].to_string(),
        ]
    });
    write_csv(&a.out_dir.join("classifications.csv"), &CLASSIFICATION_HEADER, rows)?;

    let grid = unit_grid(EVAL_GRID_POINTS);
    let curves = report.curves_at(&grid);
    let rows = grid.iter().enumerate().map(|(g, t)| vec![report.unscale(*t).to_string(), t.to_string(), curves[0][g].to_string(), curves[1][g].to_string()]);
    write_csv(&a.out_dir.join("curves.csv"), &["time", "time_scaled", "f1", "f2"], rows)?;

    let mut rows = trace_rows("penalized", &fit.penalized.state.trace);
    rows.extend(trace_rows("refit", &report.state.trace));
    write_csv(&a.out_dir.join("trace.csv"), &["stage", "outer", "inner", "distance", "loglik_before", "loglik_after"], rows)
}

fn cmd_bootstrap(a: BootstrapArgs, threads: Option<usize>) -> nmem::Result<()> {
    let mut inputs = vec![a.report.as_path()];
    inputs.extend(a.data.inputs());
    inputs.extend(a.config.inputs());
    check_paths(&inputs, Some(&a.out_dir), &[])?;
    let config = a.config.build()?;
    let mut report = FitReport::from_json_file(&a.report)?;
    let dataset = a.data.load()?;
    let ws = Workspace::for_report(&report, &dataset)?;
    if ws.ids != report.subject_ids {
        return Err(Error::InvalidParameter("subjects of the dataset differ from the report".into()));
    }
    let result = bootstrap_fit(&report, &ws, &config, a.replicates, a.bootstrap_seed, threads)?;

    let rows = result.parameters.iter().map(|p| vec![p.name.clone(), p.estimate.to_string(), p.lower.to_string(), p.upper.to_string()]);
    write_csv(&a.out_dir.join("intervals.csv"), &["parameter", "estimate", "lower", "upper"], rows)?;
    let [b1, b2] = &result.bands;
    let rows = (0..result.grid_scaled.len()).map(|g| {
        vec![
            result.grid_raw[g].to_string(),
            result.grid_scaled[g].to_string(),
            b1.estimate[g].to_string(),
            b1.lower[g].to_string(),
            b1.upper[g].to_string(),
            b2.estimate[g].to_string(),
            b2.lower[g].to_string(),
            b2.upper[g].to_string(),
        ]
    });
    write_csv(
        &a.out_dir.join("bands.csv"),
        &["time", "time_scaled", "f1", "f1_lower", "f1_upper", "f2", "f2_lower", "f2_upper"],
        rows,
    )?;
    write_json(&a.out_dir.join("bootstrap.json"), &result)?;
    report.bootstrap = Some(result);
    write_json(&a.out_dir.join("report.json"), &report)
}

fn cmd_classify(a: ClassifyArgs) -> nmem::Result<()> {
    let mut inputs = vec![a.report.as_path()];
    inputs.extend(a.data.inputs());
    check_paths(&inputs, None, &[&a.out])?;
    let report = FitReport::from_json_file(&a.report)?;
    let c = classify(&report, &a.data.load()?)?;
    write_csv(&a.out, &CLASSIFICATION_HEADER, classification_rows(&c))
}

fn cmd_score(a: ScoreArgs) -> nmem::Result<()> {
    check_paths(&[&a.report, &a.truth], None, &[&a.out])?;
    let report = FitReport::from_json_file(&a.report)?;
    let truth = Truth::from_json_file(&a.truth)?;
    let s = score(&report, report.membership_covariates(), &truth)?;
    let body = serde_json::json!({
        "schema_version": 1,
        "accuracy": s.accuracy,
        "swapped": s.swapped,
        "curve_mse": s.curve_mse,
        "false_included": s.false_included,
        "false_excluded": s.false_excluded,
        "n_false_included": s.false_included.len(),
        "n_false_excluded": s.false_excluded.len(),
    });
    write_json(&a.out, &body)
}
