mod io;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hdgmm::inference::{desparsified_inference, two_step_pipeline, InferenceConfig};
use hdgmm::lasso_gmm::{CvConfig, LambdaGrid};
use hdgmm::numerics::Matrix;
use hdgmm::panel::{instrument_count, panel_to_gmm, PanelData};
use hdgmm::simulate::{run_design, DesignSpec, SimulationReport};
use hdgmm::{Dataset, GmmError};

use io::{
    csv_string, fmt_f64, markdown_table, matrix_csv, read_matrix, read_table, read_vector,
    write_output,
};

#[derive(Debug)]
pub enum CliError {
    /// Malformed or inconsistent input; exit code 2.
    Input(String),
    /// Failure inside the numerical pipeline; exit code 3.
    Numerical { stage: String, source: GmmError },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical { .. } => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Numerical { stage, source } => {
                write!(f, "numerical error in {stage}: {source}")
            }
        }
    }
}

fn numerical(stage: impl Into<String>) -> impl FnOnce(GmmError) -> CliError {
    let stage = stage.into();
    move |source| CliError::Numerical { stage, source }
}

#[derive(Parser)]
#[command(
    name = "hdgmm",
    version,
    about = "Desparsified lasso-GMM estimation and inference"
)]
struct Cli {
    /// Worker threads; defaults to the number of available cores.
    #[arg(long, global = true, env = "HDGMM_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-step lasso-GMM point estimates.
    Fit(DataArgs),
    /// Debiased estimates, standard errors, t-statistics and intervals.
    Infer(InferArgs),
    /// Monte Carlo run of a simulation design.
    Simulate(SimulateArgs),
    /// Difference a long-format dynamic panel into Y, X and Z files.
    Panel(PanelArgs),
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum Format {
    Csv,
    Json,
    Markdown,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    z: PathBuf,
    #[arg(long)]
    y: PathBuf,
    #[arg(long, default_value_t = 5)]
    cv_folds: usize,
    #[arg(long, default_value_t = 50)]
    grid_size: usize,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Single-column CSV of hypothesised coefficients; zeros when omitted.
    #[arg(long)]
    null: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON design specification; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    design: Option<u8>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cv_folds: Option<usize>,
    #[arg(long)]
    grid_size: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PanelArgs {
    /// Long-format CSV with columns unit, period, y, x_1..x_K.
    #[arg(long)]
    input: PathBuf,
    /// Directory receiving Y.csv, X.csv and Z.csv.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("input error: --threads must be positive");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .expect("thread pool is configured once");
    }
    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Panel(a) => cmd_panel(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn cv_config(folds: usize, grid_size: usize) -> Result<CvConfig, CliError> {
    if folds < 2 {
        return Err(CliError::Input(format!(
            "--cv-folds must be at least 2, got {folds}"
        )));
    }
    if grid_size == 0 {
        return Err(CliError::Input("--grid-size must be positive".into()));
    }
    Ok(CvConfig {
        folds,
        grid: LambdaGrid::Auto { count: grid_size },
    })
}

/// Loads X, Z and Y, checks their shapes and drops identically-zero
/// instrument columns, which carry no moment information.
fn load_data(a: &DataArgs) -> Result<Dataset, CliError> {
    for p in [&a.x, &a.z, &a.y] {
        if !p.is_file() {
            return Err(CliError::Input(format!("{}: file not found", p.display())));
        }
    }
    let x = read_matrix(&a.x)?;
    let z = read_matrix(&a.z)?;
    let y = read_vector(&a.y)?;
    if x.rows() != z.rows() || x.rows() != y.len() {
        return Err(CliError::Input(format!(
            "row counts differ: X has {} rows, Z has {} rows, Y has {} rows",
            x.rows(),
            z.rows(),
            y.len()
        )));
    }
    let keep: Vec<usize> = (0..z.cols())
        .filter(|&l| z.col(l).iter().any(|&v| v != 0.0))
        .collect();
    let z = if keep.len() < z.cols() {
        eprintln!(
            "note: dropping {} identically-zero instrument column(s)",
            z.cols() - keep.len()
        );
        z.select_cols(&keep)
    } else {
        z
    };
    if z.cols() == 0 {
        return Err(CliError::Input(
            "Z has no non-zero instrument column".into(),
        ));
    }
    if a.cv_folds > x.rows() {
        return Err(CliError::Input(format!(
            "--cv-folds {} exceeds the {} observations",
            a.cv_folds,
            x.rows()
        )));
    }
    Dataset::new(x, z, y).map_err(|e| CliError::Input(e.to_string()))
}

fn render(format: Format, header: &[&str], rows: Vec<Vec<String>>, json: impl Serialize) -> String {
    let header: Vec<String> = header.iter().map(|s| s.to_string()).collect();
    match format {
        Format::Csv => csv_string(&header, &rows),
        Format::Markdown => markdown_table(&header, &rows),
        Format::Json => serde_json::to_string_pretty(&json).expect("serializable") + "\n",
    }
}

#[derive(Serialize)]
struct FitOutput {
    lambda_first: f64,
    lambda_second: f64,
    beta_hat: Vec<f64>,
}

fn cmd_fit(a: &DataArgs) -> Result<(), CliError> {
    let cv = cv_config(a.cv_folds, a.grid_size)?;
    let data = load_data(a)?;
    let fit = two_step_pipeline(&data, &cv).map_err(numerical("two-step lasso-gmm"))?;
    eprintln!(
        "selected lambda: first step {}, second step {}",
        fmt_f64(fit.first_cv.lambda),
        fmt_f64(fit.second_cv.lambda)
    );
    let beta = &fit.second_fit.beta;
    let rows = beta
        .iter()
        .enumerate()
        .map(|(j, b)| vec![(j + 1).to_string(), fmt_f64(*b)])
        .collect();
    let out = render(
        a.format,
        &["j", "beta_hat"],
        rows,
        FitOutput {
            lambda_first: fit.first_cv.lambda,
            lambda_second: fit.second_cv.lambda,
            beta_hat: beta.clone(),
        },
    );
    write_output(a.out.as_deref(), &out)
}

#[derive(Serialize)]
struct InferRow {
    j: usize,
    beta_hat: f64,
    b_hat: f64,
    se: f64,
    t: f64,
    ci_lower: f64,
    ci_upper: f64,
}

#[derive(Serialize)]
struct InferOutput {
    alpha: f64,
    null: Vec<f64>,
    coefficients: Vec<InferRow>,
}

fn cmd_infer(a: &InferArgs) -> Result<(), CliError> {
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(CliError::Input(format!(
            "--alpha must lie in (0, 1), got {}",
            a.alpha
        )));
    }
    let cv = cv_config(a.data.cv_folds, a.data.grid_size)?;
    if let Some(p) = &a.null {
        if !p.is_file() {
            return Err(CliError::Input(format!("{}: file not found", p.display())));
        }
    }
    let data = load_data(&a.data)?;
    let null = match &a.null {
        Some(p) => {
            let v = read_vector(p)?;
            if v.len() != data.p() {
                return Err(CliError::Input(format!(
                    "{}: null has {} entries but X has {} columns",
                    p.display(),
                    v.len(),
                    data.p()
                )));
            }
            Some(v)
        }
        None => None,
    };
    let config = InferenceConfig {
        cv,
        alpha: a.alpha,
        null,
    };
    let fit = desparsified_inference(&data, &config)
        .map_err(|(stage, e)| numerical(stage.to_string())(e))?;
    let r = &fit.result;
    let coefficients: Vec<InferRow> = (0..data.p())
        .map(|j| InferRow {
            j: j + 1,
            beta_hat: r.beta_hat[j],
            b_hat: r.b_hat[j],
            se: r.se[j],
            t: r.t_stats[j],
            ci_lower: r.ci_lower[j],
            ci_upper: r.ci_upper[j],
        })
        .collect();
    let rows = coefficients
        .iter()
        .map(|c| {
            let mut row = vec![c.j.to_string()];
            row.extend([c.beta_hat, c.b_hat, c.se, c.t, c.ci_lower, c.ci_upper].map(fmt_f64));
            row
        })
        .collect();
    let out = render(
        a.data.format,
        &["j", "beta_hat", "b_hat", "se", "t", "ci_lower", "ci_upper"],
        rows,
        InferOutput {
            alpha: r.alpha,
            null: r.null.clone(),
            coefficients,
        },
    );
    write_output(a.data.out.as_deref(), &out)
}

fn simulate_spec(a: &SimulateArgs) -> Result<DesignSpec, CliError> {
    let seed = a
        .seed
        .ok_or_else(|| CliError::Input("simulate requires --seed".into()))?;
    let mut spec = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| {
                CliError::Input(format!("{}: line {}: {e}", path.display(), e.line()))
            })?;
            if let Some(obj) = value.as_object_mut() {
                obj.entry("base_seed").or_insert(serde_json::json!(seed));
            }
            serde_json::from_value::<DesignSpec>(value)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
        }
        None => {
            let missing = |f: &str| CliError::Input(format!("simulate requires --{f} or --config"));
            DesignSpec::new(
                a.design.ok_or_else(|| missing("design"))?,
                a.n.ok_or_else(|| missing("n"))?,
                a.p.ok_or_else(|| missing("p"))?,
                a.q.ok_or_else(|| missing("q"))?,
                100,
                seed,
            )
        }
    };
    spec.base_seed = seed;
    if let Some(v) = a.design {
        spec.design_id = v;
    }
    if let Some(v) = a.n {
        spec.n = v;
    }
    if let Some(v) = a.p {
        spec.p = v;
    }
    if let Some(v) = a.q {
        spec.q = v;
    }
    if let Some(v) = a.reps {
        spec.reps = v;
    }
    if let Some(v) = a.cv_folds {
        spec.cv_folds = v;
    }
    if let Some(v) = a.grid_size {
        spec.grid_size = v;
    }
    if let Some(v) = a.alpha {
        spec.alpha = v;
    }
    spec.validate()
        .map_err(|e| CliError::Input(e.to_string()))?;
    Ok(spec)
}

#[derive(Serialize)]
struct SimulateOutput<'a> {
    summary: &'a hdgmm::simulate::SummaryTable,
    metadata: Vec<(&'static str, String)>,
}

fn simulation_metadata(r: &SimulationReport) -> Vec<(&'static str, String)> {
    let s = &r.spec;
    vec![
        ("design", s.design_id.to_string()),
        ("n", s.n.to_string()),
        ("p", s.p.to_string()),
        ("q", s.q.to_string()),
        ("reps", s.reps.to_string()),
        ("seed", s.base_seed.to_string()),
        ("grid_size", s.grid_size.to_string()),
        ("cv_folds", s.cv_folds.to_string()),
        ("alpha", fmt_f64(s.alpha)),
        ("canonical_beta0", r.canonical_beta0.to_string()),
        ("lasso_fits", r.lasso_fits.to_string()),
        ("max_kkt_gap", fmt_f64(r.max_kkt_gap)),
        ("clime_rows", r.clime_rows.to_string()),
        ("max_clime_excess", fmt_f64(r.max_clime_excess)),
    ]
}

fn cmd_simulate(a: &SimulateArgs) -> Result<(), CliError> {
    let spec = simulate_spec(a)?;
    eprintln!(
        "design {} (n = {}, p = {}, q = {}), {} replications",
        spec.design_id, spec.n, spec.p, spec.q, spec.reps
    );
    let start = Instant::now();
    let report = run_design(&spec).map_err(|f| CliError::Numerical {
        stage: format!("replication {} (seed {}), {}", f.rep_index, f.seed, f.stage),
        source: f.source,
    })?;
    eprintln!("runtime: {:.3}s", start.elapsed().as_secs_f64());
    let s = &report.summary;
    let measures = [
        ("Size", s.size),
        ("Power", s.power),
        ("Coverage", s.coverage),
        ("Length", s.length),
        ("MSE", s.mse),
    ];
    let metadata = simulation_metadata(&report);
    let out = match a.format {
        Format::Csv => {
            let rows: Vec<Vec<String>> = measures
                .iter()
                .map(|(k, v)| vec![k.to_lowercase(), fmt_f64(*v)])
                .chain(metadata.iter().map(|(k, v)| vec![k.to_string(), v.clone()]))
                .collect();
            csv_string(&["key".into(), "value".into()], &rows)
        }
        Format::Markdown => {
            let rows: Vec<Vec<String>> = measures
                .iter()
                .map(|(k, v)| vec![k.to_string(), format!("{v:.4}")])
                .collect();
            let mut md = markdown_table(&["Measure".into(), "DGMM".into()], &rows);
            md.push('\n');
            for (k, v) in &metadata {
                md.push_str(&format!("- {k}: {v}\n"));
            }
            md
        }
        Format::Json => {
            serde_json::to_string_pretty(&SimulateOutput {
                summary: s,
                metadata,
            })
            .expect("serializable")
                + "\n"
        }
    };
    write_output(a.out.as_deref(), &out)
}

fn read_panel(path: &Path) -> Result<PanelData, CliError> {
    let t = read_table(path)?;
    if t.header.len() < 3 {
        return Err(CliError::Input(format!(
            "{}: line 1: expected columns unit, period, y, x_1..x_K",
            path.display()
        )));
    }
    let mut records = Vec::with_capacity(t.rows.len());
    for (r, row) in t.rows.iter().enumerate() {
        let line = r + 2;
        let bad = |what: &str, cell: &str| {
            CliError::Input(format!(
                "{}: line {line}: invalid {what} '{cell}'",
                path.display()
            ))
        };
        let period: i64 = row[1].parse().map_err(|_| bad("period", &row[1]))?;
        let num = |cell: &str, what: &str| {
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(what, cell))
        };
        let y = num(&row[2], "y")?;
        let x = row[3..]
            .iter()
            .map(|c| num(c, "regressor"))
            .collect::<Result<Vec<_>, _>>()?;
        records.push((row[0].clone(), period, y, x));
    }
    PanelData::from_long(&records).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn cmd_panel(a: &PanelArgs) -> Result<(), CliError> {
    let panel = read_panel(&a.input)?;
    let stacked = panel_to_gmm(&panel).map_err(|e| CliError::Input(e.to_string()))?;
    let (t, k) = (panel.periods(), panel.regressors());
    std::fs::create_dir_all(&a.out)
        .map_err(|e| CliError::Input(format!("{}: {e}", a.out.display())))?;
    let x_names: Vec<String> = std::iter::once("dy_lag".to_string())
        .chain((1..=k).map(|c| format!("dx_{c}")))
        .collect();
    let z_names: Vec<String> = (1..=stacked.q()).map(|l| format!("z_{l}")).collect();
    let y_mat = Matrix::column(&stacked.y);
    write_output(
        Some(&a.out.join("Y.csv")),
        &matrix_csv(&["dy".into()], &y_mat),
    )?;
    write_output(
        Some(&a.out.join("X.csv")),
        &matrix_csv(&x_names, &stacked.x),
    )?;
    write_output(
        Some(&a.out.join("Z.csv")),
        &matrix_csv(&z_names, &stacked.z),
    )?;
    let lagged = (t - 2) * (t - 1) / 2;
    let exogenous = t * (t - 1) * k;
    println!(
        "units {} periods {} regressors {} rows {}",
        panel.units(),
        t,
        k,
        stacked.y.len()
    );
    println!(
        "q = {} = (T-2)(T-1)/2 + T(T-1)K = {lagged} + {exogenous}",
        stacked.q()
    );
    debug_assert_eq!(stacked.q(), instrument_count(t, k));
    Ok(())
}
