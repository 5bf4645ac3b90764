//! Command-line front end: fit models, emit bands and plots, run coverage
//! experiments from config files.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numerical
//! failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use credspline::credible::{band_csv, sup_band, Grid, Mode};
use credspline::plot::{render_band_svg, BandPlot};
use credspline::posterior::{fit, FitExport, NoiseModel, PosteriorState, PriorSpec};
use credspline::simulate::{
    coverage_curve_csv, loocv_select_j, report_table_csv, run_coverage_experiment,
    ExperimentConfig, SpecTemplate,
};
use credspline::stats::fnv1a;
use credspline::stream::{derive_rng, tag};
use credspline::{read_data_csv, BandedSymMatrix, BasisSpec, BoundaryScheme, Error as CoreError};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "credspline", version, about = "Bayesian tensor-product B-spline regression with credible bands")]
struct Cli {
    /// Worker threads (default: machine parallelism, or CREDSPLINE_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fit the conjugate posterior to CSV data and export it as JSON.
    Fit {
        /// CSV with covariate columns in [0,1] plus a response column.
        data: PathBuf,
        /// Fit configuration JSON (defaults apply when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Response column name (default: last column).
        #[arg(long)]
        response: Option<String>,
        /// Interior knots per axis, bypassing cross validation.
        #[arg(long)]
        knots: Option<usize>,
        /// Output path for the fit export.
        #[arg(long, default_value = "fit.json")]
        out: PathBuf,
    },
    /// Build a sup-norm credible band from a fit export.
    Band {
        /// Fit export produced by `credspline fit`.
        fit: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        gamma: f64,
        #[arg(long, default_value_t = 1.0)]
        rho: f64,
        /// Per-axis derivative orders, comma separated (e.g. "1" or "1,0").
        #[arg(long, default_value = "0")]
        deriv: String,
        /// Uniform grid points per axis; 0 means eight points per knot span.
        #[arg(long, default_value_t = 0)]
        grid: usize,
        #[arg(long, default_value_t = 2000)]
        mc: usize,
        #[arg(long, value_enum, default_value_t = CliMode::Eb)]
        mode: CliMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Run a Monte Carlo coverage experiment from a config file.
    Simulate {
        /// Experiment configuration JSON.
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Log progress per replicate block to stderr.
        #[arg(long)]
        progress: bool,
    },
    /// Score interior-knot candidates by leave-one-out cross validation.
    Crossval {
        data: PathBuf,
        /// Candidates: comma list ("4,8,12") or inclusive range ("2..30").
        #[arg(long, default_value = "2..30")]
        candidates: String,
        #[arg(long, default_value_t = 4)]
        order: usize,
        #[arg(long)]
        response: Option<String>,
        /// Optional CSV output path for the score table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum CliMode {
    Eb,
    Hierarchical,
}

impl From<CliMode> for Mode {
    fn from(m: CliMode) -> Mode {
        match m {
            CliMode::Eb => Mode::EmpiricalBayes,
            CliMode::Hierarchical => Mode::Hierarchical,
        }
    }
}

/// Fit settings accepted from `--config`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FitConfig {
    spline_order: usize,
    boundary_scheme: BoundaryScheme,
    /// Fixed interior knots per axis; when absent LOOCV selects them.
    interior_knots: Option<usize>,
    loocv_candidates: Option<Vec<usize>>,
    noise: NoiseModel,
    /// Prior coefficient mean; zeros when absent.
    eta: Option<Vec<f64>>,
    /// `Omega^{-1} = scale * I`.
    omega_inv_scale: f64,
    response: Option<String>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            spline_order: 4,
            boundary_scheme: BoundaryScheme::Clamped,
            interior_knots: None,
            loocv_candidates: None,
            noise: NoiseModel::EmpiricalBayes,
            eta: None,
            omega_inv_scale: 1.0,
            response: None,
        }
    }
}

/// Everything written to fit.json.
#[derive(Serialize, Deserialize)]
struct FitDocument {
    version: String,
    seed: u64,
    config_digest: String,
    chosen_interior_knots: usize,
    export: FitExport,
}

fn exit_code(err: &CoreError) -> i32 {
    match err {
        CoreError::Factorization { .. } => 3,
        _ => 2,
    }
}

fn write_atomic(path: &Path, contents: &str) -> Result<(), CoreError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn digest_of(s: &str) -> String {
    format!("{:016x}", fnv1a(s.as_bytes()))
}

fn parse_candidates(s: &str) -> Result<Vec<usize>, CoreError> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let lo: usize = a.trim().parse().map_err(|_| {
            CoreError::Parameter(format!("bad candidate range start '{a}'"))
        })?;
        let hi: usize = b.trim().parse().map_err(|_| {
            CoreError::Parameter(format!("bad candidate range end '{b}'"))
        })?;
        if lo > hi {
            return Err(CoreError::Parameter(format!("empty candidate range '{s}'")));
        }
        return Ok((lo..=hi).collect());
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| CoreError::Parameter(format!("bad candidate '{t}'")))
        })
        .collect()
}

fn parse_deriv(s: &str) -> Result<Vec<usize>, CoreError> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| CoreError::Parameter(format!("bad derivative order '{t}'")))
        })
        .collect()
}

fn default_candidates(n: usize, q: usize) -> Result<Vec<usize>, CoreError> {
    let hi = (n / 4).saturating_sub(q).min(30);
    if hi < 2 {
        return Err(CoreError::Parameter(format!(
            "n={n} too small for the default candidate rule; pass interior_knots"
        )));
    }
    Ok((2..=hi).collect())
}

fn build_prior(spec: &BasisSpec, cfg: &FitConfig) -> Result<PriorSpec, CoreError> {
    let j = spec.total_basis();
    let eta = match &cfg.eta {
        Some(e) => e.clone(),
        None => vec![0.0; j],
    };
    let omega_inv = BandedSymMatrix::scaled_identity(&spec.basis_counts(), cfg.omega_inv_scale);
    PriorSpec::new(eta, omega_inv, cfg.noise.clone())
}

fn cmd_fit(
    data: &Path,
    config: Option<&Path>,
    response: Option<String>,
    knots: Option<usize>,
    out: &Path,
) -> Result<(), CoreError> {
    let start = Instant::now();
    let mut cfg: FitConfig = match config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => FitConfig::default(),
    };
    if response.is_some() {
        cfg.response = response;
    }
    if knots.is_some() {
        cfg.interior_knots = knots;
    }
    let config_digest = digest_of(&serde_json::to_string(&cfg)?);

    let ds = read_data_csv(data, cfg.response.as_deref())?;
    let n = ds.x.len();
    if n == 0 {
        return Err(CoreError::Parameter("data file has no rows".into()));
    }
    let d = ds.x[0].len();
    let template = SpecTemplate {
        dim: d,
        order: cfg.spline_order,
        scheme: cfg.boundary_scheme,
    };

    let chosen = match cfg.interior_knots {
        Some(k) => k,
        None => {
            let candidates = match &cfg.loocv_candidates {
                Some(c) => c.clone(),
                None => default_candidates(n, cfg.spline_order)?,
            };
            let sel = loocv_select_j(
                &candidates,
                &template,
                |s| build_prior(s, &cfg),
                &ds.x,
                &ds.y,
            )?;
            sel.chosen_n_interior
        }
    };
    let spec = template.build(chosen)?;
    let prior = build_prior(&spec, &cfg)?;
    let state = fit(&spec, &prior, &ds.x, &ds.y)?;

    let doc = FitDocument {
        version: VERSION.into(),
        seed: 0,
        config_digest: config_digest.clone(),
        chosen_interior_knots: chosen,
        export: state.to_export(),
    };
    write_atomic(out, &serde_json::to_string_pretty(&doc)?)?;
    println!(
        "fit: n={} d={} interior_knots={} J={} sigma_hat_sq={:.6} -> {} ({:.2}s)",
        n,
        d,
        chosen,
        spec.total_basis(),
        state.sigma_hat_sq(),
        out.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_band(
    fit_path: &Path,
    gamma: f64,
    rho: f64,
    deriv: &str,
    grid_points: usize,
    mc: usize,
    mode: Mode,
    seed: u64,
    out_dir: &Path,
) -> Result<(), CoreError> {
    let start = Instant::now();
    let doc: FitDocument = serde_json::from_str(&std::fs::read_to_string(fit_path)?)?;
    let state = PosteriorState::from_export(doc.export)?;
    let r = parse_deriv(deriv)?;
    let d = state.spec().dim();
    let grid = if grid_points == 0 {
        Grid::for_spec(state.spec(), 8)?
    } else {
        Grid::uniform(d, grid_points)?
    };
    let mut rng = derive_rng(seed, &[tag("band")]);
    let set = sup_band(&state, &r, gamma, rho, mode, &grid, mc, &mut rng)?;

    let params = format!(
        "gamma={gamma} rho={rho} deriv={deriv} grid={} mc={mc} mode={:?}",
        grid.len(),
        mode
    );
    let header = format!(
        "version={VERSION} seed={seed} config={} band={}\n{params}",
        doc.config_digest,
        digest_of(&params)
    );
    let csv = band_csv(&set, &header)?;
    let csv_path = out_dir.join("band.csv");
    write_atomic(&csv_path, &csv)?;

    let mut svg_note = String::new();
    if d == 1 {
        let xs: Vec<f64> = grid.points().iter().map(|p| p[0]).collect();
        let lower: Vec<f64> = set.center.iter().map(|c| c - set.radius).collect();
        let upper: Vec<f64> = set.center.iter().map(|c| c + set.radius).collect();
        let svg = render_band_svg(
            &BandPlot {
                x: &xs,
                center: &set.center,
                lower: &lower,
                upper: &upper,
                truth: None,
                title: &format!("{:.0}% credible band (rho={rho})", 100.0 * set.level),
            },
            &header,
        )?;
        let svg_path = out_dir.join("band.svg");
        write_atomic(&svg_path, &svg)?;
        svg_note = format!(" and {}", svg_path.display());
    } else {
        eprintln!("note: SVG plotting covers one-dimensional fits only; wrote CSV");
    }
    println!(
        "band: level={:.4} radius={:.6} se={:.2e} -> {}{} ({:.2}s)",
        set.level,
        set.radius,
        set.quantile_se.unwrap_or(0.0),
        csv_path.display(),
        svg_note,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_simulate(config: &Path, out_dir: &Path, progress: bool) -> Result<(), CoreError> {
    let mut cfg: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(config)?)?;
    cfg.progress = progress;
    let digest = cfg.digest();
    let report = run_coverage_experiment(&cfg)?;
    let header = format!("version={VERSION} seed={} config={digest}", cfg.seed);

    let report_path = out_dir.join("report.json");
    write_atomic(&report_path, &serde_json::to_string_pretty(&report)?)?;
    write_atomic(&out_dir.join("table.csv"), &report_table_csv(&report, &header))?;
    write_atomic(
        &out_dir.join("coverage_curve.csv"),
        &coverage_curve_csv(&report, &header),
    )?;

    for nr in &report.per_n {
        println!(
            "n={}: band coverage {:.3} (se {:.3}), radius {:.3} +/- {:.3}, sigma_hat_sq {:.4}",
            nr.n,
            nr.band_coverage,
            nr.band_coverage_se,
            nr.band_radius_mean,
            nr.band_radius_sd,
            nr.mean_sigma_hat_sq
        );
    }
    println!(
        "simulate: wrote {}, table.csv, coverage_curve.csv ({:.1}s)",
        report_path.display(),
        report.wall_clock_secs
    );
    Ok(())
}

fn cmd_crossval(
    data: &Path,
    candidates: &str,
    order: usize,
    response: Option<String>,
    out: Option<&Path>,
) -> Result<(), CoreError> {
    let ds = read_data_csv(data, response.as_deref())?;
    let d = ds.x.first().map(|r| r.len()).unwrap_or(1);
    let template = SpecTemplate {
        dim: d,
        order,
        scheme: BoundaryScheme::Clamped,
    };
    let cands = parse_candidates(candidates)?;
    let cfg = FitConfig {
        spline_order: order,
        ..FitConfig::default()
    };
    let sel = loocv_select_j(&cands, &template, |s| build_prior(s, &cfg), &ds.x, &ds.y)?;
    let mut table = String::from("n_interior,basis_size,score,skipped\n");
    for s in &sel.scores {
        table.push_str(&format!(
            "{},{},{:.6e},{}\n",
            s.n_interior, s.basis_size, s.score, s.skipped
        ));
    }
    if let Some(p) = out {
        write_atomic(p, &table)?;
    } else {
        print!("{table}");
    }
    println!("chosen interior knots: {}", sel.chosen_n_interior);
    Ok(())
}

fn run(cli: Cli) -> Result<(), CoreError> {
    let threads = cli.threads.or_else(|| {
        std::env::var("CREDSPLINE_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    });
    if let Some(t) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CoreError::Parameter(format!("thread pool: {e}")))?;
    }
    match cli.cmd {
        Cmd::Fit {
            data,
            config,
            response,
            knots,
            out,
        } => cmd_fit(&data, config.as_deref(), response, knots, &out),
        Cmd::Band {
            fit,
            gamma,
            rho,
            deriv,
            grid,
            mc,
            mode,
            seed,
            out_dir,
        } => cmd_band(&fit, gamma, rho, &deriv, grid, mc, mode.into(), seed, &out_dir),
        Cmd::Simulate {
            config,
            out_dir,
            progress,
        } => cmd_simulate(&config, &out_dir, progress),
        Cmd::Crossval {
            data,
            candidates,
            order,
            response,
            out,
        } => cmd_crossval(&data, &candidates, order, response, out.as_deref()),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
