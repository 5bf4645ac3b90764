//! The coverage experiment harness: true test function, fixed designs, data
//! generation, leave-one-out selection of the basis size, and Monte Carlo
//! coverage estimation for pointwise intervals and sup-norm bands.
//!
//! Replicates run on independent RNG streams derived from the master seed,
//! so parallel and serial execution produce bit-identical reports.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, BoundaryScheme};
use crate::credible::{contains, sup_band, Grid, Mode};
use crate::error::{Error, Result};
use crate::posterior::{fit, NoiseModel, PriorSpec};
use crate::stats::{fnv1a, normal_upper_quantile, KahanSum};
use crate::stream::{derive_rng, tag};

/// The regression function under study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TrueFunction {
    /// The oscillating cosine series with smoothness one, truncated at `k`
    /// terms.
    PaperSeries { k: usize },
    /// Tabulated values on a sorted one-dimensional grid, linearly
    /// interpolated.
    Table { grid: Vec<f64>, values: Vec<f64> },
}

impl TrueFunction {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            TrueFunction::PaperSeries { k } => f0_eval(x, *k),
            TrueFunction::Table { grid, values } => interp_table(grid, values, x),
        }
    }

    /// Evaluate on many points, hoisting the series coefficients.
    pub fn eval_many(&self, xs: &[f64]) -> Vec<f64> {
        match self {
            TrueFunction::PaperSeries { k } => {
                let coeff = series_coefficients(*k);
                xs.iter().map(|&x| series_sum(&coeff, x)).collect()
            }
            TrueFunction::Table { grid, values } => {
                xs.iter().map(|&x| interp_table(grid, values, x)).collect()
            }
        }
    }
}

fn interp_table(grid: &[f64], values: &[f64], x: f64) -> f64 {
    let m = grid.len();
    if x <= grid[0] {
        return values[0];
    }
    if x >= grid[m - 1] {
        return values[m - 1];
    }
    let hi = grid.partition_point(|&g| g <= x);
    let (x0, x1) = (grid[hi - 1], grid[hi]);
    let t = (x - x0) / (x1 - x0);
    values[hi - 1] * (1.0 - t) + values[hi] * t
}

fn series_coefficients(k: usize) -> Vec<f64> {
    let root2 = std::f64::consts::SQRT_2;
    (1..=k)
        .map(|i| {
            let fi = i as f64;
            root2 * fi.sin() / (fi * fi.sqrt())
        })
        .collect()
}

fn series_sum(coeff: &[f64], x: f64) -> f64 {
    let mut acc = KahanSum::new();
    for (i, c) in coeff.iter().enumerate() {
        let phase = ((i + 1) as f64 - 0.5) * std::f64::consts::PI * x;
        acc.add(c * phase.cos());
    }
    acc.value()
}

/// Partial sum `sqrt(2) sum_{i=1}^k i^{-3/2} sin(i) cos((i - 1/2) pi x)`,
/// with compensated summation.
pub fn f0_eval(x: f64, k: usize) -> f64 {
    series_sum(&series_coefficients(k), x)
}

/// Deterministic design: equispaced `(i-1)/(n-1)` for `d = 1`, the discrete
/// uniform `m^d` grid for higher dimensions (requires `n = m^d`).
pub fn make_design(n: usize, d: usize) -> Result<Vec<Vec<f64>>> {
    if d == 0 {
        return Err(Error::Parameter("dimension must be positive".into()));
    }
    if d == 1 {
        if n < 2 {
            return Err(Error::Parameter("need n >= 2 design points".into()));
        }
        return Ok((0..n).map(|i| vec![i as f64 / (n - 1) as f64]).collect());
    }
    let m = (n as f64).powf(1.0 / d as f64).round() as usize;
    if m < 2 || m.pow(d as u32) != n {
        return Err(Error::Parameter(format!(
            "grid design needs n to be a d-th power with at least 2 points per axis, got n={n}, d={d}"
        )));
    }
    let axis: Vec<f64> = (0..m).map(|j| j as f64 / (m - 1) as f64).collect();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; d];
    'outer: loop {
        out.push(idx.iter().map(|&i| axis[i]).collect());
        for k in (0..d).rev() {
            idx[k] += 1;
            if idx[k] < m {
                continue 'outer;
            }
            idx[k] = 0;
            if k == 0 {
                break 'outer;
            }
        }
    }
    Ok(out)
}

/// Error distribution for simulated data; every kind has variance
/// `sigma0_sq`. The non-Gaussian kinds exercise the sub-Gaussian error
/// assumption.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorKind {
    Gaussian,
    ScaledRademacher,
    Uniform,
}

fn draw_noise<R: rand::Rng + ?Sized>(kind: ErrorKind, sigma0: f64, rng: &mut R) -> f64 {
    match kind {
        ErrorKind::Gaussian => {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            sigma0 * z
        }
        ErrorKind::ScaledRademacher => {
            if rng.gen::<bool>() {
                sigma0
            } else {
                -sigma0
            }
        }
        ErrorKind::Uniform => {
            let u: f64 = rng.gen();
            (2.0 * u - 1.0) * 3f64.sqrt() * sigma0
        }
    }
}

/// `Y_i = f0(X_i) + eps_i` on a one-dimensional design.
pub fn gen_data<R: rand::Rng + ?Sized>(
    f0: &TrueFunction,
    x: &[Vec<f64>],
    sigma0_sq: f64,
    kind: ErrorKind,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(sigma0_sq >= 0.0) {
        return Err(Error::Parameter(format!(
            "sigma0_sq must be nonnegative, got {sigma0_sq}"
        )));
    }
    if x.iter().any(|p| p.len() != 1) {
        return Err(Error::Parameter(
            "data generation expects one-dimensional designs".into(),
        ));
    }
    let xs: Vec<f64> = x.iter().map(|p| p[0]).collect();
    let f = f0.eval_many(&xs);
    let sigma0 = sigma0_sq.sqrt();
    Ok(f.iter().map(|fi| fi + draw_noise(kind, sigma0, rng)).collect())
}

/// Per-axis order and boundary scheme from which LOOCV candidates are built.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpecTemplate {
    pub dim: usize,
    pub order: usize,
    pub scheme: BoundaryScheme,
}

impl SpecTemplate {
    pub fn build(&self, n_interior: usize) -> Result<BasisSpec> {
        BasisSpec::uniform(self.dim, self.order, n_interior, self.scheme)
    }
}

/// One LOOCV candidate outcome.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoocvScore {
    pub n_interior: usize,
    pub basis_size: usize,
    pub score: f64,
    pub skipped: bool,
}

/// LOOCV selection result: the chosen interior-knot count and the score
/// table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LoocvSelection {
    pub chosen_n_interior: usize,
    pub scores: Vec<LoocvScore>,
}

/// Leave-one-out cross validation over interior-knot candidates using the
/// hat-matrix shortcut `sum_i ((Y_i - Yhat_i)/(1 - H_ii))^2` with
/// `H = B (B^T B + Omega^{-1})^{-1} B^T`. Ties break toward the smallest
/// candidate; candidates whose leverage reaches one are skipped.
pub fn loocv_select_j<F>(
    candidates: &[usize],
    template: &SpecTemplate,
    prior_builder: F,
    x: &[Vec<f64>],
    y: &[f64],
) -> Result<LoocvSelection>
where
    F: Fn(&BasisSpec) -> Result<PriorSpec>,
{
    if candidates.is_empty() {
        return Err(Error::Parameter("need at least one candidate".into()));
    }
    let n = x.len();
    let mut scores = Vec::with_capacity(candidates.len());
    let mut best: Option<(usize, f64)> = None;
    let mut buf = Vec::new();
    for &cand in candidates {
        let spec = template.build(cand)?;
        let j = spec.total_basis();
        if j > n {
            return Err(Error::OverParameterized { j, n });
        }
        let prior = prior_builder(&spec)?;
        let state = fit(&spec, &prior, x, y)?;
        let design = crate::design::build_design(&spec, x)?;
        let yhat = design.mul_coeff(state.theta_hat())?;
        let dims = spec.basis_counts();
        let mut acc = KahanSum::new();
        let mut skipped = false;
        for i in 0..n {
            let h_ii = state
                .chol()
                .norm_sq_solve_lower_scatter(design.row(i).iter_flat(&dims), &mut buf);
            if h_ii >= 1.0 - 1e-12 {
                skipped = true;
                break;
            }
            let e = (y[i] - yhat[i]) / (1.0 - h_ii);
            acc.add(e * e);
        }
        let score = if skipped { f64::INFINITY } else { acc.value() };
        scores.push(LoocvScore {
            n_interior: cand,
            basis_size: j,
            score,
            skipped,
        });
        if !skipped {
            let better = match best {
                None => true,
                Some((_, s)) => score < s,
            };
            if better {
                best = Some((cand, score));
            }
        }
    }
    let (chosen, _) = best.ok_or_else(|| {
        Error::Parameter("every LOOCV candidate was skipped (leverage reached one)".into())
    })?;
    Ok(LoocvSelection {
        chosen_n_interior: chosen,
        scores,
    })
}

/// Pointwise interval level: the decaying `5/n` schedule or a fixed gamma.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaSchedule {
    FiveOverN,
    Fixed { gamma: f64 },
}

impl GammaSchedule {
    pub fn gamma(&self, n: usize) -> f64 {
        match self {
            GammaSchedule::FiveOverN => 5.0 / n as f64,
            GammaSchedule::Fixed { gamma } => *gamma,
        }
    }
}

/// Full configuration of a coverage experiment (one-dimensional design).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub ns: Vec<usize>,
    pub sigma0_sq: f64,
    pub true_function: TrueFunction,
    pub error_kind: ErrorKind,
    pub spline_order: usize,
    pub pointwise_gamma: GammaSchedule,
    pub band_gamma: f64,
    pub rho: f64,
    /// Interior-knot candidates for LOOCV; `None` uses
    /// `2..=min(30, n/4 - q)` per sample size.
    pub loocv_candidates: Option<Vec<usize>>,
    /// Bypass LOOCV with a fixed interior-knot count.
    pub fixed_interior_knots: Option<usize>,
    pub replicates: usize,
    pub seed: u64,
    pub grid_points: usize,
    pub mc_samples: usize,
    /// Log a progress line per replicate block to stderr (never serialized;
    /// primary outputs stay byte-identical across reruns).
    #[serde(skip)]
    pub progress: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            ns: vec![100, 300, 500, 700, 1000, 2000],
            sigma0_sq: 0.1,
            true_function: TrueFunction::PaperSeries { k: 50_000 },
            error_kind: ErrorKind::Gaussian,
            spline_order: 4,
            pointwise_gamma: GammaSchedule::FiveOverN,
            band_gamma: 0.05,
            rho: 0.5,
            loocv_candidates: None,
            fixed_interior_knots: None,
            replicates: 1000,
            seed: 20_240_601,
            grid_points: 512,
            mc_samples: 2000,
            progress: false,
        }
    }
}

impl ExperimentConfig {
    /// The reference simulation preset: cubic clamped splines, identity
    /// prior, Gaussian noise with variance 0.1 on the equispaced design,
    /// LOOCV basis selection, 95% band with inflation 0.5, 1000 replicates.
    pub fn table1_preset() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.ns.is_empty() {
            return Err(Error::Parameter("field 'ns' must be nonempty".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Parameter(
                "field 'replicates' must be at least 1".into(),
            ));
        }
        if !(self.sigma0_sq > 0.0) {
            return Err(Error::Parameter("field 'sigma0_sq' must be positive".into()));
        }
        if self.spline_order < 1 {
            return Err(Error::Parameter(
                "field 'spline_order' must be at least 1".into(),
            ));
        }
        if !(0.0 < self.band_gamma && self.band_gamma < 0.5) {
            return Err(Error::Parameter(
                "field 'band_gamma' must lie in (0, 1/2)".into(),
            ));
        }
        if !(self.rho > 0.0) {
            return Err(Error::Parameter("field 'rho' must be positive".into()));
        }
        if self.grid_points < 2 {
            return Err(Error::Parameter(
                "field 'grid_points' must be at least 2".into(),
            ));
        }
        if self.mc_samples == 0 {
            return Err(Error::Parameter("field 'mc_samples' must be positive".into()));
        }
        for &n in &self.ns {
            let max_j = self
                .candidates_for(n)?
                .iter()
                .map(|c| c + self.spline_order)
                .max()
                .unwrap_or(0);
            if max_j > n {
                return Err(Error::Parameter(format!(
                    "largest candidate basis {max_j} exceeds n={n}"
                )));
            }
        }
        Ok(())
    }

    /// LOOCV candidates for sample size `n`.
    pub fn candidates_for(&self, n: usize) -> Result<Vec<usize>> {
        if let Some(fixed) = self.fixed_interior_knots {
            return Ok(vec![fixed]);
        }
        if let Some(ref c) = self.loocv_candidates {
            return Ok(c.clone());
        }
        let q = self.spline_order;
        let hi = (n / 4).saturating_sub(q).min(30);
        if hi < 2 {
            return Err(Error::Parameter(format!(
                "n={n} too small for the default candidate rule"
            )));
        }
        Ok((2..=hi).collect())
    }

    /// FNV-1a digest of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a(json.as_bytes()))
    }
}

/// Per-sample-size aggregate results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NReport {
    pub n: usize,
    pub replicates: usize,
    pub failed_replicates: usize,
    pub band_coverage: f64,
    /// Binomial standard error `sqrt(p (1-p) / replicates)`.
    pub band_coverage_se: f64,
    pub band_radius_mean: f64,
    pub band_radius_sd: f64,
    /// `(basis size J, count)` pairs, ascending.
    pub chosen_j_histogram: Vec<(usize, usize)>,
    pub pointwise_gamma: f64,
    /// Per-grid-point coverage of the pointwise intervals.
    pub pointwise_coverage: Vec<f64>,
    pub mean_sigma_hat_sq: f64,
    pub mean_abs_sigma_err: f64,
    pub mean_sup_error: f64,
}

/// Full experiment report. The wall clock is informational only and is not
/// serialized, keeping report files byte-identical across reruns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub config_digest: String,
    pub grid: Vec<f64>,
    pub per_n: Vec<NReport>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

struct RepOutcome {
    basis_size: usize,
    sigma_hat_sq: f64,
    band_covered: bool,
    band_radius: f64,
    pointwise_covered: Vec<bool>,
    sup_error: f64,
}

fn run_replicate(
    cfg: &ExperimentConfig,
    n: usize,
    rep: usize,
    x: &[Vec<f64>],
    f0_design: &[f64],
    f0_grid: &[f64],
    grid: &Grid,
    candidates: &[usize],
) -> Result<RepOutcome> {
    let mut rng = derive_rng(cfg.seed, &[n as u64, rep as u64, tag("noise")]);
    let sigma0 = cfg.sigma0_sq.sqrt();
    let y: Vec<f64> = f0_design
        .iter()
        .map(|fi| fi + draw_noise(cfg.error_kind, sigma0, &mut rng))
        .collect();

    let template = SpecTemplate {
        dim: 1,
        order: cfg.spline_order,
        scheme: BoundaryScheme::Clamped,
    };
    let chosen = if candidates.len() == 1 {
        candidates[0]
    } else {
        loocv_select_j(
            candidates,
            &template,
            |s| PriorSpec::identity_for(s, NoiseModel::EmpiricalBayes),
            x,
            &y,
        )?
        .chosen_n_interior
    };
    let spec = template.build(chosen)?;
    let prior = PriorSpec::identity_for(&spec, NoiseModel::EmpiricalBayes)?;
    let state = fit(&spec, &prior, x, &y)?;

    // pointwise intervals at the scheduled level, EB closed form
    let gamma_n = cfg.pointwise_gamma.gamma(n);
    let z = normal_upper_quantile(gamma_n / 2.0)?;
    let sigma_hat = state.sigma_hat_sq().sqrt();
    let grid_pts = grid.points();
    let mut buf = Vec::new();
    let mut pointwise_covered = Vec::with_capacity(grid_pts.len());
    let mut center = Vec::with_capacity(grid_pts.len());
    for (gx, f0x) in grid_pts.iter().zip(f0_grid) {
        let mean = state.mean_deriv(&[0], gx)?;
        let var = state.var_deriv_with_buf(&[0], gx, &mut buf)?;
        let radius = z * sigma_hat * var.sqrt();
        pointwise_covered.push((f0x - mean).abs() <= radius);
        center.push(mean);
    }

    // sup-norm band
    let mut band_rng = derive_rng(cfg.seed, &[n as u64, rep as u64, tag("band")]);
    let band = sup_band(
        &state,
        &[0],
        cfg.band_gamma,
        cfg.rho,
        Mode::EmpiricalBayes,
        grid,
        cfg.mc_samples,
        &mut band_rng,
    )?;
    let (band_covered, _) = contains(&band, f0_grid)?;

    let sup_error = center
        .iter()
        .zip(f0_grid)
        .map(|(m, f)| (m - f).abs())
        .fold(0.0f64, f64::max);

    Ok(RepOutcome {
        basis_size: spec.total_basis(),
        sigma_hat_sq: state.sigma_hat_sq(),
        band_covered,
        band_radius: band.radius,
        pointwise_covered,
        sup_error,
    })
}

/// Run the coverage experiment. Fully deterministic given the config;
/// replicates are distributed over the rayon pool and merged in replicate
/// order.
pub fn run_coverage_experiment(cfg: &ExperimentConfig) -> Result<CoverageReport> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let grid = Grid::uniform(1, cfg.grid_points)?;
    let grid_xs: Vec<f64> = grid.points().iter().map(|p| p[0]).collect();
    let f0_grid = cfg.true_function.eval_many(&grid_xs);

    let mut per_n = Vec::with_capacity(cfg.ns.len());
    for &n in &cfg.ns {
        let x = make_design(n, 1)?;
        let xs: Vec<f64> = x.iter().map(|p| p[0]).collect();
        let f0_design = cfg.true_function.eval_many(&xs);
        let candidates = cfg.candidates_for(n)?;

        let block = 100usize;
        let mut outcomes: Vec<Result<RepOutcome>> = Vec::with_capacity(cfg.replicates);
        for block_start in (0..cfg.replicates).step_by(block) {
            let block_end = (block_start + block).min(cfg.replicates);
            let mut chunk: Vec<Result<RepOutcome>> = (block_start..block_end)
                .into_par_iter()
                .map(|rep| {
                    run_replicate(cfg, n, rep, &x, &f0_design, &f0_grid, &grid, &candidates)
                })
                .collect();
            outcomes.append(&mut chunk);
            if cfg.progress {
                eprintln!(
                    "n={n}: replicates {}..{} done ({:.1}s elapsed)",
                    block_start,
                    block_end,
                    start.elapsed().as_secs_f64()
                );
            }
        }

        let mut covered = 0usize;
        let mut failed = 0usize;
        let mut radii = Vec::new();
        let mut hist = std::collections::BTreeMap::<usize, usize>::new();
        let mut pw_counts = vec![0usize; grid_xs.len()];
        let mut sig_sum = KahanSum::new();
        let mut sig_err_sum = KahanSum::new();
        let mut sup_err_sum = KahanSum::new();
        for outcome in outcomes {
            match outcome {
                Err(_) => failed += 1,
                Ok(o) => {
                    if o.band_covered {
                        covered += 1;
                    }
                    radii.push(o.band_radius);
                    *hist.entry(o.basis_size).or_insert(0) += 1;
                    for (c, was) in pw_counts.iter_mut().zip(&o.pointwise_covered) {
                        if *was {
                            *c += 1;
                        }
                    }
                    sig_sum.add(o.sigma_hat_sq);
                    sig_err_sum.add((o.sigma_hat_sq - cfg.sigma0_sq).abs());
                    sup_err_sum.add(o.sup_error);
                }
            }
        }
        let done = cfg.replicates - failed;
        if done == 0 {
            return Err(Error::Parameter(format!("all replicates failed at n={n}")));
        }
        let p = covered as f64 / done as f64;
        let mean_radius = radii.iter().sum::<f64>() / done as f64;
        let var_radius = if done > 1 {
            radii
                .iter()
                .map(|r| (r - mean_radius) * (r - mean_radius))
                .sum::<f64>()
                / (done - 1) as f64
        } else {
            0.0
        };
        per_n.push(NReport {
            n,
            replicates: done,
            failed_replicates: failed,
            band_coverage: p,
            band_coverage_se: (p * (1.0 - p) / done as f64).sqrt(),
            band_radius_mean: mean_radius,
            band_radius_sd: var_radius.sqrt(),
            chosen_j_histogram: hist.into_iter().collect(),
            pointwise_gamma: cfg.pointwise_gamma.gamma(n),
            pointwise_coverage: pw_counts.iter().map(|&c| c as f64 / done as f64).collect(),
            mean_sigma_hat_sq: sig_sum.value() / done as f64,
            mean_abs_sigma_err: sig_err_sum.value() / done as f64,
            mean_sup_error: sup_err_sum.value() / done as f64,
        });
    }
    Ok(CoverageReport {
        config_digest: cfg.digest(),
        grid: grid_xs,
        per_n,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Summary table in the shape of the reference results: one row per metric,
/// one column per sample size. The frequentist comparison rows are left
/// blank for users merging external results.
pub fn report_table_csv(report: &CoverageReport, header_comment: &str) -> String {
    let mut out = String::new();
    for line in header_comment.lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str("metric");
    for nr in &report.per_n {
        out.push_str(&format!(",n={}", nr.n));
    }
    out.push('\n');
    let row = |name: &str, f: &dyn Fn(&NReport) -> String| {
        let mut s = String::from(name);
        for nr in &report.per_n {
            s.push(',');
            s.push_str(&f(nr));
        }
        s.push('\n');
        s
    };
    out.push_str(&row("credible_band_coverage", &|nr| {
        format!("{:.3}", nr.band_coverage)
    }));
    out.push_str(&row("credible_band_coverage_se", &|nr| {
        format!("{:.4}", nr.band_coverage_se)
    }));
    out.push_str(&row("credible_band_radius", &|nr| {
        format!("{:.3}", nr.band_radius_mean)
    }));
    out.push_str(&row("credible_band_radius_sd", &|nr| {
        format!("{:.4}", nr.band_radius_sd)
    }));
    out.push_str(&row("confidence_band_coverage", &|_| String::new()));
    out.push_str(&row("confidence_band_mean_radius", &|_| String::new()));
    out.push_str(&row("confidence_band_max_radius", &|_| String::new()));
    out
}

/// Per-x pointwise coverage curves, one column per sample size.
pub fn coverage_curve_csv(report: &CoverageReport, header_comment: &str) -> String {
    let mut out = String::new();
    for line in header_comment.lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out.push('x');
    for nr in &report.per_n {
        out.push_str(&format!(",coverage_n{}", nr.n));
    }
    out.push('\n');
    for (i, x) in report.grid.iter().enumerate() {
        out.push_str(&format!("{x:.8}"));
        for nr in &report.per_n {
            out.push_str(&format!(",{:.4}", nr.pointwise_coverage[i]));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn series_first_term_at_zero() {
        let v = f0_eval(0.0, 1);
        assert_abs_diff_eq!(v, std::f64::consts::SQRT_2 * 1f64.sin(), epsilon = 1e-15);
        assert_abs_diff_eq!(v, 1.19001968, epsilon = 1e-7);
    }

    #[test]
    fn series_vanishes_at_one() {
        // every term carries cos((i - 1/2) pi) = 0
        for k in [1, 10, 1000] {
            assert!(f0_eval(1.0, k).abs() < 1e-12);
        }
    }

    #[test]
    fn series_truncation_is_stable() {
        for i in 0..=100 {
            let x = i as f64 / 100.0;
            let a = f0_eval(x, 50_000);
            let b = f0_eval(x, 200_000);
            assert!((a - b).abs() < 1e-3, "truncation gap {} at {x}", a - b);
        }
    }

    #[test]
    fn table_function_interpolates() {
        let f = TrueFunction::Table {
            grid: vec![0.0, 0.5, 1.0],
            values: vec![0.0, 1.0, 0.0],
        };
        assert_abs_diff_eq!(f.eval(0.25), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(f.eval(0.75), 0.5, epsilon = 1e-15);
        assert_eq!(f.eval(0.0), 0.0);
        assert_eq!(f.eval(1.0), 0.0);
    }

    #[test]
    fn designs_are_deterministic() {
        assert_eq!(
            make_design(3, 1).unwrap(),
            vec![vec![0.0], vec![0.5], vec![1.0]]
        );
        let g = make_design(9, 2).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], vec![0.0, 0.0]);
        assert_eq!(g[1], vec![0.0, 0.5]);
        assert_eq!(g[8], vec![1.0, 1.0]);
        assert!(make_design(10, 2).is_err());

        let d = make_design(500, 1).unwrap();
        assert_eq!(d.len(), 500);
        assert_eq!(d[0], vec![0.0]);
        assert_eq!(d[499], vec![1.0]);
    }

    #[test]
    fn noise_kinds_have_requested_variance() {
        let f = TrueFunction::Table {
            grid: vec![0.0, 1.0],
            values: vec![0.0, 0.0],
        };
        let x = make_design(100_000, 1).unwrap();
        let sigma0_sq = 0.07;
        for kind in [
            ErrorKind::Gaussian,
            ErrorKind::ScaledRademacher,
            ErrorKind::Uniform,
        ] {
            let mut rng = derive_rng(50, &[tag("noise-test")]);
            let y = gen_data(&f, &x, sigma0_sq, kind, &mut rng).unwrap();
            let m = y.len() as f64;
            let mean = y.iter().sum::<f64>() / m;
            let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0);
            assert!(
                (var - sigma0_sq).abs() < 3.0 * sigma0_sq * (3.0f64 / m).sqrt() + 1e-4,
                "{kind:?}: variance {var}"
            );
            if kind == ErrorKind::ScaledRademacher {
                for v in &y {
                    assert_abs_diff_eq!(v.abs(), sigma0_sq.sqrt(), epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_noise_returns_signal() {
        let f = TrueFunction::PaperSeries { k: 100 };
        let x = make_design(10, 1).unwrap();
        let mut rng = derive_rng(1, &[]);
        let y = gen_data(&f, &x, 0.0, ErrorKind::Gaussian, &mut rng).unwrap();
        for (yi, p) in y.iter().zip(&x) {
            assert_abs_diff_eq!(*yi, f.eval(p[0]), epsilon = 1e-15);
        }
    }

    #[test]
    fn loocv_single_candidate_is_returned() {
        let template = SpecTemplate {
            dim: 1,
            order: 4,
            scheme: BoundaryScheme::Clamped,
        };
        let x = make_design(50, 1).unwrap();
        let y: Vec<f64> = x.iter().map(|p| p[0]).collect();
        let sel = loocv_select_j(
            &[5],
            &template,
            |s| PriorSpec::identity_for(s, NoiseModel::EmpiricalBayes),
            &x,
            &y,
        )
        .unwrap();
        assert_eq!(sel.chosen_n_interior, 5);
        assert_eq!(sel.scores.len(), 1);
    }

    #[test]
    fn loocv_shortcut_matches_literal_leave_one_out() {
        let n = 40;
        let x = make_design(n, 1).unwrap();
        let f = TrueFunction::PaperSeries { k: 2000 };
        let mut rng = derive_rng(9, &[tag("loocv")]);
        let y = gen_data(&f, &x, 0.1, ErrorKind::Gaussian, &mut rng).unwrap();
        let template = SpecTemplate {
            dim: 1,
            order: 4,
            scheme: BoundaryScheme::Clamped,
        };
        let cand = 4usize;
        let sel = loocv_select_j(
            &[cand],
            &template,
            |s| PriorSpec::identity_for(s, NoiseModel::EmpiricalBayes),
            &x,
            &y,
        )
        .unwrap();
        let shortcut = sel.scores[0].score;

        // literal refits
        let spec = template.build(cand).unwrap();
        let mut literal = KahanSum::new();
        for i in 0..n {
            let mut xi = x.clone();
            let mut yi = y.clone();
            xi.remove(i);
            yi.remove(i);
            let prior = PriorSpec::identity_for(&spec, NoiseModel::EmpiricalBayes).unwrap();
            let state = fit(&spec, &prior, &xi, &yi).unwrap();
            let pred = state.mean_deriv(&[0], &x[i]).unwrap();
            let e = y[i] - pred;
            literal.add(e * e);
        }
        let rel = (shortcut - literal.value()).abs() / literal.value();
        assert!(
            rel < 1e-8,
            "shortcut {shortcut} vs literal {}",
            literal.value()
        );
    }

    #[test]
    fn loocv_choice_is_stable_across_seeds() {
        let n = 300;
        let x = make_design(n, 1).unwrap();
        let f = TrueFunction::PaperSeries { k: 20_000 };
        let template = SpecTemplate {
            dim: 1,
            order: 4,
            scheme: BoundaryScheme::Clamped,
        };
        let candidates: Vec<usize> = (2..=30).collect();
        let mut chosen = Vec::new();
        for seed in 0..5u64 {
            let mut rng = derive_rng(seed, &[tag("stability")]);
            let y = gen_data(&f, &x, 0.1, ErrorKind::Gaussian, &mut rng).unwrap();
            let sel = loocv_select_j(
                &candidates,
                &template,
                |s| PriorSpec::identity_for(s, NoiseModel::EmpiricalBayes),
                &x,
                &y,
            )
            .unwrap();
            chosen.push(sel.chosen_n_interior);
        }
        let lo = *chosen.iter().min().unwrap();
        let hi = *chosen.iter().max().unwrap();
        assert!(
            hi - lo <= 4,
            "chosen interior knots varied too much: {chosen:?}"
        );
    }

    #[test]
    fn tiny_experiment_is_deterministic_and_sane() {
        let cfg = ExperimentConfig {
            ns: vec![100],
            replicates: 3,
            grid_points: 64,
            mc_samples: 200,
            fixed_interior_knots: Some(6),
            true_function: TrueFunction::PaperSeries { k: 2000 },
            ..ExperimentConfig::default()
        };
        let a = run_coverage_experiment(&cfg).unwrap();
        let b = run_coverage_experiment(&cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        let nr = &a.per_n[0];
        assert_eq!(nr.replicates, 3);
        assert!(nr.band_coverage >= 0.0 && nr.band_coverage <= 1.0);
        assert!(nr.band_radius_mean > 0.0);
        assert_eq!(nr.chosen_j_histogram, vec![(10, 3)]);
        // with three replicates every per-x coverage is a multiple of 1/3
        for &c in &nr.pointwise_coverage {
            let scaled = c * 3.0;
            assert!((scaled - scaled.round()).abs() < 1e-12);
        }
    }

    #[test]
    fn config_digest_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.rho = 0.75;
        assert_ne!(a.digest(), b.digest());
        // progress flag is not part of the digest
        let mut c = a.clone();
        c.progress = true;
        assert_eq!(a.digest(), c.digest());
    }

    #[test]
    fn csv_outputs_have_expected_shape() {
        let cfg = ExperimentConfig {
            ns: vec![100, 300],
            replicates: 2,
            grid_points: 16,
            mc_samples: 100,
            fixed_interior_knots: Some(4),
            true_function: TrueFunction::PaperSeries { k: 500 },
            ..ExperimentConfig::default()
        };
        let report = run_coverage_experiment(&cfg).unwrap();
        let table = report_table_csv(&report, "digest=x");
        assert!(table.starts_with("# digest=x\n"));
        assert!(table.contains("metric,n=100,n=300"));
        assert!(table.contains("credible_band_coverage,"));
        assert!(table.contains("confidence_band_coverage,,"));
        let curve = coverage_curve_csv(&report, "digest=x");
        assert_eq!(curve.lines().count(), 1 + 1 + 16);
        assert!(curve
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("x,coverage_n100,coverage_n300"));
    }
}
