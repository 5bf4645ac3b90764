//! Pointwise intervals, L2 credible balls, and (inflated) sup-norm credible
//! bands for `D^r f`, in empirical-Bayes and hierarchical modes, plus
//! containment checks against a reference function.
//!
//! Norm quantiles come from Monte Carlo draws of the centered posterior
//! process `GP(0, Sigma_r)`; the sup norm over a finite grid (default eight
//! points per knot span) stands in for the continuum sup.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basis::SparseBasisVector;
use crate::error::{Error, Result};
use crate::posterior::{NoiseModel, PosteriorState, SigmaPosterior};
use crate::stats::{normal_upper_quantile, quantile_with_se, t_upper_quantile, KahanSum};

/// Tensor-product evaluation grid on `[0,1]^d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    axes: Vec<Vec<f64>>,
}

impl Grid {
    pub fn new(axes: Vec<Vec<f64>>) -> Result<Self> {
        if axes.is_empty() || axes.iter().any(|a| a.len() < 2) {
            return Err(Error::Parameter(
                "grid needs at least two points per axis".into(),
            ));
        }
        for axis in &axes {
            for w in axis.windows(2) {
                if !(w[0] < w[1]) {
                    return Err(Error::Parameter(
                        "grid axes must be strictly increasing".into(),
                    ));
                }
            }
            if axis.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(Error::Parameter("grid points must lie in [0,1]".into()));
            }
        }
        Ok(Self { axes })
    }

    /// Equispaced points per axis including both endpoints.
    pub fn uniform(d: usize, points_per_axis: usize) -> Result<Self> {
        if points_per_axis < 2 {
            return Err(Error::Parameter(
                "uniform grid needs at least two points per axis".into(),
            ));
        }
        let axis: Vec<f64> = (0..points_per_axis)
            .map(|i| i as f64 / (points_per_axis - 1) as f64)
            .collect();
        Self::new(vec![axis; d])
    }

    /// `per_span` points per knot span on each axis (plus the right
    /// endpoint), matched to the scale on which the posterior variance
    /// kernel varies.
    pub fn for_spec(spec: &crate::basis::BasisSpec, per_span: usize) -> Result<Self> {
        if per_span < 1 {
            return Err(Error::Parameter("need at least one point per span".into()));
        }
        let mut axes = Vec::with_capacity(spec.dim());
        for kv in spec.axes() {
            let mut knots = vec![0.0];
            knots.extend_from_slice(kv.interior_knots());
            knots.push(1.0);
            let mut axis = Vec::new();
            for w in knots.windows(2) {
                for i in 0..per_span {
                    axis.push(w[0] + (w[1] - w[0]) * i as f64 / per_span as f64);
                }
            }
            axis.push(1.0);
            axes.push(axis);
        }
        Self::new(axes)
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All grid points in lexicographic order, last axis fastest.
    pub fn points(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; self.dim()];
        'outer: loop {
            out.push(
                idx.iter()
                    .enumerate()
                    .map(|(k, &i)| self.axes[k][i])
                    .collect(),
            );
            for k in (0..self.dim()).rev() {
                idx[k] += 1;
                if idx[k] < self.axes[k].len() {
                    continue 'outer;
                }
                idx[k] = 0;
                if k == 0 {
                    break 'outer;
                }
            }
        }
        out
    }

    /// Tensor-product trapezoid quadrature weights aligned with `points()`.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let per_axis: Vec<Vec<f64>> = self
            .axes
            .iter()
            .map(|axis| {
                let m = axis.len();
                let mut w = vec![0.0; m];
                for i in 0..m - 1 {
                    let h = axis[i + 1] - axis[i];
                    w[i] += 0.5 * h;
                    w[i + 1] += 0.5 * h;
                }
                w
            })
            .collect();
        let mut out = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; self.dim()];
        'outer: loop {
            out.push(
                idx.iter()
                    .enumerate()
                    .map(|(k, &i)| per_axis[k][i])
                    .product(),
            );
            for k in (0..self.dim()).rev() {
                idx[k] += 1;
                if idx[k] < self.axes[k].len() {
                    continue 'outer;
                }
                idx[k] = 0;
                if k == 0 {
                    break 'outer;
                }
            }
        }
        out
    }

    /// Smallest number of grid points falling in any knot span, per axis.
    fn min_points_per_span(&self, spec: &crate::basis::BasisSpec) -> usize {
        let mut min_count = usize::MAX;
        for (axis, kv) in self.axes.iter().zip(spec.axes()) {
            let mut knots = vec![0.0];
            knots.extend_from_slice(kv.interior_knots());
            knots.push(1.0);
            for w in knots.windows(2) {
                let count = axis
                    .iter()
                    .filter(|&&x| x >= w[0] && (x < w[1] || (w[1] == 1.0 && x <= 1.0)))
                    .count();
                min_count = min_count.min(count);
            }
        }
        min_count
    }
}

/// Whose sigma enters the radius.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    EmpiricalBayes,
    Hierarchical,
}

/// Credible set flavor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SetKind {
    Pointwise { x: Vec<f64> },
    L2,
    SupBand,
}

/// A constructed credible set: center (posterior mean on the grid), radius,
/// and the settings that produced it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CredibleSet {
    pub kind: SetKind,
    /// Credibility level `1 - gamma`.
    pub level: f64,
    pub mode: Mode,
    pub deriv: Vec<usize>,
    pub center: Vec<f64>,
    /// Pointwise half-width, L2 radius, or band half-width (inflation
    /// included for sup bands).
    pub radius: f64,
    /// Inflation factor; 1 for pointwise and L2 sets.
    pub rho: f64,
    /// Monte Carlo draws behind the quantile; 0 for closed forms.
    pub mc_samples: usize,
    /// Order-statistic standard error of the Monte Carlo quantile.
    pub quantile_se: Option<f64>,
    /// Evaluation grid for L2 and sup-band sets.
    pub grid: Option<Grid>,
}

/// An estimated Monte Carlo quantile with its order-statistic standard error.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct QuantileEstimate {
    pub value: f64,
    pub mc_samples: usize,
    pub standard_error: f64,
}

fn check_gamma_open(gamma: f64) -> Result<()> {
    if !(0.0 < gamma && gamma < 1.0) {
        return Err(Error::Parameter(format!(
            "gamma must lie in (0,1), got {gamma}"
        )));
    }
    Ok(())
}

fn sigma_posterior_for(state: &PosteriorState) -> Result<SigmaPosterior> {
    match state.prior().noise {
        NoiseModel::HierarchicalIg { .. } => state.sigma_posterior(),
        ref other => Err(Error::WrongNoiseMode {
            expected: "hierarchical-ig".into(),
            found: format!("{other:?}"),
        }),
    }
}

/// `(1-gamma)` pointwise credible interval for `D^r f(x)`.
///
/// Empirical Bayes uses the closed form `z_{gamma/2} sigma_hat
/// sqrt(Sigma_r(x,x))`; the hierarchical mode with the conjugate
/// inverse-gamma prior uses the scaled Student-t cutoff with `beta1 + n`
/// degrees of freedom (sigma integrated out).
pub fn pointwise_interval(
    state: &PosteriorState,
    r: &[usize],
    x: &[f64],
    gamma: f64,
    mode: Mode,
) -> Result<CredibleSet> {
    check_gamma_open(gamma)?;
    let center = state.mean_deriv(r, x)?;
    let v = state.var_deriv(r, x)?;
    let radius = match mode {
        Mode::EmpiricalBayes => {
            let z = normal_upper_quantile(gamma / 2.0)?;
            z * state.effective_sigma_sq().sqrt() * v.sqrt()
        }
        Mode::Hierarchical => {
            let sp = sigma_posterior_for(state)?;
            let df = 2.0 * sp.shape;
            let scale = (sp.rate / sp.shape * v).sqrt();
            t_upper_quantile(gamma / 2.0, df)? * scale
        }
    };
    Ok(CredibleSet {
        kind: SetKind::Pointwise { x: x.to_vec() },
        level: 1.0 - gamma,
        mode,
        deriv: r.to_vec(),
        center: vec![center],
        radius,
        rho: 1.0,
        mc_samples: 0,
        quantile_se: None,
        grid: None,
    })
}

/// Precomputed basis blocks of the lower-order family on a fixed grid.
struct GridEval {
    rows: Vec<SparseBasisVector>,
    out_dims: Vec<usize>,
}

impl GridEval {
    fn new(state: &PosteriorState, r: &[usize], grid: &Grid) -> Result<Self> {
        let wr = state.deriv_op(r)?;
        let out_dims = wr.out_dims().to_vec();
        let rows = grid
            .points()
            .iter()
            .map(|x| state.spec().eval_tensor_basis(x, r))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows, out_dims })
    }

    fn eval_into(&self, coeff: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.rows.iter().map(|row| {
            row.iter_flat(&self.out_dims)
                .map(|(i, v)| v * coeff[i])
                .sum::<f64>()
        }));
    }
}

/// Centered norm draws: `||GP(0, Sigma_r)||` over the grid, in the requested
/// norm, paired with a posterior sigma draw when hierarchical.
struct NormDraws {
    /// Unit-sigma norms of the centered process.
    norms: Vec<f64>,
    /// Hierarchical sigma draws, one per norm; empty in EB mode.
    sigmas: Vec<f64>,
}

enum NormKind<'a> {
    Sup,
    L2 { weights: &'a [f64] },
}

fn draw_norms<R: Rng + ?Sized>(
    state: &PosteriorState,
    r: &[usize],
    grid: &Grid,
    mc_samples: usize,
    kind: NormKind<'_>,
    sigma_post: Option<&SigmaPosterior>,
    rng: &mut R,
) -> Result<NormDraws> {
    let wr = state.deriv_op(r)?;
    let ge = GridEval::new(state, r, grid)?;
    let j = state.spec().total_basis();
    let mut norms = Vec::with_capacity(mc_samples);
    let mut sigmas = Vec::with_capacity(if sigma_post.is_some() { mc_samples } else { 0 });
    let mut z = vec![0.0; j];
    let mut values = Vec::with_capacity(grid.len());
    for _ in 0..mc_samples {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        let w = state.chol().solve_lower_transpose(&z)?;
        let c = wr.apply(&w)?;
        ge.eval_into(&c, &mut values);
        let norm = match kind {
            NormKind::Sup => values.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            NormKind::L2 { weights } => {
                let mut acc = KahanSum::new();
                for (v, w) in values.iter().zip(weights) {
                    acc.add(v * v * w);
                }
                acc.value().max(0.0).sqrt()
            }
        };
        norms.push(norm);
        if let Some(sp) = sigma_post {
            sigmas.push(sp.draw_sigma(rng));
        }
    }
    Ok(NormDraws { norms, sigmas })
}

/// `(1-gamma)` quantile of the L2 norm of the centered posterior process,
/// scaled into a credible-ball radius.
///
/// The grid must put at least four points in every knot span per axis, and
/// `mc_samples` must reach `50/gamma`.
pub fn l2_radius<R: Rng + ?Sized>(
    state: &PosteriorState,
    r: &[usize],
    gamma: f64,
    mode: Mode,
    grid: &Grid,
    mc_samples: usize,
    rng: &mut R,
) -> Result<QuantileEstimate> {
    check_gamma_open(gamma)?;
    if grid.min_points_per_span(state.spec()) < 4 {
        return Err(Error::Parameter(
            "L2 quadrature grid needs at least 4 points per knot span per axis".into(),
        ));
    }
    let needed = (50.0 / gamma).ceil() as usize;
    if mc_samples < needed {
        return Err(Error::InsufficientSamples {
            needed,
            got: mc_samples,
        });
    }
    let weights = grid.trapezoid_weights();
    let sigma_post = match mode {
        Mode::Hierarchical => Some(sigma_posterior_for(state)?),
        Mode::EmpiricalBayes => None,
    };
    let draws = draw_norms(
        state,
        r,
        grid,
        mc_samples,
        NormKind::L2 { weights: &weights },
        sigma_post.as_ref(),
        rng,
    )?;
    let scaled: Vec<f64> = match mode {
        Mode::EmpiricalBayes => {
            let s = state.effective_sigma_sq().sqrt();
            draws.norms.iter().map(|n| s * n).collect()
        }
        Mode::Hierarchical => draws
            .norms
            .iter()
            .zip(&draws.sigmas)
            .map(|(n, s)| n * s)
            .collect(),
    };
    let (value, se) = quantile_with_se(&scaled, gamma)?;
    Ok(QuantileEstimate {
        value,
        mc_samples,
        standard_error: se,
    })
}

/// The inflated `(1-gamma)` sup-norm credible band: center is the posterior
/// mean of `D^r f` on the grid, half-width is `rho * sigma_hat * h` with `h`
/// the Monte Carlo `(1-gamma)` quantile of the sup norm of `GP(0, Sigma_r)`
/// (hierarchical: `rho` times the quantile of `sigma * sup`, sigma drawn
/// from its posterior). Requires `gamma < 1/2`.
pub fn sup_band<R: Rng + ?Sized>(
    state: &PosteriorState,
    r: &[usize],
    gamma: f64,
    rho: f64,
    mode: Mode,
    grid: &Grid,
    mc_samples: usize,
    rng: &mut R,
) -> Result<CredibleSet> {
    if !(0.0 < gamma && gamma < 0.5) {
        return Err(Error::Parameter(format!(
            "sup-band level requires gamma in (0, 1/2), got {gamma}"
        )));
    }
    if !(rho > 0.0) {
        return Err(Error::Parameter(format!(
            "inflation factor rho must be positive, got {rho}"
        )));
    }
    if mc_samples == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let sigma_post = match mode {
        Mode::Hierarchical => Some(sigma_posterior_for(state)?),
        Mode::EmpiricalBayes => None,
    };
    let draws = draw_norms(
        state,
        r,
        grid,
        mc_samples,
        NormKind::Sup,
        sigma_post.as_ref(),
        rng,
    )?;
    let (radius, se) = match mode {
        Mode::EmpiricalBayes => {
            let (h, se) = quantile_with_se(&draws.norms, gamma)?;
            let s = state.effective_sigma_sq().sqrt();
            (rho * s * h, rho * s * se)
        }
        Mode::Hierarchical => {
            let scaled: Vec<f64> = draws
                .norms
                .iter()
                .zip(&draws.sigmas)
                .map(|(n, s)| n * s)
                .collect();
            let (q, se) = quantile_with_se(&scaled, gamma)?;
            (rho * q, rho * se)
        }
    };
    let center = grid
        .points()
        .iter()
        .map(|x| state.mean_deriv(r, x))
        .collect::<Result<Vec<f64>>>()?;
    Ok(CredibleSet {
        kind: SetKind::SupBand,
        level: 1.0 - gamma,
        mode,
        deriv: r.to_vec(),
        center,
        radius,
        rho,
        mc_samples,
        quantile_se: Some(se),
        grid: Some(grid.clone()),
    })
}

/// Containment of a grid-evaluated reference function, plus the violation
/// (how far the relevant distance exceeds the radius, clamped at zero).
pub fn contains(set: &CredibleSet, f_true: &[f64]) -> Result<(bool, f64)> {
    if f_true.len() != set.center.len() {
        return Err(Error::GridMismatch);
    }
    let distance = match &set.kind {
        SetKind::Pointwise { .. } => (f_true[0] - set.center[0]).abs(),
        SetKind::SupBand => f_true
            .iter()
            .zip(&set.center)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max),
        SetKind::L2 => {
            let grid = set.grid.as_ref().ok_or(Error::GridMismatch)?;
            let weights = grid.trapezoid_weights();
            if weights.len() != f_true.len() {
                return Err(Error::GridMismatch);
            }
            let mut acc = KahanSum::new();
            for ((a, b), w) in f_true.iter().zip(&set.center).zip(&weights) {
                acc.add((a - b) * (a - b) * w);
            }
            acc.value().max(0.0).sqrt()
        }
    };
    let contained = distance <= set.radius;
    Ok((contained, (distance - set.radius).max(0.0)))
}

/// CSV rendering of a band: covariate columns, center, lower, upper.
pub fn band_csv(set: &CredibleSet, header_comment: &str) -> Result<String> {
    let grid = set.grid.as_ref().ok_or(Error::GridMismatch)?;
    let points = grid.points();
    let d = grid.dim();
    let mut out = String::new();
    for line in header_comment.lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    for k in 0..d {
        out.push_str(&format!("x{},", k + 1));
    }
    out.push_str("center,lower,upper\n");
    for (x, c) in points.iter().zip(&set.center) {
        for xk in x {
            out.push_str(&format!("{xk:.12},"));
        }
        out.push_str(&format!(
            "{:.12},{:.12},{:.12}\n",
            c,
            c - set.radius,
            c + set.radius
        ));
    }
    Ok(out)
}
