//! Conjugate posterior computation for the tensor B-spline regression model
//! `Y | theta, sigma ~ N(B theta, sigma^2 I)`, `theta | sigma ~ N(eta,
//! sigma^2 Omega)`.
//!
//! Everything downstream (prediction, derivative posteriors, covariance
//! kernels, function sampling, credible sets) is driven by the Cholesky
//! factor of `B^T B + Omega^{-1}` and the posterior coefficient mean, both
//! computed once at fit time.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::deriv::{build_deriv_operator, eval_derivative, DerivOperator};
use crate::design::{
    add_prior_precision, build_design, factorize_with_jitter, gram, BandedCholesky,
    BandedSymMatrix,
};
use crate::error::{Error, Result};
use crate::stats::KahanSum;

/// Noise handling: empirical Bayes plug-in, conjugate inverse-gamma, or a
/// fixed value (the latter is not part of the model family; it isolates the
/// function posterior in tests).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum NoiseModel {
    EmpiricalBayes,
    HierarchicalIg { beta1: f64, beta2: f64 },
    FixedSigma { sigma: f64 },
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseModel::EmpiricalBayes => Ok(()),
            NoiseModel::HierarchicalIg { beta1, beta2 } => {
                if !(*beta1 > 4.0) {
                    return Err(Error::Parameter(format!(
                        "inverse-gamma hyperparameter beta1 must exceed 4, got {beta1}"
                    )));
                }
                if !(*beta2 > 0.0) {
                    return Err(Error::Parameter(format!(
                        "inverse-gamma hyperparameter beta2 must be positive, got {beta2}"
                    )));
                }
                Ok(())
            }
            NoiseModel::FixedSigma { sigma } => {
                if !(*sigma > 0.0) {
                    return Err(Error::Parameter(format!(
                        "fixed sigma must be positive, got {sigma}"
                    )));
                }
                Ok(())
            }
        }
    }

    fn label(&self) -> &'static str {
        match self {
            NoiseModel::EmpiricalBayes => "empirical-bayes",
            NoiseModel::HierarchicalIg { .. } => "hierarchical-ig",
            NoiseModel::FixedSigma { .. } => "fixed-sigma",
        }
    }
}

/// Coefficient prior `N(eta, sigma^2 Omega)` described through the banded
/// `Omega^{-1}`, plus the noise handling mode.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PriorSpec {
    pub eta: Vec<f64>,
    pub omega_inv: BandedSymMatrix,
    pub noise: NoiseModel,
}

impl PriorSpec {
    pub fn new(eta: Vec<f64>, omega_inv: BandedSymMatrix, noise: NoiseModel) -> Result<Self> {
        noise.validate()?;
        if eta.len() != omega_inv.size() {
            return Err(Error::SizeMismatch {
                expected: omega_inv.size(),
                found: eta.len(),
            });
        }
        Ok(Self {
            eta,
            omega_inv,
            noise,
        })
    }

    /// `eta = 0`, `Omega = I` (the simulation-study prior).
    pub fn identity_for(spec: &BasisSpec, noise: NoiseModel) -> Result<Self> {
        let dims = spec.basis_counts();
        Self::new(
            vec![0.0; spec.total_basis()],
            BandedSymMatrix::identity(&dims),
            noise,
        )
    }
}

/// Everything needed for prediction, covariance and sampling after a fit.
#[derive(Debug)]
pub struct PosteriorState {
    spec: BasisSpec,
    prior: PriorSpec,
    n: usize,
    theta_hat: Vec<f64>,
    sigma_hat_sq: f64,
    precision: BandedSymMatrix,
    chol: BandedCholesky,
    b_t_y: Option<Vec<f64>>,
    omega_inv_eta: Vec<f64>,
    cache: RwLock<HashMap<Vec<usize>, Arc<DerivOperator>>>,
}

/// Conjugate fit. Assembles the design, the banded Gram matrix and the
/// posterior precision, factorizes, solves for the coefficient posterior
/// mean, and computes the empirical Bayes variance through the J-dimensional
/// identity `n sigma_hat^2 = ||Y - B eta||^2 - v^T (B^T B + Omega^{-1})^{-1} v`
/// with `v = B^T (Y - B eta)`; the `n x n` system matrix is never formed.
///
/// `n = 0` is allowed and produces the prior as the posterior (used to
/// inspect prior covariance); otherwise the basis size must not exceed `n`.
pub fn fit(spec: &BasisSpec, prior: &PriorSpec, x: &[Vec<f64>], y: &[f64]) -> Result<PosteriorState> {
    prior.noise.validate()?;
    let n = x.len();
    if y.len() != n {
        return Err(Error::SizeMismatch {
            expected: n,
            found: y.len(),
        });
    }
    let j = spec.total_basis();
    if n > 0 && j > n {
        return Err(Error::OverParameterized { j, n });
    }
    if prior.eta.len() != j {
        return Err(Error::SizeMismatch {
            expected: j,
            found: prior.eta.len(),
        });
    }
    if prior.omega_inv.dims() != spec.basis_counts().as_slice() {
        return Err(Error::SizeMismatch {
            expected: j,
            found: prior.omega_inv.size(),
        });
    }

    let design = build_design(spec, x)?;
    let g = gram(&design);
    let precision = add_prior_precision(&g, &prior.omega_inv)?;
    let chol = factorize_with_jitter(&precision)?;

    let omega_inv_eta = prior.omega_inv.mul_vec(&prior.eta)?;
    let b_t_y = design.transpose_mul(y)?;
    let mut rhs = b_t_y.clone();
    for (r, o) in rhs.iter_mut().zip(&omega_inv_eta) {
        *r += o;
    }
    let theta_hat = chol.solve(&rhs)?;

    let sigma_hat_sq = if n == 0 {
        0.0
    } else {
        let b_eta = design.mul_coeff(&prior.eta)?;
        let mut ss = KahanSum::new();
        let mut resid = Vec::with_capacity(n);
        for (yi, bi) in y.iter().zip(&b_eta) {
            let r = yi - bi;
            resid.push(r);
            ss.add(r * r);
        }
        let v = design.transpose_mul(&resid)?;
        let s = chol.solve(&v)?;
        let mut vts = KahanSum::new();
        for (a, b) in v.iter().zip(&s) {
            vts.add(a * b);
        }
        ((ss.value() - vts.value()) / n as f64).max(0.0)
    };

    Ok(PosteriorState {
        spec: spec.clone(),
        prior: prior.clone(),
        n,
        theta_hat,
        sigma_hat_sq,
        precision,
        chol,
        b_t_y: Some(b_t_y),
        omega_inv_eta,
        cache: RwLock::new(HashMap::new()),
    })
}

/// `sigma^2 | Y ~ IG((beta1 + n)/2, (beta2 + n sigma_hat^2)/2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaPosterior {
    pub shape: f64,
    pub rate: f64,
}

impl SigmaPosterior {
    pub fn from_parts(beta1: f64, beta2: f64, n: usize, sigma_hat_sq: f64) -> Self {
        Self {
            shape: (beta1 + n as f64) / 2.0,
            rate: (beta2 + n as f64 * sigma_hat_sq) / 2.0,
        }
    }

    /// `E(sigma^2 | Y) = beta2/(beta1+n-2) + n sigma_hat^2/(beta1+n-2)`.
    pub fn mean(&self) -> f64 {
        self.rate / (self.shape - 1.0)
    }

    /// Exact inverse-gamma variance `rate^2 / ((shape-1)^2 (shape-2))`.
    pub fn variance(&self) -> f64 {
        self.rate * self.rate / ((self.shape - 1.0).powi(2) * (self.shape - 2.0))
    }

    /// One draw of `sigma^2`.
    pub fn draw_sigma_sq<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let g = Gamma::new(self.shape, 1.0 / self.rate).expect("valid gamma");
        1.0 / g.sample(rng)
    }

    /// One draw of `sigma`.
    pub fn draw_sigma<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.draw_sigma_sq(rng).sqrt()
    }
}

impl PosteriorState {
    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    pub fn prior(&self) -> &PriorSpec {
        &self.prior
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn theta_hat(&self) -> &[f64] {
        &self.theta_hat
    }

    /// Empirical Bayes maximizer of the marginal likelihood.
    pub fn sigma_hat_sq(&self) -> f64 {
        self.sigma_hat_sq
    }

    /// The sigma^2 used by empirical-Bayes credible sets: the EB estimate,
    /// or the fixed value when the noise mode pins it.
    pub fn effective_sigma_sq(&self) -> f64 {
        match self.prior.noise {
            NoiseModel::FixedSigma { sigma } => sigma * sigma,
            _ => self.sigma_hat_sq,
        }
    }

    pub fn precision(&self) -> &BandedSymMatrix {
        &self.precision
    }

    pub fn chol(&self) -> &BandedCholesky {
        &self.chol
    }

    /// `B^T Y` (absent when the state was rebuilt from an export).
    pub fn b_t_y(&self) -> Option<&[f64]> {
        self.b_t_y.as_deref()
    }

    pub fn omega_inv_eta(&self) -> &[f64] {
        &self.omega_inv_eta
    }

    /// Cached derivative operator for `r`.
    pub fn deriv_op(&self, r: &[usize]) -> Result<Arc<DerivOperator>> {
        if let Some(op) = self.cache.read().expect("cache lock").get(r) {
            return Ok(op.clone());
        }
        let op = Arc::new(build_deriv_operator(&self.spec, r)?);
        let mut guard = self.cache.write().expect("cache lock");
        Ok(guard.entry(r.to_vec()).or_insert(op).clone())
    }

    /// Posterior of `sigma^2` under the conjugate inverse-gamma prior.
    pub fn sigma_posterior(&self) -> Result<SigmaPosterior> {
        match self.prior.noise {
            NoiseModel::HierarchicalIg { beta1, beta2 } => {
                Ok(SigmaPosterior::from_parts(beta1, beta2, self.n, self.sigma_hat_sq))
            }
            ref other => Err(Error::WrongNoiseMode {
                expected: "hierarchical-ig".into(),
                found: other.label().into(),
            }),
        }
    }

    /// Posterior mean of `D^r f` at `x`: `b_{J,q-r}(x)^T W_r theta_hat`.
    pub fn mean_deriv(&self, r: &[usize], x: &[f64]) -> Result<f64> {
        let wr = self.deriv_op(r)?;
        eval_derivative(&self.spec, &wr, &self.theta_hat, x)
    }

    /// Posterior covariance kernel
    /// `Sigma_r(x, y) = b(x)^T W_r (B^T B + Omega^{-1})^{-1} W_r^T b(y)`,
    /// computed through two triangular solves.
    pub fn cov_deriv(&self, r: &[usize], x: &[f64], y: &[f64]) -> Result<f64> {
        let wr = self.deriv_op(r)?;
        let ux = wr.transpose_mul_sparse(&self.spec.eval_tensor_basis(x, r)?);
        let zx = self.chol.solve_lower(&ux)?;
        if x == y {
            return Ok(zx.iter().map(|v| v * v).sum());
        }
        let uy = wr.transpose_mul_sparse(&self.spec.eval_tensor_basis(y, r)?);
        let zy = self.chol.solve_lower(&uy)?;
        Ok(zx.iter().zip(&zy).map(|(a, b)| a * b).sum())
    }

    /// `Sigma_r(x, x)`, always nonnegative.
    pub fn var_deriv(&self, r: &[usize], x: &[f64]) -> Result<f64> {
        let mut buf = Vec::new();
        self.var_deriv_with_buf(r, x, &mut buf)
    }

    /// Allocation-light `Sigma_r(x, x)` reusing `buf` as scratch; the
    /// workhorse for pointwise intervals over dense grids.
    pub fn var_deriv_with_buf(&self, r: &[usize], x: &[f64], buf: &mut Vec<f64>) -> Result<f64> {
        let wr = self.deriv_op(r)?;
        let sb = self.spec.eval_tensor_basis(x, r)?;
        let out_dims = wr.out_dims().to_vec();
        let entries = sb.iter_flat(&out_dims).flat_map(|(flat_row, bval)| {
            let row = wr.row(flat_row);
            row.weights
                .iter()
                .zip(wr.block_offsets())
                .map(move |(w, off)| (row.start + off, bval * w))
        });
        Ok(self.chol.norm_sq_solve_lower_scatter(entries, buf))
    }

    /// Exact finite-dimensional GP draw of `D^r f` on `grid`, given `sigma`:
    /// `theta* = theta_hat + sigma L^{-T} z`, evaluated through `W_r`.
    pub fn sample_function<R: Rng + ?Sized>(
        &self,
        r: &[usize],
        sigma: f64,
        grid: &[Vec<f64>],
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if !(sigma >= 0.0) {
            return Err(Error::Parameter(format!(
                "sigma must be nonnegative, got {sigma}"
            )));
        }
        let j = self.spec.total_basis();
        let z: Vec<f64> = (0..j).map(|_| rng.sample(StandardNormal)).collect();
        let w = self.chol.solve_lower_transpose(&z)?;
        let theta_star: Vec<f64> = self
            .theta_hat
            .iter()
            .zip(&w)
            .map(|(t, wi)| t + sigma * wi)
            .collect();
        let wr = self.deriv_op(r)?;
        let c = wr.apply(&theta_star)?;
        let out_dims = wr.out_dims().to_vec();
        grid.iter()
            .map(|x| {
                let sb = self.spec.eval_tensor_basis(x, r)?;
                Ok(sb.iter_flat(&out_dims).map(|(i, v)| v * c[i]).sum())
            })
            .collect()
    }

    /// Serializable snapshot sufficient to rebuild the state.
    pub fn to_export(&self) -> FitExport {
        FitExport {
            spec: self.spec.clone(),
            prior: self.prior.clone(),
            n: self.n,
            theta_hat: self.theta_hat.clone(),
            sigma_hat_sq: self.sigma_hat_sq,
            precision: self.precision.clone(),
        }
    }

    pub fn from_export(export: FitExport) -> Result<Self> {
        export.prior.noise.validate()?;
        let chol = factorize_with_jitter(&export.precision)?;
        let omega_inv_eta = export.prior.omega_inv.mul_vec(&export.prior.eta)?;
        Ok(PosteriorState {
            spec: export.spec,
            prior: export.prior,
            n: export.n,
            theta_hat: export.theta_hat,
            sigma_hat_sq: export.sigma_hat_sq,
            precision: export.precision,
            chol,
            b_t_y: None,
            omega_inv_eta,
            cache: RwLock::new(HashMap::new()),
        })
    }
}

/// JSON-exportable fit snapshot: basis, prior settings, posterior mean,
/// noise estimate, and the banded precision (the design itself is not
/// needed for prediction, covariance, or sampling).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitExport {
    pub spec: BasisSpec,
    pub prior: PriorSpec,
    pub n: usize,
    pub theta_hat: Vec<f64>,
    pub sigma_hat_sq: f64,
    pub precision: BandedSymMatrix,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{BasisSpec, BoundaryScheme};
    use crate::stream::derive_rng;
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};

    fn line_points(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| vec![i as f64 / (n - 1) as f64]).collect()
    }

    fn dense_design(spec: &BasisSpec, pts: &[Vec<f64>]) -> DMatrix<f64> {
        let j = spec.total_basis();
        let dims = spec.basis_counts();
        let mut b = DMatrix::zeros(pts.len(), j);
        for (i, x) in pts.iter().enumerate() {
            let sb = spec.eval_tensor_basis(x, &vec![0; spec.dim()]).unwrap();
            for (c, v) in sb.iter_flat(&dims) {
                b[(i, c)] = v;
            }
        }
        b
    }

    #[test]
    fn zero_residual_data_recovers_eta() {
        let spec = BasisSpec::uniform(1, 4, 4, BoundaryScheme::Clamped).unwrap();
        let j = spec.total_basis();
        let eta: Vec<f64> = (0..j).map(|i| 0.3 + 0.1 * i as f64).collect();
        let prior = PriorSpec::new(
            eta.clone(),
            BandedSymMatrix::identity(&spec.basis_counts()),
            NoiseModel::EmpiricalBayes,
        )
        .unwrap();
        let pts = line_points(40);
        let design = crate::design::build_design(&spec, &pts).unwrap();
        let y = design.mul_coeff(&eta).unwrap();
        let state = fit(&spec, &prior, &pts, &y).unwrap();
        assert!(state.sigma_hat_sq() < 1e-18);
        for (t, e) in state.theta_hat().iter().zip(&eta) {
            assert_abs_diff_eq!(t, e, epsilon = 1e-8);
        }
    }

    #[test]
    fn near_zero_prior_precision_matches_ridge_oracle() {
        let spec = BasisSpec::uniform(1, 4, 3, BoundaryScheme::Clamped).unwrap();
        let dims = spec.basis_counts();
        let eps = 1e-10;
        let prior = PriorSpec::new(
            vec![0.0; spec.total_basis()],
            BandedSymMatrix::scaled_identity(&dims, eps),
            NoiseModel::EmpiricalBayes,
        )
        .unwrap();
        let pts = line_points(60);
        let mut rng = derive_rng(31, &[]);
        let y: Vec<f64> = pts
            .iter()
            .map(|x| (3.0 * x[0]).sin() + 0.01 * rand::Rng::gen::<f64>(&mut rng))
            .collect();
        let state = fit(&spec, &prior, &pts, &y).unwrap();

        let b = dense_design(&spec, &pts);
        let yv = DVector::from_column_slice(&y);
        let j = spec.total_basis();
        let normal = b.transpose() * &b + DMatrix::identity(j, j) * eps;
        let theta = normal.cholesky().unwrap().solve(&(b.transpose() * yv));
        for i in 0..j {
            assert_abs_diff_eq!(state.theta_hat()[i], theta[i], epsilon = 1e-7);
        }
    }

    #[test]
    fn over_parameterized_fit_is_rejected() {
        let spec = BasisSpec::uniform(1, 4, 10, BoundaryScheme::Clamped).unwrap();
        let prior = PriorSpec::identity_for(&spec, NoiseModel::EmpiricalBayes).unwrap();
        let pts = line_points(5);
        let y = vec![0.0; 5];
        assert!(matches!(
            fit(&spec, &prior, &pts, &y),
            Err(Error::OverParameterized { .. })
        ));
    }

    #[test]
    fn sigma_posterior_closed_forms() {
        let s = SigmaPosterior::from_parts(6.0, 2.0, 0, 0.0);
        assert_eq!(s.shape, 3.0);
        assert_eq!(s.rate, 1.0);
        assert_abs_diff_eq!(s.mean(), 0.5, epsilon = 1e-15);

        let s = SigmaPosterior::from_parts(6.0, 2.0, 100, 0.1);
        assert_eq!(s.shape, 53.0);
        assert_eq!(s.rate, 6.0);
        assert_abs_diff_eq!(s.mean(), 6.0 / 52.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            s.variance(),
            36.0 / (52.0 * 52.0 * 51.0),
            epsilon = 1e-18
        );
    }

    #[test]
    fn sigma_posterior_requires_ig_mode() {
        let spec = BasisSpec::uniform(1, 3, 2, BoundaryScheme::Clamped).unwrap();
        let prior = PriorSpec::identity_for(&spec, NoiseModel::EmpiricalBayes).unwrap();
        let pts = line_points(10);
        let y = vec![0.5; 10];
        let state = fit(&spec, &prior, &pts, &y).unwrap();
        assert!(matches!(
            state.sigma_posterior(),
            Err(Error::WrongNoiseMode { .. })
        ));
    }

    #[test]
    fn sampler_matches_ig_moments() {
        let s = SigmaPosterior::from_parts(6.0, 2.0, 100, 0.1);
        let mut rng = derive_rng(77, &[]);
        let m = 100_000;
        let draws: Vec<f64> = (0..m).map(|_| s.draw_sigma_sq(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / m as f64;
        let var = draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (m - 1) as f64;
        let se_mean = (s.variance() / m as f64).sqrt();
        assert!((mean - s.mean()).abs() < 3.0 * se_mean);
        assert!((var - s.variance()).abs() < 0.05 * s.variance());
    }

    #[test]
    fn mean_routes_agree() {
        // b^T W_r theta_hat == A_r(x) Y + c_r(x) eta via explicit solves.
        let spec = BasisSpec::uniform(1, 4, 5, BoundaryScheme::Clamped).unwrap();
        let j = spec.total_basis();
        let eta: Vec<f64> = (0..j).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.1).collect();
        let prior = PriorSpec::new(
            eta,
            BandedSymMatrix::identity(&spec.basis_counts()),
            NoiseModel::EmpiricalBayes,
        )
        .unwrap();
        let pts = line_points(50);
        let mut rng = derive_rng(4, &[]);
        let y: Vec<f64> = pts
            .iter()
            .map(|x| x[0] * x[0] + 0.1 * rand::Rng::gen::<f64>(&mut rng))
            .collect();
        let state = fit(&spec, &prior, &pts, &y).unwrap();

        for r in [[0usize], [1]] {
            let wr = state.deriv_op(&r).unwrap();
            for x in [0.0, 0.33, 0.8, 1.0] {
                let route_a = state.mean_deriv(&r, &[x]).unwrap();
                let u = wr.transpose_mul_sparse(&spec.eval_tensor_basis(&[x], &r).unwrap());
                let s = state.chol().solve(&u).unwrap();
                let ar_y: f64 = s
                    .iter()
                    .zip(state.b_t_y().unwrap())
                    .map(|(a, b)| a * b)
                    .sum();
                let cr_eta: f64 = s
                    .iter()
                    .zip(state.omega_inv_eta())
                    .map(|(a, b)| a * b)
                    .sum();
                assert_abs_diff_eq!(route_a, ar_y + cr_eta, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn zero_data_zero_eta_gives_zero_mean() {
        let spec = BasisSpec::uniform(1, 4, 3, BoundaryScheme::Clamped).unwrap();
        let prior = PriorSpec::identity_for(&spec, NoiseModel::EmpiricalBayes).unwrap();
        let pts = line_points(20);
        let y = vec![0.0; 20];
        let state = fit(&spec, &prior, &pts, &y).unwrap();
        for r in [[0usize], [1], [2]] {
            for x in [0.0, 0.4, 1.0] {
                assert_eq!(state.mean_deriv(&r, &[x]).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn covariance_kernel_is_psd() {
        let spec = BasisSpec::uniform(1, 4, 4, BoundaryScheme::Clamped).unwrap();
        let prior = PriorSpec::identity_for(&spec, NoiseModel::EmpiricalBayes).unwrap();
        let pts = line_points(30);
        let y: Vec<f64> = pts.iter().map(|x| x[0].powi(3)).collect();
        let state = fit(&spec, &prior, &pts, &y).unwrap();
        let mut rng = derive_rng(8, &[]);
        for r in [[0usize], [1]] {
            for _ in 0..25 {
                let x = [rand::Rng::gen::<f64>(&mut rng)];
                let yv = [rand::Rng::gen::<f64>(&mut rng)];
                let vxx = state.var_deriv(&r, &x).unwrap();
                let vyy = state.var_deriv(&r, &yv).unwrap();
                let cxy = state.cov_deriv(&r, &x, &yv).unwrap();
                assert!(vxx >= 0.0);
                assert!(cxy.abs() <= (vxx * vyy).sqrt() + 1e-12);
            }
        }
    }

    #[test]
    fn prior_only_covariance_is_basis_norm() {
        let spec = BasisSpec::uniform(1, 4, 3, BoundaryScheme::Clamped).unwrap();
        let prior = PriorSpec::identity_for(&spec, NoiseModel::EmpiricalBayes).unwrap();
        let state = fit(&spec, &prior, &[], &[]).unwrap();
        for x in [0.0, 0.21, 0.77, 1.0] {
            let sb = spec.eval_tensor_basis(&[x], &[0]).unwrap();
            let norm_sq: f64 = sb.values.iter().map(|v| v * v).sum();
            assert_abs_diff_eq!(state.var_deriv(&[0], &[x]).unwrap(), norm_sq, epsilon = 1e-12);
        }
    }

    #[test]
    fn covariance_matches_dense_inverse_oracle() {
        let spec = BasisSpec::uniform(1, 4, 4, BoundaryScheme::Clamped).unwrap();
        let prior = PriorSpec::identity_for(&spec, NoiseModel::EmpiricalBayes).unwrap();
        let pts = line_points(25);
        let y: Vec<f64> = pts.iter().map(|x| (2.0 * x[0]).cos()).collect();
        let state = fit(&spec, &prior, &pts, &y).unwrap();

        let dense = state.precision().to_dense();
        let j = spec.total_basis();
        let p = DMatrix::from_fn(j, j, |i, jx| dense[i][jx]);
        let p_inv = p.clone().try_inverse().unwrap();

        let r = [1usize];
        let wr = state.deriv_op(&r).unwrap();
        for (x, yv) in [(0.1, 0.9), (0.4, 0.4), (0.77, 0.3)] {
            let ux = wr.transpose_mul_sparse(&spec.eval_tensor_basis(&[x], &r).unwrap());
            let uy = wr.transpose_mul_sparse(&spec.eval_tensor_basis(&[yv], &r).unwrap());
            let uxv = DVector::from_column_slice(&ux);
            let uyv = DVector::from_column_slice(&uy);
            let expect = (uxv.transpose() * &p_inv * uyv)[(0, 0)];
            let got = state.cov_deriv(&r, &[x], &[yv]).unwrap();
            assert_abs_diff_eq!(got, expect, epsilon = 1e-10 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn sigma_hat_matches_dense_full_oracle() {
        // J-dimensional identity vs the literal (B Omega B^T + I)^{-1} form.
        let spec = BasisSpec::uniform(1, 4, 4, BoundaryScheme::Clamped).unwrap();
        let j = spec.total_basis();
        let eta: Vec<f64> = (0..j).map(|i| 0.05 * i as f64).collect();
        let prior = PriorSpec::new(
            eta.clone(),
            BandedSymMatrix::identity(&spec.basis_counts()),
            NoiseModel::EmpiricalBayes,
        )
        .unwrap();
        let n = 60;
        let pts = line_points(n);
        let mut rng = derive_rng(91, &[]);
        let y: Vec<f64> = pts
            .iter()
            .map(|x| (4.0 * x[0]).sin() + 0.3 * (rand::Rng::gen::<f64>(&mut rng) - 0.5))
            .collect();
        let state = fit(&spec, &prior, &pts, &y).unwrap();

        let b = dense_design(&spec, &pts);
        let omega = DMatrix::<f64>::identity(j, j);
        let u = (&b * omega * b.transpose() + DMatrix::<f64>::identity(n, n))
            .try_inverse()
            .unwrap();
        let resid = DVector::from_column_slice(&y) - &b * DVector::from_column_slice(&eta);
        let direct = (resid.transpose() * u * &resid)[(0, 0)] / n as f64;
        assert!(
            (state.sigma_hat_sq() - direct).abs() <= 1e-8 * direct,
            "identity {} vs dense {}",
            state.sigma_hat_sq(),
            direct
        );
    }

    #[test]
    fn hat_matrix_eigenvalues_in_unit_interval() {
        let spec = BasisSpec::uniform(1, 4, 3, BoundaryScheme::Clamped).unwrap();
        let prior = PriorSpec::identity_for(&spec, NoiseModel::EmpiricalBayes).unwrap();
        let n = 25;
        let pts = line_points(n);
        let y: Vec<f64> = pts.iter().map(|x| x[0]).collect();
        let state = fit(&spec, &prior, &pts, &y).unwrap();
        let b = dense_design(&spec, &pts);
        let j = spec.total_basis();
        let dense = state.precision().to_dense();
        let p = DMatrix::from_fn(j, j, |i, jx| dense[i][jx]);
        let h = &b * p.try_inverse().unwrap() * b.transpose();
        let eig = h.symmetric_eigen().eigenvalues;
        for lam in eig.iter() {
            assert!(*lam > -1e-12 && *lam < 1.0, "hat eigenvalue {lam}");
        }
    }

    #[test]
    fn sample_with_zero_sigma_is_posterior_mean() {
        let spec = BasisSpec::uniform(1, 4, 3, BoundaryScheme::Clamped).unwrap();
        let prior = PriorSpec::identity_for(&spec, NoiseModel::EmpiricalBayes).unwrap();
        let pts = line_points(20);
        let y: Vec<f64> = pts.iter().map(|x| x[0] * (1.0 - x[0])).collect();
        let state = fit(&spec, &prior, &pts, &y).unwrap();
        let grid: Vec<Vec<f64>> = (0..11).map(|i| vec![i as f64 / 10.0]).collect();
        let mut rng = derive_rng(1, &[]);
        let draw = state.sample_function(&[0], 0.0, &grid, &mut rng).unwrap();
        for (g, v) in grid.iter().zip(&draw) {
            assert_abs_diff_eq!(*v, state.mean_deriv(&[0], g).unwrap(), epsilon = 1e-12);
        }
    }

    #[test]
    fn sample_moments_match_posterior_law() {
        let spec = BasisSpec::uniform(1, 4, 2, BoundaryScheme::Clamped).unwrap();
        let prior = PriorSpec::identity_for(&spec, NoiseModel::EmpiricalBayes).unwrap();
        let pts = line_points(30);
        let y: Vec<f64> = pts.iter().map(|x| (x[0] * 5.0).sin()).collect();
        let state = fit(&spec, &prior, &pts, &y).unwrap();
        let sigma = 0.4;
        let xa = vec![0.3];
        let xb = vec![0.7];
        let grid = vec![xa.clone(), xb.clone()];
        let m = 20_000;
        let mut rng = derive_rng(55, &[]);
        let mut sums = [0.0f64; 2];
        let mut prods = 0.0f64;
        let mut sq = [0.0f64; 2];
        let mut draws = Vec::with_capacity(m);
        for _ in 0..m {
            let d = state.sample_function(&[0], sigma, &grid, &mut rng).unwrap();
            sums[0] += d[0];
            sums[1] += d[1];
            sq[0] += d[0] * d[0];
            sq[1] += d[1] * d[1];
            prods += d[0] * d[1];
            draws.push(d);
        }
        let mean = [sums[0] / m as f64, sums[1] / m as f64];
        let var0 = sq[0] / m as f64 - mean[0] * mean[0];
        let cov01 = prods / m as f64 - mean[0] * mean[1];

        let exp_mean0 = state.mean_deriv(&[0], &xa).unwrap();
        let exp_var0 = sigma * sigma * state.var_deriv(&[0], &xa).unwrap();
        let exp_cov = sigma * sigma * state.cov_deriv(&[0], &xa, &xb).unwrap();
        let se_mean = (exp_var0 / m as f64).sqrt();
        assert!((mean[0] - exp_mean0).abs() < 3.0 * se_mean);
        assert!((var0 - exp_var0).abs() < 0.05 * exp_var0);
        assert!((cov01 - exp_cov).abs() < 0.05 * exp_cov.abs().max(exp_var0));
    }

    #[test]
    fn export_roundtrip_preserves_predictions() {
        let spec = BasisSpec::uniform(1, 4, 4, BoundaryScheme::Clamped).unwrap();
        let prior =
            PriorSpec::identity_for(&spec, NoiseModel::HierarchicalIg { beta1: 6.0, beta2: 2.0 })
                .unwrap();
        let pts = line_points(40);
        let y: Vec<f64> = pts.iter().map(|x| x[0].exp()).collect();
        let state = fit(&spec, &prior, &pts, &y).unwrap();
        let json = serde_json::to_string(&state.to_export()).unwrap();
        let back = PosteriorState::from_export(serde_json::from_str(&json).unwrap()).unwrap();
        for x in [0.0, 0.5, 1.0] {
            assert_abs_diff_eq!(
                back.mean_deriv(&[1], &[x]).unwrap(),
                state.mean_deriv(&[1], &[x]).unwrap(),
                epsilon = 1e-12
            );
            assert_abs_diff_eq!(
                back.var_deriv(&[0], &[x]).unwrap(),
                state.var_deriv(&[0], &[x]).unwrap(),
                epsilon = 1e-12
            );
        }
        assert_eq!(back.sigma_hat_sq(), state.sigma_hat_sq());
    }
}
