//! Conjugate Bayesian nonparametric regression with tensor-product B-splines:
//! posterior inference for a regression function and its mixed partial
//! derivatives, empirical/hierarchical Bayes noise estimation, pointwise,
//! L2 and sup-norm credible sets, and a Monte Carlo coverage harness.

pub mod basis;
pub mod credible;
pub mod deriv;
pub mod design;
pub mod error;
pub mod plot;
pub mod posterior;
pub mod simulate;
pub mod stats;
pub mod stream;

pub use basis::{make_knots, BasisSpec, BoundaryScheme, KnotVector, MultiIndex, SparseBasisVector};
pub use deriv::{build_deriv_operator, eval_derivative, DerivOperator};
pub use design::{
    add_prior_precision, build_design, empirical_cdf_sup_distance, factorize, gram,
    read_data_csv, BandedCholesky, BandedSymMatrix, Dataset, DesignMatrix,
};
pub use credible::{band_csv, contains, l2_radius, pointwise_interval, sup_band, CredibleSet, Grid, Mode, QuantileEstimate, SetKind};
pub use error::{Error, Result};
pub use simulate::{
    coverage_curve_csv, f0_eval, gen_data, loocv_select_j, make_design, report_table_csv,
    run_coverage_experiment, CoverageReport, ErrorKind, ExperimentConfig, GammaSchedule,
    LoocvSelection, SpecTemplate, TrueFunction,
};
pub use posterior::{fit, FitExport, NoiseModel, PosteriorState, PriorSpec, SigmaPosterior};
