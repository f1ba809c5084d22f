//! Reliability of conditional forecasts, baseline models and structural
//! checks of the network family.

mod copula;
mod demos;
mod marginals;
mod mkde;
mod reliability;

pub use copula::{
    copula_cdf, copula_conditional_cdf, polylog_nonpositive, CopulaFamily, CopulaForecaster,
    CopulaSpec, U_FLOOR,
};
pub use demos::{
    coupling_fit_test, factorization_residual, mixed_partial, mixed_partial_demo, FitConfig,
    FitOutcome, FitReport, FitTarget, MixedPartialDemoConfig, MixedPartialDemoReport,
    MixedPartialScan, PositiveNet, MIXED_STEP,
};
pub use marginals::{marginal_forecasts, marginal_models, oracle_laws, single_margin};
pub use mkde::{MkdeForecaster, MkdeModel};
pub use reliability::{
    levels, reliability, reliability_by_quantiles, unit_step, ConditionalForecaster,
    DimReliability, JdanForecaster, OracleForecaster, ReliabilityReport, MAX_FAILURE_SHARE,
    N_LEVELS,
};
