//! Chained difference-in-differences estimation for staggered-adoption panels
//! with spillovers onto treated units.
//!
//! The crate estimates group-time average treatment effects from short
//! (`k`-period) outcome differences that are chained — or stacked into a GMM
//! system — so that unbalanced panels contribute every pair of periods a unit
//! is observed in, in the spirit of Callaway & Sant'Anna (2021) for the
//! group-time parameterization. Treated units are split by an
//! exposed-to-spillovers indicator, which separates the direct effect on
//! unexposed units, the total effect on exposed units, and their within-cohort
//! contrast. Inference is by a cluster-multiplier bootstrap over the
//! estimators' influence functions.
//!
//! Modules:
//!
//! - [`panel`]: dataset model, validation, and spillover derivation.
//! - [`propensity`]: logistic propensity scores for the comparison weighting.
//! - [`effects`]: short-difference moments and chained group-time effects.
//! - [`gmm`]: stacked moment systems for unbalanced panels.
//! - [`inference`]: multiplier bootstrap, bands, and pre-trend tests.
//! - [`aggregate`]: event-study, overall, and balanced aggregations.
//! - [`regression`]: two-way fixed-effects benchmark.
//! - [`estimator`]: end-to-end orchestration.
//! - [`mc`]: simulation laboratory.

pub mod aggregate;
pub mod effects;
pub mod error;
pub mod estimator;
pub mod gmm;
pub mod inference;
pub mod mc;
pub mod panel;
pub mod propensity;
pub mod regression;

pub use aggregate::{balanced_event_study, event_study, overall, AggregateEstimate, EventStudy};
pub use effects::{
    chain, chain_span, delta_ast, delta_ast_adjusted, delta_att0, delta_att_pooled, delta_atts,
    ChainSpan, DeltaMoment, GroupTimeEffect, Method, PScoreSource, Side, Target, UnitContribution,
};
pub use error::{Error, Result};
pub use estimator::{
    estimate_target, refit_bootstrap, unit_cluster_keys, EstimatorConfig, KSet, RefitBootstrap,
    TargetEstimates,
};
pub use gmm::{build_gmm, gmm_solve, GmmSolution, GmmSystem, GmmWindow, OmegaSpec, Weighting};
pub use inference::{
    bootstrap, derive_seed, normal_quantile, pretrend_test, quantile_sorted, BootstrapConfig,
    BootstrapResult, Multiplier, ParamFamily, PretrendTest, NORMAL_IQR,
};
pub use mc::{generate, run_study, true_effect, DgpConfig, McCell, McReport};
pub use panel::{
    derive_spillover, validate, AbsorbingPolicy, CellCount, Cohort, ComparisonGroup, Observation,
    PanelDataset, SpilloverDeriveReport, UnitRecord, ValidationReport, Violation,
};
pub use propensity::{
    fit_logit, fit_pscore, generalized_pscore, LogitConfig, LogitFit, PScoreTable, SpilloverFilter,
};
pub use regression::{twfe_event_study, TwfeEstimate, TwfeFit};
