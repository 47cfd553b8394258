//! Error types shared across the crate.

use crate::propensity::LogitFit;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by estimation, inference, and data-handling routines.
///
/// Variants that can carry a partially useful result (for example a capped
/// logit fit under separation) attach it so callers can inspect or salvage.
#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    /// Input data violated a structural requirement (duplicates, unordered
    /// periods, missing comparison group, malformed configuration, ...).
    #[error("validation: {0}")]
    Validation(String),

    /// Logistic regression received labels that are all 0 or all 1.
    #[error("degenerate labels: all {0} in logit fit")]
    DegenerateLabels(u8),

    /// Logistic regression diverged: the coefficient sup-norm exceeded the cap
    /// while the likelihood was still improving (quasi-separation). The capped
    /// fit is attached for diagnostics.
    #[error("separation detected in logit fit (sup-norm cap {cap}); capped fit attached")]
    SeparationDetected {
        /// Sup-norm cap that was hit.
        cap: f64,
        /// Fit with coefficients scaled back to the cap.
        fit: Box<LogitFit>,
    },

    /// The weighted information matrix could not be factorized even after
    /// jitter escalation.
    #[error("ill-conditioned design in logit fit: {0}")]
    IllConditioned(String),

    /// A (g, t, k) cell has no treated or no comparison units observed at both
    /// periods.
    #[error("empty cell: {0}")]
    EmptyCell(String),

    /// Comparison-side weights summed to zero and cannot be normalized.
    #[error("degenerate weights: {0}")]
    DegenerateWeights(String),

    /// A chain is missing the short-difference moment at period `tau`.
    #[error("missing link in chain at tau = {tau} (target {target}, cohort {g})")]
    MissingLink {
        /// Target whose chain is broken.
        target: &'static str,
        /// Cohort.
        g: i64,
        /// Period whose moment is absent.
        tau: i64,
    },

    /// The GMM design matrix does not identify the listed parameters.
    #[error("rank-deficient GMM system; unidentified parameters: {0:?}")]
    RankDeficient(Vec<String>),

    /// The two-step weighting matrix stayed singular through ridge escalation.
    #[error("singular GMM weighting matrix (ridge escalated to epsilon = {max_epsilon})")]
    SingularOmega {
        /// Final relative ridge magnitude tried before giving up.
        max_epsilon: f64,
    },

    /// More than the tolerated share of bootstrap draws were non-finite.
    #[error("{excluded} of {total} bootstrap draws were non-finite (tolerance 10%)")]
    DegenerateDraws {
        /// Number of excluded draws.
        excluded: usize,
        /// Total draws requested.
        total: usize,
    },

    /// An aggregation requested an effect that was never estimated.
    #[error("missing effect for cohort {g} at event time {e}")]
    MissingEffect {
        /// Cohort.
        g: i64,
        /// Event time.
        e: i64,
    },

    /// No cohort satisfies the balanced-horizon requirement.
    #[error("no cohorts observed through event time {e_prime}")]
    NoBalancedCohorts {
        /// Requested common horizon.
        e_prime: i64,
    },

    /// The regression design is collinear; the listed columns were dropped.
    #[error("collinear regression design; dropped columns: {0:?}")]
    CollinearDesign(Vec<String>),

    /// A quantity defined only post-treatment was requested pre-treatment.
    #[error("pre-treatment query: {0}")]
    PreTreatmentQuery(String),

    /// A numerical routine failed outside the cases above.
    #[error("computation: {0}")]
    Computation(String),
}
