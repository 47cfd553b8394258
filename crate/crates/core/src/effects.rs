//! Short-difference group-time moments and their chained aggregation.
//!
//! Each moment contrasts the outcome difference `Y_t - Y_{t-k}` between a
//! treated cell (one adoption cohort, filtered by spillover status) and a
//! comparison cell (never- or not-yet-treated units, or the unexposed part of
//! the same cohort), with the comparison side optionally reweighted by
//! propensity odds `p / (1 - p)` as in doubly-robust DiD estimators. Both
//! sides are self-normalized: the weights on each side sum to one over
//! contributing units.
//!
//! Chaining the adjacent-period moments from the first post-anticipation
//! period through `t` recovers the long-difference group-time effect on
//! unbalanced panels where no unit needs to be observed over the whole span.
//!
//! # References
//!
//! - Callaway & Sant'Anna (2021), *Journal of Econometrics* 225(2), for the
//!   group-time parameterization and the never/not-yet-treated comparisons.
//! - Abadie (2005), *Review of Economic Studies* 72(1), for the propensity
//!   odds reweighting of the comparison side.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{Cohort, ComparisonGroup, PanelDataset};
use crate::propensity::{PScoreTable, SpilloverFilter};

/// Estimand targeted by a moment or a chained effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Target {
    /// Pooled effect ignoring spillover status (the conventional estimator).
    Att,
    /// Direct effect on treated units never subject to spillovers.
    Att0,
    /// Total effect on treated units subject to spillovers.
    AttS,
    /// Spillover contrast among treated units (exposed minus unexposed).
    Ast,
}

impl Target {
    /// Stable lowercase name used in output files.
    pub fn as_str(self) -> &'static str {
        match self {
            Target::Att => "att",
            Target::Att0 => "att0",
            Target::AttS => "atts",
            Target::Ast => "ast",
        }
    }

    /// Parses the lowercase name.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "att" => Some(Target::Att),
            "att0" => Some(Target::Att0),
            "atts" => Some(Target::AttS),
            "ast" => Some(Target::Ast),
            _ => None,
        }
    }
}

impl std::fmt::Display for Target {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Propensity scores for the comparison side of a moment.
#[derive(Debug, Clone, Copy)]
pub enum PScoreSource<'a> {
    /// Equal weights (the no-covariates path).
    Uniform,
    /// Odds weights `p / (1 - p)` from a fitted table.
    Table(&'a PScoreTable),
}

/// Which side of the contrast a unit contributes to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    /// Treated (or exposed, for the within-cohort contrast) side.
    Treated,
    /// Comparison (or unexposed) side.
    Comparison,
}

/// One unit's contribution to a moment: its normalized weight and outcome
/// difference. The moment estimate equals the sum of treated-side
/// `weight * dy` minus the sum of comparison-side `weight * dy`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitContribution {
    /// Index into the dataset's sorted unit list.
    pub unit_idx: usize,
    /// Side of the contrast.
    pub side: Side,
    /// Normalized weight; weights sum to one within each side.
    pub weight: f64,
    /// Outcome difference `y_t - y_{t-k}`.
    pub dy: f64,
}

/// A short-difference moment `Delta_k(g, t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaMoment {
    /// Estimand this moment feeds.
    pub target: Target,
    /// Cohort label.
    pub g: i64,
    /// Later period label.
    pub t: i64,
    /// Difference order in grid positions.
    pub k: usize,
    /// Treated-side mean minus comparison-side weighted mean.
    pub estimate: f64,
    /// Treated-side weighted mean of `dy`.
    pub treated_mean: f64,
    /// Comparison-side weighted mean of `dy`.
    pub comparison_mean: f64,
    /// Treated-side cell size.
    pub n_treated: usize,
    /// Comparison-side cell size.
    pub n_comparison: usize,
    /// Per-unit weights and differences.
    pub contributions: Vec<UnitContribution>,
}

impl DeltaMoment {
    /// Adds `scale` times this moment's influence-function contribution of
    /// each unit into `out` (indexed by unit): `w * (dy - side mean)`, with a
    /// negative sign on the comparison side. Perturbing the estimate by
    /// cluster multipliers is then linear in these terms.
    pub fn accumulate_influence(&self, out: &mut [f64], scale: f64) {
        for c in &self.contributions {
            let psi = match c.side {
                Side::Treated => c.weight * (c.dy - self.treated_mean),
                Side::Comparison => -c.weight * (c.dy - self.comparison_mean),
            };
            out[c.unit_idx] += scale * psi;
        }
    }
}

/// Comparison-side definition for a moment.
#[derive(Debug, Clone, Copy)]
enum CompSide {
    /// Untreated units per the comparison-group rule, with a spillover filter.
    Group(ComparisonGroup, SpilloverFilter),
    /// Unexposed members of the same cohort (within-cohort contrast).
    WithinCohort,
}

fn build_moment(
    ds: &PanelDataset,
    target: Target,
    g: i64,
    t: i64,
    k: usize,
    treated_filter: SpilloverFilter,
    comp_side: CompSide,
    pscores: PScoreSource<'_>,
) -> Result<DeltaMoment> {
    let g_pos = ds
        .cohort_pos(Cohort::Treated(g))
        .ok_or_else(|| Error::Validation(format!("cohort {g} not treated in sample")))?;
    let t_pos = ds
        .period_pos(t)
        .ok_or_else(|| Error::Validation(format!("period {t} not in panel")))?;
    if k == 0 || t_pos < k {
        return Err(Error::Validation(format!(
            "difference order k = {k} infeasible at period {t}"
        )));
    }
    let lo = ds.periods()[t_pos - k];

    let mut treated: Vec<(usize, f64)> = Vec::new();
    let mut comparison: Vec<(usize, f64, f64)> = Vec::new(); // (idx, dy, raw weight)
    for (i, u) in ds.units().iter().enumerate() {
        let Some(dy) = u.outcome_diff(lo, t) else {
            continue;
        };
        let in_cohort = ds.cohort_pos(u.cohort) == Some(g_pos);
        if in_cohort && treated_filter.accepts(u.spillover_ever) {
            treated.push((i, dy));
            continue;
        }
        let in_comp = match comp_side {
            CompSide::Group(cg, f) => {
                !in_cohort && ds.in_comparison(u, cg, g_pos, t_pos) && f.accepts(u.spillover_ever)
            }
            CompSide::WithinCohort => in_cohort && !u.spillover_ever,
        };
        if in_comp {
            let raw = match pscores {
                PScoreSource::Uniform => 1.0,
                PScoreSource::Table(table) => {
                    let p = *table.scores.get(&i).ok_or_else(|| {
                        Error::Validation(format!(
                            "no propensity score for unit {} in cell (g = {g}, t = {t}, k = {k})",
                            u.unit_id
                        ))
                    })?;
                    p / (1.0 - p)
                }
            };
            comparison.push((i, dy, raw));
        }
    }

    if treated.is_empty() || comparison.is_empty() {
        return Err(Error::EmptyCell(format!(
            "{} cell (g = {g}, t = {t}, k = {k}): {} treated, {} comparison",
            target,
            treated.len(),
            comparison.len()
        )));
    }
    let comp_total: f64 = comparison.iter().map(|&(_, _, w)| w).sum();
    if !(comp_total.is_finite() && comp_total > 0.0) {
        return Err(Error::DegenerateWeights(format!(
            "comparison weights sum to {comp_total} in cell (g = {g}, t = {t}, k = {k})"
        )));
    }

    let w_t = 1.0 / treated.len() as f64;
    let mut contributions = Vec::with_capacity(treated.len() + comparison.len());
    let mut treated_mean = 0.0;
    for &(i, dy) in &treated {
        treated_mean += w_t * dy;
        contributions.push(UnitContribution {
            unit_idx: i,
            side: Side::Treated,
            weight: w_t,
            dy,
        });
    }
    let mut comparison_mean = 0.0;
    for &(i, dy, raw) in &comparison {
        let w = raw / comp_total;
        comparison_mean += w * dy;
        contributions.push(UnitContribution {
            unit_idx: i,
            side: Side::Comparison,
            weight: w,
            dy,
        });
    }

    Ok(DeltaMoment {
        target,
        g,
        t,
        k,
        estimate: treated_mean - comparison_mean,
        treated_mean,
        comparison_mean,
        n_treated: treated.len(),
        n_comparison: comparison.len(),
        contributions,
    })
}

/// Direct-effect moment: spillover-free cohort members against spillover-free
/// comparison units (odds-weighted when a score table is supplied).
pub fn delta_att0(
    ds: &PanelDataset,
    g: i64,
    t: i64,
    k: usize,
    cg: ComparisonGroup,
    pscores: PScoreSource<'_>,
) -> Result<DeltaMoment> {
    build_moment(
        ds,
        Target::Att0,
        g,
        t,
        k,
        SpilloverFilter::Unexposed,
        CompSide::Group(cg, SpilloverFilter::Unexposed),
        pscores,
    )
}

/// Total-effect moment for exposed cohort members. The comparison side enters
/// regardless of spillover status: never-treated units carry no exposure by
/// construction, so a joint exposure restriction would empty it.
pub fn delta_atts(
    ds: &PanelDataset,
    g: i64,
    t: i64,
    k: usize,
    cg: ComparisonGroup,
    pscores: PScoreSource<'_>,
) -> Result<DeltaMoment> {
    build_moment(
        ds,
        Target::AttS,
        g,
        t,
        k,
        SpilloverFilter::Exposed,
        CompSide::Group(cg, SpilloverFilter::Any),
        pscores,
    )
}

/// Pooled moment ignoring spillover status on both sides (the conventional
/// chained-DiD building block).
pub fn delta_att_pooled(
    ds: &PanelDataset,
    g: i64,
    t: i64,
    k: usize,
    cg: ComparisonGroup,
    pscores: PScoreSource<'_>,
) -> Result<DeltaMoment> {
    build_moment(
        ds,
        Target::Att,
        g,
        t,
        k,
        SpilloverFilter::Any,
        CompSide::Group(cg, SpilloverFilter::Any),
        pscores,
    )
}

/// Within-cohort spillover contrast: exposed members against unexposed
/// members, unweighted (the unconditional form).
pub fn delta_ast(ds: &PanelDataset, g: i64, t: i64, k: usize) -> Result<DeltaMoment> {
    build_moment(
        ds,
        Target::Ast,
        g,
        t,
        k,
        SpilloverFilter::Exposed,
        CompSide::WithinCohort,
        PScoreSource::Uniform,
    )
}

/// Covariate-adjusted within-cohort spillover contrast: the unexposed side is
/// reweighted by the odds of a within-cohort exposure propensity
/// `P(S = 1 | X, G_g = 1)` supplied as a score table.
pub fn delta_ast_adjusted(
    ds: &PanelDataset,
    g: i64,
    t: i64,
    k: usize,
    spill_scores: &PScoreTable,
) -> Result<DeltaMoment> {
    build_moment(
        ds,
        Target::Ast,
        g,
        t,
        k,
        SpilloverFilter::Exposed,
        CompSide::WithinCohort,
        PScoreSource::Table(spill_scores),
    )
}

/// How a group-time effect was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// Sum of adjacent-period moments.
    Chain,
    /// Stacked difference system solved with identity weighting.
    GmmIdentity,
    /// Stacked difference system solved with a two-step weighting matrix.
    GmmTwoStep,
    /// Two-way fixed-effects regression.
    Regression,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Chain => "chain",
            Method::GmmIdentity => "gmm-id",
            Method::GmmTwoStep => "gmm-2step",
            Method::Regression => "regression",
        };
        f.write_str(s)
    }
}

/// A group-time effect estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTimeEffect {
    /// Estimand.
    pub target: Target,
    /// Cohort label.
    pub g: i64,
    /// Period label.
    pub t: i64,
    /// Anticipation window (in grid positions) used for the base period.
    pub anticipation: usize,
    /// Point estimate.
    pub estimate: f64,
    /// Standard error, when inference has been run.
    pub se: Option<f64>,
    /// Estimation method.
    pub method: Method,
    /// True when `t` precedes the anticipation-adjusted treatment date; such
    /// estimates are pre-trend placebos measured against the base period.
    pub placebo: bool,
}

/// The moment span a chained effect sums over.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSpan {
    /// Later-period labels of the adjacent-period moments, ascending.
    pub tau_labels: Vec<i64>,
    /// +1 for post-base effects, -1 for placebos (long difference back to the
    /// base period with reversed sign).
    pub sign: f64,
    /// Whether `t` is a pre-treatment (placebo) period.
    pub placebo: bool,
}

/// Periods whose adjacent moments enter the chained effect at (g, t) with
/// anticipation `delta`: forward from the base period for post periods,
/// backward to the base period (sign reversed) for placebos. The base period
/// itself gets an empty span, so its chained value is exactly zero.
pub fn chain_span(ds: &PanelDataset, g: i64, t: i64, anticipation: usize) -> Result<ChainSpan> {
    let g_pos = ds
        .cohort_pos(Cohort::Treated(g))
        .ok_or_else(|| Error::Validation(format!("cohort {g} not treated in sample")))?;
    let t_pos = ds
        .period_pos(t)
        .ok_or_else(|| Error::Validation(format!("period {t} not in panel")))?;
    let base = g_pos as i64 - anticipation as i64 - 1;
    if base < 0 {
        return Err(Error::Validation(format!(
            "cohort {g} has no base period with anticipation {anticipation}"
        )));
    }
    let base = base as usize;
    let placebo = t_pos < g_pos - anticipation;
    let (range, sign) = if t_pos > base {
        (base + 1..=t_pos, 1.0)
    } else if t_pos == base {
        #[allow(clippy::reversed_empty_ranges)]
        (1..=0, 1.0)
    } else {
        (t_pos + 1..=base, -1.0)
    };
    Ok(ChainSpan {
        tau_labels: range.map(|p| ds.periods()[p]).collect(),
        sign,
        placebo,
    })
}

/// Chains adjacent-period moments (keyed by later-period label) into the
/// group-time effect at (g, t). Fails with [`Error::MissingLink`] when a
/// required moment is absent.
pub fn chain(
    ds: &PanelDataset,
    target: Target,
    g: i64,
    t: i64,
    anticipation: usize,
    moments: &BTreeMap<i64, DeltaMoment>,
) -> Result<GroupTimeEffect> {
    let span = chain_span(ds, g, t, anticipation)?;
    let mut estimate = 0.0;
    for tau in &span.tau_labels {
        let m = moments.get(tau).ok_or(Error::MissingLink {
            target: target.as_str(),
            g,
            tau: *tau,
        })?;
        estimate += span.sign * m.estimate;
    }
    Ok(GroupTimeEffect {
        target,
        g,
        t,
        anticipation,
        estimate,
        se: None,
        method: Method::Chain,
        placebo: span.placebo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{Observation, UnitRecord};

    fn unit(id: &str, cohort: Cohort, spill: bool, ys: &[(i64, f64)]) -> UnitRecord {
        UnitRecord {
            unit_id: id.into(),
            cohort,
            spillover_ever: spill,
            obs: ys
                .iter()
                .map(|&(t, y)| (t, Observation { y, covs: vec![] }))
                .collect(),
            trading: None,
        }
    }

    fn two_unit_panel() -> PanelDataset {
        let units = vec![
            unit("t", Cohort::Treated(2), false, &[(1, 0.0), (2, 4.0)]),
            unit("c", Cohort::Never, false, &[(1, 1.0), (2, 2.0)]),
        ];
        PanelDataset::new(units, vec![1, 2], vec![]).unwrap()
    }

    #[test]
    fn single_pair_difference() {
        let ds = two_unit_panel();
        let m = delta_att0(&ds, 2, 2, 1, ComparisonGroup::NeverTreated, PScoreSource::Uniform)
            .unwrap();
        assert!((m.estimate - 3.0).abs() < 1e-12);
        assert!((m.treated_mean - 4.0).abs() < 1e-12);
        assert!((m.comparison_mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weights_sum_to_one_and_reproduce_estimate() {
        let units = vec![
            unit("t1", Cohort::Treated(2), false, &[(1, 0.0), (2, 4.0)]),
            unit("t2", Cohort::Treated(2), false, &[(1, 0.5), (2, 1.5)]),
            unit("c1", Cohort::Never, false, &[(1, 1.0), (2, 2.0)]),
            unit("c2", Cohort::Never, false, &[(1, 0.0), (2, 0.4)]),
            unit("c3", Cohort::Never, false, &[(1, 0.0), (2, 2.0)]),
        ];
        let ds = PanelDataset::new(units, vec![1, 2], vec![]).unwrap();
        let m = delta_att0(&ds, 2, 2, 1, ComparisonGroup::NeverTreated, PScoreSource::Uniform)
            .unwrap();
        let (mut wt, mut wc, mut reconstructed) = (0.0, 0.0, 0.0);
        for c in &m.contributions {
            match c.side {
                Side::Treated => {
                    wt += c.weight;
                    reconstructed += c.weight * c.dy;
                }
                Side::Comparison => {
                    wc += c.weight;
                    reconstructed -= c.weight * c.dy;
                }
            }
            assert!(c.weight >= 0.0);
        }
        assert!((wt - 1.0).abs() < 1e-12);
        assert!((wc - 1.0).abs() < 1e-12);
        assert!((reconstructed - m.estimate).abs() < 1e-12);
    }

    #[test]
    fn influence_sums_to_zero_per_moment() {
        let ds = two_unit_panel();
        let m = delta_att0(&ds, 2, 2, 1, ComparisonGroup::NeverTreated, PScoreSource::Uniform)
            .unwrap();
        let mut psi = vec![0.0; ds.n_units()];
        m.accumulate_influence(&mut psi, 1.0);
        // Centered within each side, so each side sums to zero.
        assert!(psi.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn empty_cells_are_reported() {
        let ds = two_unit_panel();
        assert!(matches!(
            delta_atts(&ds, 2, 2, 1, ComparisonGroup::NeverTreated, PScoreSource::Uniform),
            Err(Error::EmptyCell(_))
        ));
        assert!(matches!(delta_ast(&ds, 2, 2, 1), Err(Error::EmptyCell(_))));
    }

    #[test]
    fn chain_sums_moments_and_flags_missing_links() {
        let units = vec![
            unit("t", Cohort::Treated(4), false, &[(1, 0.0), (2, 0.1), (3, 0.2), (4, 1.7), (5, 3.2)]),
            unit("c", Cohort::Never, false, &[(1, 0.0), (2, 0.1), (3, 0.2), (4, 0.2), (5, 0.2)]),
        ];
        let ds = PanelDataset::new(units, vec![1, 2, 3, 4, 5], vec![]).unwrap();
        let cg = ComparisonGroup::NeverTreated;
        let mut moments = BTreeMap::new();
        for t in [2i64, 3, 4, 5] {
            moments.insert(t, delta_att0(&ds, 4, t, 1, cg, PScoreSource::Uniform).unwrap());
        }

        // Post effect at t = 5: (1.7 - 0.2) + (1.5 - 0.0) = 1.5 + 1.5 = 3.
        let e = chain(&ds, Target::Att0, 4, 5, 0, &moments).unwrap();
        assert!((e.estimate - 3.0).abs() < 1e-12);
        assert!(!e.placebo);

        // Base period is exactly zero and flagged pre-treatment.
        let e = chain(&ds, Target::Att0, 4, 3, 0, &moments).unwrap();
        assert_eq!(e.estimate, 0.0);
        assert!(e.placebo);

        // Placebo at t = 1: minus the sum of the moments at tau = 2, 3.
        let e = chain(&ds, Target::Att0, 4, 1, 0, &moments).unwrap();
        let want = -(moments[&2].estimate + moments[&3].estimate);
        assert!((e.estimate - want).abs() < 1e-12);
        assert!(e.placebo);

        let mut broken = moments.clone();
        broken.remove(&5);
        assert!(matches!(
            chain(&ds, Target::Att0, 4, 5, 0, &broken),
            Err(Error::MissingLink { tau: 5, .. })
        ));
    }

    #[test]
    fn anticipation_shifts_the_base_period() {
        let units = vec![
            unit("t", Cohort::Treated(4), false, &[(1, 0.0), (2, 0.0), (3, 1.0), (4, 2.0)]),
            unit("c", Cohort::Never, false, &[(1, 0.0), (2, 0.0), (3, 0.0), (4, 0.0)]),
        ];
        let ds = PanelDataset::new(units, vec![1, 2, 3, 4], vec![]).unwrap();
        let span = chain_span(&ds, 4, 4, 1).unwrap();
        // Base moves to position of label 2; the chain covers tau = 3, 4.
        assert_eq!(span.tau_labels, vec![3, 4]);
        assert!(!span.placebo);
        // t = 3 is inside the anticipation window: estimated, not a placebo.
        let span = chain_span(&ds, 4, 3, 1).unwrap();
        assert_eq!(span.tau_labels, vec![3]);
        assert!(!span.placebo);
        // No base period once anticipation exhausts the pre-history.
        let units2 = vec![
            unit("t", Cohort::Treated(2), false, &[(1, 0.0), (2, 1.0)]),
            unit("c", Cohort::Never, false, &[(1, 0.0), (2, 0.0)]),
        ];
        let ds2 = PanelDataset::new(units2, vec![1, 2], vec![]).unwrap();
        assert!(chain_span(&ds2, 2, 2, 1).is_err());
    }
}
