//! Panel data model for staggered-adoption designs with spillovers.
//!
//! A [`PanelDataset`] holds one record per unit with observations keyed by
//! integer period labels. Row presence is the single source of truth for
//! observation status: an operation never reads an outcome at an unobserved
//! (unit, period) pair. Treatment status is derived from the adoption cohort
//! (`D_it = 1` iff `t` is at or after the unit's first treated period), and
//! spillover exposure is a unit-level ever-flag that can be derived from a
//! per-period trading history.
//!
//! Period arithmetic (difference orders `k`, event times, base periods) is
//! carried out on *positions* in the sorted period list. For the canonical
//! consecutively-labeled panel (`t = 1..T`) positions and labels coincide; for
//! panels with label gaps, positions chain across adjacent observed waves.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adoption cohort of a unit: the first treated period, or never treated.
///
/// `Never` orders strictly above every `Treated(g)`, so cohort comparisons
/// against period labels work uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Cohort {
    /// First treated at the period with this label (or the first panel period
    /// at or after it, when the label falls between waves).
    Treated(i64),
    /// Never treated.
    Never,
}

impl Cohort {
    /// True when the unit is never treated.
    pub fn is_never(self) -> bool {
        matches!(self, Cohort::Never)
    }

    /// The cohort label, if treated.
    pub fn label(self) -> Option<i64> {
        match self {
            Cohort::Treated(g) => Some(g),
            Cohort::Never => None,
        }
    }
}

impl std::fmt::Display for Cohort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cohort::Treated(g) => write!(f, "{g}"),
            Cohort::Never => write!(f, "never"),
        }
    }
}

/// Which untreated units serve as the comparison group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ComparisonGroup {
    /// Units never treated within the sample window.
    NeverTreated,
    /// Units not yet treated at the later of the two periods entering a
    /// moment (includes never-treated units).
    NotYetTreated,
}

impl std::fmt::Display for ComparisonGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ComparisonGroup::NeverTreated => write!(f, "never"),
            ComparisonGroup::NotYetTreated => write!(f, "notyet"),
        }
    }
}

/// A single observed (unit, period) row: outcome plus covariate values
/// aligned with [`PanelDataset::covariate_names`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Outcome value.
    pub y: f64,
    /// Covariate values, one per dataset covariate name.
    pub covs: Vec<f64>,
}

/// One unit's record: cohort, spillover flag, observations, and an optional
/// per-period trading history used to derive the spillover flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitRecord {
    /// Opaque unit identifier. Units are stored sorted by this id.
    pub unit_id: String,
    /// Adoption cohort.
    pub cohort: Cohort,
    /// Ever subject to spillovers (e.g., ever traded after adoption).
    pub spillover_ever: bool,
    /// Observed rows keyed by period label.
    pub obs: BTreeMap<i64, Observation>,
    /// Optional per-period trading events (absent entries mean "no trade").
    pub trading: Option<BTreeMap<i64, bool>>,
}

impl UnitRecord {
    /// Covariate vector at the unit's first observed period (the baseline
    /// used for propensity fits), or `None` when the unit has no rows.
    pub fn baseline_covs(&self) -> Option<&[f64]> {
        self.obs.values().next().map(|o| o.covs.as_slice())
    }

    /// Outcome difference `y(t_hi) - y(t_lo)` when both rows exist.
    pub fn outcome_diff(&self, t_lo: i64, t_hi: i64) -> Option<f64> {
        match (self.obs.get(&t_lo), self.obs.get(&t_hi)) {
            (Some(lo), Some(hi)) => Some(hi.y - lo.y),
            _ => None,
        }
    }
}

/// Policy for deriving the spillover flag from trading histories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AbsorbingPolicy {
    /// Treat exposure as absorbing: any post-adoption trade sets the flag.
    Strict,
    /// As `Strict`, but remove units whose trading history has a gap after
    /// the first trade (non-persistent traders).
    DropNonPersistent,
}

/// Outcome of [`derive_spillover`] besides the rewritten dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpilloverDeriveReport {
    /// Treated units without a trading history; their flag was left as
    /// supplied.
    pub no_history: Vec<String>,
    /// Never-treated units whose supplied flag or trading history implied
    /// exposure; the flag was forced to 0.
    pub forced_never_treated: Vec<String>,
    /// Units removed under [`AbsorbingPolicy::DropNonPersistent`].
    pub dropped_nonpersistent: Vec<String>,
}

/// One assumption violation found by [`validate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    /// A unit flagged untreated at a period at or after its cohort (only
    /// representable when an explicit per-period treatment column was
    /// supplied at ingest).
    TreatmentReversal {
        /// Unit.
        unit_id: String,
        /// Offending period label.
        t: i64,
    },
    /// A trading event strictly before the unit's first treated period.
    TradingBeforeTreatment {
        /// Unit.
        unit_id: String,
        /// Offending period label.
        t: i64,
    },
    /// A never-treated unit carrying a spillover flag.
    SpilloverOnNeverTreated {
        /// Unit.
        unit_id: String,
    },
    /// A usable (g, t) cell whose treated side has no spillover-free units.
    NoUnexposedTreated {
        /// Cohort label.
        g: i64,
        /// Period label.
        t: i64,
    },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::TreatmentReversal { unit_id, t } => {
                write!(f, "treatment reversal: unit {unit_id} untreated at {t} despite earlier adoption")
            }
            Violation::TradingBeforeTreatment { unit_id, t } => {
                write!(f, "trading before treatment: unit {unit_id} trades at {t}")
            }
            Violation::SpilloverOnNeverTreated { unit_id } => {
                write!(f, "spillover flag on never-treated unit {unit_id}")
            }
            Violation::NoUnexposedTreated { g, t } => {
                write!(f, "cohort {g} has no spillover-free treated units in the ({g}, {t}) cell")
            }
        }
    }
}

/// Result of [`validate`]: the full list of violations found.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Violations in deterministic (unit, period) order.
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    /// True when no violations were found.
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Cell counts for a (g, t, k, s) query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCount {
    /// Treated-in-`g` units with the requested spillover status observed at
    /// both periods.
    pub treated: usize,
    /// Comparison units with the requested spillover status observed at both
    /// periods.
    pub comparison: usize,
}

/// A panel of units observed over a common sorted period grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelDataset {
    units: Vec<UnitRecord>,
    periods: Vec<i64>,
    covariate_names: Vec<String>,
}

impl PanelDataset {
    /// Builds a dataset, canonicalizing unit order (sorted by `unit_id`) and
    /// checking structural invariants:
    ///
    /// * periods strictly increasing, observations only at listed periods;
    /// * unit ids unique;
    /// * covariate vectors aligned with `covariate_names`;
    /// * a comparison group exists (a never-treated unit or at least two
    ///   distinct treated cohorts).
    pub fn new(
        mut units: Vec<UnitRecord>,
        mut periods: Vec<i64>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        periods.sort_unstable();
        if periods.is_empty() {
            return Err(Error::Validation("no periods supplied".into()));
        }
        if periods.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Validation("duplicate period labels".into()));
        }
        let period_set: BTreeSet<i64> = periods.iter().copied().collect();

        units.sort_by(|a, b| a.unit_id.cmp(&b.unit_id));
        for pair in units.windows(2) {
            if pair[0].unit_id == pair[1].unit_id {
                return Err(Error::Validation(format!(
                    "duplicate unit id {}",
                    pair[0].unit_id
                )));
            }
        }
        for u in &units {
            for (&t, o) in &u.obs {
                if !period_set.contains(&t) {
                    return Err(Error::Validation(format!(
                        "unit {} observed at unlisted period {t}",
                        u.unit_id
                    )));
                }
                if o.covs.len() != covariate_names.len() {
                    return Err(Error::Validation(format!(
                        "unit {} at period {t} has {} covariates, expected {}",
                        u.unit_id,
                        o.covs.len(),
                        covariate_names.len()
                    )));
                }
            }
            if let Some(tr) = &u.trading {
                if let Some((&t, _)) = tr.iter().find(|(t, _)| !period_set.contains(t)) {
                    return Err(Error::Validation(format!(
                        "unit {} has a trading event at unlisted period {t}",
                        u.unit_id
                    )));
                }
            }
        }

        let ds = Self {
            units,
            periods,
            covariate_names,
        };
        let treated: BTreeSet<i64> = ds
            .units
            .iter()
            .filter_map(|u| ds.cohort_pos(u.cohort).map(|p| ds.periods[p]))
            .collect();
        let has_never = ds.units.iter().any(|u| ds.cohort_pos(u.cohort).is_none());
        if !has_never && treated.len() < 2 {
            return Err(Error::Validation(
                "no comparison group: need a never-treated unit or two treated cohorts".into(),
            ));
        }
        Ok(ds)
    }

    /// Units, sorted by id.
    pub fn units(&self) -> &[UnitRecord] {
        &self.units
    }

    /// Number of units.
    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    /// Sorted period labels.
    pub fn periods(&self) -> &[i64] {
        &self.periods
    }

    /// Covariate names, aligned with every observation's `covs` vector.
    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Position of a period label in the sorted grid.
    pub fn period_pos(&self, t: i64) -> Option<usize> {
        self.periods.binary_search(&t).ok()
    }

    /// First treated position for a cohort: the first grid position whose
    /// label is at or after the cohort label. `None` when the unit is never
    /// treated within the sample window.
    pub fn cohort_pos(&self, cohort: Cohort) -> Option<usize> {
        let g = cohort.label()?;
        let pos = self.periods.partition_point(|&p| p < g);
        (pos < self.periods.len()).then_some(pos)
    }

    /// Distinct first-treated positions present in the sample, ascending.
    pub fn treated_positions(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self
            .units
            .iter()
            .filter_map(|u| self.cohort_pos(u.cohort))
            .collect();
        set.into_iter().collect()
    }

    /// True when `unit` belongs to the comparison group for a moment whose
    /// treated cohort sits at `g_pos` and whose later period sits at `t_pos`.
    pub fn in_comparison(&self, unit: &UnitRecord, cg: ComparisonGroup, g_pos: usize, t_pos: usize) -> bool {
        match (cg, self.cohort_pos(unit.cohort)) {
            (_, None) => true,
            (ComparisonGroup::NeverTreated, Some(_)) => false,
            (ComparisonGroup::NotYetTreated, Some(c)) => c > t_pos.max(g_pos),
        }
    }

    /// Counts treated-in-`g` and comparison units with spillover status `s`
    /// observed at both `t - k` and `t` (positions `k` apart).
    pub fn cell_counts(
        &self,
        g: i64,
        t: i64,
        k: usize,
        s: bool,
        cg: ComparisonGroup,
    ) -> Result<CellCount> {
        let g_pos = self
            .cohort_pos(Cohort::Treated(g))
            .ok_or_else(|| Error::Validation(format!("cohort {g} not treated in sample")))?;
        let t_pos = self
            .period_pos(t)
            .ok_or_else(|| Error::Validation(format!("period {t} not in panel")))?;
        if k == 0 || t_pos < k {
            return Err(Error::Validation(format!(
                "difference order k = {k} infeasible at period {t}"
            )));
        }
        let lo = self.periods[t_pos - k];
        let (mut treated, mut comparison) = (0usize, 0usize);
        for u in &self.units {
            if u.spillover_ever != s || u.outcome_diff(lo, t).is_none() {
                continue;
            }
            if self.cohort_pos(u.cohort) == Some(g_pos) {
                treated += 1;
            } else if self.in_comparison(u, cg, g_pos, t_pos) {
                comparison += 1;
            }
        }
        Ok(CellCount { treated, comparison })
    }
}

/// Checks the identification assumptions that are observable in the data:
///
/// * (b) no trading before the first treated period;
/// * (c) no spillover flag on never-treated units;
/// * (d) every usable (g, t) adjacent-period cell retains at least one
///   spillover-free treated unit.
///
/// Violation class (a), treatment reversal, requires an explicit per-period
/// treatment column and is reported at ingest instead. Always returns a
/// report; never fails.
pub fn validate(ds: &PanelDataset) -> ValidationReport {
    let mut violations = Vec::new();
    for u in ds.units() {
        let first_treated = ds.cohort_pos(u.cohort);
        if let Some(tr) = &u.trading {
            for (&t, &active) in tr {
                if !active {
                    continue;
                }
                let t_pos = ds.period_pos(t).expect("checked at construction");
                if first_treated.is_none_or(|g| t_pos < g) {
                    violations.push(Violation::TradingBeforeTreatment {
                        unit_id: u.unit_id.clone(),
                        t,
                    });
                }
            }
        }
        if first_treated.is_none() && u.spillover_ever {
            violations.push(Violation::SpilloverOnNeverTreated {
                unit_id: u.unit_id.clone(),
            });
        }
    }
    for g_pos in ds.treated_positions() {
        let g = ds.periods()[g_pos];
        for t_pos in g_pos.max(1)..ds.periods().len() {
            let (lo, hi) = (ds.periods()[t_pos - 1], ds.periods()[t_pos]);
            let mut any = false;
            let mut unexposed = false;
            for u in ds.units() {
                if ds.cohort_pos(u.cohort) == Some(g_pos) && u.outcome_diff(lo, hi).is_some() {
                    any = true;
                    if !u.spillover_ever {
                        unexposed = true;
                        break;
                    }
                }
            }
            if any && !unexposed {
                violations.push(Violation::NoUnexposedTreated { g, t: hi });
            }
        }
    }
    ValidationReport { violations }
}

/// Rewrites every unit's spillover flag from its trading history: exposure is
/// absorbing, so any trade at or after the first treated period sets the
/// flag. Never-treated units are forced to unexposed. Units without a trading
/// history keep their supplied flag and are listed in the report.
pub fn derive_spillover(
    ds: &PanelDataset,
    policy: AbsorbingPolicy,
) -> Result<(PanelDataset, SpilloverDeriveReport)> {
    let mut report = SpilloverDeriveReport::default();
    let mut units = Vec::with_capacity(ds.n_units());
    for u in ds.units() {
        let mut unit = u.clone();
        let first_treated = ds.cohort_pos(u.cohort);
        match (&u.trading, first_treated) {
            (None, None) => {
                if unit.spillover_ever {
                    report.forced_never_treated.push(unit.unit_id.clone());
                }
                unit.spillover_ever = false;
            }
            (None, Some(_)) => report.no_history.push(unit.unit_id.clone()),
            (Some(tr), first_treated) => {
                let trade_positions: Vec<usize> = tr
                    .iter()
                    .filter(|&(_, &active)| active)
                    .map(|(&t, _)| ds.period_pos(t).expect("checked at construction"))
                    .collect();
                match first_treated {
                    None => {
                        if unit.spillover_ever || !trade_positions.is_empty() {
                            report.forced_never_treated.push(unit.unit_id.clone());
                        }
                        unit.spillover_ever = false;
                    }
                    Some(g_pos) => {
                        unit.spillover_ever = trade_positions.iter().any(|&p| p >= g_pos);
                        if policy == AbsorbingPolicy::DropNonPersistent {
                            if let Some(&first_trade) = trade_positions.iter().min() {
                                let persistent = (first_trade..ds.periods().len()).all(|p| {
                                    tr.get(&ds.periods()[p]).copied().unwrap_or(false)
                                });
                                if !persistent {
                                    report.dropped_nonpersistent.push(unit.unit_id.clone());
                                    continue;
                                }
                            }
                        }
                    }
                }
            }
        }
        units.push(unit);
    }
    let ds = PanelDataset::new(units, ds.periods().to_vec(), ds.covariate_names().to_vec())?;
    Ok((ds, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(y: f64) -> Observation {
        Observation { y, covs: vec![] }
    }

    fn unit(id: &str, cohort: Cohort, spill: bool, ys: &[(i64, f64)]) -> UnitRecord {
        UnitRecord {
            unit_id: id.into(),
            cohort,
            spillover_ever: spill,
            obs: ys.iter().map(|&(t, y)| (t, obs(y))).collect(),
            trading: None,
        }
    }

    fn ten_unit_panel() -> PanelDataset {
        // Fully balanced over t = 1..4: 4 units in cohort 3 (all unexposed),
        // 6 never treated.
        let mut units = Vec::new();
        for i in 0..4 {
            units.push(unit(
                &format!("t{i}"),
                Cohort::Treated(3),
                false,
                &[(1, 0.0), (2, 1.0), (3, 2.0), (4, 3.0)],
            ));
        }
        for i in 0..6 {
            units.push(unit(
                &format!("n{i}"),
                Cohort::Never,
                false,
                &[(1, 0.0), (2, 1.0), (3, 2.0), (4, 3.0)],
            ));
        }
        PanelDataset::new(units, vec![1, 2, 3, 4], vec![]).unwrap()
    }

    #[test]
    fn cell_counts_balanced_panel() {
        let ds = ten_unit_panel();
        let c = ds
            .cell_counts(3, 3, 1, false, ComparisonGroup::NeverTreated)
            .unwrap();
        assert_eq!(c, CellCount { treated: 4, comparison: 6 });
    }

    #[test]
    fn cell_counts_sum_over_s_matches_unrestricted() {
        let mut units = vec![
            unit("a", Cohort::Treated(3), false, &[(2, 0.0), (3, 1.0)]),
            unit("b", Cohort::Treated(3), true, &[(2, 0.0), (3, 1.0)]),
            unit("c", Cohort::Treated(3), true, &[(2, 0.0), (3, 1.0)]),
            unit("n0", Cohort::Never, false, &[(2, 0.0), (3, 1.0)]),
            unit("n1", Cohort::Never, false, &[(2, 0.0)]),
        ];
        units.push(unit("n2", Cohort::Never, false, &[(2, 0.5), (3, 0.5)]));
        let ds = PanelDataset::new(units, vec![1, 2, 3, 4], vec![]).unwrap();
        let c0 = ds
            .cell_counts(3, 3, 1, false, ComparisonGroup::NeverTreated)
            .unwrap();
        let c1 = ds
            .cell_counts(3, 3, 1, true, ComparisonGroup::NeverTreated)
            .unwrap();
        // Unrestricted counts: 3 treated, 2 comparison units observed at both.
        assert_eq!(c0.treated + c1.treated, 3);
        assert_eq!(c0.comparison + c1.comparison, 2);
    }

    #[test]
    fn unobserved_rows_never_contribute() {
        let units = vec![
            unit("a", Cohort::Treated(3), false, &[(3, 1.0)]), // missing t=2
            unit("b", Cohort::Treated(3), false, &[(2, 0.0), (3, 1.0)]),
            unit("n", Cohort::Never, false, &[(2, 0.0), (3, 1.0)]),
        ];
        let ds = PanelDataset::new(units, vec![2, 3], vec![]).unwrap();
        let c = ds
            .cell_counts(3, 3, 1, false, ComparisonGroup::NeverTreated)
            .unwrap();
        assert_eq!(c, CellCount { treated: 1, comparison: 1 });
    }

    #[test]
    fn construction_rejects_duplicates_and_missing_comparison() {
        let dup = vec![
            unit("a", Cohort::Treated(3), false, &[(2, 0.0)]),
            unit("a", Cohort::Treated(3), false, &[(2, 0.0)]),
            unit("n", Cohort::Never, false, &[(2, 0.0)]),
        ];
        assert!(matches!(
            PanelDataset::new(dup, vec![2, 3], vec![]),
            Err(Error::Validation(_))
        ));

        let lone = vec![unit("a", Cohort::Treated(2), false, &[(2, 0.0), (3, 1.0)])];
        assert!(matches!(
            PanelDataset::new(lone, vec![2, 3], vec![]),
            Err(Error::Validation(_))
        ));

        // Two treated cohorts suffice even without never-treated units.
        let two = vec![
            unit("a", Cohort::Treated(2), false, &[(2, 0.0)]),
            unit("b", Cohort::Treated(3), false, &[(2, 0.0)]),
        ];
        assert!(PanelDataset::new(two, vec![2, 3], vec![]).is_ok());
    }

    #[test]
    fn validate_flags_spillover_on_never_treated() {
        let units = vec![
            unit("a", Cohort::Treated(3), false, &[(2, 0.0), (3, 1.0)]),
            unit("n", Cohort::Never, true, &[(2, 0.0), (3, 1.0)]),
        ];
        let ds = PanelDataset::new(units, vec![2, 3], vec![]).unwrap();
        let report = validate(&ds);
        assert_eq!(
            report.violations,
            vec![Violation::SpilloverOnNeverTreated { unit_id: "n".into() }]
        );
    }

    #[test]
    fn validate_flags_all_exposed_cohort() {
        let units = vec![
            unit("a", Cohort::Treated(3), true, &[(2, 0.0), (3, 1.0)]),
            unit("b", Cohort::Treated(3), true, &[(2, 0.0), (3, 1.0)]),
            unit("n", Cohort::Never, false, &[(2, 0.0), (3, 1.0)]),
        ];
        let ds = PanelDataset::new(units, vec![2, 3], vec![]).unwrap();
        let report = validate(&ds);
        assert!(report
            .violations
            .contains(&Violation::NoUnexposedTreated { g: 3, t: 3 }));
    }

    #[test]
    fn validate_flags_trading_before_treatment() {
        let mut u = unit("a", Cohort::Treated(3), false, &[(1, 0.0), (2, 0.0), (3, 1.0)]);
        u.trading = Some([(1, true), (3, true)].into_iter().collect());
        let units = vec![u, unit("n", Cohort::Never, false, &[(2, 0.0), (3, 1.0)])];
        let ds = PanelDataset::new(units, vec![1, 2, 3], vec![]).unwrap();
        let report = validate(&ds);
        assert_eq!(
            report.violations,
            vec![Violation::TradingBeforeTreatment { unit_id: "a".into(), t: 1 }]
        );
    }

    #[test]
    fn derive_spillover_absorbing_and_idempotent() {
        let mut a = unit("a", Cohort::Treated(3), false, &[(1, 0.0), (3, 1.0), (5, 2.0)]);
        a.trading = Some([(3, true), (4, true), (5, true)].into_iter().collect());
        let mut b = unit("b", Cohort::Treated(3), true, &[(1, 0.0), (3, 1.0)]);
        b.trading = Some(BTreeMap::new()); // history present, never trades
        let n = unit("n", Cohort::Never, true, &[(1, 0.0), (3, 1.0)]);
        let ds =
            PanelDataset::new(vec![a, b, n], vec![1, 2, 3, 4, 5], vec![]).unwrap();

        let (derived, report) = derive_spillover(&ds, AbsorbingPolicy::Strict).unwrap();
        let by_id = |id: &str| derived.units().iter().find(|u| u.unit_id == id).unwrap();
        assert!(by_id("a").spillover_ever);
        assert!(!by_id("b").spillover_ever);
        assert!(!by_id("n").spillover_ever);
        assert_eq!(report.forced_never_treated, vec!["n".to_string()]);

        let (again, _) = derive_spillover(&derived, AbsorbingPolicy::Strict).unwrap();
        assert_eq!(derived, again);
    }

    #[test]
    fn derive_spillover_drops_nonpersistent_traders() {
        // Trades at t = 5 only in a 10-period panel: gaps at 6..10.
        let mut a = unit("a", Cohort::Treated(5), false, &[(1, 0.0), (5, 1.0)]);
        a.trading = Some([(5, true)].into_iter().collect());
        let n = unit("n", Cohort::Never, false, &[(1, 0.0), (5, 1.0)]);
        let ds = PanelDataset::new(
            vec![a, n],
            (1..=10).collect(),
            vec![],
        );
        // Construction needs a comparison group even after the drop; add a
        // second treated cohort to keep the reduced panel valid.
        let mut units = ds.unwrap().units().to_vec();
        units.push(unit("b", Cohort::Treated(3), false, &[(1, 0.0), (3, 1.0)]));
        let ds = PanelDataset::new(units, (1..=10).collect(), vec![]).unwrap();

        let (derived, report) =
            derive_spillover(&ds, AbsorbingPolicy::DropNonPersistent).unwrap();
        assert_eq!(report.dropped_nonpersistent, vec!["a".to_string()]);
        assert!(derived.units().iter().all(|u| u.unit_id != "a"));

        let (strict, _) = derive_spillover(&ds, AbsorbingPolicy::Strict).unwrap();
        assert!(strict.units().iter().any(|u| u.unit_id == "a"));
    }

    #[test]
    fn cohort_positions_handle_gap_labels_and_out_of_window_cohorts() {
        let units = vec![
            unit("a", Cohort::Treated(2006), false, &[(2004, 0.0), (2007, 1.0)]),
            unit("b", Cohort::Treated(2021), false, &[(2004, 0.0), (2007, 1.0)]),
            unit("n", Cohort::Never, false, &[(2004, 0.0), (2007, 1.0)]),
        ];
        let ds = PanelDataset::new(units, vec![2001, 2004, 2007, 2008], vec![]).unwrap();
        // Cohort 2006 first treated at the 2007 wave (position 2).
        assert_eq!(ds.cohort_pos(Cohort::Treated(2006)), Some(2));
        // A cohort beyond the window behaves as never treated.
        assert_eq!(ds.cohort_pos(Cohort::Treated(2021)), None);
        let u = ds.units().iter().find(|u| u.unit_id == "b").unwrap();
        assert!(ds.in_comparison(u, ComparisonGroup::NeverTreated, 2, 3));
    }
}
