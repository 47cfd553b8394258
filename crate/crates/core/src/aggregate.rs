//! Event-study, overall, and balanced-composition aggregation of group-time
//! effects.
//!
//! Aggregates are convex combinations of group-time effects with weights
//! proportional to cohort shares, renormalized over the cohorts observable at
//! each horizon. Because every aggregate is a fixed linear map of the
//! underlying estimates, influence functions compose exactly and bootstrap
//! draws of an aggregate equal the same linear map applied to the draws of
//! its components.
//!
//! # References
//!
//! - Callaway & Sant'Anna (2021), *Journal of Econometrics* 225(2), §3, for
//!   the event-study and overall weighting schemes.

use std::collections::BTreeMap;


use crate::effects::{GroupTimeEffect, Target};
use crate::error::{Error, Result};
use crate::inference::ParamFamily;
use crate::panel::{Cohort, PanelDataset};

/// An event-study path: one aggregated effect per event time.
#[derive(Debug, Clone)]
pub struct EventStudy {
    /// Estimand.
    pub target: Target,
    /// Event time whose value is identically zero by the base-period
    /// normalization (`-(anticipation + 1)`).
    pub reference: i64,
    /// Event times, ascending.
    pub event_times: Vec<i64>,
    /// Aggregated estimates, aligned with `event_times`.
    pub estimates: Vec<f64>,
    /// Influence contributions, `[event time][unit]`.
    pub influence: Vec<Vec<f64>>,
    /// Cohort weights used at each event time.
    pub weights: Vec<Vec<(i64, f64)>>,
    /// Whether each event time aggregates placebo (pre-base) effects.
    pub placebo: Vec<bool>,
    /// Fixed-composition horizon when the path is balanced.
    pub balanced_horizon: Option<i64>,
}

impl EventStudy {
    /// Converts the path into a bootstrap-ready parameter family.
    pub fn to_family(&self, cluster_keys: &[String]) -> Result<ParamFamily> {
        ParamFamily::new(
            self.event_times
                .iter()
                .map(|e| format!("{}:e={e}", self.target))
                .collect(),
            self.estimates.clone(),
            self.influence.clone(),
            cluster_keys,
        )
    }
}

/// A single aggregated effect (the overall weighted average).
#[derive(Debug, Clone)]
pub struct AggregateEstimate {
    /// Estimand.
    pub target: Target,
    /// Point estimate.
    pub estimate: f64,
    /// Influence contributions per unit.
    pub influence: Vec<f64>,
    /// Total unnormalized weight (the kappa normalizer).
    pub kappa: f64,
    /// Normalized weight on each (g, t) cell.
    pub weights: Vec<((i64, i64), f64)>,
}

impl AggregateEstimate {
    /// Converts the aggregate into a one-parameter bootstrap family.
    pub fn to_family(&self, cluster_keys: &[String]) -> Result<ParamFamily> {
        ParamFamily::new(
            vec![format!("{}:overall", self.target)],
            vec![self.estimate],
            vec![self.influence.clone()],
            cluster_keys,
        )
    }
}

struct Indexed<'a> {
    ds: &'a PanelDataset,
    target: Target,
    anticipation: usize,
    by_gt: BTreeMap<(i64, i64), usize>,
    effects: &'a [GroupTimeEffect],
    influence: &'a [Vec<f64>],
    /// (cohort label, cohort position, share), shares summing to 1.
    cohorts: Vec<(i64, usize, f64)>,
}

fn index_inputs<'a>(
    ds: &'a PanelDataset,
    effects: &'a [GroupTimeEffect],
    influence: &'a [Vec<f64>],
    shares: &BTreeMap<i64, f64>,
) -> Result<Indexed<'a>> {
    if effects.is_empty() {
        return Err(Error::Validation("no group-time effects to aggregate".into()));
    }
    if effects.len() != influence.len() {
        return Err(Error::Validation(format!(
            "{} effects but {} influence rows",
            effects.len(),
            influence.len()
        )));
    }
    let target = effects[0].target;
    let anticipation = effects[0].anticipation;
    if effects.iter().any(|e| e.target != target || e.anticipation != anticipation) {
        return Err(Error::Validation(
            "aggregation inputs mix targets or anticipation settings".into(),
        ));
    }
    let mut by_gt = BTreeMap::new();
    for (i, e) in effects.iter().enumerate() {
        if by_gt.insert((e.g, e.t), i).is_some() {
            return Err(Error::Validation(format!(
                "duplicate effect for (g = {}, t = {})",
                e.g, e.t
            )));
        }
    }
    let total: f64 = shares.values().sum();
    if !(total > 0.0) {
        return Err(Error::Validation("cohort shares must have positive total".into()));
    }
    let mut cohorts = Vec::with_capacity(shares.len());
    for (&g, &s) in shares {
        if s < 0.0 {
            return Err(Error::Validation(format!("negative share for cohort {g}")));
        }
        let pos = ds
            .cohort_pos(Cohort::Treated(g))
            .ok_or_else(|| Error::Validation(format!("cohort {g} not treated in sample")))?;
        if s > 0.0 {
            cohorts.push((g, pos, s / total));
        }
    }
    Ok(Indexed {
        ds,
        target,
        anticipation,
        by_gt,
        effects,
        influence,
        cohorts,
    })
}

fn combine(
    ix: &Indexed<'_>,
    members: &[(i64, usize, f64)], // (g, effect index, normalized weight)
) -> (f64, Vec<f64>, Vec<(i64, f64)>, bool) {
    let n = ix.ds.n_units();
    let mut est = 0.0;
    let mut psi = vec![0.0; n];
    let mut weights = Vec::with_capacity(members.len());
    let mut placebo = true;
    for &(g, idx, w) in members {
        est += w * ix.effects[idx].estimate;
        for (o, x) in psi.iter_mut().zip(&ix.influence[idx]) {
            *o += w * x;
        }
        weights.push((g, w));
        placebo &= ix.effects[idx].placebo;
    }
    (est, psi, weights, placebo)
}

/// Aggregates group-time effects by event time `e = t - g` (in grid
/// positions): `theta(e)` weights cohorts observable at horizon `e` by their
/// renormalized shares. `e_range` trims the path; by default every event time
/// with at least one observable cohort enters.
pub fn event_study(
    ds: &PanelDataset,
    effects: &[GroupTimeEffect],
    influence: &[Vec<f64>],
    shares: &BTreeMap<i64, f64>,
    e_range: Option<(i64, i64)>,
) -> Result<EventStudy> {
    let ix = index_inputs(ds, effects, influence, shares)?;
    let n_periods = ds.periods().len() as i64;
    let feasible = |e: i64| -> Vec<(i64, usize)> {
        ix.cohorts
            .iter()
            .filter_map(|&(g, pos, _)| {
                let t_pos = pos as i64 + e;
                (t_pos >= 0 && t_pos < n_periods).then(|| (g, (t_pos) as usize))
            })
            .collect()
    };
    let (e_lo, e_hi) = match e_range {
        Some((lo, hi)) => {
            if lo > hi {
                return Err(Error::Validation(format!("empty event range [{lo}, {hi}]")));
            }
            (lo, hi)
        }
        None => {
            // Union of feasibility: earliest pre-period of the latest cohort
            // through the latest post-period of the earliest cohort.
            let min_pos = ix.cohorts.iter().map(|&(_, p, _)| p as i64).min().unwrap();
            let max_pos = ix.cohorts.iter().map(|&(_, p, _)| p as i64).max().unwrap();
            (-max_pos, n_periods - 1 - min_pos)
        }
    };

    let mut event_times = Vec::new();
    let mut estimates = Vec::new();
    let mut influence_out = Vec::new();
    let mut weights_out = Vec::new();
    let mut placebo_out = Vec::new();
    for e in e_lo..=e_hi {
        let cells = feasible(e);
        if cells.is_empty() {
            if e_range.is_some() {
                return Err(Error::MissingEffect { g: 0, e });
            }
            continue;
        }
        let total: f64 = ix
            .cohorts
            .iter()
            .filter(|(g, _, _)| cells.iter().any(|(cg, _)| cg == g))
            .map(|&(_, _, s)| s)
            .sum();
        let mut members = Vec::with_capacity(cells.len());
        for (g, t_pos) in cells {
            let t = ds.periods()[t_pos];
            let idx = *ix
                .by_gt
                .get(&(g, t))
                .ok_or(Error::MissingEffect { g, e })?;
            let share = ix
                .cohorts
                .iter()
                .find(|(cg, _, _)| *cg == g)
                .map(|&(_, _, s)| s)
                .unwrap();
            members.push((g, idx, share / total));
        }
        let (est, psi, w, placebo) = combine(&ix, &members);
        event_times.push(e);
        estimates.push(est);
        influence_out.push(psi);
        weights_out.push(w);
        placebo_out.push(placebo);
    }

    Ok(EventStudy {
        target: ix.target,
        reference: -(ix.anticipation as i64) - 1,
        event_times,
        estimates,
        influence: influence_out,
        weights: weights_out,
        placebo: placebo_out,
        balanced_horizon: None,
    })
}

/// Overall average effect: every post-treatment cell `(g, t)` with `t >= g`
/// weighted by its cohort share and normalized by the total weight kappa.
pub fn overall(
    ds: &PanelDataset,
    effects: &[GroupTimeEffect],
    influence: &[Vec<f64>],
    shares: &BTreeMap<i64, f64>,
) -> Result<AggregateEstimate> {
    let ix = index_inputs(ds, effects, influence, shares)?;
    let n_periods = ds.periods().len();
    let mut kappa = 0.0;
    let mut cells: Vec<((i64, i64), usize, f64)> = Vec::new();
    for &(g, pos, share) in &ix.cohorts {
        for t_pos in pos..n_periods {
            let t = ds.periods()[t_pos];
            let idx = *ix.by_gt.get(&(g, t)).ok_or(Error::MissingEffect {
                g,
                e: (t_pos - pos) as i64,
            })?;
            cells.push(((g, t), idx, share));
            kappa += share;
        }
    }
    if cells.is_empty() {
        return Err(Error::Validation("no post-treatment cells to aggregate".into()));
    }
    let members: Vec<(i64, usize, f64)> = cells
        .iter()
        .map(|&((g, _), idx, s)| (g, idx, s / kappa))
        .collect();
    let (estimate, psi, _, _) = combine(&ix, &members);
    Ok(AggregateEstimate {
        target: ix.target,
        estimate,
        influence: psi,
        kappa,
        weights: cells
            .iter()
            .map(|&(gt, _, s)| (gt, s / kappa))
            .collect(),
    })
}

/// Event-study path over a fixed cohort composition: only cohorts observable
/// through horizon `e_prime` enter, with the same weights at every event
/// time, so composition changes cannot masquerade as dynamics.
pub fn balanced_event_study(
    ds: &PanelDataset,
    effects: &[GroupTimeEffect],
    influence: &[Vec<f64>],
    shares: &BTreeMap<i64, f64>,
    e_prime: i64,
) -> Result<EventStudy> {
    if e_prime < 0 {
        return Err(Error::Validation(format!(
            "balanced horizon must be nonnegative, got {e_prime}"
        )));
    }
    let ix = index_inputs(ds, effects, influence, shares)?;
    let n_periods = ds.periods().len() as i64;
    let bal: Vec<(i64, usize, f64)> = ix
        .cohorts
        .iter()
        .copied()
        .filter(|&(_, pos, _)| pos as i64 + e_prime < n_periods)
        .collect();
    if bal.is_empty() {
        return Err(Error::NoBalancedCohorts { e_prime });
    }
    let total: f64 = bal.iter().map(|&(_, _, s)| s).sum();
    // Every balanced cohort must have data at every emitted event time.
    let e_lo = -(bal.iter().map(|&(_, p, _)| p as i64).min().unwrap());

    let mut event_times = Vec::new();
    let mut estimates = Vec::new();
    let mut influence_out = Vec::new();
    let mut weights_out = Vec::new();
    let mut placebo_out = Vec::new();
    for e in e_lo..=e_prime {
        let mut members = Vec::with_capacity(bal.len());
        for &(g, pos, share) in &bal {
            let t = ds.periods()[(pos as i64 + e) as usize];
            let idx = *ix.by_gt.get(&(g, t)).ok_or(Error::MissingEffect { g, e })?;
            members.push((g, idx, share / total));
        }
        let (est, psi, w, placebo) = combine(&ix, &members);
        event_times.push(e);
        estimates.push(est);
        influence_out.push(psi);
        weights_out.push(w);
        placebo_out.push(placebo);
    }

    Ok(EventStudy {
        target: ix.target,
        reference: -(ix.anticipation as i64) - 1,
        event_times,
        estimates,
        influence: influence_out,
        weights: weights_out,
        placebo: placebo_out,
        balanced_horizon: Some(e_prime),
    })
}
