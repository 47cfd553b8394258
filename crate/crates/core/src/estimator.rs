//! End-to-end group-time estimation: wires propensity fits, difference
//! moments, and the stacked GMM windows into a full grid of group-time
//! effects per estimand, with influence functions aligned for multiplier
//! bootstrap inference in the style of Callaway and Sant'Anna (2021).

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::effects::{
    delta_ast, delta_ast_adjusted, delta_att0, delta_att_pooled, delta_atts, DeltaMoment,
    GroupTimeEffect, Method, PScoreSource, Side, Target,
};
use crate::error::{Error, Result};
use crate::gmm::{build_gmm, gmm_solve, GmmSolution, GmmWindow, OmegaSpec, Weighting};
use crate::inference::{derive_seed, Multiplier, ParamFamily};
use crate::panel::{Cohort, ComparisonGroup, PanelDataset, UnitRecord};
use crate::propensity::{fit_logit, generalized_pscore, LogitConfig, PScoreTable};

use nalgebra::DMatrix;

/// Difference orders to stack per window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum KSet {
    /// Every feasible order for the window, `1..=max`.
    AllFeasible,
    /// An explicit list of orders.
    List(Vec<usize>),
}

impl KSet {
    /// Resolves to a concrete order list given the largest feasible order.
    pub fn resolve(&self, max_k: usize) -> Vec<usize> {
        match self {
            KSet::AllFeasible => (1..=max_k).collect(),
            KSet::List(ks) => ks.iter().copied().filter(|&k| k >= 1 && k <= max_k).collect(),
        }
    }

    /// Parses "all" or a comma-separated list such as "1,2,3".
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(KSet::AllFeasible);
        }
        let ks = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|&k| k >= 1)
                    .ok_or_else(|| Error::Validation(format!("invalid difference order {p:?}")))
            })
            .collect::<Result<Vec<usize>>>()?;
        if ks.is_empty() {
            return Err(Error::Validation("empty difference-order list".into()));
        }
        Ok(KSet::List(ks))
    }
}

impl Default for KSet {
    fn default() -> Self {
        KSet::AllFeasible
    }
}

/// Configuration for the group-time estimation pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Comparison group definition.
    pub comparison: ComparisonGroup,
    /// Anticipation periods excluded before the cohort's first treated period.
    pub anticipation: usize,
    /// Difference orders stacked per window.
    pub k_set: KSet,
    /// Weighting of the stacked moments.
    pub weighting: Weighting,
    /// Bootstrap draws for the two-step moment covariance.
    pub omega_draws: usize,
    /// Multiplier law for the covariance bootstrap.
    pub multiplier: Multiplier,
    /// Force covariate use on/off; `None` uses covariates whenever present.
    pub use_covariates: Option<bool>,
    /// Reweight the within-cohort spillover contrast by an exposure
    /// propensity instead of the unconditional contrast.
    pub ast_adjusted: bool,
    /// Propensity-score clipping bound.
    pub clip: f64,
    /// Logistic fitting controls.
    pub logit: LogitConfig,
    /// Seed for internally derived randomness (covariance bootstrap).
    pub seed: u64,
    /// Restrict estimation to these cohort labels (`None` = all).
    pub cohorts: Option<Vec<i64>>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            comparison: ComparisonGroup::NeverTreated,
            anticipation: 0,
            k_set: KSet::AllFeasible,
            weighting: Weighting::Identity,
            omega_draws: 200,
            multiplier: Multiplier::Rademacher,
            use_covariates: None,
            ast_adjusted: false,
            clip: 1e-3,
            logit: LogitConfig::default(),
            seed: 0,
            cohorts: None,
        }
    }
}

/// Full grid of group-time effects for one estimand.
#[derive(Debug, Clone)]
pub struct TargetEstimates {
    /// Estimand.
    pub target: Target,
    /// Group-time effects sorted by cohort, then period. Includes the base
    /// period of every cohort as an exact zero.
    pub effects: Vec<GroupTimeEffect>,
    /// Influence contributions aligned with `effects`, `[effect][unit]`.
    pub influence: Vec<Vec<f64>>,
    /// Share of contributing treated units per cohort (sums to one).
    pub cohort_shares: BTreeMap<i64, f64>,
    /// Sample sizes of the lowest-order moment ending at each (g, t):
    /// (treated count, comparison count). Cells no moment ends at (for
    /// example the first panel period) are missing.
    pub cell_sizes: BTreeMap<(i64, i64), (usize, usize)>,
    /// (g, t) cells whose parameter had no identifying moments.
    pub absent: Vec<(i64, i64)>,
    /// Log of moment cells skipped for data reasons.
    pub skipped_cells: Vec<String>,
    /// Propensity scores that hit the clipping bounds, summed over cells.
    pub clipped: usize,
    /// Units in the dataset (influence row length).
    pub n_units: usize,
}

impl TargetEstimates {
    /// The effect at `(g, t)`, if estimated.
    pub fn lookup(&self, g: i64, t: i64) -> Option<&GroupTimeEffect> {
        self.effects.iter().find(|e| e.g == g && e.t == t)
    }

    /// Packs the grid into a bootstrap-ready parameter family clustered on
    /// units.
    pub fn family(&self, ds: &PanelDataset) -> Result<ParamFamily> {
        let names = self
            .effects
            .iter()
            .map(|e| format!("{}:g={},t={}", self.target, e.g, e.t))
            .collect();
        let estimates = self.effects.iter().map(|e| e.estimate).collect();
        ParamFamily::new(names, estimates, self.influence.clone(), &unit_cluster_keys(ds))
    }
}

/// Cluster keys for unit-level clustering: the unit ids, in dataset order.
pub fn unit_cluster_keys(ds: &PanelDataset) -> Vec<String> {
    ds.units().iter().map(|u| u.unit_id.clone()).collect()
}

fn within_cohort_spillover_scores(
    ds: &PanelDataset,
    g: i64,
    t: i64,
    k: usize,
    clip: f64,
    logit: &LogitConfig,
) -> Result<PScoreTable> {
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
    let mut members: Vec<usize> = Vec::new();
    let mut labels: Vec<bool> = Vec::new();
    for (i, u) in ds.units().iter().enumerate() {
        if ds.cohort_pos(u.cohort) == Some(g_pos) && u.outcome_diff(lo, t).is_some() {
            members.push(i);
            labels.push(u.spillover_ever);
        }
    }
    let exposed = labels.iter().filter(|&&l| l).count();
    if exposed == 0 || exposed == labels.len() {
        return Err(Error::EmptyCell(format!(
            "exposure propensity cell (g = {g}, t = {t}, k = {k}): {exposed} exposed of {}",
            labels.len()
        )));
    }
    let idx: Vec<usize> = (0..ds.covariate_names().len()).collect();
    let rows: Vec<Vec<f64>> = members
        .iter()
        .map(|&i| {
            let base = ds.units()[i].baseline_covs().unwrap_or(&[]);
            idx.iter().map(|&j| base[j]).collect()
        })
        .collect();
    let features = DMatrix::from_fn(rows.len(), idx.len(), |r, c| rows[r][c]);
    let fit = fit_logit(&features, &labels, logit)?;
    let mut clipped = 0usize;
    let scores: BTreeMap<usize, f64> = members
        .iter()
        .zip(&rows)
        .map(|(&i, row)| {
            let p = fit.predict(row);
            let clamped = p.clamp(clip, 1.0 - clip);
            if clamped != p {
                clipped += 1;
            }
            (i, clamped)
        })
        .collect();
    Ok(PScoreTable {
        g,
        t,
        k,
        treated_filter: crate::propensity::SpilloverFilter::Exposed,
        comparison_filter: crate::propensity::SpilloverFilter::Unexposed,
        comparison: ComparisonGroup::NeverTreated,
        scores,
        clipped,
        fit,
    })
}

/// One difference moment under the configured identification strategy.
fn moment_for(
    ds: &PanelDataset,
    target: Target,
    g: i64,
    t: i64,
    k: usize,
    cfg: &EstimatorConfig,
    clipped: &mut usize,
) -> Result<DeltaMoment> {
    let ipw = cfg
        .use_covariates
        .unwrap_or(!ds.covariate_names().is_empty())
        && !ds.covariate_names().is_empty();
    let names: Vec<String> = ds.covariate_names().to_vec();
    match target {
        Target::Att0 => {
            if ipw {
                let tab =
                    generalized_pscore(ds, g, false, k, t, cfg.comparison, &names, cfg.clip, &cfg.logit)?;
                *clipped += tab.clipped;
                delta_att0(ds, g, t, k, cfg.comparison, PScoreSource::Table(&tab))
            } else {
                delta_att0(ds, g, t, k, cfg.comparison, PScoreSource::Uniform)
            }
        }
        Target::AttS => {
            if ipw {
                let tab =
                    generalized_pscore(ds, g, true, k, t, cfg.comparison, &names, cfg.clip, &cfg.logit)?;
                *clipped += tab.clipped;
                delta_atts(ds, g, t, k, cfg.comparison, PScoreSource::Table(&tab))
            } else {
                delta_atts(ds, g, t, k, cfg.comparison, PScoreSource::Uniform)
            }
        }
        Target::Att => {
            if ipw {
                let tab = crate::propensity::fit_pscore(
                    ds,
                    g,
                    t,
                    k,
                    cfg.comparison,
                    crate::propensity::SpilloverFilter::Any,
                    crate::propensity::SpilloverFilter::Any,
                    &names,
                    cfg.clip,
                    &cfg.logit,
                )?;
                *clipped += tab.clipped;
                delta_att_pooled(ds, g, t, k, cfg.comparison, PScoreSource::Table(&tab))
            } else {
                delta_att_pooled(ds, g, t, k, cfg.comparison, PScoreSource::Uniform)
            }
        }
        Target::Ast => {
            if cfg.ast_adjusted && ipw {
                let tab = within_cohort_spillover_scores(ds, g, t, k, cfg.clip, &cfg.logit)?;
                *clipped += tab.clipped;
                delta_ast_adjusted(ds, g, t, k, &tab)
            } else {
                delta_ast(ds, g, t, k)
            }
        }
    }
}

/// Cohort wave labels to estimate: the distinct first-treated period labels,
/// optionally filtered by an explicit cohort request.
fn wave_labels(ds: &PanelDataset, requested: Option<&[i64]>) -> Result<Vec<i64>> {
    let waves: Vec<i64> = ds
        .treated_positions()
        .iter()
        .map(|&p| ds.periods()[p])
        .collect();
    let Some(req) = requested else {
        return Ok(waves);
    };
    let mut keep: BTreeSet<i64> = BTreeSet::new();
    for &g in req {
        let pos = ds
            .cohort_pos(Cohort::Treated(g))
            .ok_or_else(|| Error::Validation(format!("cohort {g} not treated in sample")))?;
        keep.insert(ds.periods()[pos]);
    }
    Ok(waves.into_iter().filter(|g| keep.contains(g)).collect())
}

struct WindowFit {
    solution: GmmSolution,
    placebo: bool,
    contributors: BTreeSet<usize>,
    /// Smallest-order moment sizes per later period: t -> (k, treated, comparison).
    sizes: BTreeMap<i64, (usize, usize, usize)>,
    skipped: Vec<String>,
    absent: Vec<i64>,
}

fn fit_window(
    ds: &PanelDataset,
    target: Target,
    g: i64,
    window: GmmWindow,
    cfg: &EstimatorConfig,
    keys: &[String],
    clipped: &mut usize,
    seed_index: u64,
) -> Result<WindowFit> {
    let g_pos = ds
        .cohort_pos(Cohort::Treated(g))
        .ok_or_else(|| Error::Validation(format!("cohort {g} not treated in sample")))?;
    let base = (g_pos as i64) - (cfg.anticipation as i64) - 1;
    if base < 0 {
        return Err(Error::Validation(format!(
            "cohort {g} has no base period with anticipation {}",
            cfg.anticipation
        )));
    }
    let base = base as usize;
    let max_k = match window {
        GmmWindow::Post => ds.periods().len() - 1 - base,
        GmmWindow::Placebo => base,
    };
    let empty = match window {
        GmmWindow::Post => base + 1 >= ds.periods().len(),
        GmmWindow::Placebo => base == 0,
    };
    if empty {
        return Ok(WindowFit {
            solution: GmmSolution {
                param_labels: vec![],
                estimates: vec![],
                influence: vec![],
                ridge_epsilon: None,
                rows_used: 0,
            },
            placebo: window == GmmWindow::Placebo,
            contributors: BTreeSet::new(),
            sizes: BTreeMap::new(),
            skipped: vec![],
            absent: vec![],
        });
    }
    let ks = cfg.k_set.resolve(max_k);
    if ks.is_empty() {
        return Err(Error::Validation(format!(
            "no feasible difference order for cohort {g} ({window:?} window, max {max_k})"
        )));
    }

    let mut contributors: BTreeSet<usize> = BTreeSet::new();
    let mut sizes: BTreeMap<i64, (usize, usize, usize)> = BTreeMap::new();
    let mut moment_fn = |t: i64, k: usize| -> crate::error::Result<DeltaMoment> {
        let m = moment_for(ds, target, g, t, k, cfg, clipped)?;
        for c in &m.contributions {
            if c.side == Side::Treated || target == Target::Ast {
                contributors.insert(c.unit_idx);
            }
        }
        let entry = sizes.entry(t).or_insert((k, m.n_treated, m.n_comparison));
        if k < entry.0 {
            *entry = (k, m.n_treated, m.n_comparison);
        }
        Ok(m)
    };
    let sys = build_gmm(ds, target, g, &ks, cfg.anticipation, window, &mut moment_fn)?;
    let omega = match cfg.weighting {
        Weighting::Identity => OmegaSpec::Identity,
        Weighting::TwoStep => OmegaSpec::Bootstrap {
            draws: cfg.omega_draws,
            seed: derive_seed(cfg.seed, seed_index),
            multiplier: cfg.multiplier,
        },
    };
    let solution = gmm_solve(&sys, omega, keys)?;
    Ok(WindowFit {
        solution,
        placebo: window == GmmWindow::Placebo,
        contributors,
        sizes,
        skipped: sys.skipped_cells,
        absent: sys.absent,
    })
}

/// Estimates the full group-time grid for one estimand.
///
/// Every cohort contributes a post-treatment window and a mirrored placebo
/// window of long-difference pre-treatment effects, both anchored at the base
/// period (which enters as an exact zero with zero influence). Standard
/// errors are left to the caller: pack the result into a family with
/// [`TargetEstimates::family`] and run the multiplier bootstrap.
pub fn estimate_target(
    ds: &PanelDataset,
    target: Target,
    cfg: &EstimatorConfig,
) -> Result<TargetEstimates> {
    if !(0.0..0.5).contains(&cfg.clip) {
        return Err(Error::Validation(format!("clip {} outside [0, 0.5)", cfg.clip)));
    }
    let keys = unit_cluster_keys(ds);
    let waves = wave_labels(ds, cfg.cohorts.as_deref())?;
    if waves.is_empty() {
        return Err(Error::Validation("no treated cohorts to estimate".into()));
    }

    let method = match cfg.weighting {
        Weighting::Identity => Method::GmmIdentity,
        Weighting::TwoStep => Method::GmmTwoStep,
    };

    let mut effects: Vec<GroupTimeEffect> = Vec::new();
    let mut influence: Vec<Vec<f64>> = Vec::new();
    let mut cohort_counts: BTreeMap<i64, usize> = BTreeMap::new();
    let mut cell_sizes: BTreeMap<(i64, i64), (usize, usize)> = BTreeMap::new();
    let mut absent: Vec<(i64, i64)> = Vec::new();
    let mut skipped: Vec<String> = Vec::new();
    let mut clipped = 0usize;

    for (wi, &g) in waves.iter().enumerate() {
        let g_pos = ds.cohort_pos(Cohort::Treated(g)).expect("wave label is on the grid");
        let base_pos = g_pos - cfg.anticipation - 1;
        let mut contributors: BTreeSet<usize> = BTreeSet::new();
        let mut cohort_cells: Vec<(i64, f64, Vec<f64>, bool)> = Vec::new();

        for (win_i, window) in [GmmWindow::Post, GmmWindow::Placebo].into_iter().enumerate() {
            let fit = fit_window(
                ds,
                target,
                g,
                window,
                cfg,
                &keys,
                &mut clipped,
                (wi as u64) * 2 + win_i as u64,
            )?;
            for (label, (est, inf)) in fit
                .solution
                .param_labels
                .iter()
                .zip(fit.solution.estimates.iter().zip(fit.solution.influence.iter()))
            {
                cohort_cells.push((*label, *est, inf.clone(), fit.placebo));
            }
            contributors.extend(fit.contributors);
            for (t, (_, nt, nc)) in fit.sizes {
                cell_sizes.entry((g, t)).or_insert((nt, nc));
            }
            skipped.extend(fit.skipped);
            absent.extend(fit.absent.into_iter().map(|t| (g, t)));
        }

        // The base period is identified as an exact zero by construction.
        cohort_cells.push((ds.periods()[base_pos], 0.0, vec![0.0; ds.n_units()], true));
        cohort_cells.sort_by_key(|c| c.0);
        for (t, est, inf, placebo) in cohort_cells {
            effects.push(GroupTimeEffect {
                target,
                g,
                t,
                anticipation: cfg.anticipation,
                estimate: est,
                se: None,
                method,
                placebo,
            });
            influence.push(inf);
        }
        cohort_counts.insert(g, contributors.len());
    }

    let total: usize = cohort_counts.values().sum();
    if total == 0 {
        return Err(Error::EmptyCell(format!(
            "no unit contributes a single {target} moment"
        )));
    }
    let cohort_shares = cohort_counts
        .into_iter()
        .map(|(g, c)| (g, c as f64 / total as f64))
        .collect();

    effects_sorted(&mut effects, &mut influence);
    Ok(TargetEstimates {
        target,
        effects,
        influence,
        cohort_shares,
        cell_sizes,
        absent,
        skipped_cells: skipped,
        clipped,
        n_units: ds.n_units(),
    })
}

fn effects_sorted(effects: &mut Vec<GroupTimeEffect>, influence: &mut Vec<Vec<f64>>) {
    let mut order: Vec<usize> = (0..effects.len()).collect();
    order.sort_by_key(|&i| (effects[i].g, effects[i].t));
    let eff = std::mem::take(effects);
    let inf = std::mem::take(influence);
    let mut eff_slots: Vec<Option<GroupTimeEffect>> = eff.into_iter().map(Some).collect();
    let mut inf_slots: Vec<Option<Vec<f64>>> = inf.into_iter().map(Some).collect();
    for &i in &order {
        effects.push(eff_slots[i].take().expect("each slot moved once"));
        influence.push(inf_slots[i].take().expect("each slot moved once"));
    }
}

/// Result of the refitting bootstrap: the estimator is recomputed from
/// scratch on unit half-samples, giving a weighting-aware check on the
/// influence-function approximation.
#[derive(Debug, Clone)]
pub struct RefitBootstrap {
    /// Parameter names, aligned with the full-sample grid.
    pub names: Vec<String>,
    /// Full-sample estimates.
    pub estimates: Vec<f64>,
    /// Per-draw estimates; cells absent in a half-sample are NaN.
    pub draws: Vec<Vec<f64>>,
    /// Draws whose refit failed outright.
    pub draws_failed: usize,
}

/// Refits the full estimator on random unit half-samples.
///
/// Each draw keeps the units whose multiplier lands on the positive branch
/// (a weight-{0, 2} resampling of clusters) and reruns point estimation from
/// the propensity fits up. Far slower than the multiplier bootstrap; meant
/// as a validation tool.
pub fn refit_bootstrap(
    ds: &PanelDataset,
    target: Target,
    cfg: &EstimatorConfig,
    draws: usize,
    seed: u64,
) -> Result<RefitBootstrap> {
    if draws == 0 {
        return Err(Error::Validation("refit bootstrap needs at least one draw".into()));
    }
    let full = estimate_target(ds, target, cfg)?;
    let names: Vec<String> = full
        .effects
        .iter()
        .map(|e| format!("{}:g={},t={}", target, e.g, e.t))
        .collect();
    let grid: Vec<(i64, i64)> = full.effects.iter().map(|e| (e.g, e.t)).collect();
    let estimates: Vec<f64> = full.effects.iter().map(|e| e.estimate).collect();

    let mut out: Vec<Vec<f64>> = Vec::with_capacity(draws);
    let mut draws_failed = 0usize;
    for d in 0..draws {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, d as u64));
        let kept: Vec<UnitRecord> = ds
            .units()
            .iter()
            .filter(|_| rng.random::<bool>())
            .cloned()
            .collect();
        let row = PanelDataset::new(kept, ds.periods().to_vec(), ds.covariate_names().to_vec())
            .and_then(|sub| estimate_target(&sub, target, cfg))
            .map(|est| {
                grid.iter()
                    .map(|&(g, t)| est.lookup(g, t).map_or(f64::NAN, |e| e.estimate))
                    .collect::<Vec<f64>>()
            });
        match row {
            Ok(r) => out.push(r),
            Err(_) => {
                draws_failed += 1;
                out.push(vec![f64::NAN; grid.len()]);
            }
        }
    }
    Ok(RefitBootstrap {
        names,
        estimates,
        draws: out,
        draws_failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::effects::chain;
    use crate::panel::Observation;

    fn unit(
        id: &str,
        cohort: Cohort,
        s: bool,
        ys: &[(i64, f64, f64)], // (t, y, x)
    ) -> UnitRecord {
        UnitRecord {
            unit_id: id.into(),
            cohort,
            spillover_ever: s,
            obs: ys
                .iter()
                .map(|&(t, y, x)| (t, Observation { y, covs: vec![x] }))
                .collect(),
            trading: None,
        }
    }

    /// Balanced two-cohort panel with a never-treated arm, no covariates in
    /// play (all x equal), deterministic outcomes.
    fn toy_panel() -> PanelDataset {
        let ts = [1i64, 2, 3, 4];
        let mk = |alpha: f64, g: Option<i64>, s: bool, bump: f64| {
            move |t: i64| {
                let mut y = alpha + t as f64;
                if let Some(gg) = g {
                    if t >= gg {
                        y += (t - gg + 1) as f64 + if s { 1.0 } else { 0.0 } + bump;
                    }
                }
                y
            }
        };
        let mut units = Vec::new();
        let mut id = 0;
        for (alpha, g, s, bump) in [
            (0.3, Some(2), false, 0.0),
            (0.9, Some(2), false, 0.2),
            (0.1, Some(2), true, 0.0),
            (0.4, Some(2), true, -0.2),
            (0.5, Some(3), false, 0.1),
            (0.2, Some(3), true, -0.1),
            (0.6, None, false, 0.0),
            (0.8, None, false, 0.0),
            (0.05, None, false, 0.0),
        ] {
            let f = mk(alpha, g, s, bump);
            units.push(unit(
                &format!("u{id:02}"),
                g.map_or(Cohort::Never, Cohort::Treated),
                s,
                &ts.iter().map(|&t| (t, f(t), 1.0)).collect::<Vec<_>>(),
            ));
            id += 1;
        }
        PanelDataset::new(units, ts.to_vec(), vec!["x".into()]).unwrap()
    }

    #[test]
    fn grid_covers_post_base_and_placebo_cells() {
        let ds = toy_panel();
        let cfg = EstimatorConfig {
            use_covariates: Some(false),
            ..EstimatorConfig::default()
        };
        let est = estimate_target(&ds, Target::Att0, &cfg).unwrap();
        let cells: Vec<(i64, i64)> = est.effects.iter().map(|e| (e.g, e.t)).collect();
        assert_eq!(cells, vec![(2, 1), (2, 2), (2, 3), (2, 4), (3, 1), (3, 2), (3, 3), (3, 4)]);
        // Base periods are exact zeros flagged as placebo.
        let base2 = est.lookup(2, 1).unwrap();
        assert_eq!(base2.estimate, 0.0);
        assert!(base2.placebo);
        let base3 = est.lookup(3, 2).unwrap();
        assert_eq!(base3.estimate, 0.0);
        assert!(base3.placebo);
        // Cohort-3 pre-period cell is a placebo, post cells are not.
        assert!(est.lookup(3, 1).unwrap().placebo);
        assert!(!est.lookup(3, 3).unwrap().placebo);
        assert!(!est.lookup(2, 4).unwrap().placebo);
        // Effects: cohort 2's unexposed units average effect (t - 1) plus
        // their mean bump of 0.1; cohort 3's single unexposed unit carries a
        // 0.1 bump on top of (t - 2).
        assert!((est.lookup(2, 3).unwrap().estimate - 2.1).abs() < 1e-9);
        assert!((est.lookup(3, 4).unwrap().estimate - 2.1).abs() < 1e-9);
    }

    #[test]
    fn identity_grid_matches_direct_chaining() {
        let ds = toy_panel();
        let cfg = EstimatorConfig {
            use_covariates: Some(false),
            k_set: KSet::List(vec![1]),
            ..EstimatorConfig::default()
        };
        for target in [Target::Att0, Target::AttS, Target::Ast, Target::Att] {
            let est = estimate_target(&ds, target, &cfg).unwrap();
            for e in &est.effects {
                let mut moments = BTreeMap::new();
                let g_pos = ds.cohort_pos(Cohort::Treated(e.g)).unwrap();
                for t_pos in 1..ds.periods().len() {
                    let t = ds.periods()[t_pos];
                    let mut clipped = 0;
                    if let Ok(m) = moment_for(&ds, target, e.g, t, 1, &cfg, &mut clipped) {
                        moments.insert(t, m);
                    }
                }
                let _ = g_pos;
                let chained = chain(&ds, target, e.g, e.t, 0, &moments).unwrap();
                assert!(
                    (chained.estimate - e.estimate).abs() < 1e-10,
                    "{target} ({}, {}): chain {} vs gmm {}",
                    e.g,
                    e.t,
                    chained.estimate,
                    e.estimate
                );
            }
        }
    }

    #[test]
    fn cohort_shares_follow_contributing_units() {
        let ds = toy_panel();
        let cfg = EstimatorConfig {
            use_covariates: Some(false),
            ..EstimatorConfig::default()
        };
        // Pooled target: 4 cohort-2 units, 2 cohort-3 units.
        let est = estimate_target(&ds, Target::Att, &cfg).unwrap();
        assert!((est.cohort_shares[&2] - 4.0 / 6.0).abs() < 1e-12);
        assert!((est.cohort_shares[&3] - 2.0 / 6.0).abs() < 1e-12);
        // Spillover-free target: 2 + 1 contributing units.
        let est0 = estimate_target(&ds, Target::Att0, &cfg).unwrap();
        assert!((est0.cohort_shares[&2] - 2.0 / 3.0).abs() < 1e-12);
        assert!((est0.cohort_shares[&3] - 1.0 / 3.0).abs() < 1e-12);
        // Within-cohort contrast counts both sides.
        let ast = estimate_target(&ds, Target::Ast, &cfg).unwrap();
        assert!((ast.cohort_shares[&2] - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn cohort_filter_restricts_the_grid() {
        let ds = toy_panel();
        let cfg = EstimatorConfig {
            use_covariates: Some(false),
            cohorts: Some(vec![3]),
            ..EstimatorConfig::default()
        };
        let est = estimate_target(&ds, Target::Att0, &cfg).unwrap();
        assert!(est.effects.iter().all(|e| e.g == 3));
        assert_eq!(est.cohort_shares.len(), 1);
        assert!((est.cohort_shares[&3] - 1.0).abs() < 1e-12);
        let err = estimate_target(
            &ds,
            Target::Att0,
            &EstimatorConfig {
                cohorts: Some(vec![9]),
                ..cfg
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn family_round_trips_estimates_and_influence() {
        let ds = toy_panel();
        let cfg = EstimatorConfig {
            use_covariates: Some(false),
            ..EstimatorConfig::default()
        };
        let est = estimate_target(&ds, Target::Att0, &cfg).unwrap();
        let fam = est.family(&ds).unwrap();
        assert_eq!(fam.n_params(), est.effects.len());
        assert_eq!(fam.n_units(), ds.n_units());
        assert_eq!(fam.names[0], "att0:g=2,t=1");
        // Influence of every cell sums to zero over units.
        for row in &est.influence {
            let s: f64 = row.iter().sum();
            assert!(s.abs() < 1e-9, "influence sum {s}");
        }
    }

    #[test]
    fn two_step_matches_identity_in_the_exactly_identified_case() {
        // k = 1 only: the system is exactly identified, so the weighting
        // cannot matter.
        let ds = toy_panel();
        let base = EstimatorConfig {
            use_covariates: Some(false),
            k_set: KSet::List(vec![1]),
            ..EstimatorConfig::default()
        };
        let id = estimate_target(&ds, Target::Att0, &base).unwrap();
        let two = estimate_target(
            &ds,
            Target::Att0,
            &EstimatorConfig {
                weighting: Weighting::TwoStep,
                omega_draws: 150,
                ..base
            },
        )
        .unwrap();
        for (a, b) in id.effects.iter().zip(&two.effects) {
            // Exact identification makes the solution invariant to the
            // weighting in exact arithmetic; the bootstrap covariance is
            // nearly singular on nine units, so allow solver-level noise.
            assert!(
                (a.estimate - b.estimate).abs() < 1e-6,
                "({}, {}): {} vs {}",
                a.g,
                a.t,
                a.estimate,
                b.estimate
            );
            assert_eq!(b.method, Method::GmmTwoStep);
        }
    }

    #[test]
    fn ast_adjusted_needs_covariates_and_runs() {
        // Give the panel a real covariate spread so the exposure logit has
        // something to fit.
        let ts = [1i64, 2, 3];
        let mut units = Vec::new();
        for i in 0..14 {
            let x = (i as f64) * 0.3 - 2.0;
            let s = i % 2 == 0;
            let g = if i < 10 { Some(2) } else { None };
            let f = |t: i64| {
                let mut y = 0.2 * (i as f64) + t as f64 + 0.5 * x;
                if let Some(gg) = g {
                    if t >= gg {
                        y += 1.0 + if s { 2.0 } else { 0.0 };
                    }
                }
                y
            };
            units.push(unit(
                &format!("v{i:02}"),
                g.map_or(Cohort::Never, Cohort::Treated),
                g.is_some() && s,
                &ts.iter().map(|&t| (t, f(t), x)).collect::<Vec<_>>(),
            ));
        }
        let ds = PanelDataset::new(units, ts.to_vec(), vec!["x".into()]).unwrap();
        let cfg = EstimatorConfig {
            ast_adjusted: true,
            ..EstimatorConfig::default()
        };
        let est = estimate_target(&ds, Target::Ast, &cfg).unwrap();
        // The spillover gap is homogeneous at 2.0, so reweighting the
        // unexposed side must still recover it.
        assert!((est.lookup(2, 2).unwrap().estimate - 2.0).abs() < 1e-8);
        assert!((est.lookup(2, 3).unwrap().estimate - 2.0).abs() < 1e-8);
    }

    #[test]
    fn refit_bootstrap_reports_grid_and_failures() {
        let ds = toy_panel();
        let cfg = EstimatorConfig {
            use_covariates: Some(false),
            ..EstimatorConfig::default()
        };
        let rb = refit_bootstrap(&ds, Target::Att0, &cfg, 24, 5).unwrap();
        assert_eq!(rb.names.len(), 8);
        assert_eq!(rb.draws.len(), 24);
        // With 9 units, half-samples frequently keep enough structure to
        // refit; at least one draw must succeed and every successful draw
        // carries finite estimates somewhere.
        let ok_rows = rb.draws.iter().filter(|r| r.iter().any(|v| v.is_finite())).count();
        assert!(ok_rows + rb.draws_failed == 24);
        assert!(ok_rows > 0);
    }
}
