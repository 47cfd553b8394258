//! Two-way fixed-effects event-study regression benchmark.
//!
//! Estimates the saturated interaction regression
//! `y_it = a_i + l_t + sum_{g,tau} b_{g,tau} G_ig (1 - S_i) 1{t = tau}
//!        + sum_{g,tau} c_{g,tau} G_ig S_i 1{t = tau} + e_it`
//! with one interaction per cohort, spillover status, and period other than
//! the cohort's base period. The fixed effects are absorbed by the within
//! transformation (alternating demeaning over units and periods, which
//! converges on unbalanced panels), and the interaction coefficients are the
//! regression analogues of the direct and total group-time effects.
//!
//! # References
//!
//! - Frisch & Waugh (1933), *Econometrica* 1(4), for the partialled-out
//!   regression logic; Guimarães & Portugal (2010), *Stata Journal* 10(4),
//!   for alternating projections with high-dimensional fixed effects.
//! - Arellano (1987), *Oxford Bulletin of Economics and Statistics* 49(4),
//!   for unit-clustered covariance.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::effects::Target;
use crate::error::{Error, Result};
use crate::panel::{Cohort, PanelDataset};

/// One interaction coefficient from the regression.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwfeEstimate {
    /// Which estimand the coefficient benchmarks ([`Target::Att0`] for the
    /// unexposed interaction, [`Target::AttS`] for the exposed one).
    pub target: Target,
    /// Cohort label.
    pub g: i64,
    /// Period label.
    pub t: i64,
    /// Coefficient estimate.
    pub estimate: f64,
    /// Unit-clustered standard error.
    pub se: f64,
    /// Whether the period precedes the cohort's treatment start.
    pub placebo: bool,
}

/// Fitted regression benchmark.
#[derive(Debug, Clone)]
pub struct TwfeFit {
    /// Interaction coefficients.
    pub estimates: Vec<TwfeEstimate>,
    /// Observations used.
    pub n_obs: usize,
    /// Units used.
    pub n_units: usize,
    /// Interaction cells with no members, skipped from the design.
    pub empty_cells: Vec<String>,
    /// Demeaning sweeps performed.
    pub sweeps: usize,
}

const DEMEAN_TOL: f64 = 1e-11;
const MAX_SWEEPS: usize = 500;

struct Column {
    name: String,
    target: Target,
    g: i64,
    t: i64,
    placebo: bool,
    values: Vec<f64>,
}

/// Runs the saturated two-way fixed-effects event-study regression.
///
/// The benchmark mirrors the no-covariates, zero-anticipation scope of the
/// chained estimators; base period is the period before each cohort's
/// adoption. Interaction cells without members are skipped and listed;
/// collinearity among the remaining columns is an error naming the columns.
pub fn twfe_event_study(ds: &PanelDataset) -> Result<TwfeFit> {
    let periods = ds.periods();
    // Long-format index of observed rows.
    let mut row_unit: Vec<usize> = Vec::new();
    let mut row_tpos: Vec<usize> = Vec::new();
    let mut y: Vec<f64> = Vec::new();
    for (i, u) in ds.units().iter().enumerate() {
        for (&t, obs) in &u.obs {
            row_unit.push(i);
            row_tpos.push(
                periods
                    .binary_search(&t)
                    .map_err(|_| Error::Validation(format!("period {t} not in grid")))?,
            );
            y.push(obs.y);
        }
    }
    let n_rows = y.len();
    if n_rows == 0 {
        return Err(Error::Validation("no observations".into()));
    }

    // Interaction columns: cohort x spillover status x period (minus base).
    let mut columns: Vec<Column> = Vec::new();
    let mut empty_cells: Vec<String> = Vec::new();
    for g_pos in ds.treated_positions() {
        if g_pos == 0 {
            return Err(Error::Validation(format!(
                "cohort {} treated in the first period has no base period",
                periods[g_pos]
            )));
        }
        let g = periods[g_pos];
        let base_pos = g_pos - 1;
        for s in [false, true] {
            let members: Vec<usize> = ds
                .units()
                .iter()
                .enumerate()
                .filter(|(_, u)| u.cohort == Cohort::Treated(g) && u.spillover_ever == s)
                .map(|(i, _)| i)
                .collect();
            let target = if s { Target::AttS } else { Target::Att0 };
            if members.is_empty() {
                empty_cells.push(format!("{target}: cohort {g} has no S = {} units", s as u8));
                continue;
            }
            for t_pos in 0..periods.len() {
                if t_pos == base_pos {
                    continue;
                }
                let mut values = vec![0.0; n_rows];
                let mut any = false;
                for r in 0..n_rows {
                    if row_tpos[r] == t_pos && members.binary_search(&row_unit[r]).is_ok() {
                        values[r] = 1.0;
                        any = true;
                    }
                }
                let t = periods[t_pos];
                let name = format!("{target}:g={g},t={t}");
                if !any {
                    empty_cells.push(name);
                    continue;
                }
                columns.push(Column {
                    name,
                    target,
                    g,
                    t,
                    placebo: t_pos < g_pos,
                    values,
                });
            }
        }
    }
    if columns.is_empty() {
        return Err(Error::Validation("no treated interaction cells in sample".into()));
    }

    // Within transformation: alternating unit/period demeaning of y and
    // every column until both groupwise means vanish.
    let n_units = ds.n_units();
    let n_periods = periods.len();
    let mut unit_count = vec![0usize; n_units];
    let mut time_count = vec![0usize; n_periods];
    for r in 0..n_rows {
        unit_count[row_unit[r]] += 1;
        time_count[row_tpos[r]] += 1;
    }
    let mut mats: Vec<&mut Vec<f64>> = Vec::with_capacity(columns.len() + 1);
    mats.push(&mut y);
    for c in columns.iter_mut() {
        mats.push(&mut c.values);
    }
    let mut sweeps = 0;
    loop {
        sweeps += 1;
        let mut worst: f64 = 0.0;
        for vals in mats.iter_mut() {
            let mut um = vec![0.0; n_units];
            for r in 0..n_rows {
                um[row_unit[r]] += vals[r];
            }
            for (m, &c) in um.iter_mut().zip(&unit_count) {
                *m /= c as f64;
            }
            for r in 0..n_rows {
                vals[r] -= um[row_unit[r]];
            }
            let mut tm = vec![0.0; n_periods];
            for r in 0..n_rows {
                tm[row_tpos[r]] += vals[r];
            }
            for (m, &c) in tm.iter_mut().zip(&time_count) {
                *m /= c as f64;
            }
            for r in 0..n_rows {
                vals[r] -= tm[row_tpos[r]];
            }
            // Residual unit means measure convergence on unbalanced panels.
            let mut um2 = vec![0.0; n_units];
            for r in 0..n_rows {
                um2[row_unit[r]] += vals[r];
            }
            for (m, &c) in um2.iter_mut().zip(&unit_count) {
                worst = worst.max((*m / c as f64).abs());
            }
        }
        if worst < DEMEAN_TOL || sweeps >= MAX_SWEEPS {
            break;
        }
    }
    drop(mats);

    // Least squares on the demeaned system.
    let k = columns.len();
    let mut xtx = DMatrix::zeros(k, k);
    let mut xty = DVector::zeros(k);
    for a in 0..k {
        for b in a..k {
            let s: f64 = columns[a]
                .values
                .iter()
                .zip(&columns[b].values)
                .map(|(u, v)| u * v)
                .sum();
            xtx[(a, b)] = s;
            xtx[(b, a)] = s;
        }
        xty[a] = columns[a].values.iter().zip(&y).map(|(u, v)| u * v).sum();
    }
    let chol = match Cholesky::new(xtx.clone()) {
        Some(c) => c,
        None => {
            // Identify a set of columns whose removal restores full rank by
            // greedy Gram determinant growth.
            let mut kept: Vec<usize> = Vec::new();
            let mut dropped: Vec<String> = Vec::new();
            for j in 0..k {
                let mut trial = kept.clone();
                trial.push(j);
                let sub = xtx.select_rows(trial.as_slice()).select_columns(trial.as_slice());
                if Cholesky::new(sub).is_some() {
                    kept.push(j);
                } else {
                    dropped.push(columns[j].name.clone());
                }
            }
            return Err(Error::CollinearDesign(dropped));
        }
    };
    let beta = chol.solve(&xty);

    // Unit-clustered covariance with the CR1 small-sample factor.
    let mut resid = y.clone();
    for r in 0..n_rows {
        let mut fit = 0.0;
        for (j, c) in columns.iter().enumerate() {
            fit += c.values[r] * beta[j];
        }
        resid[r] -= fit;
    }
    let mut meat = DMatrix::zeros(k, k);
    let mut score = DVector::zeros(k);
    let mut current = row_unit[0];
    let mut clusters = 0usize;
    let flush = |score: &mut DVector<f64>, meat: &mut DMatrix<f64>, clusters: &mut usize| {
        *meat += &*score * score.transpose();
        score.fill(0.0);
        *clusters += 1;
    };
    for r in 0..n_rows {
        if row_unit[r] != current {
            flush(&mut score, &mut meat, &mut clusters);
            current = row_unit[r];
        }
        for (j, c) in columns.iter().enumerate() {
            score[j] += c.values[r] * resid[r];
        }
    }
    flush(&mut score, &mut meat, &mut clusters);
    let bread = chol.inverse();
    let c_adj = if clusters > 1 && n_rows > k {
        (clusters as f64 / (clusters as f64 - 1.0))
            * ((n_rows as f64 - 1.0) / (n_rows as f64 - k as f64))
    } else {
        1.0
    };
    let vcov = &bread * meat * &bread * c_adj;

    let estimates = columns
        .iter()
        .enumerate()
        .map(|(j, c)| TwfeEstimate {
            target: c.target,
            g: c.g,
            t: c.t,
            estimate: beta[j],
            se: vcov[(j, j)].max(0.0).sqrt(),
            placebo: c.placebo,
        })
        .collect();

    Ok(TwfeFit {
        estimates,
        n_obs: n_rows,
        n_units,
        empty_cells,
        sweeps,
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

    #[test]
    fn two_by_two_equals_double_difference() {
        let ds = PanelDataset::new(
            vec![
                unit("t", Cohort::Treated(2), false, &[(1, 1.0), (2, 5.0)]),
                unit("c", Cohort::Never, false, &[(1, 0.5), (2, 1.5)]),
            ],
            vec![1, 2],
            vec![],
        )
        .unwrap();
        let fit = twfe_event_study(&ds).unwrap();
        assert_eq!(fit.estimates.len(), 1);
        // (5 - 1) - (1.5 - 0.5) = 3.
        assert!((fit.estimates[0].estimate - 3.0).abs() < 1e-9);
        assert_eq!(fit.estimates[0].target, Target::Att0);
        assert!(!fit.estimates[0].placebo);
    }

    #[test]
    fn exposed_and_unexposed_cells_are_separated() {
        let ds = PanelDataset::new(
            vec![
                unit("t0", Cohort::Treated(2), false, &[(1, 0.0), (2, 2.0), (3, 3.0)]),
                unit("t1", Cohort::Treated(2), true, &[(1, 0.0), (2, 3.0), (3, 5.0)]),
                unit("c1", Cohort::Never, false, &[(1, 0.0), (2, 0.0), (3, 0.0)]),
                unit("c2", Cohort::Never, false, &[(1, 0.5), (2, 0.5), (3, 0.5)]),
            ],
            vec![1, 2, 3],
            vec![],
        )
        .unwrap();
        let fit = twfe_event_study(&ds).unwrap();
        let get = |target: Target, t: i64| {
            fit.estimates
                .iter()
                .find(|e| e.target == target && e.t == t)
                .unwrap()
                .estimate
        };
        // Never-treated outcomes are flat, so coefficients equal within-unit
        // changes from the base period.
        assert!((get(Target::Att0, 2) - 2.0).abs() < 1e-9);
        assert!((get(Target::Att0, 3) - 3.0).abs() < 1e-9);
        assert!((get(Target::AttS, 2) - 3.0).abs() < 1e-9);
        assert!((get(Target::AttS, 3) - 5.0).abs() < 1e-9);
    }

    #[test]
    fn pre_periods_are_placebos_and_base_is_excluded() {
        let ds = PanelDataset::new(
            vec![
                unit("t", Cohort::Treated(3), false, &[(1, 0.1), (2, 0.0), (3, 1.0), (4, 2.0)]),
                unit("c", Cohort::Never, false, &[(1, 0.0), (2, 0.0), (3, 0.0), (4, 0.0)]),
            ],
            vec![1, 2, 3, 4],
            vec![],
        )
        .unwrap();
        let fit = twfe_event_study(&ds).unwrap();
        let ts: Vec<i64> = fit.estimates.iter().map(|e| e.t).collect();
        assert_eq!(ts, vec![1, 3, 4]); // base t = 2 excluded
        assert!(fit.estimates[0].placebo);
        assert!(!fit.estimates[1].placebo);
        // Placebo coefficient: y1 - y2 relative change = 0.1.
        assert!((fit.estimates[0].estimate - 0.1).abs() < 1e-9);
    }

    #[test]
    fn missing_subgroup_is_skipped_not_fatal() {
        let ds = PanelDataset::new(
            vec![
                unit("t", Cohort::Treated(2), false, &[(1, 0.0), (2, 1.0)]),
                unit("c", Cohort::Never, false, &[(1, 0.0), (2, 0.0)]),
            ],
            vec![1, 2],
            vec![],
        )
        .unwrap();
        let fit = twfe_event_study(&ds).unwrap();
        assert!(fit.estimates.iter().all(|e| e.target == Target::Att0));
        assert!(!fit.empty_cells.is_empty());
    }

    #[test]
    fn unbalanced_panel_converges() {
        // Staggered observation gaps force multiple demeaning sweeps.
        let ds = PanelDataset::new(
            vec![
                unit("t1", Cohort::Treated(3), false, &[(1, 0.2), (3, 1.9), (4, 3.1)]),
                unit("t2", Cohort::Treated(3), false, &[(2, 0.1), (3, 2.1), (4, 2.9)]),
                unit("c1", Cohort::Never, false, &[(1, 0.0), (2, 0.1), (4, 0.2)]),
                unit("c2", Cohort::Never, false, &[(1, 0.1), (2, 0.0), (3, 0.1), (4, 0.1)]),
            ],
            vec![1, 2, 3, 4],
            vec![],
        )
        .unwrap();
        let fit = twfe_event_study(&ds).unwrap();
        assert!(fit.sweeps > 1);
        assert!(fit.estimates.iter().any(|e| e.t == 4 && e.estimate > 2.0));
    }
}
