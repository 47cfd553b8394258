//! Logistic propensity scores for cohort membership.
//!
//! [`fit_logit`] is a standard iteratively reweighted least squares (IRLS)
//! maximum-likelihood fit with score-based convergence, explicit handling of
//! degenerate labels, and quasi-separation detection via a coefficient
//! sup-norm cap. [`generalized_pscore`] fits the probability of belonging to
//! cohort `g` against a comparison group, conditional on spillover status and
//! on being observed at both periods of a difference, using each unit's
//! baseline covariates (values at its first observed period).
//!
//! # References
//!
//! - McCullagh & Nelder (1989), *Generalized Linear Models*, ch. 4 (IRLS).
//! - Albert & Anderson (1984), *Biometrika* 71(1), on separation in logistic
//!   regression.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{ComparisonGroup, PanelDataset, UnitRecord};

/// Logistic CDF.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Tuning for [`fit_logit`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitConfig {
    /// Convergence tolerance on the score sup-norm and on the relative
    /// log-likelihood change.
    pub tol: f64,
    /// Maximum IRLS iterations.
    pub max_iter: usize,
    /// Coefficient sup-norm cap; exceeding it while the likelihood still
    /// improves is flagged as separation.
    pub separation_cap: f64,
}

impl Default for LogitConfig {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 200,
            separation_cap: 15.0,
        }
    }
}

/// A fitted logistic regression. Coefficients are ordered intercept first,
/// then one slope per feature column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitFit {
    /// Intercept followed by slopes.
    pub coefficients: Vec<f64>,
    /// Whether the score converged within the iteration budget.
    pub converged: bool,
    /// IRLS iterations used.
    pub iterations: usize,
    /// Log-likelihood at the returned coefficients.
    pub log_likelihood: f64,
}

impl LogitFit {
    /// Fitted probability for a feature vector (without intercept entry).
    pub fn predict(&self, covs: &[f64]) -> f64 {
        debug_assert_eq!(covs.len() + 1, self.coefficients.len());
        let eta = self.coefficients[0]
            + covs
                .iter()
                .zip(&self.coefficients[1..])
                .map(|(x, b)| x * b)
                .sum::<f64>();
        sigmoid(eta)
    }
}

fn log_likelihood(eta: &DVector<f64>, y: &[bool]) -> f64 {
    let mut ll = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let p = sigmoid(eta[i]).clamp(1e-300, 1.0 - 1e-16);
        ll += if yi { p.ln() } else { (1.0 - p).ln() };
    }
    ll
}

/// Maximum-likelihood logistic regression of `labels` on `features` (an
/// `n x K` matrix *without* an intercept column; the intercept is added
/// internally).
///
/// # Arguments
///
/// * `features` - design matrix, one row per observation, no intercept column.
/// * `labels` - binary outcomes.
/// * `cfg` - tolerance, iteration budget, and separation cap.
///
/// Returns [`Error::DegenerateLabels`] when all labels agree and
/// [`Error::SeparationDetected`] (with the capped fit attached) when the
/// coefficient sup-norm exceeds the cap while the likelihood is still
/// improving. A fit that merely exhausts `max_iter` is returned with
/// `converged = false`.
pub fn fit_logit(features: &DMatrix<f64>, labels: &[bool], cfg: &LogitConfig) -> Result<LogitFit> {
    let n = features.nrows();
    if n != labels.len() {
        return Err(Error::Validation(format!(
            "{} feature rows but {} labels",
            n,
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::Validation("empty logit sample".into()));
    }
    if labels.iter().all(|&y| y) {
        return Err(Error::DegenerateLabels(1));
    }
    if labels.iter().all(|&y| !y) {
        return Err(Error::DegenerateLabels(0));
    }
    for v in features.iter() {
        if !v.is_finite() {
            return Err(Error::Validation("non-finite feature value".into()));
        }
    }

    let k = features.ncols() + 1;
    let x = {
        let mut x = DMatrix::zeros(n, k);
        x.column_mut(0).fill(1.0);
        x.view_mut((0, 1), (n, k - 1)).copy_from(features);
        x
    };
    let y_vec = DVector::from_iterator(n, labels.iter().map(|&b| f64::from(b)));

    let mut beta = DVector::zeros(k);
    let mut eta = &x * &beta;
    let mut ll = log_likelihood(&eta, labels);
    for iter in 0..cfg.max_iter {
        let p = eta.map(sigmoid);
        let score = x.transpose() * (&y_vec - &p);
        if score.amax() < cfg.tol {
            return Ok(LogitFit {
                coefficients: beta.iter().copied().collect(),
                converged: true,
                iterations: iter,
                log_likelihood: ll,
            });
        }

        let w = p.map(|pi| (pi * (1.0 - pi)).max(1e-12));
        let mut xtwx = DMatrix::<f64>::zeros(k, k);
        for r in 0..n {
            let row = x.row(r);
            for a in 0..k {
                for b in a..k {
                    xtwx[(a, b)] += w[r] * row[a] * row[b];
                }
            }
        }
        for a in 0..k {
            for b in 0..a {
                xtwx[(a, b)] = xtwx[(b, a)];
            }
        }
        let trace = xtwx.trace().max(f64::MIN_POSITIVE);
        let mut jitter = 0.0;
        let direction = loop {
            let mut h = xtwx.clone();
            if jitter > 0.0 {
                for d in 0..k {
                    h[(d, d)] += jitter * trace / k as f64;
                }
            }
            match h.cholesky() {
                Some(chol) => break chol.solve(&score),
                None => {
                    jitter = if jitter == 0.0 { 1e-12 } else { jitter * 10.0 };
                    if jitter > 1e-4 {
                        return Err(Error::IllConditioned(format!(
                            "information matrix not positive definite (n = {n}, k = {k})"
                        )));
                    }
                }
            }
        };

        // Step-halving keeps IRLS monotone in the likelihood.
        let mut step = 1.0;
        let (new_beta, new_eta, new_ll) = loop {
            let cand = &beta + &direction * step;
            let cand_eta = &x * &cand;
            let cand_ll = log_likelihood(&cand_eta, labels);
            if cand_ll >= ll - 1e-10 * (1.0 + ll.abs()) || step < 1e-10 {
                break (cand, cand_eta, cand_ll);
            }
            step *= 0.5;
        };

        let improving = new_ll > ll;
        beta = new_beta;
        eta = new_eta;
        let rel_change = (new_ll - ll).abs() / (1.0 + new_ll.abs());
        ll = new_ll;

        if beta.amax() > cfg.separation_cap && improving {
            let scale = cfg.separation_cap / beta.amax();
            let capped = &beta * scale;
            let capped_ll = log_likelihood(&(&x * &capped), labels);
            return Err(Error::SeparationDetected {
                cap: cfg.separation_cap,
                fit: Box::new(LogitFit {
                    coefficients: capped.iter().copied().collect(),
                    converged: false,
                    iterations: iter + 1,
                    log_likelihood: capped_ll,
                }),
            });
        }
        if rel_change < cfg.tol {
            let score = x.transpose() * (&y_vec - eta.map(sigmoid));
            return Ok(LogitFit {
                coefficients: beta.iter().copied().collect(),
                converged: score.amax() < cfg.tol.max(1e-6),
                iterations: iter + 1,
                log_likelihood: ll,
            });
        }
    }
    Ok(LogitFit {
        coefficients: beta.iter().copied().collect(),
        converged: false,
        iterations: cfg.max_iter,
        log_likelihood: ll,
    })
}

/// Spillover-status filter applied to one side of a propensity sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpilloverFilter {
    /// Only units never subject to spillovers.
    Unexposed,
    /// Only units ever subject to spillovers.
    Exposed,
    /// No restriction.
    Any,
}

impl SpilloverFilter {
    /// Whether a unit passes the filter.
    pub fn accepts(self, spillover_ever: bool) -> bool {
        match self {
            SpilloverFilter::Unexposed => !spillover_ever,
            SpilloverFilter::Exposed => spillover_ever,
            SpilloverFilter::Any => true,
        }
    }
}

/// Fitted propensity scores for one (g, s, k, t, comparison) context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PScoreTable {
    /// Cohort label.
    pub g: i64,
    /// Later period label of the difference.
    pub t: i64,
    /// Difference order (in grid positions).
    pub k: usize,
    /// Treated-side spillover filter the fit conditioned on.
    pub treated_filter: SpilloverFilter,
    /// Comparison-side spillover filter the fit conditioned on.
    pub comparison_filter: SpilloverFilter,
    /// Comparison group definition.
    pub comparison: ComparisonGroup,
    /// Fitted probability of cohort membership per unit index (dataset
    /// order), clipped away from 0 and 1.
    pub scores: BTreeMap<usize, f64>,
    /// Number of scores that hit the clipping bounds.
    pub clipped: usize,
    /// The underlying logistic fit.
    pub fit: LogitFit,
}

/// Resolves covariate names to column indices in the dataset.
fn covariate_indices(ds: &PanelDataset, names: &[String]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            ds.covariate_names()
                .iter()
                .position(|c| c == n)
                .ok_or_else(|| Error::Validation(format!("unknown covariate {n}")))
        })
        .collect()
}

fn baseline_features(unit: &UnitRecord, idx: &[usize]) -> Vec<f64> {
    let base = unit.baseline_covs().unwrap_or(&[]);
    idx.iter().map(|&j| base[j]).collect()
}

/// Fits cohort-membership propensity scores on the pooled treated-plus-
/// comparison subsample observed at both periods of a difference, with
/// explicit spillover filters per side. The treated side is cohort `g`; the
/// comparison side follows `cg` at the later period `t`.
///
/// Scores are clipped to `[clip, 1 - clip]` and the number of clipped units
/// is reported.
#[allow(clippy::too_many_arguments)]
pub fn fit_pscore(
    ds: &PanelDataset,
    g: i64,
    t: i64,
    k: usize,
    cg: ComparisonGroup,
    treated_filter: SpilloverFilter,
    comparison_filter: SpilloverFilter,
    covariate_names: &[String],
    clip: f64,
    cfg: &LogitConfig,
) -> Result<PScoreTable> {
    if !(0.0..0.5).contains(&clip) {
        return Err(Error::Validation(format!("clip {clip} outside [0, 0.5)")));
    }
    let g_pos = ds
        .cohort_pos(crate::panel::Cohort::Treated(g))
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
    let idx = covariate_indices(ds, covariate_names)?;

    let mut members: Vec<usize> = Vec::new();
    let mut labels: Vec<bool> = Vec::new();
    for (i, u) in ds.units().iter().enumerate() {
        if u.outcome_diff(lo, t).is_none() {
            continue;
        }
        if ds.cohort_pos(u.cohort) == Some(g_pos) {
            if treated_filter.accepts(u.spillover_ever) {
                members.push(i);
                labels.push(true);
            }
        } else if ds.in_comparison(u, cg, g_pos, t_pos)
            && comparison_filter.accepts(u.spillover_ever)
        {
            members.push(i);
            labels.push(false);
        }
    }
    let n_treat = labels.iter().filter(|&&l| l).count();
    if n_treat == 0 || n_treat == labels.len() {
        return Err(Error::EmptyCell(format!(
            "pscore cell (g = {g}, t = {t}, k = {k}): {} treated, {} comparison",
            n_treat,
            labels.len() - n_treat
        )));
    }

    let rows: Vec<Vec<f64>> = members
        .iter()
        .map(|&i| baseline_features(&ds.units()[i], &idx))
        .collect();
    let features = DMatrix::from_fn(rows.len(), idx.len(), |r, c| rows[r][c]);
    let fit = fit_logit(&features, &labels, cfg)?;

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
        treated_filter,
        comparison_filter,
        comparison: cg,
        scores,
        clipped,
        fit,
    })
}

/// Generalized propensity score `P(G_g = 1 | X, treated or comparison,
/// S = s, observed at both t - k and t)`.
///
/// For `s = 0` both sides are restricted to spillover-free units. For `s = 1`
/// the treated side is restricted to exposed cohort members while the
/// comparison side is unrestricted (never-treated units carry no spillover
/// exposure by construction, so a literal joint restriction would empty the
/// comparison side).
#[allow(clippy::too_many_arguments)]
pub fn generalized_pscore(
    ds: &PanelDataset,
    g: i64,
    s: bool,
    k: usize,
    t: i64,
    cg: ComparisonGroup,
    covariate_names: &[String],
    clip: f64,
    cfg: &LogitConfig,
) -> Result<PScoreTable> {
    let (tf, cf) = if s {
        (SpilloverFilter::Exposed, SpilloverFilter::Any)
    } else {
        (SpilloverFilter::Unexposed, SpilloverFilter::Unexposed)
    };
    fit_pscore(ds, g, t, k, cg, tf, cf, covariate_names, clip, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intercept_only_reproduces_label_mean() {
        let x = DMatrix::<f64>::zeros(10, 0);
        let y = [true, true, true, false, false, false, false, false, false, false];
        let fit = fit_logit(&x, &y, &LogitConfig::default()).unwrap();
        assert!(fit.converged);
        let p = fit.predict(&[]);
        assert!((p - 0.3).abs() < 1e-9, "p = {p}");
    }

    #[test]
    fn mean_fitted_probability_matches_label_mean() {
        // Score convergence implies the intercept component of the score is
        // ~0, i.e. mean fitted probability equals the label mean.
        let xs = [0.2, -1.3, 0.7, 2.1, -0.4, 0.0, 1.5, -2.2, 0.9, 0.3, -0.8, 1.1];
        let ys = [true, false, true, true, false, false, true, false, true, false, false, true];
        let x = DMatrix::from_column_slice(xs.len(), 1, &xs);
        let fit = fit_logit(&x, &ys, &LogitConfig::default()).unwrap();
        assert!(fit.converged);
        let mean_p: f64 = xs.iter().map(|&v| fit.predict(&[v])).sum::<f64>() / xs.len() as f64;
        let mean_y: f64 = ys.iter().map(|&b| f64::from(b)).sum::<f64>() / ys.len() as f64;
        assert!((mean_p - mean_y).abs() < 1e-8);
    }

    #[test]
    fn affine_rescaling_leaves_probabilities_invariant() {
        let xs: Vec<f64> = (0..40).map(|i| (i as f64) * 0.17 - 3.0).collect();
        let ys: Vec<bool> = xs.iter().enumerate().map(|(i, &v)| v + ((i % 7) as f64) * 0.5 > 0.3).collect();
        let x1 = DMatrix::from_column_slice(xs.len(), 1, &xs);
        let rescaled: Vec<f64> = xs.iter().map(|&v| 100.0 * v + 40.0).collect();
        let x2 = DMatrix::from_column_slice(xs.len(), 1, &rescaled);
        let cfg = LogitConfig::default();
        let f1 = fit_logit(&x1, &ys, &cfg).unwrap();
        let f2 = fit_logit(&x2, &ys, &cfg).unwrap();
        for (&a, &b) in xs.iter().zip(&rescaled) {
            assert!((f1.predict(&[a]) - f2.predict(&[b])).abs() < 1e-6);
        }
    }

    #[test]
    fn degenerate_labels_are_rejected() {
        let x = DMatrix::<f64>::zeros(5, 0);
        assert!(matches!(
            fit_logit(&x, &[true; 5], &LogitConfig::default()),
            Err(Error::DegenerateLabels(1))
        ));
        assert!(matches!(
            fit_logit(&x, &[false; 5], &LogitConfig::default()),
            Err(Error::DegenerateLabels(0))
        ));
    }

    #[test]
    fn perfect_separation_is_detected_with_capped_fit() {
        let xs = [-2.0, -1.5, -1.0, 1.0, 1.5, 2.0];
        let ys = [false, false, false, true, true, true];
        let x = DMatrix::from_column_slice(6, 1, &xs);
        match fit_logit(&x, &ys, &LogitConfig::default()) {
            Err(Error::SeparationDetected { cap, fit }) => {
                assert_eq!(cap, 15.0);
                let sup = fit
                    .coefficients
                    .iter()
                    .fold(0.0f64, |m, &c| m.max(c.abs()));
                assert!((sup - 15.0).abs() < 1e-9);
                assert!(fit.coefficients[1] > 0.0);
            }
            other => panic!("expected separation, got {other:?}"),
        }
    }

    #[test]
    fn score_is_zero_at_the_fit() {
        let xs: Vec<f64> = (0..60).map(|i| ((i * 37) % 23) as f64 * 0.1 - 1.0).collect();
        let ys: Vec<bool> = xs
            .iter()
            .enumerate()
            .map(|(i, &v)| sigmoid(0.4 + 0.9 * v) > ((i * 17) % 100) as f64 / 100.0)
            .collect();
        let x = DMatrix::from_column_slice(xs.len(), 1, &xs);
        let fit = fit_logit(&x, &ys, &LogitConfig::default()).unwrap();
        assert!(fit.converged);
        // Evaluate the score by hand at the returned coefficients.
        let (mut s0, mut s1) = (0.0, 0.0);
        for (&v, &y) in xs.iter().zip(&ys) {
            let r = f64::from(y) - fit.predict(&[v]);
            s0 += r;
            s1 += r * v;
        }
        assert!(s0.abs() < 1e-6 && s1.abs() < 1e-6, "score ({s0}, {s1})");
    }
}
