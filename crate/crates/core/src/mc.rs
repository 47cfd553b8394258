//! Monte Carlo laboratory: a staggered-adoption data-generating process with
//! spillovers among treated units, covariate-driven cohort selection, and
//! optional random attrition, plus a replication driver that reports bias and
//! RMSE per estimand and weighting.
//!
//! The design follows the standard event-study simulation template (linear
//! dynamic effects over a short panel, cohorts selected on a noisy covariate)
//! with one addition: treated units carry a binary exposure flag `S` that adds
//! a constant `gamma` to their effect path, so direct, total, and spillover
//! estimands have distinct closed-form truths.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Mutex, OnceLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::effects::Target;
use crate::error::{Error, Result};
use crate::estimator::{estimate_target, EstimatorConfig, KSet};
use crate::gmm::Weighting;
use crate::inference::derive_seed;
use crate::panel::{Cohort, ComparisonGroup, Observation, PanelDataset, UnitRecord};
use crate::propensity::sigmoid;

/// Data-generating process parameters.
///
/// Outcomes follow `y = alpha_i + t + beta * x_it + u_it`, plus
/// `effect_scale * ((t - g + 1) + gamma * s_i) + nu_it` once a unit's cohort
/// is treated. The unit effect is `alpha_i ~ U(0.1, 0.9)`; the covariate is
/// `x = 1 + 0.1 alpha_i + v` with `v` drawn once per unit by default (set
/// `x_time_varying` for a fresh draw each period). Cohort membership is
/// multinomial over never-treated plus each cohort `g` with weight
/// `exp(0.5 (g / max g) x_i1)`; exposure is `P(S = 1 | alpha) =
/// sigmoid(1 + 0.5 alpha - c)` with `c` calibrated so the average exposure
/// rate among treated units is `p_bar_s`; observation is
/// `P(A = 1 | alpha, t) = sigmoid(1 + 0.1 alpha t - c')` calibrated to
/// `p_bar_a` (1 keeps the panel balanced).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    /// Units drawn.
    pub n_units: usize,
    /// Periods `1..=t_max`.
    pub t_max: i64,
    /// Treated cohort labels (first treated period), ascending.
    pub cohorts: Vec<i64>,
    /// Covariate coefficient in the outcome.
    pub beta: f64,
    /// Spillover shift added to exposed units' effects.
    pub gamma: f64,
    /// Idiosyncratic outcome noise (standard deviation).
    pub sd_u: f64,
    /// Covariate noise (standard deviation).
    pub sd_v: f64,
    /// Treatment-effect noise (standard deviation).
    pub sd_nu: f64,
    /// Target average exposure rate among treated units.
    pub p_bar_s: f64,
    /// Target average observation rate; 1 keeps the panel balanced.
    pub p_bar_a: f64,
    /// Multiplies the whole effect path.
    pub effect_scale: f64,
    /// Redraw the covariate noise every period instead of once per unit.
    pub x_time_varying: bool,
    /// RNG seed.
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            n_units: 1000,
            t_max: 10,
            cohorts: (3..=8).collect(),
            beta: 1.0,
            gamma: 1.0,
            sd_u: 0.5,
            sd_v: 0.5,
            sd_nu: 0.5,
            p_bar_s: 0.5,
            p_bar_a: 1.0,
            effect_scale: 1.0,
            x_time_varying: false,
            seed: 0,
        }
    }
}

impl DgpConfig {
    /// Checks parameter ranges and the cohort layout.
    pub fn validate(&self) -> Result<()> {
        if self.n_units == 0 {
            return Err(Error::Validation("n_units must be positive".into()));
        }
        if self.cohorts.is_empty() {
            return Err(Error::Validation("at least one treated cohort".into()));
        }
        if self.cohorts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Validation("cohorts must be strictly ascending".into()));
        }
        let (lo, hi) = (self.cohorts[0], *self.cohorts.last().unwrap());
        if lo < 2 {
            return Err(Error::Validation(
                "the earliest cohort needs a pre-treatment period (g >= 2)".into(),
            ));
        }
        if self.t_max < hi + 1 {
            return Err(Error::Validation(format!(
                "t_max = {} leaves cohort {hi} without a post horizon",
                self.t_max
            )));
        }
        for (name, p) in [("p_bar_s", self.p_bar_s), ("p_bar_a", self.p_bar_a)] {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Validation(format!("{name} = {p} outside (0, 1]")));
            }
        }
        for (name, sd) in [("sd_u", self.sd_u), ("sd_v", self.sd_v), ("sd_nu", self.sd_nu)] {
            if !sd.is_finite() || sd < 0.0 {
                return Err(Error::Validation(format!("{name} = {sd} is not a valid sd")));
            }
        }
        Ok(())
    }
}

/// Midpoint grid over the support of `alpha`.
const CALIBRATION_GRID: usize = 1_000_000;
/// Calibration stops when the implied mean probability is this close.
const CALIBRATION_TOL: f64 = 1e-4;

fn grid_alpha(j: usize) -> f64 {
    0.1 + 0.8 * ((j as f64 + 0.5) / CALIBRATION_GRID as f64)
}

fn mean_prob_s(c: f64) -> f64 {
    let mut acc = 0.0;
    for j in 0..CALIBRATION_GRID {
        acc += sigmoid(1.0 + 0.5 * grid_alpha(j) - c);
    }
    acc / CALIBRATION_GRID as f64
}

fn mean_prob_a(c: f64, t_max: i64) -> f64 {
    let mut acc = 0.0;
    for t in 1..=t_max {
        let tf = t as f64;
        for j in 0..CALIBRATION_GRID {
            acc += sigmoid(1.0 + 0.1 * grid_alpha(j) * tf - c);
        }
    }
    acc / (CALIBRATION_GRID as f64 * t_max as f64)
}

#[derive(Hash, PartialEq, Eq, Clone, Copy)]
enum CalKind {
    Exposure,
    Observation(i64),
}

fn calibration_cache() -> &'static Mutex<HashMap<(CalKind, u64), f64>> {
    static CACHE: OnceLock<Mutex<HashMap<(CalKind, u64), f64>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Bisects the intercept shift `c` so the grid-averaged probability hits
/// `target`. The mean is strictly decreasing in `c`, so plain bisection on a
/// wide bracket converges; results are cached per (kind, target).
fn calibrate(kind: CalKind, target: f64) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Validation(format!(
            "calibration target {target} outside (0, 1)"
        )));
    }
    let key = (kind, target.to_bits());
    if let Some(&c) = calibration_cache().lock().expect("calibration cache poisoned").get(&key) {
        return Ok(c);
    }
    let mean = |c: f64| match kind {
        CalKind::Exposure => mean_prob_s(c),
        CalKind::Observation(t_max) => mean_prob_a(c, t_max),
    };
    let (mut lo, mut hi) = (-30.0f64, 30.0f64);
    let mut mid = 0.0;
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let m = mean(mid);
        if (m - target).abs() <= CALIBRATION_TOL {
            calibration_cache()
                .lock()
                .expect("calibration cache poisoned")
                .insert(key, mid);
            return Ok(mid);
        }
        // mean decreases in c.
        if m > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let achieved = mean(mid);
    if (achieved - target).abs() <= CALIBRATION_TOL {
        calibration_cache()
            .lock()
            .expect("calibration cache poisoned")
            .insert(key, mid);
        return Ok(mid);
    }
    Err(Error::Computation(format!(
        "intercept calibration missed target {target}: achieved {achieved}"
    )))
}

#[cfg(test)]
pub(crate) fn calibrated_exposure_intercept(p: f64) -> Result<f64> {
    calibrate(CalKind::Exposure, p)
}

#[cfg(test)]
pub(crate) fn exposure_mean_at(c: f64) -> f64 {
    mean_prob_s(c)
}

/// Draws one panel from the process.
///
/// Per unit the draw order is fixed: `alpha`, covariate noise, the cohort
/// selector, the exposure coin (treated units only), then per period the
/// outcome noise, effect noise, and (when `p_bar_a < 1`) the observation
/// coin. Units that end up with no observed periods are dropped.
pub fn generate(cfg: &DgpConfig) -> Result<PanelDataset> {
    cfg.validate()?;
    let c_s = if cfg.p_bar_s < 1.0 {
        Some(calibrate(CalKind::Exposure, cfg.p_bar_s)?)
    } else {
        None
    };
    let c_a = if cfg.p_bar_a < 1.0 {
        Some(calibrate(CalKind::Observation(cfg.t_max), cfg.p_bar_a)?)
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal_v = Normal::new(0.0, cfg.sd_v).map_err(|e| Error::Validation(e.to_string()))?;
    let normal_u = Normal::new(0.0, cfg.sd_u).map_err(|e| Error::Validation(e.to_string()))?;
    let normal_nu = Normal::new(0.0, cfg.sd_nu).map_err(|e| Error::Validation(e.to_string()))?;
    let g_max = *cfg.cohorts.last().unwrap() as f64;
    let t_count = cfg.t_max as usize;

    let mut units: Vec<UnitRecord> = Vec::with_capacity(cfg.n_units);
    for i in 0..cfg.n_units {
        let alpha = 0.1 + 0.8 * rng.random::<f64>();
        let x_noise: Vec<f64> = if cfg.x_time_varying {
            (0..t_count).map(|_| normal_v.sample(&mut rng)).collect()
        } else {
            vec![normal_v.sample(&mut rng); t_count]
        };
        let x_at = |t: i64| 1.0 + 0.1 * alpha + x_noise[(t - 1) as usize];

        // Cohort selection on the first-period covariate.
        let x1 = x_at(1);
        let mut weights = Vec::with_capacity(cfg.cohorts.len() + 1);
        weights.push(1.0); // never treated
        for &g in &cfg.cohorts {
            weights.push((0.5 * (g as f64) / g_max * x1).exp());
        }
        let total: f64 = weights.iter().sum();
        let mut pick = rng.random::<f64>() * total;
        let mut choice = 0usize;
        for (c, w) in weights.iter().enumerate() {
            if pick < *w {
                choice = c;
                break;
            }
            pick -= w;
            choice = c;
        }
        let cohort = if choice == 0 {
            Cohort::Never
        } else {
            Cohort::Treated(cfg.cohorts[choice - 1])
        };

        let s = match (cohort, c_s) {
            (Cohort::Never, _) => false,
            (Cohort::Treated(_), None) => true,
            (Cohort::Treated(_), Some(c)) => rng.random::<f64>() < sigmoid(1.0 + 0.5 * alpha - c),
        };

        let mut obs: BTreeMap<i64, Observation> = BTreeMap::new();
        for t in 1..=cfg.t_max {
            let u_it: f64 = normal_u.sample(&mut rng);
            let nu_it: f64 = normal_nu.sample(&mut rng);
            let observed = match c_a {
                None => true,
                Some(c) => rng.random::<f64>() < sigmoid(1.0 + 0.1 * alpha * t as f64 - c),
            };
            if !observed {
                continue;
            }
            let x = x_at(t);
            let mut y = alpha + t as f64 + cfg.beta * x + u_it;
            if let Cohort::Treated(g) = cohort {
                if t >= g {
                    let event = (t - g + 1) as f64;
                    y += cfg.effect_scale * (event + cfg.gamma * f64::from(s)) + nu_it;
                }
            }
            obs.insert(t, Observation { y, covs: vec![x] });
        }
        if obs.is_empty() {
            continue;
        }
        units.push(UnitRecord {
            unit_id: format!("u{i:06}"),
            cohort,
            spillover_ever: s,
            obs,
            trading: None,
        });
    }
    PanelDataset::new(units, (1..=cfg.t_max).collect(), vec!["x".into()])
}

/// Closed-form truth of an estimand at `(g, t)` under the process.
pub fn true_effect(cfg: &DgpConfig, target: Target, g: i64, t: i64) -> Result<f64> {
    if !cfg.cohorts.contains(&g) {
        return Err(Error::Validation(format!("cohort {g} is not in the design")));
    }
    if t > cfg.t_max {
        return Err(Error::Validation(format!("period {t} beyond t_max = {}", cfg.t_max)));
    }
    if t < g {
        return Err(Error::PreTreatmentQuery(format!(
            "cohort {g} is untreated at period {t}; its true effect is only defined from {g} on"
        )));
    }
    let event = (t - g + 1) as f64;
    Ok(match target {
        // The pooled estimand is benchmarked against the spillover-free path.
        Target::Att | Target::Att0 => cfg.effect_scale * event,
        Target::AttS => cfg.effect_scale * (event + cfg.gamma),
        Target::Ast => cfg.effect_scale * cfg.gamma,
    })
}

/// One (estimand, weighting) cell of a replication study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McCell {
    /// Estimand.
    pub target: Target,
    /// Moment weighting.
    pub weighting: Weighting,
    /// Closed-form truth at the studied `(g, t)`.
    pub truth: f64,
    /// Mean estimation error over successful replications.
    pub bias: f64,
    /// Root mean squared error over successful replications.
    pub rmse: f64,
    /// Replications that produced an estimate.
    pub reps_used: usize,
    /// Replications that failed.
    pub failures: usize,
    /// First failure message, for diagnosis.
    pub failure_sample: Option<String>,
}

/// Bias/RMSE study for one `(g, t)` cell across estimands and weightings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McReport {
    /// Units per replication.
    pub n_units: usize,
    /// Replications attempted.
    pub reps: usize,
    /// Studied cohort.
    pub g: i64,
    /// Studied period.
    pub t: i64,
    /// Comparison group used by the estimator.
    pub comparison: ComparisonGroup,
    /// One row per (estimand, weighting) pair.
    pub cells: Vec<McCell>,
}

/// Runs `reps` independent replications and scores each estimand/weighting
/// pair at the cell `(g, t)`.
///
/// Replications draw panels with seeds derived from `cfg.seed`, estimate via
/// the stacked-moment pipeline restricted to cohort `g` with every feasible
/// difference order, and report bias and RMSE against the closed-form truth.
/// Failed replications (for example an empty cell after attrition) are
/// excluded and counted.
pub fn run_study(
    cfg: &DgpConfig,
    reps: usize,
    g: i64,
    t: i64,
    targets: &[Target],
    weightings: &[Weighting],
    comparison: ComparisonGroup,
) -> Result<McReport> {
    cfg.validate()?;
    if reps == 0 {
        return Err(Error::Validation("a study needs at least one replication".into()));
    }
    if targets.is_empty() || weightings.is_empty() {
        return Err(Error::Validation("empty target or weighting list".into()));
    }
    let combos: Vec<(Target, Weighting)> = weightings
        .iter()
        .flat_map(|&w| targets.iter().map(move |&tg| (tg, w)))
        .collect();
    let truths: Vec<f64> = combos
        .iter()
        .map(|&(tg, _)| true_effect(cfg, tg, g, t))
        .collect::<Result<_>>()?;

    let rows: Vec<Vec<std::result::Result<f64, String>>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let rep_cfg = DgpConfig {
                seed: derive_seed(cfg.seed, rep as u64),
                ..cfg.clone()
            };
            let ds = match generate(&rep_cfg) {
                Ok(ds) => ds,
                Err(e) => return vec![Err(e.to_string()); combos.len()],
            };
            combos
                .iter()
                .map(|&(tg, w)| {
                    let est_cfg = EstimatorConfig {
                        comparison,
                        k_set: KSet::AllFeasible,
                        weighting: w,
                        cohorts: Some(vec![g]),
                        seed: derive_seed(rep_cfg.seed, 1),
                        ..EstimatorConfig::default()
                    };
                    estimate_target(&ds, tg, &est_cfg)
                        .map_err(|e| e.to_string())
                        .and_then(|est| {
                            est.lookup(g, t)
                                .map(|e| e.estimate)
                                .ok_or_else(|| format!("cell ({g}, {t}) absent"))
                        })
                })
                .collect()
        })
        .collect();

    let cells = combos
        .iter()
        .zip(&truths)
        .enumerate()
        .map(|(ci, (&(tg, w), &truth))| {
            let mut errs: Vec<f64> = Vec::with_capacity(reps);
            let mut failures = 0usize;
            let mut failure_sample = None;
            for row in &rows {
                match &row[ci] {
                    Ok(v) => errs.push(v - truth),
                    Err(msg) => {
                        failures += 1;
                        failure_sample.get_or_insert_with(|| msg.clone());
                    }
                }
            }
            if errs.is_empty() {
                return Err(Error::Computation(format!(
                    "every replication failed for {tg} ({w}): {}",
                    failure_sample.clone().unwrap_or_default()
                )));
            }
            let m = errs.len() as f64;
            let bias = errs.iter().sum::<f64>() / m;
            let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / m).sqrt();
            Ok(McCell {
                target: tg,
                weighting: w,
                truth,
                bias,
                rmse,
                reps_used: errs.len(),
                failures,
                failure_sample,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(McReport {
        n_units: cfg.n_units,
        reps,
        g,
        t,
        comparison,
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::validate;

    #[test]
    fn truths_are_the_closed_forms() {
        let cfg = DgpConfig::default();
        assert_eq!(true_effect(&cfg, Target::Att0, 3, 4).unwrap(), 2.0);
        assert_eq!(true_effect(&cfg, Target::Att, 3, 4).unwrap(), 2.0);
        assert_eq!(true_effect(&cfg, Target::AttS, 3, 4).unwrap(), 3.0);
        assert_eq!(true_effect(&cfg, Target::Ast, 3, 4).unwrap(), 1.0);
        assert_eq!(true_effect(&cfg, Target::Att0, 8, 10).unwrap(), 3.0);
        let scaled = DgpConfig {
            effect_scale: 0.25,
            gamma: 2.0,
            ..cfg.clone()
        };
        assert!((true_effect(&scaled, Target::AttS, 3, 3).unwrap() - 0.75).abs() < 1e-12);
        assert!((true_effect(&scaled, Target::Ast, 3, 3).unwrap() - 0.5).abs() < 1e-12);
        assert!(matches!(
            true_effect(&cfg, Target::Att0, 3, 2),
            Err(Error::PreTreatmentQuery(_))
        ));
        assert!(matches!(true_effect(&cfg, Target::Att0, 4, 11), Err(Error::Validation(_))));
    }

    #[test]
    fn generation_is_deterministic_in_the_seed() {
        let cfg = DgpConfig {
            n_units: 150,
            p_bar_a: 0.8,
            ..DgpConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate(&DgpConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn balanced_panel_when_observation_rate_is_one() {
        let cfg = DgpConfig {
            n_units: 80,
            ..DgpConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        assert_eq!(ds.n_units(), 80);
        assert!(ds.units().iter().all(|u| u.obs.len() == 10));
    }

    #[test]
    fn generated_panel_passes_validation() {
        let cfg = DgpConfig {
            n_units: 400,
            p_bar_a: 0.57,
            seed: 11,
            ..DgpConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let report = validate(&ds);
        assert!(report.is_clean(), "violations: {:?}", report.violations);
        // Attrition actually bites: the panel is unbalanced.
        assert!(ds.units().iter().any(|u| u.obs.len() < 10));
        let total_obs: usize = ds.units().iter().map(|u| u.obs.len()).sum();
        let rate = total_obs as f64 / (400.0 * 10.0);
        assert!((rate - 0.57).abs() < 0.04, "observation rate {rate}");
    }

    #[test]
    fn exposure_calibration_hits_the_target_rate() {
        // The grid mean must match the closed form
        // integral of sigmoid(a + b alpha) over U(0.1, 0.9), which is
        // [softplus(a + 0.9 b) - softplus(a + 0.1 b)] / (0.8 b).
        let c = calibrated_exposure_intercept(0.3).unwrap();
        let softplus = |z: f64| {
            if z > 30.0 {
                z
            } else {
                z.exp().ln_1p()
            }
        };
        let (a, b) = (1.0 - c, 0.5);
        let exact = (softplus(a + 0.9 * b) - softplus(a + 0.1 * b)) / (0.8 * b);
        assert!((exposure_mean_at(c) - exact).abs() < 1e-9);
        assert!((exact - 0.3).abs() < 2e-4, "calibrated mean {exact}");

        // Realized shares follow at the law-of-large-numbers scale.
        let cfg = DgpConfig {
            n_units: 20_000,
            p_bar_s: 0.3,
            seed: 4,
            ..DgpConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let (mut exposed, mut treated) = (0usize, 0usize);
        for u in ds.units() {
            if !u.cohort.is_never() {
                treated += 1;
                exposed += usize::from(u.spillover_ever);
            }
        }
        let share = exposed as f64 / treated as f64;
        assert!((share - 0.3).abs() < 0.02, "exposure share {share}");
    }

    #[test]
    fn default_exposure_share_is_one_half() {
        let cfg = DgpConfig {
            n_units: 2000,
            seed: 7,
            ..DgpConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let (mut exposed, mut treated) = (0usize, 0usize);
        for u in ds.units() {
            if !u.cohort.is_never() {
                treated += 1;
                exposed += usize::from(u.spillover_ever);
            }
        }
        let share = exposed as f64 / treated as f64;
        assert!((share - 0.5).abs() < 0.03, "exposure share {share}");
        // Never-treated units carry no exposure by construction.
        assert!(ds
            .units()
            .iter()
            .filter(|u| u.cohort.is_never())
            .all(|u| !u.spillover_ever));
    }

    #[test]
    fn time_invariant_and_time_varying_covariates_differ() {
        let base = DgpConfig {
            n_units: 30,
            ..DgpConfig::default()
        };
        let fixed = generate(&base).unwrap();
        for u in fixed.units() {
            let xs: Vec<f64> = u.obs.values().map(|o| o.covs[0]).collect();
            assert!(xs.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-15));
        }
        let varying = generate(&DgpConfig {
            x_time_varying: true,
            ..base
        })
        .unwrap();
        assert!(varying.units().iter().any(|u| {
            let xs: Vec<f64> = u.obs.values().map(|o| o.covs[0]).collect();
            xs.windows(2).any(|w| (w[0] - w[1]).abs() > 1e-12)
        }));
    }

    #[test]
    fn zero_gamma_centers_the_spillover_contrast() {
        let cfg = DgpConfig {
            n_units: 800,
            gamma: 0.0,
            seed: 3,
            ..DgpConfig::default()
        };
        let report = run_study(
            &cfg,
            40,
            3,
            4,
            &[Target::Ast],
            &[Weighting::Identity],
            ComparisonGroup::NotYetTreated,
        )
        .unwrap();
        let cell = &report.cells[0];
        assert_eq!(cell.truth, 0.0);
        assert!(cell.bias.abs() < 0.12, "bias {}", cell.bias);
        assert!(cell.rmse >= cell.bias.abs());
        assert_eq!(cell.reps_used + cell.failures, 40);
    }

    #[test]
    fn small_study_recovers_the_direct_effect() {
        let cfg = DgpConfig {
            n_units: 300,
            seed: 9,
            ..DgpConfig::default()
        };
        let report = run_study(
            &cfg,
            25,
            3,
            4,
            &[Target::Att0],
            &[Weighting::Identity],
            ComparisonGroup::NotYetTreated,
        )
        .unwrap();
        let cell = &report.cells[0];
        assert_eq!(cell.truth, 2.0);
        assert!(cell.bias.abs() < 0.2, "bias {}", cell.bias);
        assert!(cell.rmse < 0.6, "rmse {}", cell.rmse);
    }
}
