//! Stacked k-period-difference moment systems.
//!
//! For one cohort, every feasible difference moment `Delta_k(g, t)` is a
//! linear contrast of the group-time parameters: `theta_t - theta_{t-k}`,
//! with the base-period parameter normalized to zero. Stacking all computable
//! moments gives an overidentified linear system `E[Delta_hat] = W theta`
//! whose GMM solution `(W' Omega^{-1} W)^{-1} W' Omega^{-1} Delta_hat`
//! recovers the effects on unbalanced panels where no single chain of
//! adjacent periods is complete.
//!
//! Identification is a connectivity question: `W` is a signed incidence
//! matrix over period nodes grounded at the base period, so a parameter is
//! identified exactly when its node connects to the base. Unidentified
//! parameters are dropped and reported absent rather than extrapolated.
//!
//! # References
//!
//! - Hansen (1982), *Econometrica* 50(4), for two-step GMM weighting.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::effects::{DeltaMoment, Target};
use crate::error::{Error, Result};
use crate::inference::{bootstrap, BootstrapConfig, Multiplier, ParamFamily};
use crate::panel::{Cohort, PanelDataset};

/// GMM weighting-matrix choice exposed in configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Weighting {
    /// Identity weighting: ordinary least squares on the stacked system.
    #[default]
    Identity,
    /// Two-step weighting with a bootstrap estimate of the moment covariance.
    TwoStep,
}

impl std::fmt::Display for Weighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Weighting::Identity => "id",
            Weighting::TwoStep => "2step",
        })
    }
}

/// Which side of the base period a system covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GmmWindow {
    /// Parameters for periods after the base (treatment effects).
    Post,
    /// Parameters for periods before the base (pre-trend placebos), grounded
    /// at the same base period.
    Placebo,
}

/// Weighting-target covariance specification for [`gmm_solve`].
#[derive(Debug, Clone, Copy)]
pub enum OmegaSpec<'a> {
    /// Identity matrix.
    Identity,
    /// An explicit positive-definite matrix (validation and testing).
    Matrix(&'a DMatrix<f64>),
    /// Cluster-multiplier bootstrap covariance of the moment vector.
    Bootstrap {
        /// Number of multiplier draws.
        draws: usize,
        /// Seed for the draw stream.
        seed: u64,
        /// Multiplier law.
        multiplier: Multiplier,
    },
}

/// One stacked moment row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmRow {
    /// Later period label of the difference.
    pub t: i64,
    /// Difference order in grid positions.
    pub k: usize,
    /// Moment estimate (sign-adjusted so the design carries a +1).
    pub estimate: f64,
    /// Treated-side cell size.
    pub n_treated: usize,
    /// Comparison-side cell size.
    pub n_comparison: usize,
}

/// A stacked difference system for one cohort and window.
#[derive(Debug, Clone)]
pub struct GmmSystem {
    /// Estimand.
    pub target: Target,
    /// Cohort label.
    pub g: i64,
    /// Anticipation window used for the base period.
    pub anticipation: usize,
    /// Window relative to the base period.
    pub window: GmmWindow,
    /// Period labels of the free parameters, ascending.
    pub param_labels: Vec<i64>,
    /// Surviving rows, aligned with `design` and `delta_hat`.
    pub rows: Vec<GmmRow>,
    /// Signed incidence matrix, rows by parameters.
    pub design: DMatrix<f64>,
    /// Stacked moment estimates.
    pub delta_hat: DVector<f64>,
    /// Per-row influence contributions, `[row][unit]`.
    pub row_influence: Vec<Vec<f64>>,
    /// Number of units in the dataset.
    pub n_units: usize,
    /// Period labels whose parameters lost all identifying rows.
    pub absent: Vec<i64>,
    /// Human-readable log of cells that could not be computed.
    pub skipped_cells: Vec<String>,
}

/// Disjoint-set forest for the identification check.
struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind((0..n).collect())
    }
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra] = rb;
        }
    }
}

/// Builds the stacked system for cohort `g` over one window.
///
/// `moment_fn(t, k)` must return the difference moment `Delta_k(g, t)`; cells
/// that fail with an empty-cell, degenerate-weight, separation, or degenerate-
/// label error are skipped and logged, any other error aborts. Parameters
/// whose period node is not connected to the base period by surviving rows
/// are dropped and listed in `absent`, along with the rows that touch them.
pub fn build_gmm(
    ds: &PanelDataset,
    target: Target,
    g: i64,
    k_set: &[usize],
    anticipation: usize,
    window: GmmWindow,
    moment_fn: &mut dyn FnMut(i64, usize) -> Result<DeltaMoment>,
) -> Result<GmmSystem> {
    let g_pos = ds
        .cohort_pos(Cohort::Treated(g))
        .ok_or_else(|| Error::Validation(format!("cohort {g} not treated in sample")))?;
    let base = (g_pos as i64) - (anticipation as i64) - 1;
    if base < 0 {
        return Err(Error::Validation(format!(
            "cohort {g} has no base period with anticipation {anticipation}"
        )));
    }
    let base = base as usize;
    let periods = ds.periods();
    if k_set.is_empty() || k_set.contains(&0) {
        return Err(Error::Validation(
            "k_set must be nonempty and contain only positive orders".into(),
        ));
    }

    // Candidate parameter positions and feasible (t_pos, k) pairs.
    let param_positions: Vec<usize> = match window {
        GmmWindow::Post => (base + 1..periods.len()).collect(),
        GmmWindow::Placebo => (0..base).collect(),
    };
    if param_positions.is_empty() {
        return Ok(GmmSystem {
            target,
            g,
            anticipation,
            window,
            param_labels: vec![],
            rows: vec![],
            design: DMatrix::zeros(0, 0),
            delta_hat: DVector::zeros(0),
            row_influence: vec![],
            n_units: ds.n_units(),
            absent: vec![],
            skipped_cells: vec![],
        });
    }

    struct RawRow {
        t_pos: usize,
        lo_pos: usize,
        k: usize,
        sign: f64,
        moment: DeltaMoment,
    }
    let mut raw: Vec<RawRow> = Vec::new();
    let mut skipped: Vec<String> = Vec::new();
    let mut ks: Vec<usize> = k_set.to_vec();
    ks.sort_unstable();
    ks.dedup();
    for &k in &ks {
        let t_range: Vec<usize> = match window {
            GmmWindow::Post => (base + 1..periods.len())
                .filter(|&t| t >= k && t - k >= base)
                .collect(),
            GmmWindow::Placebo => (1..=base).filter(|&t| t >= k).collect(),
        };
        for t_pos in t_range {
            let t = periods[t_pos];
            match moment_fn(t, k) {
                Ok(m) => {
                    // Canonicalize so the design row carries a +1: a placebo
                    // row ending at the base has only its -1 entry, so flip it.
                    let sign = if window == GmmWindow::Placebo && t_pos == base {
                        -1.0
                    } else {
                        1.0
                    };
                    raw.push(RawRow {
                        t_pos,
                        lo_pos: t_pos - k,
                        k,
                        sign,
                        moment: m,
                    });
                }
                Err(
                    e @ (Error::EmptyCell(_)
                    | Error::DegenerateWeights(_)
                    | Error::SeparationDetected { .. }
                    | Error::DegenerateLabels(_)),
                ) => skipped.push(format!("{} (g = {g}, t = {t}, k = {k})", e)),
                Err(e) => return Err(e),
            }
        }
    }

    // Connectivity to the base period decides identification.
    let mut uf = UnionFind::new(periods.len());
    for r in &raw {
        uf.union(r.t_pos, r.lo_pos);
    }
    let base_root = uf.find(base);
    let identified: Vec<usize> = param_positions
        .iter()
        .copied()
        .filter(|&p| uf.find(p) == base_root)
        .collect();
    let absent: Vec<i64> = param_positions
        .iter()
        .copied()
        .filter(|&p| uf.find(p) != base_root)
        .map(|p| periods[p])
        .collect();
    let col_of: std::collections::BTreeMap<usize, usize> = identified
        .iter()
        .copied()
        .enumerate()
        .map(|(j, p)| (p, j))
        .collect();

    let kept: Vec<&RawRow> = raw
        .iter()
        .filter(|r| {
            let endpoint_ok = |p: usize| p == base || col_of.contains_key(&p);
            endpoint_ok(r.t_pos) && endpoint_ok(r.lo_pos)
        })
        .collect();

    let (l, p) = (kept.len(), identified.len());
    let mut design = DMatrix::zeros(l, p);
    let mut delta_hat = DVector::zeros(l);
    let mut row_influence = Vec::with_capacity(l);
    let mut rows = Vec::with_capacity(l);
    for (i, r) in kept.iter().enumerate() {
        if let Some(&j) = col_of.get(&r.t_pos) {
            design[(i, j)] = r.sign;
        }
        if let Some(&j) = col_of.get(&r.lo_pos) {
            design[(i, j)] = -r.sign;
        }
        delta_hat[i] = r.sign * r.moment.estimate;
        let mut psi = vec![0.0; ds.n_units()];
        r.moment.accumulate_influence(&mut psi, r.sign);
        row_influence.push(psi);
        rows.push(GmmRow {
            t: periods[r.t_pos],
            k: r.k,
            estimate: r.sign * r.moment.estimate,
            n_treated: r.moment.n_treated,
            n_comparison: r.moment.n_comparison,
        });
    }

    Ok(GmmSystem {
        target,
        g,
        anticipation,
        window,
        param_labels: identified.iter().map(|&p| periods[p]).collect(),
        rows,
        design,
        delta_hat,
        row_influence,
        n_units: ds.n_units(),
        absent,
        skipped_cells: skipped,
    })
}

/// Solved group-time parameters for one cohort window.
#[derive(Debug, Clone)]
pub struct GmmSolution {
    /// Period labels, aligned with `estimates`.
    pub param_labels: Vec<i64>,
    /// Parameter estimates.
    pub estimates: Vec<f64>,
    /// Influence contributions, `[parameter][unit]`.
    pub influence: Vec<Vec<f64>>,
    /// Ridge epsilon that made the two-step covariance invertible, if any.
    pub ridge_epsilon: Option<f64>,
    /// Number of moment rows used.
    pub rows_used: usize,
}

/// Largest ridge scale tried before giving up on a singular covariance.
const RIDGE_CAP: f64 = 1e-4;

fn invert_spd(omega: &DMatrix<f64>) -> Result<(Cholesky<f64, nalgebra::Dyn>, Option<f64>)> {
    if let Some(ch) = Cholesky::new(omega.clone()) {
        return Ok((ch, None));
    }
    let l = omega.nrows();
    let scale = omega.trace() / l as f64;
    let mut eps = 1e-8;
    while eps <= RIDGE_CAP {
        let ridged = omega + DMatrix::identity(l, l) * (eps * scale);
        if let Some(ch) = Cholesky::new(ridged) {
            return Ok((ch, Some(eps)));
        }
        eps *= 2.0;
    }
    Err(Error::SingularOmega {
        max_epsilon: RIDGE_CAP,
    })
}

/// Solves a stacked system with the requested weighting target.
///
/// Returns `(W' Omega^{-1} W)^{-1} W' Omega^{-1} Delta_hat` together with the
/// matching linear map applied to the row influence functions.
/// `cluster_keys` (one per unit) drive the bootstrap covariance when
/// [`OmegaSpec::Bootstrap`] is requested.
pub fn gmm_solve(
    sys: &GmmSystem,
    omega: OmegaSpec<'_>,
    cluster_keys: &[String],
) -> Result<GmmSolution> {
    let l = sys.rows.len();
    let p = sys.param_labels.len();
    if p == 0 {
        if sys.absent.is_empty() {
            // Legitimately empty window (e.g. no pre-periods): nothing to solve.
            return Ok(GmmSolution {
                param_labels: vec![],
                estimates: vec![],
                influence: vec![],
                ridge_epsilon: None,
                rows_used: 0,
            });
        }
        return Err(Error::RankDeficient(
            sys.absent.iter().map(|t| format!("(g = {}, t = {t})", sys.g)).collect(),
        ));
    }
    if cluster_keys.len() != sys.n_units {
        return Err(Error::Validation(format!(
            "{} cluster keys for {} units",
            cluster_keys.len(),
            sys.n_units
        )));
    }

    // H = (W' Omega^{-1} W)^{-1} W' Omega^{-1}, as a P x L map.
    let (h, ridge_epsilon) = match omega {
        OmegaSpec::Identity => {
            let wtw = sys.design.transpose() * &sys.design;
            let ch = Cholesky::new(wtw).ok_or_else(|| {
                Error::IllConditioned("stacked design lost rank after reduction".into())
            })?;
            (ch.solve(&sys.design.transpose()), None)
        }
        OmegaSpec::Matrix(m) => {
            if m.nrows() != l || m.ncols() != l {
                return Err(Error::Validation(format!(
                    "weighting matrix is {}x{}, system has {l} rows",
                    m.nrows(),
                    m.ncols()
                )));
            }
            solve_weighted(&sys.design, m)?
        }
        OmegaSpec::Bootstrap {
            draws,
            seed,
            multiplier,
        } => {
            let omega_hat = bootstrap_omega(sys, draws, seed, multiplier, cluster_keys)?;
            solve_weighted(&sys.design, &omega_hat)?
        }
    };

    let theta = &h * &sys.delta_hat;
    let mut influence = vec![vec![0.0; sys.n_units]; p];
    for j in 0..p {
        for (i, psi) in sys.row_influence.iter().enumerate() {
            let w = h[(j, i)];
            if w != 0.0 {
                for (out, x) in influence[j].iter_mut().zip(psi) {
                    *out += w * x;
                }
            }
        }
    }

    Ok(GmmSolution {
        param_labels: sys.param_labels.clone(),
        estimates: theta.iter().copied().collect(),
        influence,
        ridge_epsilon,
        rows_used: l,
    })
}

fn solve_weighted(
    design: &DMatrix<f64>,
    omega: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, Option<f64>)> {
    let (ch, eps) = invert_spd(omega)?;
    let omega_inv_w = ch.solve(design);
    let a = design.transpose() * &omega_inv_w;
    let ch_a = Cholesky::new(a)
        .ok_or_else(|| Error::IllConditioned("weighted normal equations not positive definite".into()))?;
    Ok((ch_a.solve(&omega_inv_w.transpose()), eps))
}

/// Bootstrap covariance of the stacked moment vector.
fn bootstrap_omega(
    sys: &GmmSystem,
    draws: usize,
    seed: u64,
    multiplier: Multiplier,
    cluster_keys: &[String],
) -> Result<DMatrix<f64>> {
    let l = sys.rows.len();
    let family = ParamFamily::new(
        sys.rows
            .iter()
            .map(|r| format!("d(t = {}, k = {})", r.t, r.k))
            .collect(),
        sys.delta_hat.iter().copied().collect(),
        sys.row_influence.clone(),
        cluster_keys,
    )?;
    let cfg = BootstrapConfig {
        draws,
        level: 0.95,
        multiplier,
        seed,
    };
    let boot = bootstrap(&family, &cfg)?;
    let mut omega = DMatrix::zeros(l, l);
    for draw in &boot.draws {
        for i in 0..l {
            let di = draw[i] - sys.delta_hat[i];
            for j in i..l {
                omega[(i, j)] += di * (draw[j] - sys.delta_hat[j]);
            }
        }
    }
    let b = boot.draws.len() as f64;
    for i in 0..l {
        for j in i..l {
            omega[(i, j)] /= b;
            omega[(j, i)] = omega[(i, j)];
        }
    }
    Ok(omega)
}
