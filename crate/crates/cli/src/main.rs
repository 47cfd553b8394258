//! `chaindid`: chained difference-in-differences estimation for
//! staggered-adoption panels with spillovers among treated units.
//!
//! Subcommands: `validate` checks a panel against the identification
//! assumptions, `estimate` produces the full artifact set (group-time grid,
//! aggregates, plot data, run metadata), `aggregate` re-aggregates a prior
//! group-time grid, and `simulate` runs the bias/RMSE study.

mod ingest;
mod output;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use chaindid::{
    balanced_event_study, bootstrap, estimate_target, event_study, normal_quantile, overall,
    pretrend_test, quantile_sorted, refit_bootstrap, run_study, unit_cluster_keys, validate,
    AbsorbingPolicy, BootstrapConfig, BootstrapResult, Cohort, ComparisonGroup, DgpConfig, Error,
    EstimatorConfig, EventStudy, GroupTimeEffect, KSet, Method, Multiplier, Observation,
    PanelDataset, ParamFamily, Target, TargetEstimates, UnitRecord, Violation, Weighting,
    NORMAL_IQR,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ingest::{emit_panel_csv, ingest, parse_cohort_map, ColumnMap};
use output::{
    mc_rows, read_csv, render_mc_table, write_csv, write_json, BalancedOut, DrawRow, EventPoint,
    EventStudyOut, GtRow, OverallOut, PlotRow, PretrendOut, PretrendParam, TargetAggregates,
};

/// Failure carrying the exit code it maps to: 2 for input/validation
/// problems, 3 for estimation infeasibility.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn input(message: String) -> Self {
        CliError { code: 2, message }
    }
    pub fn estimation(message: String) -> Self {
        CliError { code: 3, message }
    }
    pub fn from_core(e: Error) -> Self {
        match e {
            Error::Validation(_) | Error::PreTreatmentQuery(_) => CliError::input(e.to_string()),
            _ => CliError::estimation(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "chaindid",
    version,
    about = "Chained difference-in-differences with spillovers on treated units"
)]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a panel CSV against the identification assumptions.
    Validate(ValidateArgs),
    /// Estimate group-time effects, aggregates, and inference artifacts.
    Estimate(EstimateArgs),
    /// Re-aggregate a previously written group-time grid.
    Aggregate(AggregateArgs),
    /// Run the simulation study and print a bias/RMSE table.
    Simulate(SimulateArgs),
}

#[derive(Args, Clone)]
struct InputArgs {
    /// Long-format panel CSV (one row per observed unit-period).
    input: PathBuf,
    /// Unit id column.
    #[arg(long, default_value = "unit")]
    unit_col: String,
    /// Period column (integer).
    #[arg(long, default_value = "time")]
    time_col: String,
    /// Outcome column (numeric).
    #[arg(long, default_value = "outcome")]
    outcome_col: String,
    /// Cohort column: first treated period, or empty/"never".
    #[arg(long, default_value = "cohort")]
    cohort_col: String,
    /// Column with a precomputed ever-exposed spillover flag (0/1).
    #[arg(long)]
    spillover_col: Option<String>,
    /// Column with a per-period trading indicator; the exposure flag is
    /// derived (mutually exclusive with --spillover-col).
    #[arg(long)]
    trading_col: Option<String>,
    /// Optional per-period treated indicator, checked for reversals.
    #[arg(long)]
    treated_col: Option<String>,
    /// Comma-separated covariate columns; non-numeric columns are one-hot
    /// encoded with the lexicographically first level dropped.
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    /// Relabel cohort values before parsing, e.g. "2005=3,2008=6".
    #[arg(long)]
    cohort_map: Option<String>,
    /// How the derived exposure flag treats gaps in trading histories.
    #[arg(long, value_enum, default_value_t = PolicyArg::Strict)]
    spillover_policy: PolicyArg,
}

impl InputArgs {
    fn column_map(&self) -> Result<ColumnMap, CliError> {
        Ok(ColumnMap {
            unit: self.unit_col.clone(),
            time: self.time_col.clone(),
            outcome: self.outcome_col.clone(),
            cohort: self.cohort_col.clone(),
            spillover: self.spillover_col.clone(),
            trading: self.trading_col.clone(),
            treated: self.treated_col.clone(),
            covariates: self.covariates.clone(),
            cohort_map: self
                .cohort_map
                .as_deref()
                .map(parse_cohort_map)
                .transpose()?
                .unwrap_or_default(),
            policy: self.spillover_policy.into(),
        })
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    /// Any trade at or after adoption flags the unit as exposed.
    Strict,
    /// Also drop units whose trading lapses after starting.
    DropNonpersistent,
}

impl From<PolicyArg> for AbsorbingPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Strict => AbsorbingPolicy::Strict,
            PolicyArg::DropNonpersistent => AbsorbingPolicy::DropNonPersistent,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ComparisonArg {
    /// Never-treated units only.
    #[value(alias = "never-treated")]
    Never,
    /// Units treated strictly after the comparison window.
    #[value(alias = "not-yet-treated")]
    Notyet,
}

impl From<ComparisonArg> for ComparisonGroup {
    fn from(c: ComparisonArg) -> Self {
        match c {
            ComparisonArg::Never => ComparisonGroup::NeverTreated,
            ComparisonArg::Notyet => ComparisonGroup::NotYetTreated,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum WeightingArg {
    /// Identity weighting of the stacked moments.
    Id,
    /// Two-step weighting with a bootstrap moment covariance.
    #[value(name = "2step", alias = "two-step")]
    TwoStep,
}

impl From<WeightingArg> for Weighting {
    fn from(w: WeightingArg) -> Self {
        match w {
            WeightingArg::Id => Weighting::Identity,
            WeightingArg::TwoStep => Weighting::TwoStep,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum MultiplierArg {
    Rademacher,
    Mammen,
}

impl From<MultiplierArg> for Multiplier {
    fn from(m: MultiplierArg) -> Self {
        match m {
            MultiplierArg::Rademacher => Multiplier::Rademacher,
            MultiplierArg::Mammen => Multiplier::Mammen,
        }
    }
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Anticipation periods delta (classifies pre-treatment trading).
    #[arg(long, default_value_t = 0)]
    anticipation: usize,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Output directory for the artifact set.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Estimands, comma-separated subset of att0,atts,ast,att.
    #[arg(long, default_value = "att0,atts,ast,att", value_delimiter = ',')]
    targets: Vec<String>,
    /// Comparison group.
    #[arg(long, value_enum, default_value_t = ComparisonArg::Never)]
    comparison: ComparisonArg,
    /// Anticipation periods delta.
    #[arg(long, default_value_t = 0)]
    anticipation: usize,
    /// Difference orders: "all" or a comma list like "1,2".
    #[arg(long, default_value = "all")]
    kset: String,
    /// Moment weighting.
    #[arg(long, value_enum, default_value_t = WeightingArg::Id)]
    weighting: WeightingArg,
    /// Bootstrap draws for the two-step moment covariance.
    #[arg(long, default_value_t = 200)]
    omega_draws: usize,
    /// Multiplier bootstrap draws for inference.
    #[arg(long, default_value_t = 999)]
    bootstrap_draws: usize,
    /// Confidence level for intervals and bands.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Multiplier law.
    #[arg(long, value_enum, default_value_t = MultiplierArg::Rademacher)]
    multiplier: MultiplierArg,
    /// Propensity-score clipping bound.
    #[arg(long, default_value_t = 1e-3)]
    clip: f64,
    /// Ignore covariates even when present (uniform comparison weights).
    #[arg(long)]
    no_covariates: bool,
    /// Reweight the spillover contrast by a within-cohort exposure propensity.
    #[arg(long)]
    ast_adjusted: bool,
    /// Restrict estimation to these cohorts, comma-separated.
    #[arg(long, value_delimiter = ',')]
    cohorts: Vec<i64>,
    /// Balanced event-study horizon e' (composition fixed through e').
    #[arg(long)]
    balanced: Option<i64>,
    /// Also write per-draw group-time estimates (gt_draws.csv).
    #[arg(long)]
    emit_draws: bool,
    /// Validate the influence approximation with a full-refit bootstrap of
    /// this many half-sample draws (slow; results go to run_meta.json).
    #[arg(long)]
    refit_draws: Option<usize>,
    /// RNG seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AggregateArgs {
    /// A gt_effects.csv written by `estimate`.
    grid: PathBuf,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// A gt_draws.csv written by `estimate --emit-draws`; enables standard
    /// errors and bands on the re-aggregated paths.
    #[arg(long)]
    draws: Option<PathBuf>,
    /// Confidence level for intervals and bands.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Balanced event-study horizon e'.
    #[arg(long)]
    balanced: Option<i64>,
    /// Restrict to these estimands, comma-separated.
    #[arg(long, value_delimiter = ',')]
    targets: Vec<String>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Emit the full bias/RMSE table across both weightings.
    #[arg(long)]
    table1: bool,
    /// Units per replication.
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Replications.
    #[arg(long, default_value_t = 200)]
    reps: usize,
    /// Studied cell "g,t".
    #[arg(long, default_value = "3,4")]
    gt: String,
    /// Comparison group.
    #[arg(long, value_enum, default_value_t = ComparisonArg::Notyet)]
    comparison: ComparisonArg,
    /// Weighting when --table1 is not set.
    #[arg(long, value_enum, default_value_t = WeightingArg::Id)]
    weighting: WeightingArg,
    /// Number of panel periods.
    #[arg(long, default_value_t = 10)]
    t_max: i64,
    /// Spillover effect size gamma.
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    /// Effect-path scale.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Average exposure rate among treated units.
    #[arg(long, default_value_t = 0.5)]
    p_bar_s: f64,
    /// Average observation rate (1 = balanced panel).
    #[arg(long, default_value_t = 1.0)]
    p_bar_a: f64,
    /// Redraw the covariate noise every period.
    #[arg(long)]
    x_time_varying: bool,
    /// Write mc_report.csv into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write one synthetic panel to this CSV and exit without running the
    /// study.
    #[arg(long)]
    emit_panel: Option<PathBuf>,
    /// RNG seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        // A failure here means a pool already exists, which is fine.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let result = match cli.command {
        Command::Validate(args) => cmd_validate(args),
        Command::Estimate(args) => cmd_estimate(args),
        Command::Aggregate(args) => cmd_aggregate(args),
        Command::Simulate(args) => cmd_simulate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn parse_targets(raw: &[String]) -> Result<Vec<Target>, CliError> {
    let mut out = Vec::new();
    for s in raw {
        let t = Target::parse(s)
            .ok_or_else(|| CliError::input(format!("unknown estimand {s:?} (want att0, atts, ast, or att)")))?;
        if !out.contains(&t) {
            out.push(t);
        }
    }
    if out.is_empty() {
        return Err(CliError::input("no estimands requested".into()));
    }
    Ok(out)
}

fn cmd_validate(args: ValidateArgs) -> Result<(), CliError> {
    let map = args.input.column_map()?;
    let (ds, report) = ingest(&args.input.input, &map)?;
    for w in &report.warnings {
        println!("warning: {w}");
    }
    let vr = validate(&ds);
    let (hard, soft) = hard_violations(&ds, &vr.violations, args.anticipation);
    println!(
        "{} units, {} periods, {} covariates, {} hard violation(s), {} warning(s)",
        ds.n_units(),
        ds.periods().len(),
        ds.covariate_names().len(),
        hard.len(),
        soft.len()
    );
    for v in &soft {
        println!("warning: {v}");
    }
    for v in &hard {
        println!("violation: {v}");
    }
    if hard.is_empty() {
        Ok(())
    } else {
        Err(CliError::input(format!(
            "{} identification violation(s) found",
            hard.len()
        )))
    }
}

/// Splits violations into hard failures and warnings under the estimation
/// policy: cells without unexposed treated units are skipped (soft); trading
/// on never-treated units is forced back to unexposed by derivation (soft);
/// trading inside a declared anticipation window is expected (soft). Trading
/// strictly before the anticipation-adjusted base on a treated unit
/// contaminates the base period and stays hard.
fn hard_violations(
    ds: &PanelDataset,
    vs: &[Violation],
    anticipation: usize,
) -> (Vec<String>, Vec<String>) {
    let never: std::collections::BTreeSet<&str> = ds
        .units()
        .iter()
        .filter(|u| u.cohort.is_never())
        .map(|u| u.unit_id.as_str())
        .collect();
    let cohort_of: BTreeMap<&str, i64> = ds
        .units()
        .iter()
        .filter_map(|u| match u.cohort {
            Cohort::Treated(g) => Some((u.unit_id.as_str(), g)),
            Cohort::Never => None,
        })
        .collect();
    let mut hard = Vec::new();
    let mut soft = Vec::new();
    for v in vs {
        match v {
            Violation::NoUnexposedTreated { .. } => soft.push(v.to_string()),
            Violation::TradingBeforeTreatment { unit_id, t } => {
                if never.contains(unit_id.as_str()) {
                    soft.push(format!("{v} (never treated; forced to unexposed)"));
                    continue;
                }
                let within_anticipation = cohort_of
                    .get(unit_id.as_str())
                    .and_then(|&g| Some((ds.period_pos(g)?, ds.period_pos(*t)?)))
                    .is_some_and(|(g_pos, t_pos)| t_pos + anticipation >= g_pos);
                if within_anticipation {
                    soft.push(format!("{v} (inside the anticipation window)"));
                } else {
                    hard.push(v.to_string());
                }
            }
            _ => hard.push(v.to_string()),
        }
    }
    (hard, soft)
}

struct TargetRun {
    estimates: TargetEstimates,
    boot: BootstrapResult,
    aggregates: TargetAggregates,
    plot: Vec<PlotRow>,
}

fn event_points(es: &EventStudy, boot: Option<&BootstrapResult>) -> Vec<EventPoint> {
    es.event_times
        .iter()
        .enumerate()
        .map(|(i, &e)| EventPoint {
            e,
            estimate: es.estimates[i],
            se: boot.map(|b| b.se[i]),
            ci_lower: boot.map(|b| b.ci_lower[i]),
            ci_upper: boot.map(|b| b.ci_upper[i]),
            band_lower: boot.map(|b| b.band_lower[i]),
            band_upper: boot.map(|b| b.band_upper[i]),
            placebo: es.placebo[i],
            weights: es.weights[i]
                .iter()
                .map(|&(g, w)| (g.to_string(), w))
                .collect(),
        })
        .collect()
}

fn plot_rows(points: &[EventPoint]) -> Vec<PlotRow> {
    points
        .iter()
        .map(|p| PlotRow {
            event: p.e,
            estimate: p.estimate,
            lower: p.ci_lower,
            upper: p.ci_upper,
            band_lower: p.band_lower,
            band_upper: p.band_upper,
            phase: if p.placebo { "pre".into() } else { "post".into() },
        })
        .collect()
}

fn run_target(
    ds: &PanelDataset,
    target: Target,
    cfg: &EstimatorConfig,
    bs: &BootstrapConfig,
    balanced: Option<i64>,
) -> Result<TargetRun, CliError> {
    let estimates = estimate_target(ds, target, cfg).map_err(CliError::from_core)?;
    let family = estimates.family(ds).map_err(CliError::from_core)?;
    let boot = bootstrap(&family, bs).map_err(CliError::from_core)?;

    let es = event_study(
        ds,
        &estimates.effects,
        &estimates.influence,
        &estimates.cohort_shares,
        None,
    )
    .map_err(CliError::from_core)?;
    let keys = unit_cluster_keys(ds);
    let es_boot = bootstrap(&es.to_family(&keys).map_err(CliError::from_core)?, bs)
        .map_err(CliError::from_core)?;
    let points = event_points(&es, Some(&es_boot));

    let ov = overall(ds, &estimates.effects, &estimates.influence, &estimates.cohort_shares)
        .map_err(CliError::from_core)?;
    let ov_boot = bootstrap(&ov.to_family(&keys).map_err(CliError::from_core)?, bs)
        .map_err(CliError::from_core)?;
    let overall_out = OverallOut {
        estimate: ov.estimate,
        se: Some(ov_boot.se[0]),
        ci_lower: Some(ov_boot.ci_lower[0]),
        ci_upper: Some(ov_boot.ci_upper[0]),
        kappa: ov.kappa,
    };

    let balanced_out = match balanced {
        Some(h) => {
            let bes = balanced_event_study(
                ds,
                &estimates.effects,
                &estimates.influence,
                &estimates.cohort_shares,
                h,
            )
            .map_err(CliError::from_core)?;
            let bes_boot = bootstrap(&bes.to_family(&keys).map_err(CliError::from_core)?, bs)
                .map_err(CliError::from_core)?;
            Some(BalancedOut {
                horizon: h,
                study: EventStudyOut {
                    reference: bes.reference,
                    level: bs.level,
                    critical_value: Some(bes_boot.critical_value),
                    points: event_points(&bes, Some(&bes_boot)),
                },
            })
        }
        None => None,
    };

    // Pre-trend test over the placebo cells (base zeros included; they are
    // degenerate points and cannot move the supremum).
    let placebo_idx: Vec<usize> = estimates
        .effects
        .iter()
        .enumerate()
        .filter(|(_, e)| e.placebo)
        .map(|(i, _)| i)
        .collect();
    let pretrend = if placebo_idx.is_empty() {
        None
    } else {
        let fam = ParamFamily::new(
            placebo_idx
                .iter()
                .map(|&i| format!("{}:g={},t={}", target, estimates.effects[i].g, estimates.effects[i].t))
                .collect(),
            placebo_idx.iter().map(|&i| estimates.effects[i].estimate).collect(),
            placebo_idx.iter().map(|&i| estimates.influence[i].clone()).collect(),
            &keys,
        )
        .map_err(CliError::from_core)?;
        let pt = pretrend_test(&fam, bs).map_err(CliError::from_core)?;
        Some(PretrendOut {
            statistic: pt.statistic,
            p_value: pt.p_value,
            params: (0..pt.names.len())
                .map(|i| PretrendParam {
                    name: pt.names[i].clone(),
                    estimate: pt.estimates[i],
                    se: pt.se[i],
                    p_value: pt.p_values[i],
                })
                .collect(),
        })
    };

    let aggregates = TargetAggregates {
        target: target.to_string(),
        event_study: EventStudyOut {
            reference: es.reference,
            level: bs.level,
            critical_value: Some(es_boot.critical_value),
            points: points.clone(),
        },
        overall: overall_out,
        balanced: balanced_out,
        pretrend,
    };
    let plot = plot_rows(&points);
    Ok(TargetRun {
        estimates,
        boot,
        aggregates,
        plot,
    })
}

fn cmd_estimate(args: EstimateArgs) -> Result<(), CliError> {
    let map = args.input.column_map()?;
    let targets = parse_targets(&args.targets)?;
    let k_set = KSet::parse(&args.kset).map_err(CliError::from_core)?;
    let (ds, ingest_report) = ingest(&args.input.input, &map)?;
    let vr = validate(&ds);
    let (hard, soft) = hard_violations(&ds, &vr.violations, args.anticipation);
    if !hard.is_empty() {
        return Err(CliError::input(format!(
            "identification violations:\n  {}",
            hard.join("\n  ")
        )));
    }

    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::input(format!("cannot create {}: {e}", args.out.display())))?;

    let mut gt_rows: Vec<GtRow> = Vec::new();
    let mut draw_rows: Vec<DrawRow> = Vec::new();
    let mut aggregates: Vec<TargetAggregates> = Vec::new();
    let mut meta_targets = serde_json::Map::new();

    for (ti, &target) in targets.iter().enumerate() {
        let cfg = EstimatorConfig {
            comparison: args.comparison.into(),
            anticipation: args.anticipation,
            k_set: k_set.clone(),
            weighting: args.weighting.into(),
            omega_draws: args.omega_draws,
            multiplier: args.multiplier.into(),
            use_covariates: if args.no_covariates { Some(false) } else { None },
            ast_adjusted: args.ast_adjusted,
            clip: args.clip,
            logit: Default::default(),
            seed: chaindid::derive_seed(args.seed, 200 + ti as u64),
            cohorts: if args.cohorts.is_empty() { None } else { Some(args.cohorts.clone()) },
        };
        let bs = BootstrapConfig {
            draws: args.bootstrap_draws,
            level: args.level,
            multiplier: args.multiplier.into(),
            seed: chaindid::derive_seed(args.seed, 100 + ti as u64),
        };
        let run = run_target(&ds, target, &cfg, &bs, args.balanced)?;

        for (i, e) in run.estimates.effects.iter().enumerate() {
            let g_pos = ds.period_pos(e.g).expect("wave label on grid") as i64;
            let t_pos = ds.period_pos(e.t).expect("period on grid") as i64;
            let sizes = run.estimates.cell_sizes.get(&(e.g, e.t));
            gt_rows.push(GtRow {
                target: target.to_string(),
                g: e.g,
                t: e.t,
                event: t_pos - g_pos,
                estimate: e.estimate,
                se: Some(run.boot.se[i]),
                ci_lower: Some(run.boot.ci_lower[i]),
                ci_upper: Some(run.boot.ci_upper[i]),
                band_lower: Some(run.boot.band_lower[i]),
                band_upper: Some(run.boot.band_upper[i]),
                method: e.method.to_string(),
                placebo: e.placebo,
                anticipation: e.anticipation,
                n_treated: sizes.map(|s| s.0),
                n_comparison: sizes.map(|s| s.1),
                cohort_share: run.estimates.cohort_shares.get(&e.g).copied().unwrap_or(0.0),
            });
        }
        if args.emit_draws {
            for (d, draw) in run.boot.draws.iter().enumerate() {
                for (i, e) in run.estimates.effects.iter().enumerate() {
                    draw_rows.push(DrawRow {
                        target: target.to_string(),
                        g: e.g,
                        t: e.t,
                        draw: d,
                        estimate: draw[i],
                    });
                }
            }
        }
        write_csv(
            &args.out.join(format!("plotdata_{target}.csv")),
            &run.plot,
        )?;

        let mut tmeta = serde_json::json!({
            "clipped_scores": run.estimates.clipped,
            "skipped_cells": run.estimates.skipped_cells,
            "absent_cells": run.estimates.absent,
            "cohort_shares": run.estimates.cohort_shares,
            "bootstrap": {
                "draws_used": run.boot.draws_used,
                "draws_excluded": run.boot.draws_excluded,
                "critical_value": run.boot.critical_value,
                "z": run.boot.z,
            },
            "pretrend": run.aggregates.pretrend.as_ref().map(|p| {
                serde_json::json!({"statistic": p.statistic, "p_value": p.p_value})
            }),
        });
        if let Some(rd) = args.refit_draws {
            let rb = refit_bootstrap(&ds, target, &cfg, rd, chaindid::derive_seed(args.seed, 300 + ti as u64))
                .map_err(CliError::from_core)?;
            let refit_se: Vec<serde_json::Value> = (0..rb.names.len())
                .map(|j| {
                    let mut dev: Vec<f64> = rb
                        .draws
                        .iter()
                        .map(|d| d[j])
                        .filter(|v| v.is_finite())
                        .map(|v| v - rb.estimates[j])
                        .collect();
                    dev.sort_unstable_by(|a, b| a.total_cmp(b));
                    let se = if dev.len() >= 10 {
                        Some((quantile_sorted(&dev, 0.75) - quantile_sorted(&dev, 0.25)) / NORMAL_IQR)
                    } else {
                        None
                    };
                    serde_json::json!({"name": rb.names[j], "refit_se": se, "finite_draws": dev.len()})
                })
                .collect();
            tmeta["refit"] = serde_json::json!({
                "draws": rd,
                "draws_failed": rb.draws_failed,
                "params": refit_se,
            });
        }
        meta_targets.insert(target.to_string(), tmeta);
        aggregates.push(run.aggregates);
    }

    write_csv(&args.out.join("gt_effects.csv"), &gt_rows)?;
    if args.emit_draws {
        write_csv(&args.out.join("gt_draws.csv"), &draw_rows)?;
    }
    write_json(&args.out.join("aggregates.json"), &aggregates)?;

    let meta = serde_json::json!({
        "command": "estimate",
        "input": args.input.input.display().to_string(),
        "config": {
            "targets": targets.iter().map(|t| t.to_string()).collect::<Vec<_>>(),
            "comparison": match args.comparison { ComparisonArg::Never => "never", ComparisonArg::Notyet => "notyet" },
            "anticipation": args.anticipation,
            "kset": args.kset,
            "weighting": match args.weighting { WeightingArg::Id => "id", WeightingArg::TwoStep => "2step" },
            "omega_draws": args.omega_draws,
            "bootstrap_draws": args.bootstrap_draws,
            "level": args.level,
            "multiplier": match args.multiplier { MultiplierArg::Rademacher => "rademacher", MultiplierArg::Mammen => "mammen" },
            "clip": args.clip,
            "no_covariates": args.no_covariates,
            "ast_adjusted": args.ast_adjusted,
            "cohorts": args.cohorts,
            "balanced": args.balanced,
            "seed": args.seed,
        },
        "ingest": ingest_report,
        "validation_warnings": soft,
        "n_units": ds.n_units(),
        "n_periods": ds.periods().len(),
        "targets": meta_targets,
    });
    write_json(&args.out.join("run_meta.json"), &meta)?;
    println!(
        "wrote {} group-time cells for {} estimand(s) to {}",
        gt_rows.len(),
        targets.len(),
        args.out.display()
    );
    Ok(())
}

/// A minimal dataset that carries only the period grid, for re-aggregation
/// without unit data.
fn grid_only_dataset(periods: Vec<i64>) -> Result<PanelDataset, CliError> {
    let obs: BTreeMap<i64, Observation> = periods
        .iter()
        .map(|&t| (t, Observation { y: 0.0, covs: vec![] }))
        .collect();
    PanelDataset::new(
        vec![UnitRecord {
            unit_id: "_grid".into(),
            cohort: Cohort::Never,
            spillover_ever: false,
            obs,
            trading: None,
        }],
        periods,
        vec![],
    )
    .map_err(CliError::from_core)
}

fn parse_method(s: &str) -> Method {
    match s {
        "gmm-id" => Method::GmmIdentity,
        "gmm-2step" => Method::GmmTwoStep,
        "regression" => Method::Regression,
        _ => Method::Chain,
    }
}

/// Draw matrix for one estimand: cell -> per-draw estimates.
type DrawMap = BTreeMap<(i64, i64), Vec<f64>>;

fn draws_by_target(rows: Vec<DrawRow>) -> Result<BTreeMap<String, DrawMap>, CliError> {
    let mut staged: BTreeMap<String, BTreeMap<(i64, i64), BTreeMap<usize, f64>>> = BTreeMap::new();
    for r in rows {
        if staged
            .entry(r.target.clone())
            .or_default()
            .entry((r.g, r.t))
            .or_default()
            .insert(r.draw, r.estimate)
            .is_some()
        {
            return Err(CliError::input(format!(
                "duplicate draw {} for {} cell ({}, {})",
                r.draw, r.target, r.g, r.t
            )));
        }
    }
    let mut out = BTreeMap::new();
    for (target, cells) in staged {
        let mut m: DrawMap = BTreeMap::new();
        let mut expect: Option<usize> = None;
        for (gt, draws) in cells {
            let v: Vec<f64> = draws.into_values().collect();
            if *expect.get_or_insert(v.len()) != v.len() {
                return Err(CliError::input(format!(
                    "inconsistent draw counts in draws file for {target}"
                )));
            }
            m.insert(gt, v);
        }
        out.insert(target, m);
    }
    Ok(out)
}

/// Mirrors the multiplier-bootstrap interval construction on externally
/// aggregated draws: IQR standard errors, normal intervals, sup-t band.
struct DrawStats {
    se: Vec<f64>,
    ci_lower: Vec<f64>,
    ci_upper: Vec<f64>,
    band_lower: Vec<f64>,
    band_upper: Vec<f64>,
    critical_value: f64,
}

fn stats_from_draws(estimates: &[f64], draws: &[Vec<f64>], level: f64) -> DrawStats {
    let p = estimates.len();
    let n_draws = draws.len();
    let mut se = vec![0.0; p];
    for j in 0..p {
        let mut dev: Vec<f64> = draws.iter().map(|d| d[j] - estimates[j]).collect();
        dev.sort_unstable_by(|a, b| a.total_cmp(b));
        se[j] = (quantile_sorted(&dev, 0.75) - quantile_sorted(&dev, 0.25)) / NORMAL_IQR;
    }
    let z = normal_quantile(0.5 + level / 2.0);
    let mut max_t: Vec<f64> = (0..n_draws)
        .map(|d| {
            let mut m: f64 = 0.0;
            for j in 0..p {
                if se[j] > 0.0 {
                    m = m.max(((draws[d][j] - estimates[j]) / se[j]).abs());
                }
            }
            m
        })
        .collect();
    max_t.sort_unstable_by(|a, b| a.total_cmp(b));
    let critical_value = if n_draws == 0 { z } else { quantile_sorted(&max_t, level).max(z) };
    let ci_lower = (0..p).map(|j| estimates[j] - z * se[j]).collect();
    let ci_upper = (0..p).map(|j| estimates[j] + z * se[j]).collect();
    let band_lower = (0..p).map(|j| estimates[j] - critical_value * se[j]).collect();
    let band_upper = (0..p).map(|j| estimates[j] + critical_value * se[j]).collect();
    DrawStats {
        se,
        ci_lower,
        ci_upper,
        band_lower,
        band_upper,
        critical_value,
    }
}

/// Aggregated draws for a weighted combination of cells.
fn combine_draws(
    weights: &[((i64, i64), f64)],
    draws: &DrawMap,
) -> Result<Vec<f64>, CliError> {
    let n = draws.values().next().map_or(0, Vec::len);
    let mut out = vec![0.0; n];
    for &((g, t), w) in weights {
        let cell = draws.get(&(g, t)).ok_or_else(|| {
            CliError::input(format!("draws file lacks cell (g = {g}, t = {t})"))
        })?;
        for (o, v) in out.iter_mut().zip(cell) {
            *o += w * v;
        }
    }
    Ok(out)
}

fn study_out_from_draws(
    ds: &PanelDataset,
    es: &EventStudy,
    draws: Option<&DrawMap>,
    level: f64,
) -> Result<EventStudyOut, CliError> {
    let mut points = event_points(es, None);
    if let Some(dm) = draws {
        let mut agg: Vec<Vec<f64>> = Vec::with_capacity(points.len());
        for (i, p) in points.iter().enumerate() {
            let cellw: Vec<((i64, i64), f64)> = es.weights[i]
                .iter()
                .map(|&(g, w)| {
                    let g_pos = ds.period_pos(g).expect("wave label on grid") as i64;
                    let t_pos = g_pos + p.e;
                    ((g, ds.periods()[t_pos as usize]), w)
                })
                .collect();
            agg.push(combine_draws(&cellw, dm)?);
        }
        // Transpose to draw-major for the band statistic.
        let n_draws = agg.first().map_or(0, Vec::len);
        let mat: Vec<Vec<f64>> = (0..n_draws)
            .map(|d| agg.iter().map(|c| c[d]).collect())
            .collect();
        let est: Vec<f64> = points.iter().map(|p| p.estimate).collect();
        let st = stats_from_draws(&est, &mat, level);
        for (i, p) in points.iter_mut().enumerate() {
            p.se = Some(st.se[i]);
            p.ci_lower = Some(st.ci_lower[i]);
            p.ci_upper = Some(st.ci_upper[i]);
            p.band_lower = Some(st.band_lower[i]);
            p.band_upper = Some(st.band_upper[i]);
        }
        return Ok(EventStudyOut {
            reference: es.reference,
            level,
            critical_value: Some(st.critical_value),
            points,
        });
    }
    Ok(EventStudyOut {
        reference: es.reference,
        level,
        critical_value: None,
        points,
    })
}

fn cmd_aggregate(args: AggregateArgs) -> Result<(), CliError> {
    let rows: Vec<GtRow> = read_csv(&args.grid)?;
    if rows.is_empty() {
        return Err(CliError::input("the group-time grid is empty".into()));
    }
    let draw_map: Option<BTreeMap<String, DrawMap>> = match &args.draws {
        Some(p) => Some(draws_by_target(read_csv(p)?)?),
        None => None,
    };
    let filter: Option<Vec<Target>> = if args.targets.is_empty() {
        None
    } else {
        Some(parse_targets(&args.targets)?)
    };

    // Preserve the estimand order of the grid file so re-aggregation lines up
    // with the upstream run's artifacts.
    let mut target_order: Vec<String> = Vec::new();
    let mut by_target: BTreeMap<String, Vec<&GtRow>> = BTreeMap::new();
    for r in &rows {
        if !by_target.contains_key(&r.target) {
            target_order.push(r.target.clone());
        }
        by_target.entry(r.target.clone()).or_default().push(r);
    }

    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::input(format!("cannot create {}: {e}", args.out.display())))?;

    let mut aggregates: Vec<TargetAggregates> = Vec::new();
    for tname in target_order {
        let trows = by_target.remove(&tname).expect("order tracks map keys");
        let target = Target::parse(&tname)
            .ok_or_else(|| CliError::input(format!("unknown estimand {tname:?} in grid")))?;
        if let Some(f) = &filter {
            if !f.contains(&target) {
                continue;
            }
        }
        let periods: Vec<i64> = trows
            .iter()
            .map(|r| r.t)
            .collect::<std::collections::BTreeSet<i64>>()
            .into_iter()
            .collect();
        let ds = grid_only_dataset(periods)?;
        let effects: Vec<GroupTimeEffect> = trows
            .iter()
            .map(|r| GroupTimeEffect {
                target,
                g: r.g,
                t: r.t,
                anticipation: r.anticipation,
                estimate: r.estimate,
                se: r.se,
                method: parse_method(&r.method),
                placebo: r.placebo,
            })
            .collect();
        let influence: Vec<Vec<f64>> = vec![vec![0.0]; effects.len()];
        let mut shares: BTreeMap<i64, f64> = BTreeMap::new();
        for r in &trows {
            shares.entry(r.g).or_insert(r.cohort_share);
        }
        let tdraws = draw_map.as_ref().and_then(|m| m.get(&tname));

        let es = event_study(&ds, &effects, &influence, &shares, None)
            .map_err(CliError::from_core)?;
        let event_study_out = study_out_from_draws(&ds, &es, tdraws, args.level)?;

        let ov = overall(&ds, &effects, &influence, &shares).map_err(CliError::from_core)?;
        let overall_out = match tdraws {
            Some(dm) => {
                let od = combine_draws(&ov.weights, dm)?;
                let mat: Vec<Vec<f64>> = od.iter().map(|&v| vec![v]).collect();
                let st = stats_from_draws(&[ov.estimate], &mat, args.level);
                OverallOut {
                    estimate: ov.estimate,
                    se: Some(st.se[0]),
                    ci_lower: Some(st.ci_lower[0]),
                    ci_upper: Some(st.ci_upper[0]),
                    kappa: ov.kappa,
                }
            }
            None => OverallOut {
                estimate: ov.estimate,
                se: None,
                ci_lower: None,
                ci_upper: None,
                kappa: ov.kappa,
            },
        };

        let balanced_out = match args.balanced {
            Some(h) => {
                let bes = balanced_event_study(&ds, &effects, &influence, &shares, h)
                    .map_err(CliError::from_core)?;
                Some(BalancedOut {
                    horizon: h,
                    study: study_out_from_draws(&ds, &bes, tdraws, args.level)?,
                })
            }
            None => None,
        };

        // Pre-trend test from draws, over the placebo cells.
        let pretrend = tdraws.and_then(|dm| {
            let cells: Vec<&&GtRow> = trows.iter().filter(|r| r.placebo).collect();
            if cells.is_empty() {
                return None;
            }
            let est: Vec<f64> = cells.iter().map(|r| r.estimate).collect();
            let names: Vec<String> =
                cells.iter().map(|r| format!("{}:g={},t={}", tname, r.g, r.t)).collect();
            let cell_draws: Vec<&Vec<f64>> =
                cells.iter().map(|r| dm.get(&(r.g, r.t))).collect::<Option<Vec<_>>>()?;
            let n_draws = cell_draws.first().map_or(0, |v| v.len());
            let mat: Vec<Vec<f64>> = (0..n_draws)
                .map(|d| cell_draws.iter().map(|c| c[d]).collect())
                .collect();
            let st = stats_from_draws(&est, &mat, args.level);
            let statistic = est
                .iter()
                .zip(&st.se)
                .map(|(e, s)| {
                    if *s > 0.0 {
                        (e / s).abs()
                    } else if *e != 0.0 {
                        f64::INFINITY
                    } else {
                        0.0
                    }
                })
                .fold(0.0f64, f64::max);
            let p_value = if statistic == 0.0 {
                1.0
            } else {
                let exceed = mat
                    .iter()
                    .filter(|d| {
                        let mut m: f64 = 0.0;
                        for j in 0..est.len() {
                            if st.se[j] > 0.0 {
                                m = m.max(((d[j] - est[j]) / st.se[j]).abs());
                            }
                        }
                        m >= statistic
                    })
                    .count();
                exceed as f64 / mat.len().max(1) as f64
            };
            let params = (0..est.len())
                .map(|j| {
                    let p = if est[j] == 0.0 {
                        1.0
                    } else {
                        mat.iter().filter(|d| (d[j] - est[j]).abs() >= est[j].abs()).count() as f64
                            / mat.len().max(1) as f64
                    };
                    PretrendParam {
                        name: names[j].clone(),
                        estimate: est[j],
                        se: st.se[j],
                        p_value: p,
                    }
                })
                .collect();
            Some(PretrendOut {
                statistic,
                p_value,
                params,
            })
        });

        write_csv(
            &args.out.join(format!("plotdata_{tname}.csv")),
            &plot_rows(&event_study_out.points),
        )?;
        aggregates.push(TargetAggregates {
            target: tname,
            event_study: event_study_out,
            overall: overall_out,
            balanced: balanced_out,
            pretrend,
        });
    }
    if aggregates.is_empty() {
        return Err(CliError::input("no estimands left after filtering".into()));
    }
    write_json(&args.out.join("aggregates.json"), &aggregates)?;
    println!("re-aggregated {} estimand(s) into {}", aggregates.len(), args.out.display());
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let (g, t) = args
        .gt
        .split_once(',')
        .and_then(|(a, b)| Some((a.trim().parse::<i64>().ok()?, b.trim().parse::<i64>().ok()?)))
        .ok_or_else(|| CliError::input(format!("--gt {:?} is not \"g,t\"", args.gt)))?;
    let cfg = DgpConfig {
        n_units: args.n,
        t_max: args.t_max,
        gamma: args.gamma,
        effect_scale: args.scale,
        p_bar_s: args.p_bar_s,
        p_bar_a: args.p_bar_a,
        x_time_varying: args.x_time_varying,
        seed: args.seed,
        ..DgpConfig::default()
    };
    if let Some(path) = &args.emit_panel {
        let ds = chaindid::generate(&cfg).map_err(CliError::from_core)?;
        emit_panel_csv(&ds, path)?;
        println!(
            "wrote synthetic panel with {} units over {} periods to {}",
            ds.n_units(),
            ds.periods().len(),
            path.display()
        );
        return Ok(());
    }
    let weightings: Vec<Weighting> = if args.table1 {
        vec![Weighting::Identity, Weighting::TwoStep]
    } else {
        vec![args.weighting.into()]
    };
    let targets = [Target::Att, Target::Att0, Target::AttS, Target::Ast];
    let report = run_study(&cfg, args.reps, g, t, &targets, &weightings, args.comparison.into())
        .map_err(CliError::from_core)?;
    print!("{}", render_mc_table(std::slice::from_ref(&report)));
    let total_failures: usize = report.cells.iter().map(|c| c.failures).sum();
    if total_failures > 0 {
        println!("({total_failures} failed replication-cells excluded)");
    }
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)
            .map_err(|e| CliError::input(format!("cannot create {}: {e}", out.display())))?;
        write_csv(&out.join("mc_report.csv"), &mc_rows(std::slice::from_ref(&report)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn gt_parse_rejects_garbage() {
        let args = SimulateArgs {
            table1: false,
            n: 10,
            reps: 1,
            gt: "3;4".into(),
            comparison: ComparisonArg::Notyet,
            weighting: WeightingArg::Id,
            t_max: 10,
            gamma: 1.0,
            scale: 1.0,
            p_bar_s: 0.5,
            p_bar_a: 1.0,
            x_time_varying: false,
            out: None,
            emit_panel: None,
            seed: 0,
        };
        let err = cmd_simulate(args).unwrap_err();
        assert_eq!(err.code, 2);
    }

    #[test]
    fn target_list_rejects_unknown() {
        assert!(parse_targets(&["att0".into(), "bogus".into()]).is_err());
        let ts = parse_targets(&["att0".into(), "att0".into(), "ast".into()]).unwrap();
        assert_eq!(ts, vec![Target::Att0, Target::Ast]);
    }
}
