//! Artifact writers: the group-time grid, aggregate JSON, plot data, run
//! metadata, per-draw estimates, and the simulation report.

use std::collections::BTreeMap;
use std::path::Path;

use chaindid::McReport;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// One row of `gt_effects.csv`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GtRow {
    pub target: String,
    pub g: i64,
    pub t: i64,
    /// Event time in grid positions, `t_pos - g_pos`.
    pub event: i64,
    pub estimate: f64,
    pub se: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub band_lower: Option<f64>,
    pub band_upper: Option<f64>,
    pub method: String,
    pub placebo: bool,
    pub anticipation: usize,
    pub n_treated: Option<usize>,
    pub n_comparison: Option<usize>,
    pub cohort_share: f64,
}

/// One row of `gt_draws.csv`: a bootstrap draw of one cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DrawRow {
    pub target: String,
    pub g: i64,
    pub t: i64,
    pub draw: usize,
    pub estimate: f64,
}

/// One row of `plotdata_<target>.csv`.
#[derive(Debug, Clone, Serialize)]
pub struct PlotRow {
    pub event: i64,
    pub estimate: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub band_lower: Option<f64>,
    pub band_upper: Option<f64>,
    /// "pre" or "post".
    pub phase: String,
}

/// One event-study point inside `aggregates.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventPoint {
    pub e: i64,
    pub estimate: f64,
    pub se: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub band_lower: Option<f64>,
    pub band_upper: Option<f64>,
    pub placebo: bool,
    /// Cohort label -> weight, summing to one.
    pub weights: BTreeMap<String, f64>,
}

/// Event-study block of `aggregates.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventStudyOut {
    pub reference: i64,
    pub level: f64,
    pub critical_value: Option<f64>,
    pub points: Vec<EventPoint>,
}

/// Overall-effect block of `aggregates.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OverallOut {
    pub estimate: f64,
    pub se: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    /// Share of post-treatment mass the overall average runs over.
    pub kappa: f64,
}

/// Balanced event-study block: composition held fixed through `horizon`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalancedOut {
    pub horizon: i64,
    #[serde(flatten)]
    pub study: EventStudyOut,
}

/// Pre-trend test block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrendOut {
    pub statistic: f64,
    pub p_value: f64,
    pub params: Vec<PretrendParam>,
}

/// Per-placebo-cell detail of the pre-trend test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrendParam {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub p_value: f64,
}

/// All aggregates for one estimand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetAggregates {
    pub target: String,
    pub event_study: EventStudyOut,
    pub overall: OverallOut,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub balanced: Option<BalancedOut>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrend: Option<PretrendOut>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::input(format!("cannot write {}: {e}", path.display()))
}

/// Serializes rows to CSV.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads typed rows from CSV.
pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    rdr.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| CliError::input(format!("cannot parse {}: {e}", path.display())))
}

/// Pretty-prints JSON to a file.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let body = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    std::fs::write(path, body + "\n").map_err(|e| io_err(path, e))
}

/// Flat CSV of a simulation report.
#[derive(Debug, Clone, Serialize)]
pub struct McRow {
    pub n: usize,
    pub weighting: String,
    pub target: String,
    pub truth: f64,
    pub bias: f64,
    pub rmse: f64,
    pub reps_used: usize,
    pub failures: usize,
}

/// Flattens simulation reports for CSV output.
pub fn mc_rows(reports: &[McReport]) -> Vec<McRow> {
    reports
        .iter()
        .flat_map(|r| {
            r.cells.iter().map(|c| McRow {
                n: r.n_units,
                weighting: c.weighting.to_string(),
                target: c.target.to_string(),
                truth: c.truth,
                bias: c.bias,
                rmse: c.rmse,
                reps_used: c.reps_used,
                failures: c.failures,
            })
        })
        .collect()
}

/// Renders the simulation table: one row per (n, weighting), and per
/// estimand a bias and an RMSE column.
pub fn render_mc_table(reports: &[McReport]) -> String {
    use chaindid::Target;
    let targets = [Target::Att, Target::Att0, Target::AttS, Target::Ast];
    let labels = ["ATT (pooled)", "ATT_0", "ATT_S", "AST"];
    let mut out = String::new();
    out.push_str(&format!("{:>6}  {:<8}", "n", "weights"));
    for l in labels {
        out.push_str(&format!("  {:>9} {:>9}", format!("{l}"), ""));
    }
    out.push('\n');
    out.push_str(&format!("{:>6}  {:<8}", "", ""));
    for _ in labels {
        out.push_str(&format!("  {:>9} {:>9}", "bias", "RMSE"));
    }
    out.push('\n');
    for r in reports {
        let mut by_w: BTreeMap<String, BTreeMap<String, (f64, f64)>> = BTreeMap::new();
        for c in &r.cells {
            by_w
                .entry(c.weighting.to_string())
                .or_default()
                .insert(c.target.to_string(), (c.bias, c.rmse));
        }
        for (w, cells) in by_w {
            out.push_str(&format!("{:>6}  {:<8}", r.n_units, w));
            for t in targets {
                match cells.get(t.as_str()) {
                    Some(&(b, rm)) => out.push_str(&format!("  {b:>9.3} {rm:>9.3}")),
                    None => out.push_str(&format!("  {:>9} {:>9}", "-", "-")),
                }
            }
            out.push('\n');
        }
    }
    out
}
