//! Long-format CSV ingestion: column mapping, cohort relabeling, categorical
//! one-hot encoding, spillover/trading handling, and treatment-reversal
//! checks.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chaindid::{
    derive_spillover, AbsorbingPolicy, Cohort, Observation, PanelDataset, SpilloverDeriveReport,
    UnitRecord,
};
use serde::Serialize;

use crate::CliError;

/// Maps CSV columns onto the panel model.
#[derive(Debug, Clone)]
pub struct ColumnMap {
    pub unit: String,
    pub time: String,
    pub outcome: String,
    pub cohort: String,
    pub spillover: Option<String>,
    pub trading: Option<String>,
    pub treated: Option<String>,
    pub covariates: Vec<String>,
    pub cohort_map: BTreeMap<String, String>,
    pub policy: AbsorbingPolicy,
}

/// What ingestion did, for `run_meta.json`.
#[derive(Debug, Default, Clone, Serialize)]
pub struct IngestReport {
    pub n_rows: usize,
    pub n_units: usize,
    pub n_periods: usize,
    pub covariate_columns: Vec<String>,
    /// Categorical column -> encoded levels (lexicographically first dropped).
    pub one_hot: BTreeMap<String, Vec<String>>,
    pub dropped_levels: BTreeMap<String, String>,
    pub forced_spillover_zero: usize,
    pub spillover_derived: Option<SpilloverDeriveReport>,
    pub warnings: Vec<String>,
}

/// Parses a comma-separated relabeling list such as "2005=3,2008=6".
pub fn parse_cohort_map(s: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for pair in s.split(',') {
        let pair = pair.trim();
        if pair.is_empty() {
            continue;
        }
        let (from, to) = pair
            .split_once('=')
            .ok_or_else(|| CliError::input(format!("cohort-map entry {pair:?} is not old=new")))?;
        if map.insert(from.trim().to_string(), to.trim().to_string()).is_some() {
            return Err(CliError::input(format!("cohort-map relabels {from:?} twice")));
        }
    }
    Ok(map)
}

fn parse_bool(raw: &str, what: &str, line: u64) -> Result<bool, CliError> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "t" | "yes" => Ok(true),
        "0" | "false" | "f" | "no" => Ok(false),
        other => Err(CliError::input(format!(
            "row {line}: unparsable {what} value {other:?} (want 0/1 or true/false)"
        ))),
    }
}

struct RawRow {
    line: u64,
    unit: String,
    t: i64,
    y: f64,
    cohort: Cohort,
    spillover: Option<bool>,
    trading: Option<bool>,
    treated: Option<bool>,
    covs: Vec<String>,
}

/// Reads a long-format panel CSV into a validated dataset.
pub fn ingest(path: &Path, map: &ColumnMap) -> Result<(PanelDataset, IngestReport), CliError> {
    if map.spillover.is_some() && map.trading.is_some() {
        return Err(CliError::input(
            "supply either a spillover flag column or a trading column, not both \
             (the trading column derives the flag)"
                .into(),
        ));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| CliError::input(format!("cannot read header row: {e}")))?
        .clone();
    let col = |name: &str| -> Result<usize, CliError> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            CliError::input(format!(
                "column {name:?} not found; available: {}",
                headers.iter().collect::<Vec<_>>().join(", ")
            ))
        })
    };
    let unit_c = col(&map.unit)?;
    let time_c = col(&map.time)?;
    let outcome_c = col(&map.outcome)?;
    let cohort_c = col(&map.cohort)?;
    let spill_c = map.spillover.as_deref().map(col).transpose()?;
    let trade_c = map.trading.as_deref().map(col).transpose()?;
    let treated_c = map.treated.as_deref().map(col).transpose()?;
    let cov_cs = map
        .covariates
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<usize>, CliError>>()?;

    let mut report = IngestReport::default();
    let mut rows: Vec<RawRow> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::input(format!("CSV parse error: {e}")))?;
        let line = rec.position().map_or(i as u64 + 2, |p| p.line());
        let field = |c: usize| rec.get(c).unwrap_or("");
        let unit = field(unit_c).to_string();
        if unit.is_empty() {
            return Err(CliError::input(format!("row {line}: empty unit id")));
        }
        let t: i64 = field(time_c)
            .parse()
            .map_err(|_| CliError::input(format!("row {line}: unparsable time {:?}", field(time_c))))?;
        let y: f64 = field(outcome_c).parse().map_err(|_| {
            CliError::input(format!("row {line}: unparsable outcome {:?}", field(outcome_c)))
        })?;
        if !y.is_finite() {
            return Err(CliError::input(format!("row {line}: non-finite outcome")));
        }
        let raw_cohort = field(cohort_c);
        let mapped = map
            .cohort_map
            .get(raw_cohort)
            .map(String::as_str)
            .unwrap_or(raw_cohort);
        let cohort = if mapped.is_empty() || mapped.eq_ignore_ascii_case("never") {
            Cohort::Never
        } else {
            Cohort::Treated(mapped.parse().map_err(|_| {
                CliError::input(format!("row {line}: unknown cohort label {raw_cohort:?}"))
            })?)
        };
        let spillover = spill_c
            .map(|c| parse_bool(field(c), "spillover", line))
            .transpose()?;
        let trading = trade_c
            .map(|c| parse_bool(field(c), "trading", line))
            .transpose()?;
        let treated = treated_c
            .map(|c| parse_bool(field(c), "treated", line))
            .transpose()?;
        let covs = cov_cs.iter().map(|&c| field(c).to_string()).collect();
        rows.push(RawRow {
            line,
            unit,
            t,
            y,
            cohort,
            spillover,
            trading,
            treated,
            covs,
        });
    }
    report.n_rows = rows.len();
    if rows.is_empty() {
        return Err(CliError::input("input has no data rows".into()));
    }

    // Duplicate (unit, t) detection with row numbers.
    let mut seen: BTreeMap<(&str, i64), u64> = BTreeMap::new();
    for r in &rows {
        if let Some(&prev) = seen.get(&(r.unit.as_str(), r.t)) {
            return Err(CliError::input(format!(
                "duplicate observation for unit {:?} at period {}: rows {prev} and {}",
                r.unit, r.t, r.line
            )));
        }
        seen.insert((r.unit.as_str(), r.t), r.line);
    }

    // Covariate typing: numeric when every value parses, categorical
    // otherwise (one-hot, lexicographically first level dropped).
    enum CovKind {
        Numeric,
        Categorical(Vec<String>), // levels kept, ascending
    }
    let mut kinds: Vec<CovKind> = Vec::with_capacity(map.covariates.len());
    let mut covariate_names: Vec<String> = Vec::new();
    for (j, name) in map.covariates.iter().enumerate() {
        let numeric = rows.iter().all(|r| r.covs[j].parse::<f64>().is_ok());
        if numeric {
            kinds.push(CovKind::Numeric);
            covariate_names.push(name.clone());
        } else {
            let levels: BTreeSet<String> = rows.iter().map(|r| r.covs[j].clone()).collect();
            let mut levels: Vec<String> = levels.into_iter().collect();
            let dropped = levels.remove(0);
            if levels.is_empty() {
                report
                    .warnings
                    .push(format!("covariate {name} has a single level and was dropped"));
                kinds.push(CovKind::Categorical(vec![]));
                continue;
            }
            report.dropped_levels.insert(name.clone(), dropped);
            report.one_hot.insert(name.clone(), levels.clone());
            for l in &levels {
                covariate_names.push(format!("{name}={l}"));
            }
            kinds.push(CovKind::Categorical(levels));
        }
    }
    let encode = |r: &RawRow| -> Vec<f64> {
        let mut out = Vec::with_capacity(covariate_names.len());
        for (j, kind) in kinds.iter().enumerate() {
            match kind {
                CovKind::Numeric => out.push(r.covs[j].parse::<f64>().expect("checked numeric")),
                CovKind::Categorical(levels) => {
                    for l in levels {
                        out.push(f64::from(&r.covs[j] == l));
                    }
                }
            }
        }
        out
    };

    // Group by unit; enforce internal consistency.
    let mut by_unit: BTreeMap<String, Vec<&RawRow>> = BTreeMap::new();
    for r in &rows {
        by_unit.entry(r.unit.clone()).or_default().push(r);
    }
    let mut units: Vec<UnitRecord> = Vec::with_capacity(by_unit.len());
    let mut mixed_spillover = 0usize;
    for (unit_id, mut urows) in by_unit {
        urows.sort_by_key(|r| r.t);
        let cohort = urows[0].cohort;
        if let Some(bad) = urows.iter().find(|r| r.cohort != cohort) {
            return Err(CliError::input(format!(
                "unit {unit_id:?} has conflicting cohort labels (rows {} and {})",
                urows[0].line, bad.line
            )));
        }
        // Treatment-reversal check against the explicit per-period column.
        if treated_c.is_some() {
            let mut was_on = false;
            for r in &urows {
                let on = r.treated.unwrap_or(false);
                if was_on && !on {
                    return Err(CliError::input(format!(
                        "treatment reversal: unit {unit_id:?} is untreated at period {} (row {}) \
                         after an earlier treated period",
                        r.t, r.line
                    )));
                }
                was_on |= on;
                let should = matches!(cohort, Cohort::Treated(g) if r.t >= g);
                if on != should {
                    return Err(CliError::input(format!(
                        "row {}: treated column contradicts cohort {:?} for unit {unit_id:?} at \
                         period {}",
                        r.line,
                        match cohort {
                            Cohort::Treated(g) => g.to_string(),
                            Cohort::Never => "never".into(),
                        },
                        r.t
                    )));
                }
            }
        }
        let mut spillover_ever = false;
        if spill_c.is_some() {
            let vals: BTreeSet<bool> = urows.iter().map(|r| r.spillover.unwrap_or(false)).collect();
            if vals.len() > 1 {
                mixed_spillover += 1;
            }
            spillover_ever = vals.contains(&true);
        }
        if cohort.is_never() && spillover_ever {
            spillover_ever = false;
            report.forced_spillover_zero += 1;
        }
        let obs: BTreeMap<i64, Observation> = urows
            .iter()
            .map(|r| (r.t, Observation { y: r.y, covs: encode(r) }))
            .collect();
        let trading: Option<BTreeMap<i64, bool>> = trade_c
            .is_some()
            .then(|| urows.iter().map(|r| (r.t, r.trading.unwrap_or(false))).collect());
        units.push(UnitRecord {
            unit_id,
            cohort,
            spillover_ever,
            obs,
            trading,
        });
    }
    if mixed_spillover > 0 {
        report.warnings.push(format!(
            "{mixed_spillover} unit(s) had a non-constant spillover flag; treated as ever-exposed"
        ));
    }
    if report.forced_spillover_zero > 0 {
        report.warnings.push(format!(
            "{} never-treated unit(s) had a spillover flag; forced to unexposed",
            report.forced_spillover_zero
        ));
    }

    let periods: Vec<i64> = rows.iter().map(|r| r.t).collect::<BTreeSet<i64>>().into_iter().collect();
    let ds = PanelDataset::new(units, periods, covariate_names)
        .map_err(|e| CliError::input(format!("panel construction failed: {e}")))?;
    let ds = if trade_c.is_some() {
        let (derived, dreport) = derive_spillover(&ds, map.policy)
            .map_err(|e| CliError::input(format!("spillover derivation failed: {e}")))?;
        report.forced_spillover_zero += dreport.forced_never_treated.len();
        report.spillover_derived = Some(dreport);
        derived
    } else {
        ds
    };
    report.n_units = ds.n_units();
    report.n_periods = ds.periods().len();
    report.covariate_columns = ds.covariate_names().to_vec();
    Ok((ds, report))
}

/// Writes a dataset back to long-format CSV (the inverse of [`ingest`] for
/// numeric covariates).
pub fn emit_panel_csv(ds: &PanelDataset, path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))?;
    let mut header = vec![
        "unit".to_string(),
        "time".to_string(),
        "outcome".to_string(),
        "cohort".to_string(),
        "spillover".to_string(),
    ];
    header.extend(ds.covariate_names().iter().cloned());
    w.write_record(&header)
        .map_err(|e| CliError::input(format!("CSV write failed: {e}")))?;
    for u in ds.units() {
        for (t, o) in &u.obs {
            let mut rec = vec![
                u.unit_id.clone(),
                t.to_string(),
                format!("{:.17e}", o.y),
                match u.cohort {
                    Cohort::Treated(g) => g.to_string(),
                    Cohort::Never => "never".into(),
                },
                i32::from(u.spillover_ever).to_string(),
            ];
            rec.extend(o.covs.iter().map(|c| format!("{c:.17e}")));
            w.write_record(&rec)
                .map_err(|e| CliError::input(format!("CSV write failed: {e}")))?;
        }
    }
    w.flush().map_err(|e| CliError::input(format!("CSV write failed: {e}")))?;
    Ok(())
}
