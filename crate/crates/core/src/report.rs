//! Running a configured experiment and rendering its result files.
//!
//! Everything is computed in memory first; files are only written once every
//! table has been produced, through temporary names that are renamed at the end.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::policy::PolicyKind;
use crate::sim::{
    f3, f4, f5, lambda_sweep, localize_pair_maximum, replication_problem, replication_seeds, run_replications, square_grid, three_hump,
    ReplicationReport, RunFailure, Summary, SweepRow, TruthSpec, KEY_REGION,
};
use crate::splines::Component;

/// Per-point grid used when localizing the interaction maximum.
const SURFACE_POINTS: usize = 81;
const CURVE_POINTS: usize = 101;
/// A localization counts as a hit within this distance of a true local maximum.
pub const LOCALIZATION_RADIUS: f64 = 0.5;

#[derive(Debug, Clone, Serialize)]
struct TableRow {
    policy: PolicyKind,
    #[serde(rename = "E(OC)")]
    mean: f64,
    #[serde(rename = "σ(OC)")]
    sd: f64,
    #[serde(rename = "Med")]
    median: f64,
    se: f64,
    mean_misclassified: f64,
    n_ok: usize,
    n_failed: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    localization_rate: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct SummaryDoc<'a> {
    schema: u32,
    config: &'a ExperimentConfig,
    table: Vec<TableRow>,
    failures: &'a [RunFailure],
    #[serde(skip_serializing_if = "Option::is_none")]
    best_sweep_point: Option<&'a SweepRow>,
}

/// Rendered result files, keyed by file name.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub files: Vec<(String, String)>,
    pub report: ReplicationReport,
    pub sweep: Vec<SweepRow>,
}

impl ExperimentOutput {
    pub fn file(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_str())
    }

    /// Write every file into `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut staged = Vec::new();
        for (name, contents) in &self.files {
            let tmp = dir.join(format!(".{name}.partial"));
            if let Err(e) = fs::write(&tmp, contents) {
                for (t, _) in &staged {
                    let _ = fs::remove_file(t);
                }
                let _ = fs::remove_file(&tmp);
                return Err(e.into());
            }
            staged.push((tmp, dir.join(name)));
        }
        let mut out = Vec::new();
        for (tmp, dest) in staged {
            fs::rename(&tmp, &dest)?;
            out.push(dest);
        }
        Ok(out)
    }
}

fn csv_string(write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<()>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w)?;
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))
}

fn results_csv(report: &ReplicationReport) -> Result<String> {
    csv_string(|w| {
        w.write_record(["policy", "rep", "round", "oc", "misclassified", "support_size"])?;
        for r in &report.runs {
            for t in 0..r.oc_series.len() {
                w.serialize((r.policy.label(), r.rep, t + 1, r.oc_series[t], r.misclassified[t], r.support_size[t]))?;
            }
        }
        Ok(())
    })
}

fn series_csv(report: &ReplicationReport) -> Result<String> {
    csv_string(|w| {
        w.write_record(["policy", "round", "mean_oc", "sd_oc", "median_oc", "log_mean_oc", "n"])?;
        for s in &report.summaries {
            for (t, r) in s.per_round.iter().enumerate() {
                let log = if r.mean > 0.0 { r.mean.ln().to_string() } else { String::new() };
                w.serialize((s.policy.label(), t + 1, r.mean, r.sd, r.median, log, r.n))?;
            }
        }
        Ok(())
    })
}

fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    csv_string(|w| {
        w.write_record(["policy", "lambda_mult", "mean_misclassified", "se", "n", "n_failed"])?;
        for r in rows {
            w.serialize((r.policy.label(), r.lambda_mult, r.misclassified.mean, r.misclassified.se, r.misclassified.n, r.n_failed))?;
        }
        Ok(())
    })
}

fn traces_ndjson(report: &ReplicationReport) -> Result<String> {
    let mut out = String::new();
    for r in &report.runs {
        for rec in r.trace.iter().flatten() {
            out.push_str(&serde_json::to_string(rec)?);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Fraction of successful runs per policy whose estimated interaction surface
/// peaks within [`LOCALIZATION_RADIUS`] of a true local maximum.
pub fn localization_rates(config: &ExperimentConfig, report: &ReplicationReport) -> Result<Vec<(PolicyKind, f64)>> {
    let seeds = replication_seeds(config.seed, config.replications);
    let grid = square_grid(KEY_REGION.0, KEY_REGION.1, SURFACE_POINTS);
    let problem = replication_problem(&config.truth, seeds[0])?;
    let map = problem.feature_map.ok_or_else(|| Error::Config("truth has no feature map".into()))?;
    config
        .policies
        .iter()
        .map(|&policy| {
            let mut hits = 0usize;
            let mut n = 0usize;
            for r in report.runs.iter().filter(|r| r.policy == policy) {
                let (_, dist) = localize_pair_maximum(&map, &DVector::from_column_slice(&r.final_vartheta), &grid)?;
                hits += (dist <= LOCALIZATION_RADIUS) as usize;
                n += 1;
            }
            Ok((policy, if n > 0 { hits as f64 / n as f64 } else { f64::NAN }))
        })
        .collect()
}

/// Estimated and true components for the first replication, centered by their grid means.
fn components_csv(config: &ExperimentConfig, report: &ReplicationReport) -> Result<String> {
    let seeds = replication_seeds(config.seed, config.replications);
    let problem = replication_problem(&config.truth, seeds[0])?;
    let map = problem.feature_map.ok_or_else(|| Error::Config("truth has no feature map".into()))?;
    let surface = square_grid(KEY_REGION.0, KEY_REGION.1, SURFACE_POINTS);
    let curve: Vec<Vec<f64>> = (0..CURVE_POINTS).map(|i| vec![i as f64 / (CURVE_POINTS - 1) as f64]).collect();
    let centered = |v: Vec<f64>| -> Vec<f64> {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.into_iter().map(|x| x - m).collect()
    };
    type Truth = fn(&[f64]) -> f64;
    let parts: [(Component, &str, &Vec<Vec<f64>>, Truth); 4] = [
        (Component::Pair(0, 1), "f12", &surface, |p| -three_hump(p[0], p[1])),
        (Component::Main(2), "f3", &curve, |p| -f3(p[0])),
        (Component::Main(3), "f4", &curve, |p| -f4(p[0])),
        (Component::Main(4), "f5", &curve, |p| -f5(p[0])),
    ];
    csv_string(|w| {
        w.write_record(["policy", "rep", "component", "x1", "x2", "estimate", "truth"])?;
        for r in report.runs.iter().filter(|r| r.rep == 0) {
            let vartheta = DVector::from_column_slice(&r.final_vartheta);
            for (comp, name, grid, truth) in &parts {
                let idx = map.component_index(*comp).ok_or_else(|| Error::Config(format!("missing component {name}")))?;
                let est = centered(map.reconstruct_component(&vartheta, idx, grid)?);
                let tru = centered(grid.iter().map(|p| truth(p)).collect());
                for (k, p) in grid.iter().enumerate() {
                    let x2 = p.get(1).map(|v| v.to_string()).unwrap_or_default();
                    w.serialize((r.policy.label(), r.rep, name, p[0], x2, est[k], tru[k]))?;
                }
            }
        }
        Ok(())
    })
}

/// Run the configured experiment and render its result files without touching disk.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let spec = config.to_spec();
    let seeds = replication_seeds(config.seed, config.replications);
    let report = run_replications(&spec, &seeds)?;
    let sweep = if config.lambda.sweep.is_empty() { Vec::new() } else { lambda_sweep(&spec, &seeds, &config.lambda.sweep)? };

    let is_spam = matches!(config.truth, TruthSpec::SsAnova(_));
    let localization = if is_spam { localization_rates(config, &report)? } else { Vec::new() };
    let table = report
        .summaries
        .iter()
        .map(|s| TableRow {
            policy: s.policy,
            mean: s.final_oc.mean,
            sd: s.final_oc.sd,
            median: s.final_oc.median,
            se: s.final_oc.se,
            mean_misclassified: s.final_misclassified.mean,
            n_ok: s.n_ok,
            n_failed: s.n_failed,
            localization_rate: localization.iter().find(|(p, _)| *p == s.policy).map(|&(_, r)| r),
        })
        .collect();
    let best_sweep_point = best_sweep_point(&sweep, PolicyKind::KgSpLin);
    let mut echoed = config.clone();
    echoed.output_dir = None;
    let doc = SummaryDoc { schema: config.schema, config: &echoed, table, failures: &report.failures, best_sweep_point };
    let mut summary = serde_json::to_string_pretty(&doc)?;
    summary.push('\n');

    let mut files = vec![
        ("results.csv".to_string(), results_csv(&report)?),
        ("series.csv".to_string(), series_csv(&report)?),
    ];
    if !sweep.is_empty() {
        files.push(("sweep.csv".to_string(), sweep_csv(&sweep)?));
    }
    if is_spam && report.runs.iter().any(|r| r.rep == 0) {
        files.push(("components.csv".to_string(), components_csv(config, &report)?));
    }
    if config.traces {
        files.push(("traces.ndjson".to_string(), traces_ndjson(&report)?));
    }
    files.push(("summary.json".to_string(), summary));
    Ok(ExperimentOutput { files, report, sweep })
}

/// Grid point with the fewest mean misclassified groups for `policy` (first on ties).
pub fn best_sweep_point(rows: &[SweepRow], policy: PolicyKind) -> Option<&SweepRow> {
    rows.iter()
        .filter(|r| r.policy == policy && r.misclassified.n > 0)
        .fold(None, |best: Option<&SweepRow>, r| match best {
            Some(b) if b.misclassified.mean <= r.misclassified.mean => Some(b),
            _ => Some(r),
        })
}

/// Final-OC summary of one policy, if it ran.
pub fn final_oc(report: &ReplicationReport, policy: PolicyKind) -> Option<Summary> {
    report.summary(policy).map(|s| s.final_oc)
}
