use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::run::{RunManifest, METRICS_HEADER};
use super::ExperimentError;
use crate::eval::mean_sd;

/// One parsed row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub stage: usize,
    pub loss: f64,
    pub error: Option<f64>,
    pub acceptance: Option<f64>,
    pub ce_loss: Option<f64>,
    pub samples: usize,
    pub skipped: usize,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
    let bad = |line: usize, msg: String| ExperimentError::Report(format!("{}:{line}: {msg}", path.display()));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == METRICS_HEADER => {}
        Some((_, h)) => return Err(bad(1, format!("unexpected header {h:?}"))),
        None => return Err(bad(1, "empty file".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(n, format!("expected 7 fields, found {}", f.len())));
        }
        let int = |k: usize| f[k].parse::<usize>().map_err(|e| bad(n, format!("field {k} {:?}: {e}", f[k])));
        let float = |k: usize| f[k].parse::<f64>().map_err(|e| bad(n, format!("field {k} {:?}: {e}", f[k])));
        let opt = |k: usize| if f[k].is_empty() { Ok(None) } else { float(k).map(Some) };
        rows.push(MetricsRow {
            stage: int(0)?,
            loss: float(1)?,
            error: opt(2)?,
            acceptance: opt(3)?,
            ce_loss: opt(4)?,
            samples: int(5)?,
            skipped: int(6)?,
        });
    }
    Ok(rows)
}

/// Run directories named by `dirs`. A directory without a manifest is
/// searched one level down.
fn run_dirs(dirs: &[PathBuf]) -> Result<Vec<PathBuf>, ExperimentError> {
    let mut out = Vec::new();
    for d in dirs {
        if d.join("manifest.json").is_file() {
            out.push(d.clone());
            continue;
        }
        let entries = std::fs::read_dir(d).map_err(|e| ExperimentError::io(d, e))?;
        let mut found: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("manifest.json").is_file())
            .collect();
        if found.is_empty() {
            return Err(ExperimentError::Report(format!(
                "{}: no manifest.json here or in its subdirectories",
                d.display()
            )));
        }
        found.sort();
        out.extend(found);
    }
    Ok(out)
}

fn stat(values: &[f64]) -> String {
    match values.len() {
        0 => "-".into(),
        1 => format!("{:.6}", values[0]),
        _ => {
            let (m, s) = mean_sd(values);
            format!("{m:.6} ± {s:.6}")
        }
    }
}

/// Aggregates per-stage metrics and final summaries over runs of one
/// experiment as mean ± sample SD. A single run is shown without SD.
pub fn report(dirs: &[PathBuf]) -> Result<String, ExperimentError> {
    let runs = run_dirs(dirs)?;
    let mut manifests = Vec::new();
    let mut metrics = Vec::new();
    let mut summaries: Vec<BTreeMap<String, Option<f64>>> = Vec::new();
    for dir in &runs {
        let mpath = dir.join("manifest.json");
        let text = std::fs::read_to_string(&mpath).map_err(|e| ExperimentError::io(&mpath, e))?;
        let m: RunManifest =
            serde_json::from_str(&text).map_err(|e| ExperimentError::Report(format!("{}: {e}", mpath.display())))?;
        metrics.push(read_metrics(&dir.join("metrics.csv"))?);
        let spath = dir.join("summary.json");
        let text = std::fs::read_to_string(&spath).map_err(|e| ExperimentError::io(&spath, e))?;
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| ExperimentError::Report(format!("{}: {e}", spath.display())))?;
        let s = serde_json::from_value(v.get("metrics").cloned().unwrap_or_default())
            .map_err(|e| ExperimentError::Report(format!("{}: metrics: {e}", spath.display())))?;
        summaries.push(s);
        manifests.push(m);
    }
    let exp = manifests[0].experiment;
    if let Some(other) = manifests.iter().find(|m| m.experiment != exp) {
        return Err(ExperimentError::Report(format!(
            "runs mix experiments {} and {}",
            exp.as_str(),
            other.experiment.as_str()
        )));
    }
    let seeds: Vec<String> = manifests.iter().map(|m| m.seed.to_string()).collect();
    let mut s = format!("{} run(s) of {} (seeds {})\n\n", runs.len(), exp.as_str(), seeds.join(", "));

    let stages = metrics.iter().map(Vec::len).max().unwrap_or(0);
    let _ = writeln!(s, "{:<6} {:<26} {:<26} {:<26} {:<26}", "stage", "loss", "error", "acceptance", "ce_loss");
    for k in 0..stages {
        let rows: Vec<&MetricsRow> = metrics.iter().filter_map(|m| m.get(k)).collect();
        let col = |f: fn(&MetricsRow) -> Option<f64>| stat(&rows.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
        let _ = writeln!(
            s,
            "{:<6} {:<26} {:<26} {:<26} {:<26}",
            k,
            col(|r| Some(r.loss)),
            col(|r| r.error),
            col(|r| r.acceptance),
            col(|r| r.ce_loss)
        );
    }

    let mut keys: Vec<&String> = summaries.iter().flat_map(|m| m.keys()).collect();
    keys.sort();
    keys.dedup();
    if !keys.is_empty() {
        s.push_str("\nfinal metrics\n");
        for k in keys {
            let vals: Vec<f64> = summaries.iter().filter_map(|m| m.get(k).copied().flatten()).collect();
            let _ = writeln!(s, "  {k:<24} {}", stat(&vals));
        }
    }
    Ok(s)
}
