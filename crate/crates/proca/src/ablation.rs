//! Cartesian sweeps over config fields. Every cell runs the full pipeline in
//! its own run directory; a failing cell is recorded and the sweep continues.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;
use serde_json::Value;

use crate::config;
use crate::error::{AppError, AppResult};
use crate::rundir::{run_stages, RunDir};

pub const WORKERS_ENV: &str = "PROCA_NUM_WORKERS";

#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<Value>,
}

impl Axis {
    /// Parses `key=v1,v2,...`; each value is read as JSON when possible.
    pub fn parse(raw: &str) -> AppResult<Self> {
        let (key, values) = config::split_override(raw)?;
        let values: Vec<Value> = values.split(',').filter(|v| !v.is_empty()).map(config::parse_value).collect();
        if values.is_empty() {
            return Err(AppError::Usage(format!("axis `{key}` has no values")));
        }
        Ok(Self { key: key.to_string(), values })
    }
}

/// Cartesian product, last axis varying fastest. No axes gives one empty cell.
pub fn cells(axes: &[Axis]) -> Vec<Vec<(String, Value)>> {
    let mut out = vec![Vec::new()];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.values.iter().map(move |v| {
                    let mut cell = prefix.clone();
                    cell.push((axis.key.clone(), v.clone()));
                    cell
                })
            })
            .collect();
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellResult {
    pub index: usize,
    pub settings: Vec<(String, Value)>,
    pub dir: PathBuf,
    /// Target mIoU after stages 1, 2 and 3 (absent when a stage did not run).
    pub target_miou: [Option<f64>; 3],
    pub source_miou: Option<f64>,
    pub error: Option<String>,
}

/// Worker count from `PROCA_NUM_WORKERS`, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn run_cell(base: Option<&Value>, overrides: &[(String, Value)], settings: &[(String, Value)], dir: &Path) -> AppResult<CellResult> {
    let all: Vec<(String, Value)> = overrides.iter().chain(settings).cloned().collect();
    let cfg = config::resolve(base, &all)?;
    run_stages(dir, &cfg, 1, 3, None)?;
    let evals = RunDir::open(dir)?.read_evaluations()?;
    let pick = |s: u8| evals.get(&s).map(|r| r.target.miou);
    let last = evals.values().next_back().map(|r| r.source.miou);
    Ok(CellResult {
        index: 0,
        settings: settings.to_vec(),
        dir: dir.to_path_buf(),
        target_miou: [pick(1), pick(2), pick(3)],
        source_miou: last,
        error: None,
    })
}

/// Runs every cell under `out/cells/NNN` with at most `workers` threads and
/// writes `ablation.csv` and `ablation.md`.
pub fn run_ablation(base: Option<&Value>, overrides: &[(String, Value)], axes: &[Axis], out: &Path, workers: usize) -> AppResult<Vec<CellResult>> {
    for axis in axes {
        // Reject typos before any training starts.
        let mut probe = overrides.to_vec();
        probe.push((axis.key.clone(), axis.values[0].clone()));
        config::resolve(base, &probe)?;
    }
    let grid = cells(axes);
    let results: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; grid.len()]);
    let next = AtomicUsize::new(0);
    let workers = workers.clamp(1, grid.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(settings) = grid.get(i) else { break };
                let dir = out.join("cells").join(format!("{i:03}"));
                let result = match run_cell(base, overrides, settings, &dir) {
                    Ok(r) => CellResult { index: i, ..r },
                    Err(e) => {
                        log::warn!("cell {i} failed: {e}");
                        CellResult {
                            index: i,
                            settings: settings.clone(),
                            dir,
                            target_miou: [None; 3],
                            source_miou: None,
                            error: Some(e.to_string()),
                        }
                    }
                };
                results.lock().expect("no worker panics while holding the lock")[i] = Some(result);
            });
        }
    });
    let results: Vec<CellResult> = results.into_inner().expect("workers joined").into_iter().map(|r| r.expect("every cell ran")).collect();
    write_tables(out, axes, &results)?;
    Ok(results)
}

fn value_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.4}"))
}

pub fn write_tables(out: &Path, axes: &[Axis], results: &[CellResult]) -> AppResult<()> {
    std::fs::create_dir_all(out).map_err(|e| AppError::io(out, e))?;
    let path = out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| AppError::io(&path, e))?;
    let mut header = vec!["cell".to_string()];
    header.extend(axes.iter().map(|a| a.key.clone()));
    header.extend(["stage1_target_miou", "stage2_target_miou", "stage3_target_miou", "final_source_miou", "status"].map(String::from));
    w.write_record(&header).map_err(|e| AppError::io(&path, e))?;
    let mut md = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
    for r in results {
        let mut row = vec![format!("{:03}", r.index)];
        row.extend(r.settings.iter().map(|(_, v)| value_text(v)));
        row.extend(r.target_miou.iter().map(|v| opt(*v)));
        row.push(opt(r.source_miou));
        row.push(r.error.as_ref().map_or_else(|| "ok".into(), |e| format!("failed: {e}")));
        w.write_record(&row).map_err(|e| AppError::io(&path, e))?;
        let _ = writeln!(md, "| {} |", row.join(" | "));
    }
    w.flush().map_err(|e| AppError::io(&path, e))?;
    let md_path = out.join("ablation.md");
    std::fs::write(&md_path, md).map_err(|e| AppError::io(&md_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn axis_parsing_and_cartesian_shape() {
        let eta = Axis::parse("eta=0.3,0.4,0.5,0.6,0.7,0.8,0.9").unwrap();
        assert_eq!(eta.values.len(), 7);
        assert_eq!(cells(std::slice::from_ref(&eta)).len(), 7);
        assert_eq!(cells(&[]), vec![Vec::new()]);
        let a = Axis::parse("updating_scheme=fixed,mixed").unwrap();
        let b = Axis::parse("m=0.5,0.9,1").unwrap();
        let grid = cells(&[a, b]);
        assert_eq!(grid.len(), 6);
        assert_eq!(grid[0], vec![("updating_scheme".into(), json!("fixed")), ("m".into(), json!(0.5))]);
        assert_eq!(grid[5], vec![("updating_scheme".into(), json!("mixed")), ("m".into(), json!(1))]);
        assert!(Axis::parse("eta=").is_err());
        assert!(Axis::parse("=1").is_err());
    }
}
