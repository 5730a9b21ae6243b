//! Trajectory CSV files and their aggregation across seeds and datasets.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dpl_core::stats::{mean, standard_error};
use dpl_core::trajectory::Trajectory;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const TRAJECTORY_HEADER: [&str; 8] = [
    "seed",
    "method",
    "dataset",
    "steps",
    "wall_time_s",
    "incumbent_loss",
    "regret",
    "normalized_regret",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub seed: u64,
    pub method: String,
    pub dataset: String,
    pub steps: usize,
    pub wall_time_s: Option<f64>,
    pub incumbent_loss: f64,
    pub regret: f64,
    pub normalized_regret: Option<f64>,
}

pub fn trajectory_rows(
    trajectory: &Trajectory,
    seed: u64,
    method: &str,
    dataset: &str,
) -> Vec<TrajectoryRow> {
    trajectory
        .points
        .iter()
        .map(|p| TrajectoryRow {
            seed,
            method: method.to_string(),
            dataset: dataset.to_string(),
            steps: p.steps,
            wall_time_s: p.wall_time_s,
            incumbent_loss: p.incumbent_loss,
            regret: p.regret,
            normalized_regret: p.normalized_regret,
        })
        .collect()
}

pub fn write_trajectory(path: &Path, rows: &[TrajectoryRow]) -> Result<(), CliError> {
    // The header is written by hand so that empty trajectories still carry it.
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| CliError::io(path, e))?;
    writer
        .write_record(TRAJECTORY_HEADER)
        .map_err(|e| CliError::io(path, e))?;
    for row in rows {
        writer.serialize(row).map_err(|e| CliError::io(path, e))?;
    }
    writer.flush().map_err(|e| CliError::io(path, e))
}

/// Reads a trajectory CSV. Returns `Ok(None)` for CSV files with another header.
pub fn read_trajectory(path: &Path) -> Result<Option<Vec<TrajectoryRow>>, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    let headers = reader.headers().map_err(|e| CliError::io(path, e))?;
    if !headers.iter().eq(TRAJECTORY_HEADER) {
        return Ok(None);
    }
    let mut rows = Vec::new();
    for (i, record) in reader.deserialize().enumerate() {
        let row: TrajectoryRow = record
            .map_err(|e| CliError::Data(format!("{}: row {}: {e}", path.display(), i + 1)))?;
        rows.push(row);
    }
    Ok(Some(rows))
}

/// One run's normalized regret (and optional wall time) after each step count.
#[derive(Debug, Clone, PartialEq)]
struct Series {
    steps: Vec<usize>,
    regret: Vec<f64>,
    wall: Option<Vec<f64>>,
}

impl Series {
    fn from_rows(rows: &[&TrajectoryRow]) -> Self {
        let wall: Option<Vec<f64>> = rows.iter().map(|r| r.wall_time_s).collect();
        Self {
            steps: rows.iter().map(|r| r.steps).collect(),
            // A benchmark without spread has zero regret everywhere.
            regret: rows
                .iter()
                .map(|r| r.normalized_regret.unwrap_or(0.0))
                .collect(),
            wall,
        }
    }

    /// Index of the last point at or before `step` (last value carried forward).
    fn index_at(&self, step: usize) -> usize {
        self.steps.partition_point(|&s| s <= step) - 1
    }
}

/// Aggregate row: a method's mean normalized regret at one grid step.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub method: String,
    pub steps: usize,
    pub mean_normalized_regret: f64,
    pub stderr_normalized_regret: f64,
    pub datasets: usize,
    pub seeds: usize,
    pub mean_wall_time_s: Option<f64>,
    /// Wall time divided by Random Search's total time on the same dataset.
    pub wall_time_rel_rs: Option<f64>,
}

type RunKey = (String, String, u64);

fn group_runs(rows: Vec<TrajectoryRow>) -> Result<BTreeMap<RunKey, Series>, CliError> {
    let mut grouped: BTreeMap<RunKey, Vec<TrajectoryRow>> = BTreeMap::new();
    for row in rows {
        grouped
            .entry((row.method.clone(), row.dataset.clone(), row.seed))
            .or_default()
            .push(row);
    }
    let mut runs = BTreeMap::new();
    for (key, mut rows) in grouped {
        rows.sort_by_key(|r| r.steps);
        if rows.windows(2).any(|w| w[0].steps == w[1].steps) {
            return Err(CliError::Data(format!(
                "duplicate step counts for method {} on {} with seed {}",
                key.0, key.1, key.2
            )));
        }
        let refs: Vec<&TrajectoryRow> = rows.iter().collect();
        runs.insert(key, Series::from_rows(&refs));
    }
    Ok(runs)
}

/// Puts every run on a shared step grid (last value carried forward), averages
/// normalized regret over seeds within a dataset and then over datasets.
///
/// The grid for a method is the union of its runs' step counts, starting at
/// the first step every run has reached. The standard error is taken across
/// dataset means, or across seeds when there is a single dataset.
pub fn aggregate(rows: Vec<TrajectoryRow>) -> Result<Vec<AggregateRow>, CliError> {
    if rows.is_empty() {
        return Err(CliError::Data("no trajectory rows to aggregate".into()));
    }
    let runs = group_runs(rows)?;
    let timed = runs.values().all(|s| s.wall.is_some());
    let mut rs_time: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    if timed {
        for ((method, dataset, _), series) in &runs {
            if method == "rs" {
                let wall = series.wall.as_ref().expect("timed");
                rs_time
                    .entry(dataset)
                    .or_default()
                    .push(*wall.last().unwrap());
            }
        }
    }
    let rs_time: BTreeMap<&str, f64> = rs_time
        .into_iter()
        .map(|(d, t)| (d, t.iter().sum::<f64>() / t.len() as f64))
        .collect();

    let mut methods: BTreeMap<&str, BTreeMap<&str, Vec<&Series>>> = BTreeMap::new();
    for ((method, dataset, _), series) in &runs {
        methods
            .entry(method)
            .or_default()
            .entry(dataset)
            .or_default()
            .push(series);
    }

    let mut out = Vec::new();
    for (method, datasets) in methods {
        let all: Vec<&Series> = datasets.values().flatten().copied().collect();
        let start = all.iter().map(|s| s.steps[0]).max().unwrap();
        let mut grid: Vec<usize> = all
            .iter()
            .flat_map(|s| s.steps.iter().copied())
            .filter(|&s| s >= start)
            .collect();
        grid.sort_unstable();
        grid.dedup();
        let n_seeds = datasets.values().map(Vec::len).max().unwrap();
        let relative = datasets.keys().all(|d| rs_time.contains_key(d));

        for &step in &grid {
            let mut dataset_means = Vec::with_capacity(datasets.len());
            let mut seed_values = Vec::new();
            let mut walls = Vec::new();
            let mut rel = Vec::new();
            for (dataset, series) in &datasets {
                let values: Vec<f64> = series.iter().map(|s| s.regret[s.index_at(step)]).collect();
                dataset_means.push(mean(&values)?);
                seed_values = values;
                if timed {
                    let w: Vec<f64> = series
                        .iter()
                        .map(|s| s.wall.as_ref().unwrap()[s.index_at(step)])
                        .collect();
                    let m = mean(&w)?;
                    walls.push(m);
                    if relative {
                        rel.push(m / rs_time[dataset]);
                    }
                }
            }
            let stderr = if dataset_means.len() > 1 {
                standard_error(&dataset_means)?
            } else {
                standard_error(&seed_values)?
            };
            out.push(AggregateRow {
                method: method.to_string(),
                steps: step,
                mean_normalized_regret: mean(&dataset_means)?,
                stderr_normalized_regret: stderr,
                datasets: datasets.len(),
                seeds: n_seeds,
                mean_wall_time_s: if timed { Some(mean(&walls)?) } else { None },
                wall_time_rel_rs: if timed && relative {
                    Some(mean(&rel)?)
                } else {
                    None
                },
            });
        }
    }
    Ok(out)
}

pub fn write_aggregate(path: &Path, rows: &[AggregateRow]) -> Result<(), CliError> {
    let timed = rows.iter().all(|r| r.mean_wall_time_s.is_some());
    let relative = timed && rows.iter().all(|r| r.wall_time_rel_rs.is_some());
    let mut writer = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
    let mut header = vec![
        "method",
        "steps",
        "mean_normalized_regret",
        "stderr_normalized_regret",
        "datasets",
        "seeds",
    ];
    if timed {
        header.push("mean_wall_time_s");
    }
    if relative {
        header.push("wall_time_rel_rs");
    }
    writer
        .write_record(&header)
        .map_err(|e| CliError::io(path, e))?;
    for row in rows {
        let mut record = vec![
            row.method.clone(),
            row.steps.to_string(),
            row.mean_normalized_regret.to_string(),
            row.stderr_normalized_regret.to_string(),
            row.datasets.to_string(),
            row.seeds.to_string(),
        ];
        if timed {
            record.push(row.mean_wall_time_s.unwrap().to_string());
        }
        if relative {
            record.push(row.wall_time_rel_rs.unwrap().to_string());
        }
        writer
            .write_record(&record)
            .map_err(|e| CliError::io(path, e))?;
    }
    writer.flush().map_err(|e| CliError::io(path, e))
}

/// Trajectory CSV files in `dir`, sorted by name.
pub fn trajectory_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "csv") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Aggregates every trajectory CSV in `dir` into `out`.
pub fn report_dir(dir: &Path, out: &Path) -> Result<usize, CliError> {
    let mut rows = Vec::new();
    let mut found = 0;
    for path in trajectory_files(dir)? {
        if let Some(r) = read_trajectory(&path)? {
            rows.extend(r);
            found += 1;
        }
    }
    if found == 0 {
        return Err(CliError::Data(format!(
            "no trajectory CSV files in {}",
            dir.display()
        )));
    }
    let aggregate = aggregate(rows)?;
    write_aggregate(out, &aggregate)?;
    Ok(found)
}
