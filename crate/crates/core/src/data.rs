//! Task series, datasets, the distinct time grid and shift grids.
//!
//! Times inside a [`Dataset`] are phases in `[0, 1)`: ingestion divides by the
//! declared period, which is kept only so results can be mapped back.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One irregularly sampled periodic series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSeries {
    pub id: String,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub label: Option<String>,
}

impl TaskSeries {
    /// Builds a series, checking that times are strictly increasing inside `[0, period)`.
    pub fn new(
        id: impl Into<String>,
        times: Vec<f64>,
        values: Vec<f64>,
        label: Option<String>,
        period: f64,
    ) -> Result<Self> {
        let series = TaskSeries {
            id: id.into(),
            times,
            values,
            label,
        };
        series.validate(period)?;
        Ok(series)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn validate(&self, period: f64) -> Result<()> {
        let bad = |reason: &str| Error::InvalidTask {
            task: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.times.is_empty() {
            return Err(bad("no samples"));
        }
        if self.times.len() != self.values.len() {
            return Err(bad("times and values differ in length"));
        }
        for &t in &self.times {
            if !(t >= 0.0 && t < period) {
                return Err(Error::TimeOutOfRange {
                    task: self.id.clone(),
                    time: t,
                    period,
                });
            }
        }
        if self.times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("times not strictly increasing"));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite observation"));
        }
        Ok(())
    }
}

/// Sorted union of all sample times plus, per task, the index of each sample in it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistinctGrid {
    pub points: Vec<f64>,
    pub selectors: Vec<Vec<usize>>,
}

impl DistinctGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Times of task `j` reconstructed through its selector.
    pub fn task_times(&self, j: usize) -> Vec<f64> {
        self.selectors[j].iter().map(|&i| self.points[i]).collect()
    }
}

pub fn build_distinct_grid(tasks: &[TaskSeries], period: f64) -> Result<DistinctGrid> {
    if tasks.is_empty() {
        return Err(Error::Empty("task list"));
    }
    let mut points = Vec::new();
    for task in tasks {
        for &t in &task.times {
            if !(t >= 0.0 && t < period) {
                return Err(Error::TimeOutOfRange {
                    task: task.id.clone(),
                    time: t,
                    period,
                });
            }
            points.push(t);
        }
    }
    points.sort_by(f64::total_cmp);
    points.dedup();
    let selectors = tasks
        .iter()
        .map(|task| {
            task.times
                .iter()
                .map(|t| points.binary_search_by(|p| p.total_cmp(t)).expect("time present"))
                .collect()
        })
        .collect();
    Ok(DistinctGrid { points, selectors })
}

/// Equally spaced candidate shifts `{0, 1/L, ..., (L-1)/L}` on the unit period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftGrid {
    pub shifts: Vec<f64>,
}

impl ShiftGrid {
    pub fn uniform(count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("shift grid needs at least one point".into()));
        }
        Ok(ShiftGrid {
            shifts: (0..count).map(|i| lattice_point(i, count)).collect(),
        })
    }

    /// The single shift `0`, i.e. shifts disabled.
    pub fn zero() -> Self {
        ShiftGrid { shifts: vec![0.0] }
    }

    pub fn count(&self) -> usize {
        self.shifts.len()
    }
}

/// Time of lattice point `i` on a uniform lattice of `resolution` points over `[0, 1)`.
#[inline]
pub fn lattice_point(i: usize, resolution: usize) -> f64 {
    i as f64 / resolution as f64
}

/// Index of the lattice point nearest to `t` (round half up), wrapping at 1.
#[inline]
pub fn lattice_index(t: f64, resolution: usize) -> usize {
    let idx = (t * resolution as f64 + 0.5).floor() as i64;
    idx.rem_euclid(resolution as i64) as usize
}

/// A collection of tasks sharing one period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    tasks: Vec<TaskSeries>,
    /// Declared period in the original time unit; task times are phases.
    period: f64,
    grid: DistinctGrid,
    /// Resolution `R` when every time sits exactly on `i / R`.
    lattice: Option<usize>,
}

impl Dataset {
    /// `tasks` must already carry phases in `[0, 1)`.
    pub fn new(tasks: Vec<TaskSeries>, period: f64) -> Result<Self> {
        if !(period > 0.0 && period.is_finite()) {
            return Err(Error::Config(format!("period must be positive, got {period}")));
        }
        for task in &tasks {
            task.validate(1.0)?;
        }
        let grid = build_distinct_grid(&tasks, 1.0)?;
        Ok(Dataset {
            tasks,
            period,
            grid,
            lattice: None,
        })
    }

    /// Builds a dataset from times in original units by dividing by `period`.
    pub fn from_original_units(mut tasks: Vec<TaskSeries>, period: f64) -> Result<Self> {
        for task in &mut tasks {
            task.validate(period)?;
            for t in &mut task.times {
                *t /= period;
            }
        }
        Self::new(tasks, period)
    }

    /// Marks the dataset as living on a uniform lattice of `resolution` points,
    /// after checking every time is exactly a lattice point.
    pub fn with_lattice(mut self, resolution: usize) -> Result<Self> {
        if resolution < 1 {
            return Err(Error::Config("lattice resolution must be positive".into()));
        }
        for &p in &self.grid.points {
            if lattice_point(lattice_index(p, resolution), resolution) != p {
                return Err(Error::Contract(format!(
                    "time {p} is not on the {resolution}-point lattice"
                )));
            }
        }
        self.lattice = Some(resolution);
        Ok(self)
    }

    pub fn tasks(&self) -> &[TaskSeries] {
        &self.tasks
    }

    pub fn task(&self, j: usize) -> &TaskSeries {
        &self.tasks[j]
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn grid(&self) -> &DistinctGrid {
        &self.grid
    }

    pub fn lattice(&self) -> Option<usize> {
        self.lattice
    }

    pub fn total_samples(&self) -> usize {
        self.tasks.iter().map(|t| t.len()).sum()
    }

    /// True when every task is sampled at every grid point.
    pub fn is_synchronous(&self) -> bool {
        let n = self.grid.len();
        self.grid
            .selectors
            .iter()
            .all(|sel| sel.len() == n && sel.iter().enumerate().all(|(i, &s)| i == s))
    }

    /// Variance of all observations pooled together (divisor n).
    pub fn pooled_variance(&self) -> f64 {
        let all: Vec<f64> = self.tasks.iter().flat_map(|t| t.values.iter().copied()).collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
    }

    pub fn labels(&self) -> Vec<Option<String>> {
        self.tasks.iter().map(|t| t.label.clone()).collect()
    }

    /// Distinct labels in order of first appearance.
    pub fn label_set(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in &self.tasks {
            if let Some(l) = &t.label {
                if !out.contains(l) {
                    out.push(l.clone());
                }
            }
        }
        out
    }

    /// Sub-dataset of the given task indices (lattice marker preserved).
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let tasks = indices.iter().map(|&j| self.tasks[j].clone()).collect();
        let mut ds = Dataset::new(tasks, self.period)?;
        ds.lattice = self.lattice;
        Ok(ds)
    }
}

/// Moves every time to the nearest of `resolution` equally spaced phases,
/// averaging values that collide within a task.
pub fn snap_to_grid(dataset: &Dataset, resolution: usize) -> Result<Dataset> {
    if resolution < 2 {
        return Err(Error::Config(format!(
            "snap resolution must be at least 2, got {resolution}"
        )));
    }
    let mut tasks = Vec::with_capacity(dataset.len());
    for task in dataset.tasks() {
        let mut buckets: Vec<(usize, f64, usize)> = Vec::new();
        let mut pairs: Vec<(usize, f64)> = task
            .times
            .iter()
            .zip(&task.values)
            .map(|(&t, &v)| (lattice_index(t, resolution), v))
            .collect();
        pairs.sort_by_key(|p| p.0);
        for (idx, v) in pairs {
            match buckets.last_mut() {
                Some(last) if last.0 == idx => {
                    last.1 += v;
                    last.2 += 1;
                }
                _ => buckets.push((idx, v, 1)),
            }
        }
        tasks.push(TaskSeries {
            id: task.id.clone(),
            times: buckets.iter().map(|b| lattice_point(b.0, resolution)).collect(),
            values: buckets.iter().map(|b| b.1 / b.2 as f64).collect(),
            label: task.label.clone(),
        });
    }
    Dataset::new(tasks, dataset.period())?.with_lattice(resolution)
}

/// Rescales values to mean 0 and (population) standard deviation 1.
pub fn normalize_series(series: &TaskSeries) -> Result<TaskSeries> {
    if series.values.len() < 2 {
        return Err(Error::DegenerateSeries(series.id.clone()));
    }
    let n = series.values.len() as f64;
    let mean = series.values.iter().sum::<f64>() / n;
    let var = series.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd > 0.0) || sd <= 1e-300 {
        return Err(Error::DegenerateSeries(series.id.clone()));
    }
    Ok(TaskSeries {
        values: series.values.iter().map(|v| (v - mean) / sd).collect(),
        ..series.clone()
    })
}
