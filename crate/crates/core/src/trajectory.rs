//! Step-budget accounting, observation history and incumbent trajectories
//! shared by every optimizer.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::benchmark::BenchmarkTable;
use crate::error::{Error, Result};

/// Loss of `config_id` after `budget` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub config_id: u64,
    pub budget: usize,
    pub loss: f64,
}

/// Append-only record of every evaluated `(config, budget, loss)` triple.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    observations: Vec<Observation>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends an observation. Per configuration, budgets must strictly increase.
    pub fn push(&mut self, obs: Observation) -> Result<()> {
        if !obs.loss.is_finite() {
            return Err(Error::Domain(format!(
                "non-finite loss for config {} at budget {}",
                obs.config_id, obs.budget
            )));
        }
        if obs.budget == 0 {
            return Err(Error::InvalidArgument("budget must be at least 1".into()));
        }
        if let Some(last) = self.max_budget(obs.config_id) {
            if obs.budget <= last {
                return Err(Error::InvalidArgument(format!(
                    "config {} already observed at budget {last}, cannot append budget {}",
                    obs.config_id, obs.budget
                )));
            }
        }
        self.observations.push(obs);
        Ok(())
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn last(&self) -> Option<&Observation> {
        self.observations.last()
    }

    /// Largest budget observed for `config_id`.
    pub fn max_budget(&self, config_id: u64) -> Option<usize> {
        self.observations
            .iter()
            .filter(|o| o.config_id == config_id)
            .map(|o| o.budget)
            .max()
    }
}

impl<'a> IntoIterator for &'a History {
    type Item = &'a Observation;
    type IntoIter = std::slice::Iter<'a, Observation>;

    fn into_iter(self) -> Self::IntoIter {
        self.observations.iter()
    }
}

/// Budget and seeding shared by every optimizer run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    /// Total training steps the run may consume.
    pub total_step_budget: usize,
    /// Steps added to a configuration per HPO iteration.
    pub b_step: usize,
    pub seed: u64,
    /// Record process wall time per trajectory point. Off by default so that
    /// trajectories are bit-reproducible.
    pub record_wall_time: bool,
}

impl RunSettings {
    /// Enough steps to fully train `multiplier` configurations.
    pub fn for_table(table: &BenchmarkTable, multiplier: usize, seed: u64) -> Self {
        Self {
            total_step_budget: multiplier * table.b_max(),
            b_step: 1,
            seed,
            record_wall_time: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_step_budget == 0 {
            return Err(Error::InvalidArgument(
                "total step budget must be positive".into(),
            ));
        }
        if self.b_step == 0 {
            return Err(Error::InvalidArgument("b_step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub steps: usize,
    pub wall_time_s: Option<f64>,
    pub incumbent_loss: f64,
    pub regret: f64,
    /// `None` when the benchmark has no spread between best and worst config.
    pub normalized_regret: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
    /// True when the run stopped with unused budget, e.g. because no
    /// configuration could be advanced further.
    pub terminated_early: bool,
    pub unused_steps: usize,
}

impl Trajectory {
    pub fn final_point(&self) -> Option<&TrajectoryPoint> {
        self.points.last()
    }

    pub fn steps_consumed(&self) -> usize {
        self.final_point().map_or(0, |p| p.steps)
    }
}

/// Regret of the best loss observed so far against the benchmark oracle.
pub fn incumbent_regret(history: &History, table: &BenchmarkTable) -> Result<f64> {
    let best = history
        .observations()
        .iter()
        .map(|o| o.loss)
        .fold(f64::INFINITY, f64::min);
    if history.is_empty() {
        return Err(Error::Empty("history"));
    }
    Ok(best - table.oracle())
}

/// Result of advancing one configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// Incremental steps charged for this evaluation.
    pub cost: usize,
}

/// Trains configurations on a tabular benchmark while charging a global
/// step budget.
///
/// Training resumes from the last budget reached by a configuration, so
/// advancing from `b0` to `b1` costs `b1 - b0` steps and observes every
/// intermediate loss.
#[derive(Debug)]
pub struct StepLedger<'a> {
    table: &'a BenchmarkTable,
    settings: RunSettings,
    steps: usize,
    trained: Vec<usize>,
    history: History,
    incumbent: f64,
    oracle: f64,
    span: f64,
    started: Instant,
    trajectory: Trajectory,
}

impl<'a> StepLedger<'a> {
    pub fn new(table: &'a BenchmarkTable, settings: RunSettings) -> Result<Self> {
        settings.validate()?;
        Ok(Self {
            table,
            settings,
            steps: 0,
            trained: vec![0; table.len()],
            history: History::new(),
            incumbent: f64::INFINITY,
            oracle: table.oracle(),
            span: table.regret_span(),
            started: Instant::now(),
            trajectory: Trajectory {
                points: Vec::new(),
                terminated_early: false,
                unused_steps: 0,
            },
        })
    }

    pub fn table(&self) -> &'a BenchmarkTable {
        self.table
    }

    pub fn settings(&self) -> &RunSettings {
        &self.settings
    }

    pub fn steps_consumed(&self) -> usize {
        self.steps
    }

    pub fn remaining(&self) -> usize {
        self.settings.total_step_budget - self.steps
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn incumbent_loss(&self) -> f64 {
        self.incumbent
    }

    /// Budget reached so far by the configuration at table position `index`.
    pub fn trained_budget(&self, index: usize) -> usize {
        self.trained[index]
    }

    /// Steps needed to bring `config_id` to `budget`.
    pub fn cost_of(&self, config_id: u64, budget: usize) -> Result<usize> {
        let index = self.table.position(config_id)?;
        Ok(budget.saturating_sub(self.trained[index]))
    }

    /// Trains `config_id` up to `budget` and charges the incremental steps.
    pub fn evaluate(&mut self, config_id: u64, budget: usize) -> Result<Evaluation> {
        let b_max = self.table.b_max();
        if budget == 0 || budget > b_max {
            return Err(Error::BudgetOutOfRange { budget, b_max });
        }
        let index = self.table.position(config_id)?;
        let previous = self.trained[index];
        if budget <= previous {
            return Err(Error::InvalidArgument(format!(
                "config {config_id} already trained to budget {previous}"
            )));
        }
        let cost = budget - previous;
        if cost > self.remaining() {
            return Err(Error::BudgetExhausted {
                needed: cost,
                remaining: self.remaining(),
            });
        }
        let curve = &self.table.configs()[index].curve;
        for step in previous + 1..=budget {
            let loss = curve.at(step).expect("budget checked against b_max");
            self.history.push(Observation {
                config_id,
                budget: step,
                loss,
            })?;
            self.incumbent = self.incumbent.min(loss);
        }
        self.trained[index] = budget;
        self.steps += cost;
        let regret = self.incumbent - self.oracle;
        let normalized = if self.span > 0.0 {
            Some((regret / self.span).max(0.0))
        } else {
            None
        };
        self.trajectory.points.push(TrajectoryPoint {
            steps: self.steps,
            wall_time_s: self
                .settings
                .record_wall_time
                .then(|| self.started.elapsed().as_secs_f64()),
            incumbent_loss: self.incumbent,
            regret,
            normalized_regret: normalized,
        });
        Ok(Evaluation {
            loss: curve.at(budget).expect("checked"),
            cost,
        })
    }

    /// Closes the run; any steps left over mark it as terminated early.
    pub fn finish(self) -> (Trajectory, History) {
        let unused = self.remaining();
        let mut trajectory = self.trajectory;
        trajectory.terminated_early = unused > 0;
        trajectory.unused_steps = unused;
        (trajectory, self.history)
    }
}
