//! The multi-fidelity optimization loop driven by a deep power-law surrogate.
//!
//! Each iteration fits the surrogate on the full history, scores every
//! configuration that has not reached `b_max` by Expected Improvement of its
//! predicted full-budget loss, and advances the winner by `b_step` steps.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{next_budget, select_next, Candidate};
use crate::baselines::{
    run_asha, run_hyperband, run_random_search, run_successive_halving, ShSchedule, DEFAULT_ETA,
};
use crate::benchmark::BenchmarkTable;
use crate::error::{Error, Result};
use crate::seeding::{mix_seed, stream_rng};
use crate::surrogate::{
    DplEnsemble, PosteriorModel, SurrogateConfig, TrainerSchedule, TrainingData,
};
use crate::trajectory::{History, RunSettings, StepLedger, Trajectory};

/// A posterior model that is retrained as observations arrive.
pub trait Surrogate: PosteriorModel {
    /// Called once per iteration with the full training set; `newest` indexes
    /// the most recent observation.
    fn update(&mut self, data: &TrainingData, newest: usize) -> Result<()>;
}

/// Deep power-law ensemble with its retraining policy: full retrains for the
/// first iterations, then short refinements, with a restart from fresh
/// weights whenever the fit loss stagnates.
#[derive(Debug, Clone)]
pub struct DplSurrogate {
    ensemble: DplEnsemble,
    schedule: TrainerSchedule,
    seed: u64,
    iteration: u64,
    restart_pending: bool,
    restarts: usize,
    last_fit_loss: f64,
}

impl DplSurrogate {
    pub fn new(
        input_dim: usize,
        lc_length: usize,
        config: SurrogateConfig,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            ensemble: DplEnsemble::new(input_dim, config, seed)?,
            schedule: TrainerSchedule::new(lc_length),
            seed,
            iteration: 0,
            restart_pending: false,
            restarts: 0,
            last_fit_loss: f64::NAN,
        })
    }

    pub fn with_schedule(mut self, schedule: TrainerSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn ensemble(&self) -> &DplEnsemble {
        &self.ensemble
    }

    pub fn schedule(&self) -> &TrainerSchedule {
        &self.schedule
    }

    /// Number of stagnation or divergence restarts so far.
    pub fn restarts(&self) -> usize {
        self.restarts
    }

    pub fn last_fit_loss(&self) -> f64 {
        self.last_fit_loss
    }
}

impl PosteriorModel for DplSurrogate {
    fn posteriors(
        &self,
        candidates: &[Candidate],
        b_norm: f64,
    ) -> Result<Vec<crate::surrogate::Posterior>> {
        self.ensemble.posteriors(candidates, b_norm)
    }
}

impl Surrogate for DplSurrogate {
    fn update(&mut self, data: &TrainingData, newest: usize) -> Result<()> {
        let iteration_seed = mix_seed(self.seed, self.iteration);
        let from_scratch =
            self.iteration < self.schedule.initial_phase_iterations as u64 || self.restart_pending;
        let mut loss = if from_scratch {
            self.restart_pending = false;
            self.ensemble
                .fit_initial(data, &self.schedule, iteration_seed)?
        } else {
            self.ensemble
                .refine(data, newest, &self.schedule, iteration_seed)?
        };
        if !loss.is_finite() {
            // Diverged: retrain immediately so this iteration still gets a usable posterior.
            self.restarts += 1;
            self.schedule.reset_stagnation();
            loss =
                self.ensemble
                    .fit_initial(data, &self.schedule, mix_seed(iteration_seed, 0xD1))?;
        }
        if self.schedule.should_restart(loss) {
            self.restart_pending = true;
            self.restarts += 1;
            self.schedule.reset_stagnation();
        }
        self.last_fit_loss = loss;
        self.iteration += 1;
        Ok(())
    }
}

/// Runs the optimization loop with an arbitrary surrogate.
///
/// The initial design is one uniformly sampled configuration trained for
/// `b_step` steps. The loop stops when the step budget is spent or every
/// configuration has reached `b_max`.
pub fn run_with_surrogate<S: Surrogate + ?Sized>(
    table: &BenchmarkTable,
    settings: RunSettings,
    surrogate: &mut S,
) -> Result<(Trajectory, History)> {
    let mut ledger = StepLedger::new(table, settings)?;
    let b_max = table.b_max();
    let scaled = table.scaled_configs();
    let all: Vec<Candidate> = table
        .configs()
        .iter()
        .zip(scaled)
        .map(|(c, v)| Candidate {
            config_id: c.id,
            scaled_vector: v,
        })
        .collect();

    let mut rng = stream_rng(settings.seed, 0x1417);
    let first = &all[rng.random_range(0..all.len())];
    ledger.evaluate(first.config_id, settings.b_step.min(b_max))?;
    let mut data = TrainingData::from_history(ledger.history(), table)?;

    while ledger.remaining() > 0 {
        let pool: Vec<Candidate> = all
            .iter()
            .enumerate()
            .filter(|(i, _)| ledger.trained_budget(*i) < b_max)
            .map(|(_, c)| c.clone())
            .collect();
        if pool.is_empty() {
            break;
        }
        surrogate.update(&data, data.len() - 1)?;
        let chosen = select_next(&pool, surrogate, ledger.history())?;
        let mut budget = next_budget(chosen.config_id, ledger.history(), settings.b_step, b_max)?;
        let cost = ledger.cost_of(chosen.config_id, budget)?;
        if cost > ledger.remaining() {
            budget -= cost - ledger.remaining();
        }
        let before = ledger.history().len();
        ledger.evaluate(chosen.config_id, budget)?;
        for obs in &ledger.history().observations()[before..] {
            let index = table.position(obs.config_id)?;
            data.push(
                all[index].scaled_vector.clone(),
                obs.budget as f64 / b_max as f64,
                obs.loss,
            );
        }
    }
    Ok(ledger.finish())
}

/// Runs the loop with a default deep power-law ensemble.
pub fn run_dpl(table: &BenchmarkTable, settings: RunSettings) -> Result<Trajectory> {
    run_dpl_with(table, settings, SurrogateConfig::default())
}

pub fn run_dpl_with(
    table: &BenchmarkTable,
    settings: RunSettings,
    config: SurrogateConfig,
) -> Result<Trajectory> {
    let mut surrogate = DplSurrogate::new(
        table.hp_dim(),
        table.b_max(),
        config,
        mix_seed(settings.seed, 0xD9),
    )?;
    Ok(run_with_surrogate(table, settings, &mut surrogate)?.0)
}

/// Every optimizer runnable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Dpl,
    RandomSearch,
    SuccessiveHalving,
    Hyperband,
    Asha,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Self::Dpl,
        Self::RandomSearch,
        Self::SuccessiveHalving,
        Self::Hyperband,
        Self::Asha,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Dpl => "dpl",
            Self::RandomSearch => "rs",
            Self::SuccessiveHalving => "sh",
            Self::Hyperband => "hb",
            Self::Asha => "asha",
        }
    }

    /// Runs the method with its default settings (`eta = 3` for the schedulers).
    pub fn run(self, table: &BenchmarkTable, settings: RunSettings) -> Result<Trajectory> {
        match self {
            Self::Dpl => run_dpl(table, settings),
            Self::RandomSearch => run_random_search(table, settings),
            Self::SuccessiveHalving => {
                run_successive_halving(table, settings, &ShSchedule::for_table(table)?)
            }
            Self::Hyperband => run_hyperband(table, settings, DEFAULT_ETA),
            Self::Asha => run_asha(table, settings, DEFAULT_ETA),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown method '{s}', expected one of dpl, rs, sh, hb, asha"
                ))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::{generate_synthetic, ConfigEntry, Hyperparameter, MetricDirection};
    use crate::curve_models::LearningCurve;
    use crate::surrogate::Posterior;

    fn small() -> SurrogateConfig {
        SurrogateConfig {
            ensemble_size: 2,
            hidden_layers: vec![8, 8],
            learning_rate: 1e-3,
        }
    }

    fn settings(total: usize, seed: u64) -> RunSettings {
        RunSettings {
            total_step_budget: total,
            b_step: 1,
            seed,
            record_wall_time: false,
        }
    }

    #[test]
    fn single_config_advances_one_step_at_a_time() {
        let table = BenchmarkTable::new(
            "one",
            MetricDirection::Loss,
            6,
            vec![Hyperparameter {
                name: "x".into(),
                min: 0.0,
                max: 1.0,
            }],
            vec![ConfigEntry {
                id: 3,
                raw_values: vec![0.5],
                curve: LearningCurve::new(vec![0.9, 0.8, 0.7, 0.6, 0.5, 0.4]).unwrap(),
            }],
            None,
        )
        .unwrap();
        let trajectory = run_dpl_with(&table, settings(6, 0), small()).unwrap();
        let steps: Vec<usize> = trajectory.points.iter().map(|p| p.steps).collect();
        assert_eq!(steps, (1..=6).collect::<Vec<_>>());
        assert!(!trajectory.terminated_early);

        let trajectory = run_dpl_with(&table, settings(10, 0), small()).unwrap();
        assert!(trajectory.terminated_early);
        assert_eq!(trajectory.unused_steps, 4);
    }

    #[test]
    fn method_names() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("bohb".parse::<Method>().is_err());
    }

    #[test]
    fn runs_are_reproducible() {
        let table = generate_synthetic(2, 15, 2, 5, 0.01).unwrap();
        let a = run_dpl_with(&table, settings(25, 4), small()).unwrap();
        let b = run_dpl_with(&table, settings(25, 4), small()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loop_invariants_hold() {
        let table = generate_synthetic(5, 12, 2, 6, 0.02).unwrap();
        let mut surrogate = DplSurrogate::new(2, 6, small(), 1).unwrap();
        let (trajectory, history) =
            run_with_surrogate(&table, settings(30, 1), &mut surrogate).unwrap();
        assert_eq!(trajectory.steps_consumed(), 30);
        assert_eq!(history.len(), 30);
        for w in trajectory.points.windows(2) {
            assert!(w[1].steps > w[0].steps);
            assert!(w[1].incumbent_loss <= w[0].incumbent_loss);
        }
        for entry in table.configs() {
            let mut budgets: Vec<usize> = history
                .observations()
                .iter()
                .filter(|o| o.config_id == entry.id)
                .map(|o| o.budget)
                .collect();
            let k = budgets.len();
            budgets.sort_unstable();
            assert_eq!(budgets, (1..=k).collect::<Vec<_>>());
        }
    }

    /// Knows every configuration's true final loss exactly.
    struct Oracle {
        finals: Vec<f64>,
    }

    impl PosteriorModel for Oracle {
        fn posteriors(&self, candidates: &[Candidate], _b: f64) -> Result<Vec<Posterior>> {
            Ok(candidates
                .iter()
                .map(|c| Posterior {
                    mean: self.finals[c.config_id as usize],
                    variance: 0.0,
                })
                .collect())
        }
    }

    impl Surrogate for Oracle {
        fn update(&mut self, _data: &TrainingData, _newest: usize) -> Result<()> {
            Ok(())
        }
    }

    #[test]
    fn perfect_oracle_only_advances_the_best_final_config() {
        for seed in 0..10 {
            let table = generate_synthetic(seed, 5, 2, 8, 0.0).unwrap();
            let finals: Vec<f64> = table
                .configs()
                .iter()
                .map(|c| c.curve.final_value())
                .collect();
            let best = (0..5)
                .min_by(|&a, &b| finals[a].total_cmp(&finals[b]))
                .unwrap() as u64;
            let mut oracle = Oracle { finals };
            let (_, history) =
                run_with_surrogate(&table, settings(1 + 8, seed), &mut oracle).unwrap();
            // Until the best configuration is fully trained, nothing else is advanced.
            let mut reached = history.observations()[0].config_id == best;
            let mut trained = usize::from(reached);
            for obs in &history.observations()[1..] {
                if trained == 8 {
                    break;
                }
                assert_eq!(obs.config_id, best, "seed {seed}");
                trained = obs.budget;
                reached = true;
            }
            assert!(reached);
            assert_eq!(history.max_budget(best), Some(8), "seed {seed}");
        }
    }
}
