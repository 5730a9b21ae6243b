//! Random Search, Successive Halving, Hyperband and a single-worker ASHA.
//!
//! All schedulers draw configurations without replacement and charge the
//! same [`StepLedger`] as the DPL loop, so training resumes from the last
//! budget a configuration reached. An evaluation that would overrun the
//! global budget is truncated to whatever steps remain.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::benchmark::BenchmarkTable;
use crate::error::{Error, Result};
use crate::seeding::stream_rng;
use crate::trajectory::{RunSettings, StepLedger, Trajectory};

pub const DEFAULT_ETA: usize = 3;

/// Geometric budget ladder for Successive Halving.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShSchedule {
    pub eta: usize,
    pub min_budget: usize,
    pub max_budget: usize,
    /// Strictly increasing rung budgets ending at `max_budget`.
    pub rungs: Vec<usize>,
    /// Configurations sampled at the first rung of each bracket.
    pub initial_configs: usize,
}

impl ShSchedule {
    /// Rungs `min_budget * eta^k` below `max_budget`, then `max_budget`.
    /// The first rung holds `eta^(rungs - 1)` configurations so a single one
    /// survives to the top.
    pub fn new(eta: usize, min_budget: usize, max_budget: usize) -> Result<Self> {
        check_eta(eta)?;
        if min_budget == 0 || min_budget > max_budget {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= min_budget <= max_budget, got {min_budget} and {max_budget}"
            )));
        }
        let mut rungs = Vec::new();
        let mut b = min_budget;
        while b < max_budget {
            rungs.push(b);
            b = b.saturating_mul(eta);
        }
        rungs.push(max_budget);
        let initial_configs = eta.pow(rungs.len() as u32 - 1);
        Ok(Self {
            eta,
            min_budget,
            max_budget,
            rungs,
            initial_configs,
        })
    }

    /// The default ladder for `table`: `eta = 3` from budget 1 to `b_max`.
    pub fn for_table(table: &BenchmarkTable) -> Result<Self> {
        Self::new(DEFAULT_ETA, 1, table.b_max())
    }

    pub fn with_initial_configs(mut self, n: usize) -> Self {
        self.initial_configs = n;
        self
    }

    fn validate(&self, b_max: usize) -> Result<()> {
        check_eta(self.eta)?;
        if self.initial_configs == 0 || self.rungs.is_empty() {
            return Err(Error::InvalidArgument(
                "empty successive halving schedule".into(),
            ));
        }
        let increasing = self.rungs.windows(2).all(|w| w[0] < w[1]);
        if !increasing || self.rungs[0] == 0 || *self.rungs.last().unwrap() > b_max {
            return Err(Error::InvalidArgument(format!(
                "rungs {:?} must be strictly increasing within 1..={b_max}",
                self.rungs
            )));
        }
        Ok(())
    }
}

fn check_eta(eta: usize) -> Result<()> {
    if eta < 2 {
        return Err(Error::InvalidArgument(format!(
            "eta must be at least 2, got {eta}"
        )));
    }
    Ok(())
}

/// One Hyperband bracket: `n` configurations run through `rungs`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bracket {
    pub n: usize,
    pub rungs: Vec<usize>,
}

/// Standard Hyperband brackets for `s = s_max..=0`, where
/// `s_max = floor(log_eta(b_max))`, `n_s = ceil((s_max + 1) / (s + 1) * eta^s)`
/// and the starting budget is `b_max * eta^-s`, rounded.
pub fn hyperband_brackets(b_max: usize, eta: usize) -> Result<Vec<Bracket>> {
    check_eta(eta)?;
    if b_max == 0 {
        return Err(Error::InvalidArgument("b_max must be positive".into()));
    }
    let mut s_max = 0u32;
    while eta.pow(s_max + 1) <= b_max {
        s_max += 1;
    }
    let mut brackets = Vec::new();
    for s in (0..=s_max).rev() {
        let eta_s = eta.pow(s);
        let n = ((s_max as usize + 1) * eta_s).div_ceil(s as usize + 1);
        let mut rungs: Vec<usize> = (0..=s)
            .map(|i| {
                let b = b_max as f64 * (eta as f64).powi(i as i32 - s as i32);
                (b.round() as usize).clamp(1, b_max)
            })
            .collect();
        *rungs.last_mut().unwrap() = b_max;
        rungs.dedup();
        brackets.push(Bracket { n, rungs });
    }
    Ok(brackets)
}

/// Uniform sampling of table positions without replacement.
struct Sampler {
    order: Vec<usize>,
}

impl Sampler {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        order.reverse();
        Self { order }
    }

    fn next(&mut self) -> Option<usize> {
        self.order.pop()
    }
}

/// Thin wrapper over the ledger that truncates evaluations to the steps left.
struct Runner<'a> {
    ledger: StepLedger<'a>,
}

impl<'a> Runner<'a> {
    fn new(table: &'a BenchmarkTable, settings: RunSettings) -> Result<Self> {
        Ok(Self {
            ledger: StepLedger::new(table, settings)?,
        })
    }

    fn exhausted(&self) -> bool {
        self.ledger.remaining() == 0
    }

    /// Trains the configuration at `index` towards `target`. Returns the loss
    /// at the budget actually reached, or `None` if it fell short of `target`.
    fn advance(&mut self, index: usize, target: usize) -> Result<Option<f64>> {
        let trained = self.ledger.trained_budget(index);
        if trained >= target {
            return self.loss_at(index, target).map(Some);
        }
        let reachable = target.min(trained + self.ledger.remaining());
        if reachable > trained {
            let id = self.ledger.table().configs()[index].id;
            self.ledger.evaluate(id, reachable)?;
        }
        if reachable < target {
            return Ok(None);
        }
        self.loss_at(index, target).map(Some)
    }

    fn loss_at(&self, index: usize, budget: usize) -> Result<f64> {
        let table = self.ledger.table();
        table.evaluate(table.configs()[index].id, budget)
    }

    fn finish(self) -> Trajectory {
        self.ledger.finish().0
    }
}

/// Evaluates uniformly sampled configurations at `b_max` until the budget
/// or the configuration pool runs out.
pub fn run_random_search(table: &BenchmarkTable, settings: RunSettings) -> Result<Trajectory> {
    let mut runner = Runner::new(table, settings)?;
    let mut sampler = Sampler::new(table.len(), &mut stream_rng(settings.seed, 0x5253));
    while !runner.exhausted() {
        let Some(index) = sampler.next() else { break };
        runner.advance(index, table.b_max())?;
    }
    Ok(runner.finish())
}

/// Runs one Successive Halving bracket over `cohort`. Returns `false` once
/// the budget ran out.
fn successive_halving_bracket(
    runner: &mut Runner<'_>,
    mut cohort: Vec<usize>,
    rungs: &[usize],
    eta: usize,
) -> Result<bool> {
    let ids: Vec<u64> = runner
        .ledger
        .table()
        .configs()
        .iter()
        .map(|c| c.id)
        .collect();
    for (r, &budget) in rungs.iter().enumerate() {
        let mut ranked = Vec::with_capacity(cohort.len());
        for &index in &cohort {
            match runner.advance(index, budget)? {
                Some(loss) => ranked.push((loss, ids[index], index)),
                None => return Ok(false),
            }
        }
        if r + 1 == rungs.len() {
            break;
        }
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let keep = (ranked.len() / eta).max(1);
        cohort = ranked[..keep].iter().map(|&(_, _, i)| i).collect();
    }
    Ok(!runner.exhausted())
}

fn draw(sampler: &mut Sampler, n: usize) -> Vec<usize> {
    std::iter::from_fn(|| sampler.next()).take(n).collect()
}

/// Repeats Successive Halving brackets of `schedule.initial_configs` fresh
/// configurations until the budget or the pool is exhausted. Promotion keeps
/// the best `floor(n / eta)` (at least one) by loss, ties to the lower id.
pub fn run_successive_halving(
    table: &BenchmarkTable,
    settings: RunSettings,
    schedule: &ShSchedule,
) -> Result<Trajectory> {
    schedule.validate(table.b_max())?;
    let mut runner = Runner::new(table, settings)?;
    let mut sampler = Sampler::new(table.len(), &mut stream_rng(settings.seed, 0x5348));
    loop {
        let cohort = draw(&mut sampler, schedule.initial_configs);
        if cohort.is_empty()
            || !successive_halving_bracket(&mut runner, cohort, &schedule.rungs, schedule.eta)?
        {
            break;
        }
    }
    Ok(runner.finish())
}

/// Cycles through the Hyperband brackets, running Successive Halving in each,
/// until the budget or the pool is exhausted.
pub fn run_hyperband(
    table: &BenchmarkTable,
    settings: RunSettings,
    eta: usize,
) -> Result<Trajectory> {
    let brackets = hyperband_brackets(table.b_max(), eta)?;
    let mut runner = Runner::new(table, settings)?;
    let mut sampler = Sampler::new(table.len(), &mut stream_rng(settings.seed, 0x4842));
    'outer: loop {
        for bracket in &brackets {
            let cohort = draw(&mut sampler, bracket.n);
            if cohort.is_empty()
                || !successive_halving_bracket(&mut runner, cohort, &bracket.rungs, eta)?
            {
                break 'outer;
            }
        }
    }
    Ok(runner.finish())
}

/// What an ASHA tick decided to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AshaJob {
    /// Advance the configuration at this table position from `rung` to `rung + 1`.
    Promote { index: usize, rung: usize },
    /// Start a fresh configuration at rung 0.
    Sample,
}

/// Bookkeeping of a single-worker ASHA run.
#[derive(Debug, Clone, PartialEq)]
pub struct AshaState {
    pub eta: usize,
    pub rungs: Vec<usize>,
    /// Completions per rung as `(loss, config_id, index)`.
    completed: Vec<Vec<(f64, u64, usize)>>,
    promoted: Vec<Vec<usize>>,
}

impl AshaState {
    pub fn new(eta: usize, rungs: Vec<usize>) -> Self {
        let n = rungs.len();
        Self {
            eta,
            rungs,
            completed: vec![Vec::new(); n],
            promoted: vec![Vec::new(); n],
        }
    }

    pub fn record(&mut self, rung: usize, loss: f64, config_id: u64, index: usize) {
        self.completed[rung].push((loss, config_id, index));
    }

    /// Scans rungs from the top: promote the best not-yet-promoted
    /// configuration that sits in the top `floor(n / eta)` of its rung.
    pub fn next_job(&self) -> AshaJob {
        for rung in (0..self.rungs.len().saturating_sub(1)).rev() {
            let mut ranked = self.completed[rung].clone();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let top = ranked.len() / self.eta;
            if let Some(&(_, _, index)) = ranked[..top]
                .iter()
                .find(|(_, _, i)| !self.promoted[rung].contains(i))
            {
                return AshaJob::Promote { index, rung };
            }
        }
        AshaJob::Sample
    }

    fn mark_promoted(&mut self, rung: usize, index: usize) {
        self.promoted[rung].push(index);
    }
}

/// Single-worker ASHA on the Successive Halving ladder from budget 1.
pub fn run_asha(table: &BenchmarkTable, settings: RunSettings, eta: usize) -> Result<Trajectory> {
    let schedule = ShSchedule::new(eta, 1, table.b_max())?;
    let ids: Vec<u64> = table.configs().iter().map(|c| c.id).collect();
    let mut state = AshaState::new(eta, schedule.rungs.clone());
    let mut runner = Runner::new(table, settings)?;
    let mut sampler = Sampler::new(table.len(), &mut stream_rng(settings.seed, 0x4153));
    while !runner.exhausted() {
        let (index, rung) = match state.next_job() {
            AshaJob::Promote { index, rung } => {
                state.mark_promoted(rung, index);
                (index, rung + 1)
            }
            AshaJob::Sample => match sampler.next() {
                Some(index) => (index, 0),
                None => break,
            },
        };
        match runner.advance(index, state.rungs[rung])? {
            Some(loss) => state.record(rung, loss, ids[index], index),
            None => break,
        }
    }
    Ok(runner.finish())
}
