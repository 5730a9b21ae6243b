//! Expected Improvement at the maximum budget and the budget-stepping rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::surrogate::PosteriorModel;
use crate::trajectory::History;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub config_id: u64,
    pub scaled_vector: Vec<f64>,
}

/// Best loss observed so far, at any budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Incumbent {
    pub config_id: u64,
    pub value: f64,
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Expected Improvement for minimization:
/// `(f_best - mean) * Phi(z) + std * phi(z)` with `z = (f_best - mean) / std`,
/// and `max(f_best - mean, 0)` when `std == 0`.
pub fn expected_improvement(mean: f64, std: f64, f_best: f64) -> f64 {
    let improvement = f_best - mean;
    if !(std > 0.0) {
        return improvement.max(0.0);
    }
    // Rewritten as max(improvement, 0) + std * (phi(a) - a * Phi(-a)) with
    // a = |z|, which avoids rounding Phi(z) to one for large z.
    let a = (improvement / std).abs();
    let tail = (normal_pdf(a) - a * normal_cdf(-a)).max(0.0);
    improvement.max(0.0) + std * tail
}

/// Minimum loss in `history`; ties go to the earliest observation.
pub fn best_observed(history: &History) -> Result<Incumbent> {
    let mut best: Option<Incumbent> = None;
    for obs in history {
        if best.is_none_or(|b| obs.loss < b.value) {
            best = Some(Incumbent {
                config_id: obs.config_id,
                value: obs.loss,
            });
        }
    }
    best.ok_or(Error::Empty("history"))
}

/// Scores every candidate by EI of its full-budget posterior and returns the
/// best; ties go to the lowest config id.
pub fn select_next<'a, M: PosteriorModel + ?Sized>(
    candidates: &'a [Candidate],
    model: &M,
    history: &History,
) -> Result<&'a Candidate> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate pool"));
    }
    let f_best = best_observed(history)?.value;
    let posteriors = model.posteriors(candidates, 1.0)?;
    let mut best: Option<(f64, &Candidate)> = None;
    for (candidate, posterior) in candidates.iter().zip(&posteriors) {
        let mut score = expected_improvement(posterior.mean, posterior.std(), f_best);
        if score.is_nan() {
            score = f64::NEG_INFINITY;
        }
        let better = match best {
            None => true,
            Some((s, c)) => score > s || (score == s && candidate.config_id < c.config_id),
        };
        if better {
            best = Some((score, candidate));
        }
    }
    Ok(best.expect("non-empty pool").1)
}

/// Budget the selected configuration is trained to next: `b_step` for an
/// unseen configuration, otherwise its largest observed budget plus `b_step`,
/// capped at `b_max`.
pub fn next_budget(
    config_id: u64,
    history: &History,
    b_step: usize,
    b_max: usize,
) -> Result<usize> {
    if b_step == 0 {
        return Err(Error::InvalidArgument("b_step must be positive".into()));
    }
    match history.max_budget(config_id) {
        None => Ok(b_step.min(b_max)),
        Some(b) if b >= b_max => Err(Error::FullyEvaluated(config_id)),
        Some(b) => Ok((b + b_step).min(b_max)),
    }
}
