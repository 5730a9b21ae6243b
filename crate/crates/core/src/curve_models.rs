//! Parametric learning-curve models.
//!
//! Every model here takes a normalized budget `b / b_max` in `(0, 1]` and
//! returns a loss (lower is better).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::AdamState;

/// Coefficients of `alpha + beta * b^(-gamma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl PowerLawCoefficients {
    pub const fn new(alpha: f64, beta: f64, gamma: f64) -> Self {
        Self { alpha, beta, gamma }
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.is_finite() && self.beta.is_finite() && self.gamma.is_finite()
    }
}

/// Coefficients shared by the shifted, scaled and broken power-law variants.
///
/// `d` is a budget shift (or the break point for the broken law), `e` a
/// budget scale, `c` the break strength and `f` the break sharpness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtendedCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub d: f64,
    pub e: f64,
    pub c: f64,
    pub f: f64,
}

impl Default for ExtendedCoefficients {
    fn default() -> Self {
        Self {
            alpha: 0.0,
            beta: 0.0,
            gamma: 0.0,
            d: 0.0,
            e: 1.0,
            c: 0.0,
            f: 1.0,
        }
    }
}

impl From<PowerLawCoefficients> for ExtendedCoefficients {
    fn from(c: PowerLawCoefficients) -> Self {
        Self {
            alpha: c.alpha,
            beta: c.beta,
            gamma: c.gamma,
            ..Self::default()
        }
    }
}

/// Loss per budget step; step `i` (1-based) is stored at index `i - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LearningCurve {
    values: Vec<f64>,
}

impl LearningCurve {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("learning curve"));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "learning curve value at step {} is not finite",
                pos + 1
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max_budget(&self) -> usize {
        self.values.len()
    }

    /// Loss after `budget` steps (1-based).
    pub fn at(&self, budget: usize) -> Option<f64> {
        budget
            .checked_sub(1)
            .and_then(|i| self.values.get(i).copied())
    }

    pub fn final_value(&self) -> f64 {
        *self.values.last().expect("non-empty curve")
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

impl TryFrom<Vec<f64>> for LearningCurve {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<LearningCurve> for Vec<f64> {
    fn from(curve: LearningCurve) -> Self {
        curve.values
    }
}

fn positive_budget(b: f64) -> Result<()> {
    if b > 0.0 && b.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("budget must be positive, got {b}")))
    }
}

fn finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Domain(format!(
            "{what} evaluated to a non-finite value"
        )))
    }
}

/// `alpha + beta * b^(-gamma)`.
pub fn eval_power_law(c: &PowerLawCoefficients, b: f64) -> Result<f64> {
    positive_budget(b)?;
    finite(c.alpha + c.beta * b.powf(-c.gamma), "power law")
}

/// `alpha - beta * (b + d)^(-gamma)`.
pub fn eval_candidate1(c: &ExtendedCoefficients, b: f64) -> Result<f64> {
    let base = b + c.d;
    if !(base > 0.0) {
        return Err(Error::Domain(format!(
            "shifted budget b + d = {base} is not positive"
        )));
    }
    finite(c.alpha - c.beta * base.powf(-c.gamma), "shifted power law")
}

/// `alpha - beta * (e * b + d)^(-gamma)`.
pub fn eval_candidate2(c: &ExtendedCoefficients, b: f64) -> Result<f64> {
    let base = c.e * b + c.d;
    if !(base > 0.0) {
        return Err(Error::Domain(format!(
            "scaled budget e * b + d = {base} is not positive"
        )));
    }
    finite(c.alpha - c.beta * base.powf(-c.gamma), "scaled power law")
}

/// Smallest ratio `b / d` fed to the break factor.
const BREAK_BASE_FLOOR: f64 = 1e-12;

/// `alpha + beta * b^(-gamma) * (1 + (b / d)^(1 / f))^(-c * f)`.
pub fn eval_broken_law(c: &ExtendedCoefficients, b: f64) -> Result<f64> {
    positive_budget(b)?;
    if c.d == 0.0 {
        return Err(Error::Domain("broken law break point d is zero".into()));
    }
    if c.f == 0.0 {
        return Err(Error::Domain("broken law sharpness f is zero".into()));
    }
    let ratio = b / c.d;
    if !(ratio > 0.0) {
        return Err(Error::Domain(format!(
            "broken law ratio b / d = {ratio} is not positive"
        )));
    }
    let ratio = ratio.max(BREAK_BASE_FLOOR);
    let break_factor = (1.0 + ratio.powf(1.0 / c.f)).powf(-c.c * c.f);
    finite(
        c.alpha + c.beta * b.powf(-c.gamma) * break_factor,
        "broken law",
    )
}

/// Running prefix minimum of a curve.
pub fn min_smooth(curve: &LearningCurve) -> LearningCurve {
    LearningCurve {
        values: prefix_min(&curve.values),
    }
}

pub fn prefix_min(values: &[f64]) -> Vec<f64> {
    let mut best = f64::INFINITY;
    values
        .iter()
        .map(|&v| {
            best = best.min(v);
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    PowerLaw,
    Candidate1,
    Candidate2,
    BrokenLaw,
}

impl Formulation {
    pub const ALL: [Formulation; 4] = [
        Formulation::PowerLaw,
        Formulation::Candidate1,
        Formulation::Candidate2,
        Formulation::BrokenLaw,
    ];

    fn num_params(self) -> usize {
        match self {
            Formulation::PowerLaw => 3,
            Formulation::Candidate1 => 4,
            Formulation::Candidate2 => 5,
            Formulation::BrokenLaw => 6,
        }
    }
}

/// A fitted curve model, evaluated on normalized budgets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittedCurve {
    pub formulation: Formulation,
    pub coefficients: ExtendedCoefficients,
}

impl FittedCurve {
    pub fn predict(&self, b: f64) -> Result<f64> {
        let c = &self.coefficients;
        match self.formulation {
            Formulation::PowerLaw => eval_power_law(&self.power_law(), b),
            Formulation::Candidate1 => eval_candidate1(c, b),
            Formulation::Candidate2 => eval_candidate2(c, b),
            Formulation::BrokenLaw => eval_broken_law(c, b),
        }
    }

    pub fn power_law(&self) -> PowerLawCoefficients {
        PowerLawCoefficients::new(
            self.coefficients.alpha,
            self.coefficients.beta,
            self.coefficients.gamma,
        )
    }
}

/// Settings for [`fit_single_curve`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Initial Adam learning rate; decays along a cosine schedule.
    pub learning_rate: f64,
    /// Final learning rate as a fraction of `learning_rate`.
    pub final_lr_fraction: f64,
    pub max_epochs: usize,
    /// Independent random initializations; the lowest training error wins.
    pub restarts: usize,
    /// Training MAE at which a restart stops early.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            final_lr_fraction: 1e-3,
            max_epochs: 2000,
            restarts: 4,
            tolerance: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub curve: FittedCurve,
    /// Mean absolute error on the observed points.
    pub train_mae: f64,
    /// False when every restart diverged; `curve` then holds the best finite iterate.
    pub converged: bool,
}

/// Model evaluated on budgets rescaled by the last observed budget, which
/// keeps `s^(-gamma)` near one on the fitted range.
struct ScaledModel {
    formulation: Formulation,
}

impl ScaledModel {
    /// Value and gradient with respect to the scaled parameters.
    fn value_and_grad(&self, p: &[f64], s: f64, grad: &mut [f64]) -> Option<f64> {
        let ln_s = s.ln();
        match self.formulation {
            Formulation::PowerLaw => {
                let (alpha, beta, gamma) = (p[0], p[1], p[2]);
                let pw = (-gamma * ln_s).exp();
                grad[0] = 1.0;
                grad[1] = pw;
                grad[2] = -beta * ln_s * pw;
                Some(alpha + beta * pw)
            }
            Formulation::Candidate1 | Formulation::Candidate2 => {
                let (alpha, beta, gamma) = (p[0], p[1], p[2]);
                let (e, d) = match self.formulation {
                    Formulation::Candidate1 => (1.0, p[3]),
                    _ => (p[3], p[4]),
                };
                let q = e * s + d;
                if !(q > 0.0) {
                    return None;
                }
                let ln_q = q.ln();
                let pw = (-gamma * ln_q).exp();
                grad[0] = 1.0;
                grad[1] = -pw;
                grad[2] = beta * ln_q * pw;
                let dq = beta * gamma * pw / q;
                match self.formulation {
                    Formulation::Candidate1 => grad[3] = dq,
                    _ => {
                        grad[3] = dq * s;
                        grad[4] = dq;
                    }
                }
                Some(alpha - beta * pw)
            }
            Formulation::BrokenLaw => {
                let (alpha, beta, gamma, c, d, f) = (p[0], p[1], p[2], p[3], p[4], p[5]);
                if d <= 0.0 || f == 0.0 {
                    return None;
                }
                let ln_ratio = (s / d).max(BREAK_BASE_FLOOR).ln();
                let r = (ln_ratio / f).exp();
                let big = 1.0 + r;
                let ln_big = big.ln();
                let h = (-c * f * ln_big).exp();
                let pw = (-gamma * ln_s).exp();
                let core = beta * pw * h;
                grad[0] = 1.0;
                grad[1] = pw * h;
                grad[2] = -ln_s * core;
                grad[3] = -f * ln_big * core;
                grad[4] = core * c * r / (big * d);
                grad[5] = core * (-c * ln_big + c * r * ln_ratio / (f * big));
                Some(alpha + core)
            }
        }
    }

    fn init(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut p = vec![
            rng.random_range(0.0..=1.0),
            rng.random_range(0.0..=1.0),
            rng.random_range(0.0..=2.0),
        ];
        match self.formulation {
            Formulation::PowerLaw => {}
            Formulation::Candidate1 => p.push(rng.random_range(0.1..=1.0)),
            Formulation::Candidate2 => {
                p.push(rng.random_range(0.5..=1.5));
                p.push(rng.random_range(0.1..=1.0));
            }
            Formulation::BrokenLaw => {
                p.push(rng.random_range(0.0..=1.0));
                p.push(rng.random_range(0.1..=1.0));
                p.push(rng.random_range(0.5..=1.5));
            }
        }
        p
    }

    /// Maps scaled parameters back to normalized-budget coefficients, where
    /// `b = s * reference`.
    fn unscale(&self, p: &[f64], reference: f64) -> ExtendedCoefficients {
        let mut c = ExtendedCoefficients {
            alpha: p[0],
            beta: p[1],
            gamma: p[2],
            ..ExtendedCoefficients::default()
        };
        let rescale_beta = reference.powf(p[2]);
        match self.formulation {
            Formulation::PowerLaw => c.beta *= rescale_beta,
            Formulation::Candidate1 => {
                c.beta *= rescale_beta;
                c.d = p[3] * reference;
            }
            Formulation::Candidate2 => {
                c.e = p[3] / reference;
                c.d = p[4];
            }
            Formulation::BrokenLaw => {
                c.beta *= rescale_beta;
                c.c = p[3];
                c.d = p[4] * reference;
                c.f = p[5];
            }
        }
        c
    }
}

fn scaled_mae(
    model: &ScaledModel,
    params: &[f64],
    points: &[(f64, f64)],
    grad: &mut [f64],
    scratch: &mut [f64],
) -> Option<f64> {
    grad.fill(0.0);
    let n = points.len() as f64;
    let mut loss = 0.0;
    for &(s, y) in points {
        let pred = model.value_and_grad(params, s, scratch)?;
        let diff = pred - y;
        loss += diff.abs();
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        for (g, d) in grad.iter_mut().zip(scratch.iter()) {
            *g += sign * d / n;
        }
    }
    let loss = loss / n;
    (loss.is_finite() && grad.iter().all(|g| g.is_finite())).then_some(loss)
}

/// Least-squares `alpha` and `beta` for a fixed `gamma`, with the residual sum
/// of squares.
fn power_law_linear_fit(points: &[(f64, f64)], gamma: f64) -> Option<(f64, f64, f64)> {
    let n = points.len() as f64;
    let feats: Vec<f64> = points.iter().map(|&(s, _)| s.powf(-gamma)).collect();
    let mx = feats.iter().sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (x, &(_, y)) in feats.iter().zip(points) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if !(sxx > 1e-300) {
        return None;
    }
    let beta = sxy / sxx;
    let alpha = my - beta * mx;
    let rss = feats
        .iter()
        .zip(points)
        .map(|(x, &(_, y))| (alpha + beta * x - y).powi(2))
        .sum::<f64>();
    rss.is_finite().then_some((alpha, beta, rss))
}

/// Scaled power-law parameters from a grid over `gamma` refined by golden
/// section, solving `alpha` and `beta` exactly at each `gamma`.
fn power_law_warm_start(points: &[(f64, f64)]) -> Option<Vec<f64>> {
    let rss = |g: f64| power_law_linear_fit(points, g).map_or(f64::INFINITY, |f| f.2);
    let grid: Vec<f64> = (1..=200).map(|i| i as f64 * 0.025).collect();
    let (i, _) = grid
        .iter()
        .map(|&g| rss(g))
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))?;
    let mut lo = if i == 0 { 1e-6 } else { grid[i - 1] };
    let mut hi = grid[(i + 1).min(grid.len() - 1)];
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..100 {
        let a = hi - ratio * (hi - lo);
        let b = lo + ratio * (hi - lo);
        if rss(a) <= rss(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    let gamma = 0.5 * (lo + hi);
    let (alpha, beta, _) = power_law_linear_fit(points, gamma)?;
    Some(vec![alpha, beta, gamma])
}

/// Fits one curve model to the observed prefix of a learning curve by
/// minimizing mean absolute error with Adam.
///
/// `observed[i]` is the loss at step `i + 1`; budgets are normalized by
/// `max_budget` before fitting. Deterministic given `config.seed`.
pub fn fit_single_curve(
    observed: &[f64],
    max_budget: usize,
    formulation: Formulation,
    config: &FitConfig,
) -> Result<FitReport> {
    if observed.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "curve fitting needs at least 2 observed points, got {}",
            observed.len()
        )));
    }
    if observed.len() > max_budget {
        return Err(Error::InvalidArgument(format!(
            "{} observed points exceed max budget {max_budget}",
            observed.len()
        )));
    }
    if observed.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(
            "observed curve contains non-finite values".into(),
        ));
    }
    let reference = observed.len() as f64 / max_budget as f64;
    let points: Vec<(f64, f64)> = observed
        .iter()
        .enumerate()
        .map(|(i, &y)| ((i + 1) as f64 / observed.len() as f64, y))
        .collect();
    let model = ScaledModel { formulation };
    let k = formulation.num_params();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut grad = vec![0.0; k];
    let mut scratch = vec![0.0; k];
    let mut best: Option<(f64, Vec<f64>)> = None;

    for restart in 0..config.restarts.max(1) {
        let mut params = model.init(&mut rng);
        if restart == 0 && formulation == Formulation::PowerLaw {
            if let Some(p) = power_law_warm_start(&points) {
                params = p;
            }
        }
        let mut adam = AdamState::new(k, config.learning_rate);
        let mut restart_best: Option<(f64, Vec<f64>)> = None;
        for epoch in 0..config.max_epochs {
            let Some(loss) = scaled_mae(&model, &params, &points, &mut grad, &mut scratch) else {
                break;
            };
            if restart_best.as_ref().is_none_or(|(l, _)| loss < *l) {
                restart_best = Some((loss, params.clone()));
            }
            if loss <= config.tolerance {
                break;
            }
            let progress = epoch as f64 / config.max_epochs as f64;
            let floor = config.final_lr_fraction;
            adam.lr = config.learning_rate
                * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
            adam.step(&mut params, &grad)?;
        }
        if let Some(loss) = scaled_mae(&model, &params, &points, &mut grad, &mut scratch) {
            if restart_best.as_ref().is_none_or(|(l, _)| loss < *l) {
                restart_best = Some((loss, params.clone()));
            }
        }
        if let Some((loss, p)) = restart_best {
            if best.as_ref().is_none_or(|(l, _)| loss < *l) {
                best = Some((loss, p));
            }
        }
    }

    match best {
        Some((loss, params)) => {
            let curve = FittedCurve {
                formulation,
                coefficients: model.unscale(&params, reference),
            };
            Ok(FitReport {
                curve,
                train_mae: loss,
                converged: true,
            })
        }
        None => {
            // Every initialization diverged on its first evaluation; fall back
            // to a flat curve at the observed mean.
            let mean = observed.iter().sum::<f64>() / observed.len() as f64;
            let coefficients = ExtendedCoefficients {
                alpha: mean,
                d: 1.0,
                ..Default::default()
            };
            let train_mae =
                observed.iter().map(|v| (v - mean).abs()).sum::<f64>() / observed.len() as f64;
            Ok(FitReport {
                curve: FittedCurve {
                    formulation,
                    coefficients,
                },
                train_mae,
                converged: false,
            })
        }
    }
}
