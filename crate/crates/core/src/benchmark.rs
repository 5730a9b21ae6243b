//! Tabular learning-curve benchmarks.
//!
//! A benchmark maps every configuration to its full learning curve, so
//! "training" a configuration to budget `b` is a lookup. Curves are stored as
//! losses; accuracy files are converted with `loss = 1 - accuracy` on load.
//!
//! Files follow this JSON layout:
//!
//! ```text
//! {
//!   "name": "...",
//!   "metric": "loss" | "accuracy",
//!   "b_max": 20,
//!   "hyperparameters": [{"name": "lr", "min": 0.0, "max": 1.0}, ...],
//!   "configs": [{"id": 0, "values": [...], "curve": [...]}, ...],
//!   "generator": {"coefficients": [[alpha, beta, gamma], ...]}   // optional
//! }
//! ```
//!
//! Real benchmarks must be converted to this layout by the user. LCBench
//! curves are conventionally trimmed of their first and last step before
//! conversion; the loader does not do this.

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::curve_models::{eval_power_law, LearningCurve, PowerLawCoefficients};
use crate::error::{Error, Result};
use crate::neural::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricDirection {
    Loss,
    Accuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameter {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigEntry {
    pub id: u64,
    pub raw_values: Vec<f64>,
    /// Loss-oriented learning curve of length `b_max`.
    pub curve: LearningCurve,
}

/// Immutable benchmark table.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkTable {
    name: String,
    metric: MetricDirection,
    b_max: usize,
    hyperparameters: Vec<Hyperparameter>,
    configs: Vec<ConfigEntry>,
    generator: Option<Vec<PowerLawCoefficients>>,
    index: HashMap<u64, usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    id: u64,
    values: Vec<f64>,
    curve: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGenerator {
    coefficients: Vec<[f64; 3]>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTable {
    name: String,
    metric: MetricDirection,
    b_max: usize,
    hyperparameters: Vec<Hyperparameter>,
    configs: Vec<RawConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generator: Option<RawGenerator>,
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.into(),
        message: message.into(),
    }
}

impl BenchmarkTable {
    /// Builds a table from loss-oriented entries.
    pub fn new(
        name: impl Into<String>,
        metric: MetricDirection,
        b_max: usize,
        hyperparameters: Vec<Hyperparameter>,
        configs: Vec<ConfigEntry>,
        generator: Option<Vec<PowerLawCoefficients>>,
    ) -> Result<Self> {
        if b_max == 0 {
            return Err(schema("b_max", "must be a positive integer"));
        }
        if configs.is_empty() {
            return Err(schema("configs", "at least one configuration is required"));
        }
        for (j, hp) in hyperparameters.iter().enumerate() {
            if !(hp.min.is_finite() && hp.max.is_finite()) || hp.min > hp.max {
                return Err(schema(
                    format!("hyperparameters[{j}]"),
                    format!("invalid bounds [{}, {}]", hp.min, hp.max),
                ));
            }
        }
        let mut index = HashMap::with_capacity(configs.len());
        for (i, config) in configs.iter().enumerate() {
            if index.insert(config.id, i).is_some() {
                return Err(schema(
                    format!("configs[{i}].id"),
                    format!("duplicate config id {}", config.id),
                ));
            }
            if config.raw_values.len() != hyperparameters.len() {
                return Err(schema(
                    format!("configs[{i}].values"),
                    format!(
                        "config {} has {} values, expected {}",
                        config.id,
                        config.raw_values.len(),
                        hyperparameters.len()
                    ),
                ));
            }
            for (j, (v, hp)) in config.raw_values.iter().zip(&hyperparameters).enumerate() {
                if !(hp.min..=hp.max).contains(v) {
                    return Err(schema(
                        format!("configs[{i}].values[{j}]"),
                        format!(
                            "config {}: value {v} outside [{}, {}] of `{}`",
                            config.id, hp.min, hp.max, hp.name
                        ),
                    ));
                }
            }
            if config.curve.max_budget() != b_max {
                return Err(schema(
                    format!("configs[{i}].curve"),
                    format!(
                        "config {}: curve has {} steps, expected b_max = {b_max}",
                        config.id,
                        config.curve.max_budget()
                    ),
                ));
            }
        }
        if let Some(coefs) = &generator {
            if coefs.len() != configs.len() {
                return Err(schema(
                    "generator.coefficients",
                    format!("{} entries for {} configs", coefs.len(), configs.len()),
                ));
            }
        }
        Ok(Self {
            name: name.into(),
            metric,
            b_max,
            hyperparameters,
            configs,
            generator,
            index,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let raw: RawTable = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            schema(path, e.into_inner().to_string())
        })?;
        let metric = raw.metric;
        let configs = raw
            .configs
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let values = match metric {
                    MetricDirection::Loss => c.curve,
                    MetricDirection::Accuracy => c.curve.into_iter().map(|v| 1.0 - v).collect(),
                };
                let curve = LearningCurve::new(values).map_err(|e| {
                    schema(
                        format!("configs[{i}].curve"),
                        format!("config {}: {e}", c.id),
                    )
                })?;
                Ok(ConfigEntry {
                    id: c.id,
                    raw_values: c.values,
                    curve,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let generator = raw.generator.map(|g| {
            g.coefficients
                .into_iter()
                .map(|[a, b, c]| PowerLawCoefficients::new(a, b, c))
                .collect()
        });
        Self::new(
            raw.name,
            metric,
            raw.b_max,
            raw.hyperparameters,
            configs,
            generator,
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    /// Serializes in the file layout, restoring the original metric direction.
    pub fn to_json_string(&self) -> Result<String> {
        let raw = RawTable {
            name: self.name.clone(),
            metric: self.metric,
            b_max: self.b_max,
            hyperparameters: self.hyperparameters.clone(),
            configs: self
                .configs
                .iter()
                .map(|c| RawConfig {
                    id: c.id,
                    values: c.raw_values.clone(),
                    curve: match self.metric {
                        MetricDirection::Loss => c.curve.values().to_vec(),
                        MetricDirection::Accuracy => {
                            c.curve.values().iter().map(|v| 1.0 - v).collect()
                        }
                    },
                })
                .collect(),
            generator: self.generator.as_ref().map(|g| RawGenerator {
                coefficients: g.iter().map(|c| [c.alpha, c.beta, c.gamma]).collect(),
            }),
        };
        let mut text = serde_json::to_string_pretty(&raw)?;
        text.push('\n');
        Ok(text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn metric(&self) -> MetricDirection {
        self.metric
    }

    pub fn b_max(&self) -> usize {
        self.b_max
    }

    pub fn hyperparameters(&self) -> &[Hyperparameter] {
        &self.hyperparameters
    }

    pub fn hp_dim(&self) -> usize {
        self.hyperparameters.len()
    }

    pub fn configs(&self) -> &[ConfigEntry] {
        &self.configs
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    pub fn generator(&self) -> Option<&[PowerLawCoefficients]> {
        self.generator.as_deref()
    }

    pub fn position(&self, id: u64) -> Result<usize> {
        self.index.get(&id).copied().ok_or(Error::UnknownConfig(id))
    }

    pub fn config(&self, id: u64) -> Result<&ConfigEntry> {
        Ok(&self.configs[self.position(id)?])
    }

    /// Min-max scales raw hyperparameter values into `[0, 1]` using the
    /// declared bounds. Degenerate dimensions map to 0.
    pub fn scale_config(&self, raw_values: &[f64]) -> Result<Vec<f64>> {
        if raw_values.len() != self.hyperparameters.len() {
            return Err(Error::Shape {
                expected: self.hyperparameters.len(),
                actual: raw_values.len(),
            });
        }
        raw_values
            .iter()
            .zip(&self.hyperparameters)
            .map(|(&v, hp)| {
                if !(hp.min..=hp.max).contains(&v) {
                    return Err(Error::Domain(format!(
                        "value {v} of `{}` outside [{}, {}]",
                        hp.name, hp.min, hp.max
                    )));
                }
                let span = hp.max - hp.min;
                Ok(if span > 0.0 { (v - hp.min) / span } else { 0.0 })
            })
            .collect()
    }

    /// Scaled vectors of every configuration, in table order.
    pub fn scaled_configs(&self) -> Vec<Vec<f64>> {
        self.configs
            .iter()
            .map(|c| {
                self.scale_config(&c.raw_values)
                    .expect("validated on construction")
            })
            .collect()
    }

    /// Stored loss of `id` after `budget` steps.
    pub fn evaluate(&self, id: u64, budget: usize) -> Result<f64> {
        let entry = self.config(id)?;
        entry.curve.at(budget).ok_or(Error::BudgetOutOfRange {
            budget,
            b_max: self.b_max,
        })
    }

    /// Best loss over every configuration and budget.
    pub fn oracle(&self) -> f64 {
        self.configs
            .iter()
            .map(|c| c.curve.min_value())
            .fold(f64::INFINITY, f64::min)
    }

    /// Worst per-configuration best loss.
    pub fn worst_best(&self) -> f64 {
        self.configs
            .iter()
            .map(|c| c.curve.min_value())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Gap between the worst and best configuration, each scored by its best loss.
    pub fn regret_span(&self) -> f64 {
        self.worst_best() - self.oracle()
    }

    pub fn normalized_regret(&self, regret: f64) -> Result<f64> {
        normalized_regret(regret, self.regret_span())
    }
}

pub fn normalized_regret(regret: f64, span: f64) -> Result<f64> {
    if !(span > 0.0) {
        return Err(Error::ZeroSpan);
    }
    Ok((regret / span).max(0.0))
}

/// Seeded smooth map from `[0, 1]^d` to power-law coefficients.
struct CoefficientField {
    linear: [Vec<f64>; 3],
    amplitude: [Vec<f64>; 3],
    frequency: [Vec<f64>; 3],
    phase: [Vec<f64>; 3],
    offset: [f64; 3],
}

impl CoefficientField {
    const ALPHA: (f64, f64) = (0.05, 0.5);
    const BETA: (f64, f64) = (0.3, 1.0);
    const GAMMA: (f64, f64) = (0.3, 3.0);

    fn sample(rng: &mut ChaCha8Rng, dim: usize) -> Self {
        let mut draw =
            |lo: f64, hi: f64| -> Vec<f64> { (0..dim).map(|_| rng.random_range(lo..hi)).collect() };
        let linear = [draw(-3.0, 3.0), draw(-3.0, 3.0), draw(-3.0, 3.0)];
        let amplitude = [draw(-1.5, 1.5), draw(-1.5, 1.5), draw(-1.5, 1.5)];
        let frequency = [draw(0.5, 2.0), draw(0.5, 2.0), draw(0.5, 2.0)];
        let phase = [
            draw(0.0, std::f64::consts::TAU),
            draw(0.0, std::f64::consts::TAU),
            draw(0.0, std::f64::consts::TAU),
        ];
        let offset = [0, 1, 2].map(|k| -0.5 * linear[k].iter().sum::<f64>());
        Self {
            linear,
            amplitude,
            frequency,
            phase,
            offset,
        }
    }

    fn unit(&self, k: usize, x: &[f64]) -> f64 {
        let mut z = self.offset[k];
        for (j, &xj) in x.iter().enumerate() {
            z += self.linear[k][j] * xj
                + self.amplitude[k][j]
                    * (std::f64::consts::TAU * self.frequency[k][j] * xj + self.phase[k][j]).sin();
        }
        sigmoid(z)
    }

    /// Coefficients in raw-step form: `alpha + beta * step^(-gamma)`.
    fn raw_coefficients(&self, x: &[f64]) -> (f64, f64, f64) {
        let lerp = |(lo, hi): (f64, f64), u: f64| lo + (hi - lo) * u;
        (
            lerp(Self::ALPHA, self.unit(0, x)),
            lerp(Self::BETA, self.unit(1, x)),
            lerp(Self::GAMMA, self.unit(2, x)),
        )
    }
}

/// Largest loss a synthetic curve may take.
pub const SYNTHETIC_LOSS_CEILING: f64 = 1.5;

/// Generates a synthetic power-law benchmark.
///
/// Hyperparameters are uniform in `[0, 1]^hp_dim`; a seeded smooth map turns
/// each into raw-step coefficients `alpha in [0.05, 0.5]`, `beta in [0.3, 1]`,
/// `gamma in [0.3, 3]`, so the loss after one step is `alpha + beta`. The
/// stored generator coefficients are in normalized-budget form
/// `(alpha, beta * b_max^(-gamma), gamma)`. Gaussian noise is added and values
/// are clipped into `(0, 1.5)`.
pub fn generate_synthetic(
    seed: u64,
    n_configs: usize,
    hp_dim: usize,
    b_max: usize,
    noise_std: f64,
) -> Result<BenchmarkTable> {
    if n_configs == 0 {
        return Err(Error::InvalidArgument(
            "n_configs must be at least 1".into(),
        ));
    }
    if hp_dim == 0 || b_max == 0 {
        return Err(Error::InvalidArgument(
            "hp_dim and b_max must be positive".into(),
        ));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "invalid noise_std {noise_std}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = CoefficientField::sample(&mut rng, hp_dim);
    let noise = Normal::new(0.0, noise_std).expect("validated std");
    let eps = 1e-9;

    let mut configs = Vec::with_capacity(n_configs);
    let mut coefficients = Vec::with_capacity(n_configs);
    for id in 0..n_configs {
        let x: Vec<f64> = (0..hp_dim).map(|_| rng.random_range(0.0..=1.0)).collect();
        let (alpha, beta, gamma) = field.raw_coefficients(&x);
        let coef = PowerLawCoefficients::new(alpha, beta * (b_max as f64).powf(-gamma), gamma);
        let values = (1..=b_max)
            .map(|step| {
                let clean = eval_power_law(&coef, step as f64 / b_max as f64)?;
                let noisy = if noise_std > 0.0 {
                    clean + noise.sample(&mut rng)
                } else {
                    clean
                };
                Ok(noisy.clamp(eps, SYNTHETIC_LOSS_CEILING - eps))
            })
            .collect::<Result<Vec<_>>>()?;
        configs.push(ConfigEntry {
            id: id as u64,
            raw_values: x,
            curve: LearningCurve::new(values)?,
        });
        coefficients.push(coef);
    }
    let hyperparameters = (0..hp_dim)
        .map(|j| Hyperparameter {
            name: format!("x{j}"),
            min: 0.0,
            max: 1.0,
        })
        .collect();
    BenchmarkTable::new(
        format!("synthetic-s{seed}-n{n_configs}-d{hp_dim}-b{b_max}"),
        MetricDirection::Loss,
        b_max,
        hyperparameters,
        configs,
        Some(coefficients),
    )
}
