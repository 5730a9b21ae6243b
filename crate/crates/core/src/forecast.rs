//! Learning-curve forecasting harness: observe a prefix of every curve,
//! predict final values, and score the ranking.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmark::BenchmarkTable;
use crate::curve_models::{fit_single_curve, FitConfig, Formulation};
use crate::error::{Error, Result};
use crate::neural::AdamState;
use crate::seeding::{mix_seed, stream_rng};
use crate::stats::spearman;
use crate::surrogate::{
    train_regressor, ConditionedNetwork, CurveRegressor, DplNetwork, TrainSpec, TrainingData,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ForecastModel {
    /// One network predicting power-law coefficients, shared across configs.
    Dpl,
    /// An independent power law fitted to each curve.
    PowerLaw,
    /// A network regressing the loss on `(config, budget)` directly.
    CondNn,
}

impl ForecastModel {
    pub const ALL: [ForecastModel; 3] = [Self::Dpl, Self::PowerLaw, Self::CondNn];

    pub fn name(self) -> &'static str {
        match self {
            Self::Dpl => "DPL",
            Self::PowerLaw => "PL",
            Self::CondNn => "CondNN",
        }
    }
}

impl fmt::Display for ForecastModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ForecastModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dpl" => Ok(Self::Dpl),
            "pl" | "powerlaw" | "power-law" => Ok(Self::PowerLaw),
            "condnn" | "cond-nn" => Ok(Self::CondNn),
            _ => Err(Error::InvalidArgument(format!(
                "unknown forecast model '{s}', expected one of DPL, PL, CondNN"
            ))),
        }
    }
}

/// Training settings of the network models; the per-curve fit uses `fit`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSettings {
    pub hidden_layers: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub fit: FitConfig,
}

impl Default for ForecastSettings {
    fn default() -> Self {
        Self {
            hidden_layers: vec![128, 128],
            epochs: 250,
            batch_size: 64,
            learning_rate: 1e-3,
            fit: FitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub model: ForecastModel,
    pub fraction: f64,
    pub seed: u64,
    /// Prefix length given to the model.
    pub observed_steps: usize,
    pub predicted: Vec<f64>,
    pub truth: Vec<f64>,
    /// Zero when the predictions carry no ranking information.
    pub spearman: f64,
    pub mean_abs_rel_error: f64,
}

/// Number of leading steps observed for `fraction`: `ceil(fraction * b_max)`.
pub fn observed_steps(fraction: f64, b_max: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Domain(format!(
            "observed fraction must lie in (0, 1), got {fraction}"
        )));
    }
    // The tolerance keeps e.g. 0.3 * 10 from rounding up to 4.
    let n = (fraction * b_max as f64 - 1e-9).ceil().max(1.0) as usize;
    Ok(n.min(b_max))
}

pub fn run_forecast_experiment(
    table: &BenchmarkTable,
    fraction: f64,
    model: ForecastModel,
    seed: u64,
) -> Result<ForecastReport> {
    run_forecast_with(table, fraction, model, seed, &ForecastSettings::default())
}

pub fn run_forecast_with(
    table: &BenchmarkTable,
    fraction: f64,
    model: ForecastModel,
    seed: u64,
    settings: &ForecastSettings,
) -> Result<ForecastReport> {
    let b_max = table.b_max();
    let mut observed = observed_steps(fraction, b_max)?;
    let truth: Vec<f64> = table
        .configs()
        .iter()
        .map(|c| c.curve.final_value())
        .collect();
    let predicted = match model {
        ForecastModel::PowerLaw => {
            if b_max < 2 {
                return Err(Error::InvalidArgument(
                    "per-curve power-law fits need b_max >= 2".into(),
                ));
            }
            observed = observed.max(2);
            forecast_per_curve(table, observed, seed, &settings.fit)?
        }
        ForecastModel::Dpl => {
            let mut net =
                DplNetwork::new(table.hp_dim(), &settings.hidden_layers, mix_seed(seed, 1))?;
            forecast_network(&mut net, table, observed, seed, settings)?
        }
        ForecastModel::CondNn => {
            let mut net = ConditionedNetwork::new(
                table.hp_dim(),
                &settings.hidden_layers,
                mix_seed(seed, 1),
            )?;
            forecast_network(&mut net, table, observed, seed, settings)?
        }
    };
    let rho = match spearman(&predicted, &truth) {
        Ok(r) => r,
        Err(Error::ZeroVariance) => 0.0,
        Err(e) => return Err(e),
    };
    let mare = predicted
        .iter()
        .zip(&truth)
        .map(|(p, t)| (p - t).abs() / t.abs())
        .sum::<f64>()
        / truth.len() as f64;
    Ok(ForecastReport {
        model,
        fraction,
        seed,
        observed_steps: observed,
        predicted,
        truth,
        spearman: rho,
        mean_abs_rel_error: mare,
    })
}

fn forecast_per_curve(
    table: &BenchmarkTable,
    observed: usize,
    seed: u64,
    fit: &FitConfig,
) -> Result<Vec<f64>> {
    let b_max = table.b_max();
    table
        .configs()
        .par_iter()
        .enumerate()
        .map(|(i, entry)| {
            let config = FitConfig {
                seed: mix_seed(seed, i as u64),
                ..*fit
            };
            let prefix = &entry.curve.values()[..observed];
            let report = fit_single_curve(prefix, b_max, Formulation::PowerLaw, &config)?;
            report.curve.predict(1.0)
        })
        .collect()
}

fn forecast_network<R: CurveRegressor>(
    model: &mut R,
    table: &BenchmarkTable,
    observed: usize,
    seed: u64,
    settings: &ForecastSettings,
) -> Result<Vec<f64>> {
    let b_max = table.b_max() as f64;
    let scaled = table.scaled_configs();
    let mut data = TrainingData::default();
    for (entry, x) in table.configs().iter().zip(&scaled) {
        for (step, &loss) in entry.curve.values()[..observed].iter().enumerate() {
            data.push(x.clone(), (step + 1) as f64 / b_max, loss);
        }
    }
    let mut adam = AdamState::for_network(model.network(), settings.learning_rate);
    let spec = TrainSpec {
        epochs: settings.epochs,
        batch_size: settings.batch_size,
        forced: None,
    };
    let loss = train_regressor(
        model,
        &mut adam,
        &data,
        &spec,
        &mut stream_rng(seed, 2),
        None,
    )?;
    if !loss.is_finite() {
        return Err(Error::Domain(
            "forecast model diverged during training".into(),
        ));
    }
    scaled.iter().map(|x| model.predict(x, 1.0)).collect()
}
