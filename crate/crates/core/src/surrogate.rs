//! Deep power-law surrogate: an ensemble of networks that map a scaled
//! configuration to power-law coefficients, trained jointly on every
//! observed learning-curve point.
//!
//! Each member's body sees only the configuration. Its five raw outputs form
//! the head
//!
//! ```text
//! alpha = raw[0]
//! beta  = raw[1] * sigmoid(raw[2])
//! gamma = raw[3] * sigmoid(raw[4])
//! loss(config, b) = alpha + beta * b^(-gamma)
//! ```
//!
//! with `b = budget / b_max`. The ensemble mean and population variance of
//! the member predictions give the posterior.

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::Candidate;
use crate::benchmark::BenchmarkTable;
use crate::curve_models::PowerLawCoefficients;
use crate::error::{Error, Result};
use crate::neural::{glu_gate, glu_gate_grad, AdamState, DenseNetwork, DEFAULT_LEAKY_SLOPE};
use crate::seeding::{mix_seed, stream_rng};
use crate::trajectory::History;

/// Width of the raw output layer feeding the power-law head.
pub const RAW_OUTPUTS: usize = 5;

/// Mean and variance of the ensemble prediction at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub mean: f64,
    pub variance: f64,
}

impl Posterior {
    /// Population statistics (divisor `K`) of member predictions.
    pub fn from_predictions(predictions: &[f64]) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::Empty("member predictions"));
        }
        let k = predictions.len() as f64;
        let mean = predictions.iter().sum::<f64>() / k;
        let variance = predictions.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / k;
        Ok(Self {
            mean,
            variance: variance.max(0.0),
        })
    }

    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Anything that can score candidates at a normalized budget.
pub trait PosteriorModel {
    fn posteriors(&self, candidates: &[Candidate], b_norm: f64) -> Result<Vec<Posterior>>;
}

/// Maps hyperparameters (and possibly the budget) to a network input row and
/// turns the network output into a loss prediction.
pub trait CurveRegressor: Send {
    fn network(&self) -> &DenseNetwork;
    fn network_mut(&mut self) -> &mut DenseNetwork;
    /// Appends the input features of `(config, b_norm)` to `row`.
    fn push_input(&self, config: &[f64], b_norm: f64, row: &mut Vec<f64>);
    /// Prediction from one raw output row; writes d prediction / d raw into `grad`.
    fn head(&self, raw: ArrayView1<'_, f64>, b_norm: f64, grad: &mut [f64]) -> f64;

    fn predict(&self, config: &[f64], b_norm: f64) -> Result<f64> {
        check_budget(b_norm)?;
        let mut row = Vec::new();
        self.push_input(config, b_norm, &mut row);
        let (out, _) = self.network().forward(&row)?;
        let mut grad = vec![0.0; out.len()];
        Ok(self.head(ArrayView1::from(&out), b_norm, &mut grad))
    }
}

fn check_budget(b_norm: f64) -> Result<()> {
    if b_norm > 0.0 && b_norm <= 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "normalized budget must lie in (0, 1], got {b_norm}"
        )))
    }
}

/// Power-law head: coefficients from the five raw outputs.
pub fn head_coefficients(raw: &[f64]) -> PowerLawCoefficients {
    PowerLawCoefficients::new(raw[0], glu_gate(raw[1], raw[2]), glu_gate(raw[3], raw[4]))
}

/// Prediction of the power-law head and its gradient with respect to the raw outputs.
pub fn head_forward(raw: &[f64], b_norm: f64, grad: &mut [f64]) -> f64 {
    let beta = glu_gate(raw[1], raw[2]);
    let gamma = glu_gate(raw[3], raw[4]);
    let ln_b = b_norm.ln();
    let power = (-gamma * ln_b).exp();
    let (dbeta_da, dbeta_dg) = glu_gate_grad(raw[1], raw[2]);
    let (dgamma_da, dgamma_dg) = glu_gate_grad(raw[3], raw[4]);
    let d_beta = power;
    let d_gamma = -beta * ln_b * power;
    grad[0] = 1.0;
    grad[1] = d_beta * dbeta_da;
    grad[2] = d_beta * dbeta_dg;
    grad[3] = d_gamma * dgamma_da;
    grad[4] = d_gamma * dgamma_dg;
    raw[0] + beta * power
}

/// One ensemble member: configuration in, power-law coefficients out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DplNetwork {
    pub body: DenseNetwork,
}

impl DplNetwork {
    pub fn new(input_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let dims: Vec<usize> = std::iter::once(input_dim)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(RAW_OUTPUTS))
            .collect();
        Ok(Self {
            body: DenseNetwork::seeded(&dims, DEFAULT_LEAKY_SLOPE, seed)?,
        })
    }

    /// Power-law coefficients predicted for `config`.
    pub fn coefficients(&self, config: &[f64]) -> Result<PowerLawCoefficients> {
        let (raw, _) = self.body.forward(config)?;
        Ok(head_coefficients(&raw))
    }
}

impl CurveRegressor for DplNetwork {
    fn network(&self) -> &DenseNetwork {
        &self.body
    }

    fn network_mut(&mut self) -> &mut DenseNetwork {
        &mut self.body
    }

    fn push_input(&self, config: &[f64], _b_norm: f64, row: &mut Vec<f64>) {
        row.extend_from_slice(config);
    }

    fn head(&self, raw: ArrayView1<'_, f64>, b_norm: f64, grad: &mut [f64]) -> f64 {
        let mut buf = [0.0; RAW_OUTPUTS];
        buf.iter_mut().zip(raw.iter()).for_each(|(d, s)| *d = *s);
        head_forward(&buf, b_norm, grad)
    }
}

/// Plain regression network on `(config, b_norm)` with a single linear
/// output; the ablation without a power-law head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionedNetwork {
    pub body: DenseNetwork,
}

impl ConditionedNetwork {
    pub fn new(config_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let dims: Vec<usize> = std::iter::once(config_dim + 1)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(1))
            .collect();
        Ok(Self {
            body: DenseNetwork::seeded(&dims, DEFAULT_LEAKY_SLOPE, seed)?,
        })
    }

    /// Prediction for an input that already carries the budget as its last entry.
    pub fn predict_conditioned(&self, input: &[f64]) -> Result<f64> {
        let (out, _) = self.body.forward(input)?;
        Ok(out[0])
    }
}

impl CurveRegressor for ConditionedNetwork {
    fn network(&self) -> &DenseNetwork {
        &self.body
    }

    fn network_mut(&mut self) -> &mut DenseNetwork {
        &mut self.body
    }

    fn push_input(&self, config: &[f64], b_norm: f64, row: &mut Vec<f64>) {
        row.extend_from_slice(config);
        row.push(b_norm);
    }

    fn head(&self, raw: ArrayView1<'_, f64>, _b_norm: f64, grad: &mut [f64]) -> f64 {
        grad[0] = 1.0;
        raw[0]
    }
}

/// Training points `(scaled config, b_norm, loss)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingData {
    pub configs: Vec<Vec<f64>>,
    pub budgets: Vec<f64>,
    pub targets: Vec<f64>,
}

impl TrainingData {
    pub fn push(&mut self, config: Vec<f64>, b_norm: f64, target: f64) {
        self.configs.push(config);
        self.budgets.push(b_norm);
        self.targets.push(target);
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Every history observation with min-max scaled hyperparameters and
    /// budgets normalized by the table's `b_max`.
    pub fn from_history(history: &History, table: &BenchmarkTable) -> Result<Self> {
        let scaled = table.scaled_configs();
        let b_max = table.b_max() as f64;
        let mut data = Self::default();
        for obs in history {
            let index = table.position(obs.config_id)?;
            data.push(scaled[index].clone(), obs.budget as f64 / b_max, obs.loss);
        }
        Ok(data)
    }

    fn design_matrix<R: CurveRegressor>(&self, model: &R) -> Result<Array2<f64>> {
        let width = model.network().input_dim();
        let mut flat = Vec::with_capacity(self.len() * width);
        for (config, &b) in self.configs.iter().zip(&self.budgets) {
            let before = flat.len();
            model.push_input(config, b, &mut flat);
            if flat.len() - before != width {
                return Err(Error::Shape {
                    expected: width,
                    actual: flat.len() - before,
                });
            }
        }
        Ok(Array2::from_shape_vec((self.len(), width), flat).expect("row widths checked"))
    }
}

/// Mini-batch schedule for one training call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    /// Sample appended to every mini-batch.
    pub forced: Option<usize>,
}

fn train_batch<R: CurveRegressor>(
    model: &mut R,
    adam: &mut AdamState,
    inputs: &Array2<f64>,
    data: &TrainingData,
    batch: &[usize],
) -> Result<f64> {
    let x = inputs.select(Axis(0), batch);
    let (raw, cache) = model.network().forward_batch(x.view())?;
    let n = batch.len() as f64;
    let mut dout = Array2::zeros(raw.dim());
    let mut loss = 0.0;
    for (r, &i) in batch.iter().enumerate() {
        let mut row_grad = dout.row_mut(r);
        let grad = row_grad.as_slice_mut().expect("standard layout");
        let pred = model.head(raw.row(r), data.budgets[i], grad);
        let diff = pred - data.targets[i];
        loss += diff.abs();
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        grad.iter_mut().for_each(|g| *g *= sign / n);
    }
    let loss = loss / n;
    if !loss.is_finite() {
        return Ok(loss);
    }
    let grads = model.network().backward(&cache, dout.view())?;
    adam.step_network(model.network_mut(), &grads)?;
    Ok(loss)
}

/// Trains `model` with mini-batch Adam on L1 loss. Returns the mean batch
/// loss of the last epoch, or a non-finite value as soon as training diverges.
pub fn train_regressor<R: CurveRegressor>(
    model: &mut R,
    adam: &mut AdamState,
    data: &TrainingData,
    spec: &TrainSpec,
    rng: &mut ChaCha8Rng,
    mut batch_log: Option<&mut Vec<Vec<usize>>>,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("training data"));
    }
    if spec.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if let Some(f) = spec.forced {
        if f >= data.len() {
            return Err(Error::InvalidArgument(format!(
                "forced sample {f} out of range"
            )));
        }
    }
    let inputs = data.design_matrix(model)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut last = 0.0;
    let mut batch = Vec::with_capacity(spec.batch_size + 1);
    for _ in 0..spec.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(spec.batch_size) {
            batch.clear();
            batch.extend_from_slice(chunk);
            if let Some(f) = spec.forced {
                batch.push(f);
            }
            if let Some(log) = batch_log.as_deref_mut() {
                log.push(batch.clone());
            }
            let loss = train_batch(model, adam, &inputs, data, &batch)?;
            if !loss.is_finite() {
                return Ok(loss);
            }
            total += loss;
            batches += 1;
        }
        last = total / batches as f64;
    }
    Ok(last)
}

/// Mean absolute error of `model` over all of `data`.
pub fn regressor_l1<R: CurveRegressor>(model: &R, data: &TrainingData) -> Result<f64> {
    let preds = predict_rows(model, data)?;
    let total: f64 = preds
        .iter()
        .zip(&data.targets)
        .map(|(p, t)| (p - t).abs())
        .sum();
    Ok(total / data.len() as f64)
}

fn predict_rows<R: CurveRegressor>(model: &R, data: &TrainingData) -> Result<Vec<f64>> {
    let inputs = data.design_matrix(model)?;
    let raw = model.network().predict_batch(inputs.view())?;
    let mut grad = vec![0.0; raw.ncols()];
    Ok(raw
        .rows()
        .into_iter()
        .zip(&data.budgets)
        .map(|(row, &b)| model.head(row, b, &mut grad))
        .collect())
}

/// Stagnation-aware training schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainerSchedule {
    pub initial_epochs: usize,
    pub refine_epochs: usize,
    /// HPO iterations that retrain from scratch before refinement starts.
    pub initial_phase_iterations: usize,
    /// Iterations without improvement tolerated before a restart.
    pub restart_threshold_iterations: usize,
    pub batch_size: usize,
    pub iterations_since_improvement: usize,
    /// Infinite until the first fit; stored as `null` in JSON.
    #[serde(with = "infinite_as_null")]
    pub best_fit_loss: f64,
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &f64, serializer: S) -> Result<S::Ok, S::Error> {
        if value.is_finite() {
            serializer.serialize_some(value)
        } else {
            serializer.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(deserializer)?.unwrap_or(f64::INFINITY))
    }
}

/// Smallest decrease of the fit loss that counts as an improvement.
const IMPROVEMENT_EPSILON: f64 = 1e-9;

impl TrainerSchedule {
    /// Default schedule for curves of `lc_length` steps: restart after
    /// `ceil(1.2 * lc_length)` stagnating iterations.
    pub fn new(lc_length: usize) -> Self {
        Self {
            initial_epochs: 250,
            refine_epochs: 20,
            initial_phase_iterations: 10,
            restart_threshold_iterations: (6 * lc_length).div_ceil(5).max(1),
            batch_size: 64,
            iterations_since_improvement: 0,
            best_fit_loss: f64::INFINITY,
        }
    }

    /// Records the fit loss of the latest iteration and reports whether the
    /// surrogate should be retrained from fresh weights.
    pub fn should_restart(&mut self, current_fit_loss: f64) -> bool {
        if !current_fit_loss.is_finite() {
            return true;
        }
        if current_fit_loss < self.best_fit_loss - IMPROVEMENT_EPSILON {
            self.best_fit_loss = current_fit_loss;
            self.iterations_since_improvement = 0;
            return false;
        }
        self.iterations_since_improvement += 1;
        self.iterations_since_improvement > self.restart_threshold_iterations
    }

    pub fn reset_stagnation(&mut self) {
        self.iterations_since_improvement = 0;
        self.best_fit_loss = f64::INFINITY;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub ensemble_size: usize,
    pub hidden_layers: Vec<usize>,
    pub learning_rate: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 5,
            hidden_layers: vec![128, 128],
            learning_rate: 1e-3,
        }
    }
}

/// `K` independently initialized power-law networks.
#[derive(Debug, Clone, PartialEq)]
pub struct DplEnsemble {
    config: SurrogateConfig,
    input_dim: usize,
    base_seed: u64,
    members: Vec<DplNetwork>,
    adam_states: Vec<AdamState>,
    /// Seed each member was last initialized from.
    member_seeds: Vec<u64>,
}

impl DplEnsemble {
    pub fn new(input_dim: usize, config: SurrogateConfig, base_seed: u64) -> Result<Self> {
        if config.ensemble_size == 0 {
            return Err(Error::InvalidArgument(
                "ensemble needs at least one member".into(),
            ));
        }
        let mut members = Vec::with_capacity(config.ensemble_size);
        let mut adam_states = Vec::with_capacity(config.ensemble_size);
        let mut member_seeds = Vec::with_capacity(config.ensemble_size);
        for k in 0..config.ensemble_size {
            let seed = Self::derive_member_seed(base_seed, k);
            let member = DplNetwork::new(input_dim, &config.hidden_layers, seed)?;
            adam_states.push(AdamState::for_network(&member.body, config.learning_rate));
            members.push(member);
            member_seeds.push(seed);
        }
        Ok(Self {
            config,
            input_dim,
            base_seed,
            members,
            adam_states,
            member_seeds,
        })
    }

    fn derive_member_seed(seed: u64, member: usize) -> u64 {
        mix_seed(seed, 0x4d45_4d00 + member as u64)
    }

    pub fn config(&self) -> &SurrogateConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn members(&self) -> &[DplNetwork] {
        &self.members
    }

    /// Direct member access; used by tests to plant known parameters.
    pub fn members_mut(&mut self) -> &mut [DplNetwork] {
        &mut self.members
    }

    pub fn member_seeds(&self) -> &[u64] {
        &self.member_seeds
    }

    /// Seed member `member` is initialized from when the ensemble is
    /// (re)started with `seed`.
    pub fn member_seed(seed: u64, member: usize) -> u64 {
        Self::derive_member_seed(seed, member)
    }

    /// Fresh random weights and Adam state for every member.
    pub fn reinitialize(&mut self, seed: u64) {
        for (k, (member, adam)) in self
            .members
            .iter_mut()
            .zip(self.adam_states.iter_mut())
            .enumerate()
        {
            let member_seed = Self::derive_member_seed(seed, k);
            member.body.init_weights(member_seed);
            adam.reset();
            self.member_seeds[k] = member_seed;
        }
    }

    fn train_members(
        &mut self,
        data: &TrainingData,
        spec: TrainSpec,
        seed: u64,
        mut logs: Option<&mut Vec<Vec<Vec<usize>>>>,
    ) -> Result<f64> {
        let mut member_logs: Vec<Vec<Vec<usize>>> = vec![Vec::new(); self.members.len()];
        let record = logs.is_some();
        let losses: Vec<Result<f64>> = self
            .members
            .par_iter_mut()
            .zip(self.adam_states.par_iter_mut())
            .zip(member_logs.par_iter_mut())
            .enumerate()
            .map(|(k, ((member, adam), log))| {
                let mut rng = stream_rng(seed, k as u64);
                train_regressor(member, adam, data, &spec, &mut rng, record.then_some(log))
            })
            .collect();
        if let Some(out) = logs.as_mut() {
            **out = member_logs;
        }
        let mut diverged = false;
        for loss in losses {
            diverged |= !loss?.is_finite();
        }
        if diverged {
            return Ok(f64::NAN);
        }
        self.fit_loss(data)
    }

    /// Reinitializes every member from `seed` and trains for
    /// `schedule.initial_epochs`. Returns the member-averaged L1 fit loss,
    /// non-finite if any member diverged.
    pub fn fit_initial(
        &mut self,
        data: &TrainingData,
        schedule: &TrainerSchedule,
        seed: u64,
    ) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty("history"));
        }
        self.reinitialize(seed);
        let spec = TrainSpec {
            epochs: schedule.initial_epochs,
            batch_size: schedule.batch_size,
            forced: None,
        };
        self.train_members(data, spec, mix_seed(seed, 1), None)
    }

    /// Continues training for `schedule.refine_epochs`, appending the sample
    /// at `newest` to every mini-batch.
    pub fn refine(
        &mut self,
        data: &TrainingData,
        newest: usize,
        schedule: &TrainerSchedule,
        seed: u64,
    ) -> Result<f64> {
        self.refine_logged(data, newest, schedule, seed, None)
    }

    /// [`DplEnsemble::refine`] that records every member's batch indices.
    pub fn refine_logged(
        &mut self,
        data: &TrainingData,
        newest: usize,
        schedule: &TrainerSchedule,
        seed: u64,
        logs: Option<&mut Vec<Vec<Vec<usize>>>>,
    ) -> Result<f64> {
        let spec = TrainSpec {
            epochs: schedule.refine_epochs,
            batch_size: schedule.batch_size,
            forced: Some(newest),
        };
        self.train_members(data, spec, mix_seed(seed, 2), logs)
    }

    /// Member-averaged L1 loss over `data`.
    pub fn fit_loss(&self, data: &TrainingData) -> Result<f64> {
        let mut total = 0.0;
        for member in &self.members {
            total += regressor_l1(member, data)?;
        }
        Ok(total / self.members.len() as f64)
    }

    /// Member predictions at one point.
    pub fn member_predictions(&self, config: &[f64], b_norm: f64) -> Result<Vec<f64>> {
        self.members
            .iter()
            .map(|m| m.predict(config, b_norm))
            .collect()
    }

    pub fn posterior(&self, config: &[f64], b_norm: f64) -> Result<Posterior> {
        Posterior::from_predictions(&self.member_predictions(config, b_norm)?)
    }

    pub fn snapshot(&self, schedule: Option<&TrainerSchedule>) -> EnsembleSnapshot {
        EnsembleSnapshot {
            version: EnsembleSnapshot::VERSION,
            config: self.config.clone(),
            input_dim: self.input_dim,
            base_seed: self.base_seed,
            member_seeds: self.member_seeds.clone(),
            members: self
                .members
                .iter()
                .map(|m| m.body.params().to_vec())
                .collect(),
            adam_states: self.adam_states.clone(),
            schedule: schedule.copied(),
        }
    }

    pub fn from_snapshot(snapshot: &EnsembleSnapshot) -> Result<Self> {
        if snapshot.version != EnsembleSnapshot::VERSION {
            return Err(Error::Snapshot(format!(
                "unsupported snapshot version {}",
                snapshot.version
            )));
        }
        if snapshot.members.len() != snapshot.config.ensemble_size
            || snapshot.adam_states.len() != snapshot.members.len()
            || snapshot.member_seeds.len() != snapshot.members.len()
        {
            return Err(Error::Snapshot("member count mismatch".into()));
        }
        let mut ensemble = Self::new(
            snapshot.input_dim,
            snapshot.config.clone(),
            snapshot.base_seed,
        )?;
        for (member, params) in ensemble.members.iter_mut().zip(&snapshot.members) {
            member.body.set_params(params)?;
        }
        for (adam, saved) in ensemble.adam_states.iter_mut().zip(&snapshot.adam_states) {
            if saved.first_moment.len() != adam.first_moment.len() {
                return Err(Error::Snapshot("optimizer state size mismatch".into()));
            }
            *adam = saved.clone();
        }
        ensemble.member_seeds = snapshot.member_seeds.clone();
        Ok(ensemble)
    }
}

impl PosteriorModel for DplEnsemble {
    fn posteriors(&self, candidates: &[Candidate], b_norm: f64) -> Result<Vec<Posterior>> {
        check_budget(b_norm)?;
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        let rows: Vec<Vec<f64>> = candidates.iter().map(|c| c.scaled_vector.clone()).collect();
        let inputs = crate::neural::stack_rows(&rows)?;
        let mut predictions = vec![Vec::with_capacity(self.members.len()); candidates.len()];
        let mut grad = [0.0; RAW_OUTPUTS];
        for member in &self.members {
            let raw = member.body.predict_batch(inputs.view())?;
            for (row, preds) in raw.rows().into_iter().zip(predictions.iter_mut()) {
                preds.push(member.head(row, b_norm, &mut grad));
            }
        }
        predictions
            .iter()
            .map(|p| Posterior::from_predictions(p))
            .collect()
    }
}

/// Versioned, JSON-serializable ensemble checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSnapshot {
    pub version: u32,
    pub config: SurrogateConfig,
    pub input_dim: usize,
    pub base_seed: u64,
    pub member_seeds: Vec<u64>,
    /// Flattened parameters per member.
    pub members: Vec<Vec<f64>>,
    pub adam_states: Vec<AdamState>,
    pub schedule: Option<TrainerSchedule>,
}

impl EnsembleSnapshot {
    pub const VERSION: u32 = 1;

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::sigmoid;

    fn small_config(k: usize) -> SurrogateConfig {
        SurrogateConfig {
            ensemble_size: k,
            hidden_layers: vec![16, 16],
            learning_rate: 1e-3,
        }
    }

    /// Noiseless power-law points for `n_configs` configs with coefficients
    /// depending smoothly on a 2-d configuration.
    fn power_law_data(n_configs: usize, steps: &[usize], b_max: usize) -> TrainingData {
        let mut data = TrainingData::default();
        for i in 0..n_configs {
            let x = vec![i as f64 / n_configs as f64, (i % 3) as f64 / 2.0];
            let alpha = 0.1 + 0.2 * x[0];
            let beta = 0.2 + 0.1 * x[1];
            let gamma = 0.5 + 0.5 * x[0];
            for &s in steps {
                let b = s as f64 / b_max as f64;
                data.push(x.clone(), b, alpha + beta * b.powf(-gamma));
            }
        }
        data
    }

    fn set_output_bias(member: &mut DplNetwork, raw: [f64; RAW_OUTPUTS]) {
        let last = member.body.num_layers() - 1;
        let dims = member.body.layer_dims().to_vec();
        let n = member.body.num_params();
        let params = member.body.params_mut();
        let bias_start = n - RAW_OUTPUTS;
        let weight_start = bias_start - dims[last] * RAW_OUTPUTS;
        params[weight_start..bias_start].fill(0.0);
        params[bias_start..].copy_from_slice(&raw);
    }

    #[test]
    fn zero_output_layer_predicts_zero() {
        let mut member = DplNetwork::new(3, &[8, 8], 1).unwrap();
        set_output_bias(&mut member, [0.0; 5]);
        for b in [0.01, 0.3, 1.0] {
            assert_eq!(member.predict(&[0.2, 0.5, 0.9], b).unwrap(), 0.0);
        }
    }

    #[test]
    fn forced_raw_outputs_give_expected_prediction() {
        let mut member = DplNetwork::new(2, &[4, 4], 1).unwrap();
        set_output_bias(&mut member, [1.0, 1.0, 40.0, 1.0, 40.0]);
        assert!((member.predict(&[0.3, 0.7], 1.0).unwrap() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn prediction_at_full_budget_is_alpha_plus_beta() {
        let member = DplNetwork::new(3, &[8, 8], 9).unwrap();
        let x = [0.1, 0.4, 0.8];
        let c = member.coefficients(&x).unwrap();
        assert_eq!(member.predict(&x, 1.0).unwrap(), c.alpha + c.beta);
        assert!(member.predict(&x, 0.0).is_err());
        assert!(member.predict(&x, 1.5).is_err());
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let mut rng = stream_rng(5, 0);
        use rand::Rng;
        for _ in 0..100 {
            let raw: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: f64 = rng.random_range(0.05..1.0);
            let mut grad = [0.0; 5];
            head_forward(&raw, b, &mut grad);
            let mut scratch = [0.0; 5];
            for i in 0..5 {
                let h = 1e-6;
                let mut up = raw.clone();
                up[i] += h;
                let mut down = raw.clone();
                down[i] -= h;
                let fd = (head_forward(&up, b, &mut scratch)
                    - head_forward(&down, b, &mut scratch))
                    / (2.0 * h);
                let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-3);
                assert!(
                    rel < 1e-5,
                    "raw {raw:?} b {b} index {i}: {fd} vs {}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn head_uses_gated_pairs() {
        let raw = [0.3, 2.0, 0.5, 1.5, -1.0];
        let c = head_coefficients(&raw);
        assert_eq!(c.alpha, 0.3);
        assert_eq!(c.beta, 2.0 * sigmoid(0.5));
        assert_eq!(c.gamma, 1.5 * sigmoid(-1.0));
    }

    #[test]
    fn posterior_examples() {
        let p = Posterior::from_predictions(&[0.2, 0.4]).unwrap();
        assert!((p.mean - 0.3).abs() < 1e-12 && (p.variance - 0.01).abs() < 1e-12);
        let p = Posterior::from_predictions(&[1.0, 2.0, 3.0]).unwrap();
        assert!((p.mean - 2.0).abs() < 1e-12 && (p.variance - 2.0 / 3.0).abs() < 1e-12);
        let p = Posterior::from_predictions(&[0.7; 4]).unwrap();
        assert_eq!(p.variance, 0.0);
        let p = Posterior::from_predictions(&[0.42]).unwrap();
        assert_eq!((p.mean, p.variance), (0.42, 0.0));
        assert!(Posterior::from_predictions(&[]).is_err());
    }

    #[test]
    fn stagnation_counter() {
        let mut s = TrainerSchedule::new(50);
        assert_eq!(s.restart_threshold_iterations, 60);
        for i in 0..100 {
            assert!(!s.should_restart(1.0 - i as f64 * 1e-3));
        }
        let mut s = TrainerSchedule::new(50);
        assert!(!s.should_restart(0.5));
        for _ in 0..60 {
            assert!(!s.should_restart(0.5));
        }
        assert!(s.should_restart(0.5));
        let mut s = TrainerSchedule::new(50);
        assert!(s.should_restart(f64::NAN));
        assert!(s.should_restart(f64::INFINITY));
        assert_eq!(TrainerSchedule::new(1).restart_threshold_iterations, 2);
        assert_eq!(TrainerSchedule::new(20).restart_threshold_iterations, 24);
    }

    #[test]
    fn fit_initial_reaches_small_training_error() {
        let data = power_law_data(4, &[5, 10, 20], 20);
        assert_eq!(data.len(), 12);
        let mut ensemble = DplEnsemble::new(2, SurrogateConfig::default(), 6).unwrap();
        let mut schedule = TrainerSchedule::new(20);
        schedule.initial_epochs = 3000;
        ensemble.fit_initial(&data, &schedule, 3).unwrap();
        let mut mae = 0.0;
        for ((x, &b), &t) in data.configs.iter().zip(&data.budgets).zip(&data.targets) {
            mae += (ensemble.posterior(x, b).unwrap().mean - t).abs() / 12.0;
        }
        assert!(mae < 5e-3, "ensemble-mean fit error {mae}");
    }

    #[test]
    fn members_are_diverse() {
        let data = power_law_data(4, &[1, 2], 10);
        let mut ensemble = DplEnsemble::new(2, small_config(2), 0).unwrap();
        let schedule = TrainerSchedule::new(10);
        ensemble.fit_initial(&data, &schedule, 0).unwrap();
        let preds = ensemble.member_predictions(&[0.9, 0.9], 1.0).unwrap();
        assert_ne!(preds[0], preds[1]);
    }

    #[test]
    fn single_observation_is_fitted() {
        let mut data = TrainingData::default();
        data.push(vec![0.4, 0.6], 0.1, 0.8);
        let mut ensemble = DplEnsemble::new(2, small_config(2), 4).unwrap();
        let schedule = TrainerSchedule::new(10);
        ensemble.fit_initial(&data, &schedule, 4).unwrap();
        for p in ensemble.member_predictions(&[0.4, 0.6], 0.1).unwrap() {
            assert!((p - 0.8).abs() < 0.05, "prediction {p}");
        }
        assert!(ensemble
            .fit_initial(&TrainingData::default(), &schedule, 4)
            .is_err());
    }

    #[test]
    fn refine_forces_newest_point_into_every_batch() {
        let data = power_law_data(30, &[1, 2, 3, 4], 10);
        let mut ensemble = DplEnsemble::new(2, small_config(3), 1).unwrap();
        let schedule = TrainerSchedule::new(10);
        ensemble.fit_initial(&data, &schedule, 1).unwrap();
        let newest = data.len() - 1;
        let mut logs = Vec::new();
        ensemble
            .refine_logged(&data, newest, &schedule, 2, Some(&mut logs))
            .unwrap();
        assert_eq!(logs.len(), 3);
        let per_epoch = data.len().div_ceil(schedule.batch_size);
        for member_log in &logs {
            assert_eq!(member_log.len(), schedule.refine_epochs * per_epoch);
            assert!(member_log.iter().all(|batch| batch.last() == Some(&newest)));
        }
        assert_ne!(logs[0], logs[1], "members share a batch order");
    }

    #[test]
    fn refine_keeps_a_converged_fit() {
        let data = power_law_data(4, &[1, 2, 3], 20);
        let mut ensemble = DplEnsemble::new(2, small_config(2), 3).unwrap();
        let mut schedule = TrainerSchedule::new(20);
        schedule.initial_epochs = 3000;
        let before = ensemble.fit_initial(&data, &schedule, 3).unwrap();
        let after = ensemble
            .refine(&data, data.len() - 1, &schedule, 4)
            .unwrap();
        assert!(after <= before + 5e-3, "before {before}, after {after}");
    }

    #[test]
    fn refine_is_deterministic() {
        let data = power_law_data(6, &[1, 2, 3], 10);
        let mut ensemble = DplEnsemble::new(2, small_config(2), 8).unwrap();
        let schedule = TrainerSchedule::new(10);
        ensemble.fit_initial(&data, &schedule, 8).unwrap();
        let mut a = ensemble.clone();
        let mut b = ensemble.clone();
        a.refine(&data, 3, &schedule, 77).unwrap();
        b.refine(&data, 3, &schedule, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn restart_reproduces_init_weights() {
        let data = power_law_data(3, &[1, 2], 10);
        let mut ensemble = DplEnsemble::new(2, small_config(3), 0).unwrap();
        let schedule = TrainerSchedule::new(10);
        ensemble.fit_initial(&data, &schedule, 0).unwrap();
        ensemble.reinitialize(99);
        for (k, member) in ensemble.members().iter().enumerate() {
            let fresh = DplNetwork::new(2, &[16, 16], DplEnsemble::member_seed(99, k)).unwrap();
            assert_eq!(member.body.params(), fresh.body.params());
        }
    }

    #[test]
    fn posterior_is_permutation_invariant() {
        let ensemble = DplEnsemble::new(2, small_config(4), 5).unwrap();
        let x = [0.3, 0.6];
        let forward = ensemble.posterior(&x, 0.5).unwrap();
        let mut reversed = ensemble.clone();
        reversed.members_mut().reverse();
        let backward = reversed.posterior(&x, 0.5).unwrap();
        assert!((forward.mean - backward.mean).abs() < 1e-15);
        assert!((forward.variance - backward.variance).abs() < 1e-15);
    }

    #[test]
    fn batched_posteriors_match_pointwise() {
        let ensemble = DplEnsemble::new(2, small_config(3), 5).unwrap();
        let candidates: Vec<Candidate> = (0..4)
            .map(|i| Candidate {
                config_id: i,
                scaled_vector: vec![i as f64 / 4.0, 1.0 - i as f64 / 4.0],
            })
            .collect();
        let batched = ensemble.posteriors(&candidates, 1.0).unwrap();
        for (c, p) in candidates.iter().zip(&batched) {
            let q = ensemble.posterior(&c.scaled_vector, 1.0).unwrap();
            assert!((p.mean - q.mean).abs() < 1e-12 && (p.variance - q.variance).abs() < 1e-12);
        }
    }

    #[test]
    fn conditioned_network_contract() {
        let mut net = ConditionedNetwork::new(2, &[8], 0).unwrap();
        net.body.params_mut().fill(0.0);
        assert_eq!(net.predict(&[0.1, 0.2], 0.5).unwrap(), 0.0);
        assert_eq!(net.predict_conditioned(&[0.1, 0.2, 0.5]).unwrap(), 0.0);
        assert!(net.predict_conditioned(&[0.1, 0.2]).is_err());
    }

    #[test]
    fn snapshot_round_trip() {
        let data = power_law_data(3, &[1, 2], 10);
        let mut ensemble = DplEnsemble::new(2, small_config(2), 6).unwrap();
        let schedule = TrainerSchedule::new(10);
        ensemble.fit_initial(&data, &schedule, 6).unwrap();
        let snap = ensemble.snapshot(Some(&schedule));
        let text = snap.to_json().unwrap();
        let back = EnsembleSnapshot::from_json(&text).unwrap();
        assert_eq!(back, snap);
        let restored = DplEnsemble::from_snapshot(&back).unwrap();
        assert_eq!(restored, ensemble);
        let mut bad = back.clone();
        bad.version = 99;
        assert!(DplEnsemble::from_snapshot(&bad).is_err());
    }
}
