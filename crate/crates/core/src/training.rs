//! Mini-batch Adam training with reduce-on-plateau, early stopping on a
//! seeded validation split, and seed ensembles.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{split_indices, Dataset};
use crate::error::{PinError, Result};
use crate::loss::poisson_deviance;
use crate::model::{accumulate_gradient, PinModel, PinParams};
use crate::numeric::{adam_step, AdamState, LrSchedule, ParameterSet};
use crate::{seeded_rng, STREAM_SHUFFLE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub max_epochs: usize,
    /// Epochs without a new best validation loss before stopping.
    pub early_stopping_patience: usize,
    pub validation_fraction: f64,
    /// Seeds for multi-run training and ensembling.
    pub seeds: Vec<u64>,
    /// Start the intercept at `log(Σ N / Σ v)` of the training split.
    pub init_intercept: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 0.001,
            plateau_factor: 0.9,
            plateau_patience: 5,
            max_epochs: 500,
            early_stopping_patience: 15,
            validation_fraction: 0.1,
            seeds: (1..=10).collect(),
            init_intercept: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(PinError::Contract("batch size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(PinError::Contract("learning rate must be positive".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(PinError::Contract("plateau factor must lie in (0, 1)".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(PinError::Contract("validation fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were restored (`None` when no epoch ran).
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn best_validation_loss(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.epochs[e].validation_loss)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["epoch", "train_loss", "val_loss", "lr"])?;
        for r in &self.epochs {
            wtr.write_record([
                r.epoch.to_string(),
                format!("{:.17e}", r.train_loss),
                format!("{:.17e}", r.validation_loss),
                format!("{:.17e}", r.learning_rate),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// A model that the generic fit loop can optimize.
pub(crate) trait Trainable: Clone {
    type Params: ParameterSet + Clone;
    type Data;

    fn params(&self) -> &Self::Params;
    fn params_mut(&mut self) -> &mut Self::Params;
    fn zero_grads(&self) -> Self::Params;
    fn num_rows(data: &Self::Data) -> usize;
    /// Mean loss over `rows`; writes its gradient into `grads`.
    fn batch_gradient(&self, data: &Self::Data, rows: &[usize], grads: &mut Self::Params) -> f64;
    fn loss(&self, data: &Self::Data) -> f64;
    /// Re-applies frozen-parameter constraints after an optimizer step.
    fn after_step(&mut self) {}
}

impl Trainable for PinModel {
    type Params = PinParams;
    type Data = Dataset;

    fn params(&self) -> &PinParams {
        &self.params
    }

    fn params_mut(&mut self) -> &mut PinParams {
        &mut self.params
    }

    fn zero_grads(&self) -> PinParams {
        self.params.zeros_like()
    }

    fn num_rows(data: &Dataset) -> usize {
        data.len()
    }

    fn batch_gradient(&self, data: &Dataset, rows: &[usize], grads: &mut PinParams) -> f64 {
        accumulate_gradient(self, data, rows, grads)
    }

    fn loss(&self, data: &Dataset) -> f64 {
        let preds = self.predict_dataset(data);
        poisson_deviance(&preds, data.response(), data.exposure()).unwrap_or(f64::NAN)
    }

    fn after_step(&mut self) {
        for (w, &a) in self.params.output_weights.iter_mut().zip(&self.active) {
            if !a {
                *w = 0.0;
            }
        }
    }
}

/// Runs Adam over shuffled mini-batches of `train`, tracking `validation`
/// loss per epoch and restoring the best-validation parameters.
pub(crate) fn fit_loop<T: Trainable>(
    mut model: T,
    train: &T::Data,
    validation: &T::Data,
    config: &TrainConfig,
    seed: u64,
) -> Result<(T, TrainHistory)> {
    config.validate()?;
    let mut history = TrainHistory::default();
    if config.max_epochs == 0 {
        return Ok((model, history));
    }
    let mut adam = AdamState::new(model.params(), config.learning_rate)?;
    let mut schedule = LrSchedule::new(config.plateau_factor, config.plateau_patience)?;
    let mut shuffle_rng = seeded_rng(seed, STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..T::num_rows(train)).collect();
    let mut grads = model.zero_grads();
    let mut best: Option<(f64, T::Params)> = None;
    let mut stale = 0;

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let lr = adam.learning_rate;
        let mut train_total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let loss = model.batch_gradient(train, batch, &mut grads);
            if !loss.is_finite() {
                return Err(PinError::Training {
                    epoch,
                    message: format!("batch loss {loss}"),
                });
            }
            train_total += loss * batch.len() as f64;
            adam_step(model.params_mut(), &grads, &mut adam)?;
            model.after_step();
        }
        let train_loss = train_total / order.len().max(1) as f64;
        let validation_loss = model.loss(validation);
        if !validation_loss.is_finite() {
            return Err(PinError::Training {
                epoch,
                message: format!("validation loss {validation_loss}"),
            });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            validation_loss,
            learning_rate: lr,
        });
        if best.as_ref().is_none_or(|(b, _)| validation_loss < *b) {
            best = Some((validation_loss, model.params().clone()));
            history.best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
        }
        schedule.observe(validation_loss, &mut adam.learning_rate);
        if stale >= config.early_stopping_patience {
            break;
        }
    }
    if let Some((_, params)) = best {
        *model.params_mut() = params;
    }
    Ok((model, history))
}

/// Fits `model` on a seeded split of `data`; returns the best-validation
/// weights and the epoch history.
pub fn train(data: &Dataset, model: PinModel, config: &TrainConfig, seed: u64) -> Result<(PinModel, TrainHistory)> {
    config.validate()?;
    if data.is_empty() {
        return Err(PinError::Contract("cannot train on an empty dataset".into()));
    }
    let (train_idx, val_idx) = split_indices(data.len(), config.validation_fraction, seed)?;
    let (train_set, val_set) = (data.subset(&train_idx), data.subset(&val_idx));
    let mut model = model;
    if config.init_intercept {
        model.params.bias = train_set.log_mean_frequency();
    }
    if !model.seeds.contains(&seed) {
        model.seeds.push(seed);
    }
    fit_loop(model, &train_set, &val_set, config, seed)
}

/// Anything that produces frequency predictions for a dataset.
pub trait Predictor {
    fn predict_frequencies(&self, data: &Dataset) -> Vec<f64>;
}

impl Predictor for PinModel {
    fn predict_frequencies(&self, data: &Dataset) -> Vec<f64> {
        self.predict_dataset(data)
    }
}

/// Intercept-only model `f(x) = exp(b)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterceptModel {
    pub log_frequency: f64,
}

impl InterceptModel {
    pub fn fit(data: &Dataset) -> Self {
        Self {
            log_frequency: data.log_mean_frequency(),
        }
    }
}

impl Predictor for InterceptModel {
    fn predict_frequencies(&self, data: &Dataset) -> Vec<f64> {
        vec![self.log_frequency.exp(); data.len()]
    }
}

/// Frequency-scale average of independently trained members.
#[derive(Clone, Debug)]
pub struct Ensemble {
    members: Vec<PinModel>,
}

impl Ensemble {
    pub fn new(members: Vec<PinModel>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| PinError::Contract("an ensemble needs at least one model".into()))?;
        for m in &members[1..] {
            first.check_schema(&m.schema)?;
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[PinModel] {
        &self.members
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.members.iter().map(|m| m.predict(x)).sum::<f64>() / self.members.len() as f64
    }
}

impl Predictor for Ensemble {
    fn predict_frequencies(&self, data: &Dataset) -> Vec<f64> {
        let mut out = vec![0.0; data.len()];
        for m in &self.members {
            for (o, p) in out.iter_mut().zip(m.predict_dataset(data)) {
                *o += p;
            }
        }
        let k = self.members.len() as f64;
        out.iter_mut().for_each(|o| *o /= k);
        out
    }
}

/// Mean of member predictions at `x`.
pub fn ensemble_predict(models: &[PinModel], x: &[f64]) -> Result<f64> {
    let ensemble = Ensemble::new(models.to_vec())?;
    models[0].check_input(x)?;
    Ok(ensemble.predict(x))
}

/// Average Poisson deviance of `model` on `data` (unscaled units).
pub fn evaluate(model: &impl Predictor, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(PinError::Contract("cannot evaluate on an empty dataset".into()));
    }
    poisson_deviance(&model.predict_frequencies(data), data.response(), data.exposure())
}
