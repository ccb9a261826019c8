//! Adam-driven mini-batch training and per-epoch evaluation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adversarial::{batch_objective, Example};
use crate::error::{Error, Result};
use crate::eval::{binarize, MetricsReport, SampleMetrics};
use crate::fcn::{ParamMap, PositionPrior};
use crate::model::{Model, Variant};
use crate::rng::{sub_rng, Stream};
use crate::synth::{augment_flips, estimate_prior, fit_normalizer, min_max_scale, NormStats, Sample};
use crate::tensor::Tensor;

pub const DEFAULT_LEARNING_RATE: f64 = 0.003;
pub const DEFAULT_LAMBDA: f64 = 0.5;
/// Perturbation radii of the two published settings.
pub const EPSILON_PRESETS: [f64; 2] = [0.1, 0.5];
pub const DEFAULT_BATCH_SIZE: usize = 8;
pub const DEFAULT_EPOCHS: usize = 300;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvConfig {
    pub variant: Variant,
    pub epsilon: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self {
            variant: Variant::AdvMultiFcnCrf,
            epsilon: EPSILON_PRESETS[0],
            lambda: DEFAULT_LAMBDA,
            learning_rate: DEFAULT_LEARNING_RATE,
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Contract(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Contract(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Contract(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Contract("batch size must be at least 1".into()));
        }
        Ok(())
    }

    /// Radius actually used: non-adversarial variants train with `ε = 0`.
    pub fn effective_epsilon(&self) -> f64 {
        if self.variant.is_adversarial() {
            self.epsilon
        } else {
            0.0
        }
    }
}

/// Parameters plus Adam moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: ParamMap,
    pub m: ParamMap,
    pub v: ParamMap,
    /// Number of Adam updates applied so far.
    pub step: u64,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(params: ParamMap) -> Self {
        let zeros: ParamMap = params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect();
        Self { m: zeros.clone(), v: zeros, params, step: 0, epoch: 0 }
    }

    pub fn all_finite(&self) -> bool {
        [&self.params, &self.m, &self.v].iter().all(|map| map.values().all(Tensor::all_finite))
    }
}

/// Model-ready splits plus the statistics fitted on the training split.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub norm: NormStats,
    pub prior: PositionPrior,
}

/// Optionally flip-augments the training split, then fits the per-pixel
/// normaliser and the position prior on it and prepares both splits.
pub fn prepare(train: &[Sample], test: &[Sample], augment: bool) -> Result<Prepared> {
    let train: Vec<Sample> = if augment { augment_flips(train) } else { train.to_vec() };
    if train.len() < 2 {
        return Err(Error::Data(format!("need at least 2 training images, got {}", train.len())));
    }
    let scaled: Vec<Tensor> = train.iter().map(|s| min_max_scale(&s.image)).collect();
    let norm = fit_normalizer(&scaled)?;
    let masks: Vec<&Tensor> = train.iter().map(|s| &s.mask).collect();
    let prior = estimate_prior(&masks)?;
    let examples = |set: &[Sample]| set.iter().map(|s| Example::prepare(s, &norm)).collect::<Result<Vec<_>>>();
    Ok(Prepared { train: examples(&train)?, test: examples(test)?, norm, prior })
}

/// One bias-corrected Adam update.
pub fn adam_step(state: &mut TrainState, grads: &ParamMap, lr: f64) -> Result<()> {
    if grads.len() != state.params.len() || grads.keys().any(|k| !state.params.contains_key(k)) {
        return Err(Error::Contract("gradient keys do not match parameter keys".into()));
    }
    for (k, g) in grads {
        g.expect_shape(state.params[k].shape(), k)?;
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (k, g) in grads {
        let p = state.params.get_mut(k).expect("checked above").data_mut();
        let m = state.m.get_mut(k).expect("moments mirror params").data_mut();
        let v = state.v.get_mut(k).expect("moments mirror params").data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Summary of one split at one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub dice: f64,
    pub trimap: [Option<f64>; 5],
}

impl From<&MetricsReport> for SplitMetrics {
    fn from(r: &MetricsReport) -> Self {
        Self { dice: r.dice(), trimap: r.trimap_accuracy() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean objective over the epoch's batches.
    pub loss: f64,
    pub train: Option<SplitMetrics>,
    pub test: Option<SplitMetrics>,
}

/// Binarised predictions and pooled metrics over `examples`.
pub fn evaluate(model: &Model, params: &ParamMap, examples: &[Example]) -> Result<(MetricsReport, Vec<Tensor>)> {
    let mut report = MetricsReport::default();
    let mut preds = Vec::with_capacity(examples.len());
    for ex in examples {
        let pred = binarize(&model.predict(params, &ex.input, &ex.intensity)?)?;
        report.push(SampleMetrics::compute(&pred, &ex.mask)?);
        preds.push(pred);
    }
    Ok((report, preds))
}

/// Which splits to score after each epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalPlan {
    /// Score every `every` epochs (and always after the last one); 0 scores
    /// only the last epoch.
    pub every: usize,
    pub train: bool,
    pub test: bool,
}

impl Default for EvalPlan {
    fn default() -> Self {
        Self { every: 1, train: true, test: true }
    }
}

impl EvalPlan {
    fn due(&self, epoch: usize, last: usize) -> bool {
        epoch == last || (self.every > 0 && epoch % self.every == 0)
    }
}

/// Runs one epoch: seeded shuffle, then one Adam step per batch. On a
/// non-finite objective or gradient the state is left at its last good value.
pub fn train_epoch(model: &Model, config: &AdvConfig, state: &mut TrainState, train: &[Example]) -> Result<f64> {
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut sub_rng(config.seed, Stream::Shuffle, state.epoch as u64));
    let eps = config.effective_epsilon();
    let mut loss_sum = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(config.batch_size) {
        let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
        let obj = batch_objective(model, &state.params, &batch, eps, config.lambda)?;
        let total = obj.total();
        if !total.is_finite() || !obj.grads.values().all(Tensor::all_finite) {
            return Err(Error::Numerical(format!(
                "non-finite objective at epoch {} step {}",
                state.epoch + 1,
                state.step + 1
            )));
        }
        let mut next = state.clone();
        adam_step(&mut next, &obj.grads, config.learning_rate)?;
        if !next.all_finite() {
            return Err(Error::Numerical(format!("non-finite parameters after step {}", next.step)));
        }
        *state = next;
        loss_sum += total;
        batches += 1;
    }
    state.epoch += 1;
    Ok(loss_sum / batches as f64)
}

/// Trains from `state.epoch` up to `config.epochs`, calling `on_epoch` after
/// each epoch with the record and the updated state.
pub fn train<F>(
    model: &Model,
    config: &AdvConfig,
    state: &mut TrainState,
    train_set: &[Example],
    test_set: &[Example],
    plan: EvalPlan,
    mut on_epoch: F,
) -> Result<Vec<EpochRecord>>
where
    F: FnMut(&EpochRecord, &TrainState) -> Result<()>,
{
    config.validate()?;
    model.check_params(&state.params)?;
    let mut records = Vec::new();
    while state.epoch < config.epochs {
        let loss = train_epoch(model, config, state, train_set)?;
        let epoch = state.epoch;
        let due = plan.due(epoch, config.epochs);
        let score = |set: &[Example], wanted: bool| -> Result<Option<SplitMetrics>> {
            if !(due && wanted) || set.is_empty() {
                return Ok(None);
            }
            Ok(Some(SplitMetrics::from(&evaluate(model, &state.params, set)?.0)))
        };
        let record = EpochRecord { epoch, loss, train: score(train_set, plan.train)?, test: score(test_set, plan.test)? };
        on_epoch(&record, state)?;
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> TrainState {
        let mut p = ParamMap::new();
        p.insert("w".into(), Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        TrainState::new(p)
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = state();
        let before = s.params.clone();
        let mut g = ParamMap::new();
        g.insert("w".into(), Tensor::zeros(&[3]));
        adam_step(&mut s, &g, 0.003).unwrap();
        assert_eq!(s.params, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = state();
        let before = s.params["w"].clone();
        let mut g = ParamMap::new();
        g.insert("w".into(), Tensor::new(&[3], vec![0.3, -7.0, 1e-3]).unwrap());
        adam_step(&mut s, &g, 0.003).unwrap();
        for i in 0..3 {
            let delta = s.params["w"].data()[i] - before.data()[i];
            let want = -0.003 * g["w"].data()[i].signum();
            assert!((delta - want).abs() < 1e-7, "{delta} vs {want}");
        }
    }

    #[test]
    fn key_mismatch_rejected() {
        let mut s = state();
        let mut g = ParamMap::new();
        g.insert("other".into(), Tensor::zeros(&[3]));
        assert!(matches!(adam_step(&mut s, &g, 0.1), Err(Error::Contract(_))));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn defaults() {
        let c = AdvConfig::default();
        assert_eq!((c.learning_rate, c.lambda, c.batch_size), (0.003, 0.5, 8));
        assert_eq!(EPSILON_PRESETS, [0.1, 0.5]);
        let clean = AdvConfig { variant: Variant::FcnCrf, ..c.clone() };
        assert_eq!(clean.effective_epsilon(), 0.0);
        assert_eq!(c.effective_epsilon(), 0.1);
    }
}
