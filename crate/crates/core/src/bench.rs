//! The fixed synthetic benchmark: variant comparison over several training
//! seeds, plus a runtime projection measured from real batches.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::crf::CrfSettings;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fcn::FcnConfig;
use crate::model::{Model, Variant};
use crate::synth::GenSpec;
use crate::train::{self, adam_step, evaluate, AdvConfig, Prepared, SplitMetrics, TrainState};

pub const DATA_SEED: u64 = 42;
pub const TRAIN_IMAGES: usize = 200;
pub const TEST_IMAGES: usize = 100;
pub const TRAINING_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
/// Wall-clock budget for the whole protocol, in seconds.
pub const RUNTIME_BUDGET: f64 = 30.0 * 60.0;
/// Slack allowed in the test-Dice ordering.
pub const DICE_SLACK: f64 = 0.005;
/// Slack allowed when adversarial trimap accuracy trails its clean twin.
pub const TRIMAP_SLACK: f64 = 0.01;
/// Trimap widths the adversarial trend is checked at.
pub const TREND_WIDTHS: [usize; 3] = [1, 2, 3];

/// Ordering the test Dice is expected to follow, best first.
pub const DICE_ORDER: [Variant; 3] = [Variant::AdvMultiFcnCrf, Variant::MultiFcnCrf, Variant::Fcn];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub data: GenSpec,
    pub train_images: usize,
    pub test_images: usize,
    pub augment: bool,
    /// Template for every run; `variant` and `seed` are overwritten.
    pub training: AdvConfig,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub crf: CrfSettings,
    pub architectures: Option<Vec<FcnConfig>>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            data: GenSpec { seed: DATA_SEED, count: TRAIN_IMAGES + TEST_IMAGES, ..GenSpec::default() },
            train_images: TRAIN_IMAGES,
            test_images: TEST_IMAGES,
            augment: true,
            training: AdvConfig::default(),
            seeds: TRAINING_SEEDS.to_vec(),
            variants: Variant::ALL.to_vec(),
            crf: CrfSettings::default(),
            architectures: None,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.training.validate()?;
        self.crf.validate()?;
        if self.train_images == 0 || self.test_images == 0 {
            return Err(Error::Contract("benchmark needs non-empty train and test splits".into()));
        }
        if self.train_images + self.test_images > self.data.count {
            return Err(Error::Contract(format!(
                "{} + {} images requested but only {} generated",
                self.train_images, self.test_images, self.data.count
            )));
        }
        if self.seeds.is_empty() || self.variants.is_empty() {
            return Err(Error::Contract("benchmark needs at least one seed and one variant".into()));
        }
        Ok(())
    }

    pub fn fcn_configs(&self) -> Vec<FcnConfig> {
        self.architectures.clone().unwrap_or_else(|| FcnConfig::presets().to_vec())
    }

    pub fn run_config(&self, variant: Variant, seed: u64) -> AdvConfig {
        AdvConfig { variant, seed, ..self.training.clone() }
    }

    pub fn model(&self, variant: Variant, data: &Prepared) -> Result<Model> {
        Model::with_configs(variant, self.fcn_configs(), data.prior.clone(), self.crf)
    }

    /// Generates the benchmark images (8-bit quantised, as on disk) and
    /// prepares the two splits.
    pub fn prepare(&self) -> Result<Prepared> {
        self.validate()?;
        let ds = Dataset::generate(&self.data, 1.0)?;
        let (train, rest) = ds.samples.split_at(self.train_images);
        train::prepare(train, &rest[..self.test_images], self.augment)
    }
}

/// Measured cost of one variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cost {
    pub variant: Variant,
    /// Mean seconds per optimiser step (one batch).
    pub batch_seconds: f64,
    /// Mean seconds to predict one test image.
    pub predict_seconds: f64,
    /// Projected seconds for one full training run plus the final test scoring.
    pub run_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub costs: Vec<Cost>,
    pub seeds: usize,
    pub total_seconds: f64,
}

impl Projection {
    pub fn within(&self, budget: f64) -> bool {
        self.total_seconds <= budget
    }
}

/// Times `batches` real optimiser steps and `predictions` test predictions
/// per variant, then extrapolates to the whole protocol.
pub fn project(cfg: &BenchConfig, data: &Prepared, batches: usize, predictions: usize) -> Result<Projection> {
    if batches == 0 || predictions == 0 {
        return Err(Error::Contract("need at least one timed batch and prediction".into()));
    }
    let per_epoch = data.train.len().div_ceil(cfg.training.batch_size);
    let mut costs = Vec::new();
    for &variant in &cfg.variants {
        let run = cfg.run_config(variant, cfg.seeds[0]);
        let model = cfg.model(variant, data)?;
        let mut state = TrainState::new(model.init_params(run.seed)?);
        let eps = run.effective_epsilon();

        let start = Instant::now();
        for b in 0..batches {
            let lo = (b * run.batch_size) % data.train.len();
            let batch: Vec<_> = (lo..lo + run.batch_size).map(|i| &data.train[i % data.train.len()]).collect();
            let obj = crate::adversarial::batch_objective(&model, &state.params, &batch, eps, run.lambda)?;
            adam_step(&mut state, &obj.grads, run.learning_rate)?;
        }
        let batch_seconds = start.elapsed().as_secs_f64() / batches as f64;

        let n = predictions.min(data.test.len());
        let start = Instant::now();
        evaluate(&model, &state.params, &data.test[..n])?;
        let predict_seconds = start.elapsed().as_secs_f64() / n as f64;

        let run_seconds =
            run.epochs as f64 * per_epoch as f64 * batch_seconds + data.test.len() as f64 * predict_seconds;
        costs.push(Cost { variant, batch_seconds, predict_seconds, run_seconds });
    }
    let total_seconds = cfg.seeds.len() as f64 * costs.iter().map(|c| c.run_seconds).sum::<f64>();
    Ok(Projection { costs, seeds: cfg.seeds.len(), total_seconds })
}

/// Final test scores of one (variant, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub test: SplitMetrics,
    pub seconds: f64,
}

/// Trains every variant for every seed and scores the test split once at the end.
pub fn run<F>(cfg: &BenchConfig, data: &Prepared, mut on_result: F) -> Result<Vec<RunResult>>
where
    F: FnMut(&RunResult),
{
    cfg.validate()?;
    let mut out = Vec::new();
    for &variant in &cfg.variants {
        let model = cfg.model(variant, data)?;
        for &seed in &cfg.seeds {
            let run = cfg.run_config(variant, seed);
            let start = Instant::now();
            let mut state = TrainState::new(model.init_params(seed)?);
            for _ in 0..run.epochs {
                train::train_epoch(&model, &run, &mut state, &data.train)?;
            }
            let (report, _) = evaluate(&model, &state.params, &data.test)?;
            let r = RunResult { variant, seed, test: SplitMetrics::from(&report), seconds: start.elapsed().as_secs_f64() };
            on_result(&r);
            out.push(r);
        }
    }
    Ok(out)
}

/// Seed-averaged test metrics of one variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub variant: Variant,
    pub runs: usize,
    pub dice: f64,
    pub trimap: [Option<f64>; 5],
}

pub fn summarize(results: &[RunResult]) -> Vec<Summary> {
    let mut variants: Vec<Variant> = results.iter().map(|r| r.variant).collect();
    variants.sort();
    variants.dedup();
    variants
        .into_iter()
        .map(|variant| {
            let runs: Vec<&RunResult> = results.iter().filter(|r| r.variant == variant).collect();
            let n = runs.len() as f64;
            let dice = runs.iter().map(|r| r.test.dice).sum::<f64>() / n;
            let trimap = std::array::from_fn(|w| {
                let vals: Vec<f64> = runs.iter().filter_map(|r| r.test.trimap[w]).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            });
            Summary { variant, runs: runs.len(), dice, trimap }
        })
        .collect()
}

fn find(summaries: &[Summary], v: Variant) -> Option<&Summary> {
    summaries.iter().find(|s| s.variant == v)
}

/// `adv_multi_fcn_crf >= multi_fcn_crf >= fcn - slack` on mean test Dice.
/// `None` when one of the three variants was not run.
pub fn dice_ordering(summaries: &[Summary]) -> Option<bool> {
    let [a, b, c] = DICE_ORDER.map(|v| find(summaries, v).map(|s| s.dice));
    let (a, b, c) = (a?, b?, c?);
    Some(a >= b && b >= c - DICE_SLACK)
}

/// Adversarial minus clean trimap accuracy at one width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendPoint {
    pub adversarial: Variant,
    pub width: usize,
    pub delta: f64,
    pub passed: bool,
}

/// Every adversarial variant against its clean twin at widths 1..3.
pub fn trimap_trend(summaries: &[Summary]) -> Vec<TrendPoint> {
    let mut out = Vec::new();
    for adv in summaries.iter().filter(|s| s.variant.is_adversarial()) {
        let Some(clean) = find(summaries, adv.variant.clean()) else { continue };
        for w in TREND_WIDTHS {
            if let (Some(a), Some(c)) = (adv.trimap[w - 1], clean.trimap[w - 1]) {
                let delta = a - c;
                out.push(TrendPoint { adversarial: adv.variant, width: w, delta, passed: delta >= -TRIMAP_SLACK });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn result(variant: Variant, seed: u64, dice: f64, t1: f64) -> RunResult {
        RunResult {
            variant,
            seed,
            test: SplitMetrics { dice, trimap: [Some(t1), Some(t1), Some(t1), None, None] },
            seconds: 0.0,
        }
    }

    #[test]
    fn default_protocol() {
        let c = BenchConfig::default();
        assert_eq!((c.data.seed, c.train_images, c.test_images, c.seeds.len()), (42, 200, 100, 5));
        assert_eq!(c.training.epochs, 300);
        c.validate().unwrap();
    }

    #[test]
    fn ordering_and_trend() {
        let rs = vec![
            result(Variant::Fcn, 0, 0.80, 0.7),
            result(Variant::Fcn, 1, 0.82, 0.7),
            result(Variant::MultiFcnCrf, 0, 0.81, 0.8),
            result(Variant::AdvMultiFcnCrf, 0, 0.85, 0.795),
        ];
        let s = summarize(&rs);
        assert_eq!(find(&s, Variant::Fcn).unwrap().dice, 0.81);
        assert_eq!(find(&s, Variant::Fcn).unwrap().trimap[3], None);
        assert_eq!(dice_ordering(&s), Some(true));
        let trend = trimap_trend(&s);
        assert_eq!(trend.len(), 3);
        assert!(trend.iter().all(|p| p.passed));

        let worse = vec![result(Variant::MultiFcnCrf, 0, 0.81, 0.8), result(Variant::AdvMultiFcnCrf, 0, 0.80, 0.78)];
        let s = summarize(&worse);
        assert_eq!(dice_ordering(&s), None);
        assert!(trimap_trend(&s).iter().all(|p| !p.passed));
    }
}
