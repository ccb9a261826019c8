//! L2-bounded gradient-sign perturbations and the adversarial training objective.
//!
//! For one image the objective is
//!
//! ```text
//! -log P(y | I + R; θ) - log P(y | I; θ),   R = -ε g / ‖g‖,   g = ∇_I log P(y | I; θ)
//! ```
//!
//! averaged over the batch, plus `λ/2 ‖θ‖²`. `R` is a constant when
//! differentiating with respect to `θ`. Log-likelihoods are summed over the
//! pixels of an image.

use std::rc::Rc;

use crate::autodiff::Tape;
use crate::crf::KernelMatrices;
use crate::error::{Error, Result};
use crate::fcn::{mask_labels, ParamMap};
use crate::model::Model;
use crate::synth::{min_max_scale, NormStats, Sample};
use crate::tensor::Tensor;

/// Gradients with a smaller L2 norm give a zero perturbation.
pub const MIN_GRAD_NORM: f64 = 1e-12;

/// A training or test image prepared for the model.
#[derive(Clone, Debug)]
pub struct Example {
    /// Normalised network input `[1,H,W]`.
    pub input: Tensor,
    /// Min-max scaled image `[1,H,W]`, the CRF appearance feature.
    pub intensity: Tensor,
    pub mask: Tensor,
    pub labels: Rc<Vec<usize>>,
}

impl Example {
    pub fn prepare(sample: &Sample, norm: &NormStats) -> Result<Self> {
        let intensity = min_max_scale(&sample.image);
        Ok(Self {
            input: norm.apply(&intensity)?,
            intensity,
            mask: sample.mask.clone(),
            labels: mask_labels(&sample.mask)?,
        })
    }
}

/// `-ε g / ‖g‖`, or zero when `‖g‖ < 1e-12`.
pub fn perturbation(g: &Tensor, epsilon: f64) -> Result<Tensor> {
    if !(epsilon >= 0.0) {
        return Err(Error::Contract(format!("epsilon must be non-negative, got {epsilon}")));
    }
    let norm = g.norm();
    if norm < MIN_GRAD_NORM || epsilon == 0.0 {
        return Ok(Tensor::zeros(g.shape()));
    }
    Ok(g.scale(-epsilon / norm))
}

/// One forward/backward pass on a single image.
#[derive(Clone, Debug)]
pub struct Pass {
    /// `-Σ_i log P(y_i | input)`.
    pub nll: f64,
    /// `∂ nll / ∂θ` for every parameter.
    pub grads: ParamMap,
    /// `∂ nll / ∂input`, i.e. `-∇_I log P`.
    pub input_grad: Tensor,
}

pub fn sample_pass(
    model: &Model,
    params: &ParamMap,
    input: &Tensor,
    labels: &Rc<Vec<usize>>,
    kernels: Option<&KernelMatrices>,
    crf_steps: usize,
) -> Result<Pass> {
    let tape = Tape::new();
    let vars = model.record(&tape, params)?;
    let x = tape.leaf(input.clone());
    let nll = model.log_probs(&vars, x, kernels, crf_steps)?.pick_nll(Rc::clone(labels), 1.0)?;
    let grads = tape.backward(nll)?;
    Ok(Pass { nll: nll.value().item(), grads: grads.named(), input_grad: grads.wrt(x) })
}

/// `g = ∇_I Σ_i log P(y_i | I)` at the training crf step count.
pub fn input_gradient(model: &Model, params: &ParamMap, example: &Example) -> Result<Tensor> {
    let kernels = model.kernels(&example.intensity)?;
    let pass = sample_pass(model, params, &example.input, &example.labels, kernels.as_ref(), model.crf.steps_train)?;
    Ok(pass.input_grad.scale(-1.0))
}

/// Loss terms and gradient of the objective for one batch.
#[derive(Clone, Debug)]
pub struct Objective {
    /// Batch mean of the clean per-image NLL.
    pub clean: f64,
    /// Batch mean of the perturbed per-image NLL.
    pub adversarial: f64,
    /// `λ/2 ‖θ‖²`.
    pub regularizer: f64,
    pub grads: ParamMap,
}

impl Objective {
    pub fn total(&self) -> f64 {
        self.clean + self.adversarial + self.regularizer
    }
}

/// `λ/2 ‖θ‖²` over every learnable tensor.
pub fn regularizer(params: &ParamMap, lambda: f64) -> f64 {
    0.5 * lambda * params.values().map(Tensor::norm_sq).sum::<f64>()
}

fn accumulate(into: &mut ParamMap, from: &ParamMap, k: f64) -> Result<()> {
    for (name, g) in from {
        let slot = into.get_mut(name).ok_or_else(|| Error::Contract(format!("unexpected gradient {name}")))?;
        for (a, b) in slot.data_mut().iter_mut().zip(g.data()) {
            *a += k * b;
        }
    }
    Ok(())
}

/// Objective value and gradient for a batch. With `epsilon == 0` the
/// perturbed term is the clean term, so its gradient is reused instead of
/// running a second pass; the arithmetic is identical either way.
pub fn batch_objective(
    model: &Model,
    params: &ParamMap,
    batch: &[&Example],
    epsilon: f64,
    lambda: f64,
) -> Result<Objective> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let steps = model.crf.steps_train;
    let inv = 1.0 / batch.len() as f64;
    let mut grads: ParamMap = params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect();
    let (mut clean, mut adversarial) = (0.0, 0.0);
    for ex in batch {
        let kernels = model.kernels(&ex.intensity)?;
        let pass = sample_pass(model, params, &ex.input, &ex.labels, kernels.as_ref(), steps)?;
        clean += inv * pass.nll;
        accumulate(&mut grads, &pass.grads, inv)?;
        let r = perturbation(&pass.input_grad.scale(-1.0), epsilon)?;
        if r.max_abs() == 0.0 {
            adversarial += inv * pass.nll;
            accumulate(&mut grads, &pass.grads, inv)?;
        } else {
            let perturbed = ex.input.add(&r)?;
            let adv = sample_pass(model, params, &perturbed, &ex.labels, kernels.as_ref(), steps)?;
            adversarial += inv * adv.nll;
            accumulate(&mut grads, &adv.grads, inv)?;
        }
    }
    for (name, g) in grads.iter_mut() {
        let theta = &params[name];
        for (a, b) in g.data_mut().iter_mut().zip(theta.data()) {
            *a += lambda * b;
        }
    }
    Ok(Objective { clean, adversarial, regularizer: regularizer(params, lambda), grads })
}

/// Batch mean of `-log P(y | I + R)` for the given perturbations, without
/// gradients. With each `R` taken from [`batch_objective`]'s own pass this is
/// its adversarial term.
pub fn adversarial_loss(
    model: &Model,
    params: &ParamMap,
    batch: &[&Example],
    perturbations: &[Tensor],
) -> Result<f64> {
    if batch.is_empty() || batch.len() != perturbations.len() {
        return Err(Error::Contract("need one perturbation per batch image".into()));
    }
    let mut total = 0.0;
    for (ex, r) in batch.iter().zip(perturbations) {
        let kernels = model.kernels(&ex.intensity)?;
        total += nll_value(model, params, &ex.input.add(r)?, &ex.labels, kernels.as_ref(), model.crf.steps_train)?;
    }
    Ok(total / batch.len() as f64)
}

/// Per-image perturbations used by [`batch_objective`] at the current `θ`.
pub fn batch_perturbations(model: &Model, params: &ParamMap, batch: &[&Example], epsilon: f64) -> Result<Vec<Tensor>> {
    batch.iter().map(|ex| perturbation(&input_gradient(model, params, ex)?, epsilon)).collect()
}

/// Objective value with fixed perturbations; the function whose `θ`-gradient
/// [`batch_objective`] returns.
pub fn objective_with_fixed_perturbations(
    model: &Model,
    params: &ParamMap,
    batch: &[&Example],
    perturbations: &[Tensor],
    lambda: f64,
) -> Result<f64> {
    let zeros: Vec<Tensor> = batch.iter().map(|ex| Tensor::zeros(ex.input.shape())).collect();
    let clean = adversarial_loss(model, params, batch, &zeros)?;
    let adv = adversarial_loss(model, params, batch, perturbations)?;
    Ok(clean + adv + regularizer(params, lambda))
}

fn nll_value(
    model: &Model,
    params: &ParamMap,
    input: &Tensor,
    labels: &Rc<Vec<usize>>,
    kernels: Option<&KernelMatrices>,
    crf_steps: usize,
) -> Result<f64> {
    let tape = Tape::new();
    let vars = model.record(&tape, params)?;
    let x = tape.leaf(input.clone());
    let nll = model.log_probs(&vars, x, kernels, crf_steps)?.pick_nll(Rc::clone(labels), 1.0)?;
    let v = nll.value().item();
    Ok(v)
}
