//! Fully convolutional sub-nets with a position-prior-biased softmax.
//!
//! Each sub-net is three `conv → tanh → 2×2 max-pool` stages (same padding,
//! so 40 → 20 → 10 → 5) followed by a stride-1 transpose convolution with
//! two output channels that maps the 5×5 feature map back to full
//! resolution. The per-pixel logits receive `(ln(1-w), ln w)` from the
//! [`PositionPrior`] before a log-softmax over `(background, mass)`.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::Padding;
use crate::rng::{sub_rng, Stream};
use crate::tensor::Tensor;

/// Side length of every image handled by the pipeline.
pub const IMAGE_SIZE: usize = 40;
/// Labels: 0 = background, 1 = mass.
pub const NUM_LABELS: usize = 2;

/// Named tensor table. Ordered so iteration is deterministic.
pub type ParamMap = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub kernels: usize,
    pub size: usize,
}

/// Architecture of one sub-net.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FcnConfig {
    pub name: String,
    pub layers: [ConvSpec; 3],
    pub image_size: usize,
}

const fn cs(kernels: usize, size: usize) -> ConvSpec {
    ConvSpec { kernels, size }
}

impl FcnConfig {
    pub fn fcn1() -> Self {
        Self::new("fcn1", [cs(6, 5), cs(12, 5), cs(588, 7)])
    }

    pub fn fcn2() -> Self {
        Self::new("fcn2", [cs(9, 4), cs(12, 4), cs(588, 7)])
    }

    pub fn fcn3() -> Self {
        Self::new("fcn3", [cs(16, 3), cs(13, 3), cs(415, 8)])
    }

    pub fn fcn4() -> Self {
        Self::new("fcn4", [cs(37, 2), cs(12, 2), cs(355, 9)])
    }

    /// The four multi-scale presets in order.
    pub fn presets() -> [Self; 4] {
        [Self::fcn1(), Self::fcn2(), Self::fcn3(), Self::fcn4()]
    }

    pub fn new(name: &str, layers: [ConvSpec; 3]) -> Self {
        Self { name: name.to_string(), layers, image_size: IMAGE_SIZE }
    }

    /// Same architecture on a different (multiple-of-8) image size. Used by
    /// tests to keep finite-difference checks cheap.
    pub fn with_image_size(mut self, size: usize) -> Self {
        self.image_size = size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return Err(Error::Contract(format!(
                "image size {} must be a positive multiple of 8",
                self.image_size
            )));
        }
        if self.layers.iter().any(|l| l.kernels == 0 || l.size == 0) {
            return Err(Error::Contract(format!("{}: empty conv layer", self.name)));
        }
        Ok(())
    }

    /// Side of the feature map entering the transpose convolution.
    pub fn bottleneck_size(&self) -> usize {
        self.image_size / 8
    }

    /// Side of the transpose-convolution kernels: `image - bottleneck + 1`.
    pub fn deconv_size(&self) -> usize {
        self.image_size - self.bottleneck_size() + 1
    }

    /// `(name, shape)` of every parameter tensor, in forward order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = 1;
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("conv{}.weight", i + 1), vec![l.kernels, c_in, l.size, l.size]));
            out.push((format!("conv{}.bias", i + 1), vec![l.kernels]));
            c_in = l.kernels;
        }
        let k = self.deconv_size();
        out.push(("deconv.weight".into(), vec![c_in, NUM_LABELS, k, k]));
        out.push(("deconv.bias".into(), vec![NUM_LABELS]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Glorot-uniform weights `U[-a, a]`, `a = sqrt(6 / (fan_in + fan_out))`,
/// zero biases. `index` separates sub-nets drawing from the same seed.
pub fn init_params(config: &FcnConfig, seed: u64, index: u64) -> Result<ParamMap> {
    config.validate()?;
    let mut rng = sub_rng(seed, Stream::Init, index);
    let mut params = ParamMap::new();
    for (name, shape) in config.param_shapes() {
        let t = if shape.len() == 4 {
            let receptive = shape[2] * shape[3];
            let (fan_in, fan_out) = (shape[1] * receptive, shape[0] * receptive);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Tensor::from_fn(&shape, |_| rng.random_range(-a..=a))
        } else {
            Tensor::zeros(&shape)
        };
        params.insert(name, t);
    }
    Ok(params)
}

/// Per-pixel empirical probability of the mass label.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionPrior {
    prior: Tensor,
}

impl PositionPrior {
    pub fn new(prior: Tensor) -> Result<Self> {
        prior.hw()?;
        if let Some(bad) = prior.data().iter().find(|&&w| !(w > 0.0 && w < 1.0)) {
            return Err(Error::Contract(format!("prior entry {bad} outside (0,1)")));
        }
        Ok(Self { prior })
    }

    pub fn uniform(size: usize, w: f64) -> Result<Self> {
        Self::new(Tensor::full(&[size, size], w))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.prior
    }

    /// Additive logit bias `[2,H,W]`: `ln(1-w)` for background, `ln w` for mass.
    pub fn log_bias(&self) -> Tensor {
        let (h, w) = self.prior.hw().expect("validated in new");
        let mut data = Vec::with_capacity(2 * h * w);
        data.extend(self.prior.data().iter().map(|p| (1.0 - p).ln()));
        data.extend(self.prior.data().iter().map(|p| p.ln()));
        Tensor::new(&[2, h, w], data).expect("consistent shape")
    }
}

/// Parameters of one sub-net recorded on a tape.
pub struct FcnVars<'t> {
    pub conv: [(Var<'t>, Var<'t>); 3],
    pub deconv: (Var<'t>, Var<'t>),
}

impl<'t> FcnVars<'t> {
    /// Records `params` (looked up under `prefix`) as named leaves.
    pub fn record(tape: &'t Tape, params: &ParamMap, prefix: &str) -> Result<Self> {
        let get = |name: &str| -> Result<Var<'t>> {
            let key = format!("{prefix}{name}");
            let t = params
                .get(&key)
                .ok_or_else(|| Error::Contract(format!("missing parameter {key}")))?;
            Ok(tape.named_leaf(&key, t.clone()))
        };
        Ok(Self {
            conv: [
                (get("conv1.weight")?, get("conv1.bias")?),
                (get("conv2.weight")?, get("conv2.bias")?),
                (get("conv3.weight")?, get("conv3.bias")?),
            ],
            deconv: (get("deconv.weight")?, get("deconv.bias")?),
        })
    }
}

/// Forward pass of one sub-net: `[1,H,W]` image → `[2,H,W]` log-probabilities.
/// `prior_bias` is [`PositionPrior::log_bias`] recorded as a leaf.
pub fn fcn_forward<'t>(
    config: &FcnConfig,
    vars: &FcnVars<'t>,
    image: Var<'t>,
    prior_bias: Var<'t>,
) -> Result<Var<'t>> {
    let s = config.image_size;
    let img = image.value();
    img.expect_shape(&[1, s, s], "fcn input image")?;
    prior_bias.value().expect_shape(&[NUM_LABELS, s, s], "prior bias")?;
    let mut x = image;
    for (w, b) in &vars.conv {
        // max-pool commutes with the monotone tanh; pooling first is cheaper
        x = x.conv2d(*w, *b, Padding::Same)?.maxpool2()?.tanh();
    }
    let logits = x.transpose_conv2d(vars.deconv.0)?.add_channel_bias(vars.deconv.1)?;
    logits.add(prior_bias)?.log_softmax_pixelwise()
}

/// Validates a binary `[H,W]` mask and returns per-pixel labels.
pub fn mask_labels(mask: &Tensor) -> Result<Rc<Vec<usize>>> {
    mask.hw()?;
    mask.data()
        .iter()
        .map(|&v| match v {
            v if v == 0.0 => Ok(0),
            v if v == 1.0 => Ok(1),
            v => Err(Error::Contract(format!("mask value {v} is not binary"))),
        })
        .collect::<Result<Vec<_>>>()
        .map(Rc::new)
}

/// Mean per-pixel negative log-likelihood of `mask` under `log_probs`.
pub fn fcn_loss<'t>(log_probs: Var<'t>, mask: &Tensor) -> Result<Var<'t>> {
    let labels = mask_labels(mask)?;
    let (_, h, w) = log_probs.value().chw()?;
    mask.expect_shape(&[h, w], "mask")?;
    let n = labels.len() as f64;
    log_probs.pick_nll(labels, 1.0 / n)
}

/// `Σ_u w_u · ψ_u` over per-scale unary potentials.
pub fn multiscale_unary<'t>(unaries: &[Var<'t>], weights: Var<'t>) -> Result<Var<'t>> {
    let wv = weights.value();
    if unaries.is_empty() || wv.len() != unaries.len() {
        return Err(Error::Shape(format!(
            "{} unaries with {} scale weights",
            unaries.len(),
            wv.len()
        )));
    }
    let mut acc = unaries[0].scale_by(weights, 0)?;
    for (i, u) in unaries.iter().enumerate().skip(1) {
        acc = acc.add(u.scale_by(weights, i)?)?;
    }
    Ok(acc)
}

/// Elementwise mean of per-scale probability maps.
pub fn average_prediction<'t>(probs: &[Var<'t>]) -> Result<Var<'t>> {
    let Some((first, rest)) = probs.split_first() else {
        return Err(Error::Shape("no predictions to average".into()));
    };
    let mut acc = *first;
    for p in rest {
        acc = acc.add(*p)?;
    }
    Ok(acc.scale(1.0 / probs.len() as f64))
}
