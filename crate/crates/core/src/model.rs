//! Assembly of the eight model variants.
//!
//! | variant family | sub-nets | output                                   |
//! |----------------|----------|------------------------------------------|
//! | `fcn`          | fcn1     | prior-biased softmax                     |
//! | `multi_fcn`    | fcn1..4  | mean of the four probability maps        |
//! | `fcn_crf`      | fcn1     | mean-field marginals, unary `-ln P`      |
//! | `multi_fcn_crf`| fcn1..4  | mean-field marginals, weighted unaries   |
//!
//! The `adv_` prefix only changes the training objective.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConstMatrix, Tape, Var};
use crate::crf::{self, CrfSettings, KernelMatrices, INITIAL_KERNEL_WEIGHTS, KERNEL_WEIGHTS};
use crate::error::{Error, Result};
use crate::fcn::{self, FcnConfig, FcnVars, ParamMap, PositionPrior};
use crate::tensor::Tensor;

/// Parameter name of the `[4]` multi-scale unary weights.
pub const SCALE_WEIGHTS: &str = "scale.weights";
pub const INITIAL_SCALE_WEIGHT: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Fcn,
    AdvFcn,
    FcnCrf,
    AdvFcnCrf,
    MultiFcn,
    AdvMultiFcn,
    MultiFcnCrf,
    AdvMultiFcnCrf,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Fcn,
        Variant::AdvFcn,
        Variant::FcnCrf,
        Variant::AdvFcnCrf,
        Variant::MultiFcn,
        Variant::AdvMultiFcn,
        Variant::MultiFcnCrf,
        Variant::AdvMultiFcnCrf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Fcn => "fcn",
            Variant::AdvFcn => "adv_fcn",
            Variant::FcnCrf => "fcn_crf",
            Variant::AdvFcnCrf => "adv_fcn_crf",
            Variant::MultiFcn => "multi_fcn",
            Variant::AdvMultiFcn => "adv_multi_fcn",
            Variant::MultiFcnCrf => "multi_fcn_crf",
            Variant::AdvMultiFcnCrf => "adv_multi_fcn_crf",
        }
    }

    pub fn is_adversarial(self) -> bool {
        matches!(self, Variant::AdvFcn | Variant::AdvFcnCrf | Variant::AdvMultiFcn | Variant::AdvMultiFcnCrf)
    }

    pub fn uses_crf(self) -> bool {
        matches!(self, Variant::FcnCrf | Variant::AdvFcnCrf | Variant::MultiFcnCrf | Variant::AdvMultiFcnCrf)
    }

    pub fn is_multi(self) -> bool {
        matches!(self, Variant::MultiFcn | Variant::AdvMultiFcn | Variant::MultiFcnCrf | Variant::AdvMultiFcnCrf)
    }

    /// The same architecture trained without perturbations.
    pub fn clean(self) -> Variant {
        match self {
            Variant::AdvFcn => Variant::Fcn,
            Variant::AdvFcnCrf => Variant::FcnCrf,
            Variant::AdvMultiFcn => Variant::MultiFcn,
            Variant::AdvMultiFcnCrf => Variant::MultiFcnCrf,
            v => v,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown variant '{s}'")))
    }
}

/// A variant bound to its architectures, prior and CRF settings.
pub struct Model {
    pub variant: Variant,
    pub configs: Vec<FcnConfig>,
    pub crf: CrfSettings,
    prior: PositionPrior,
    prior_bias: Tensor,
    position_kernel: Option<Rc<ConstMatrix>>,
}

/// Parameters of a [`Model`] recorded as named leaves on one tape.
pub struct ModelVars<'t> {
    pub fcns: Vec<FcnVars<'t>>,
    pub scale: Option<Var<'t>>,
    pub kernel_weights: Option<Var<'t>>,
    pub prior_bias: Var<'t>,
}

impl Model {
    /// Model with the four preset sub-nets (only `fcn1` for single-scale variants).
    pub fn new(variant: Variant, prior: PositionPrior, crf: CrfSettings) -> Result<Self> {
        Self::with_configs(variant, FcnConfig::presets().to_vec(), prior, crf)
    }

    /// Model with custom sub-net architectures. Single-scale variants use
    /// the first config; multi-scale variants use all of them.
    pub fn with_configs(
        variant: Variant,
        configs: Vec<FcnConfig>,
        prior: PositionPrior,
        crf: CrfSettings,
    ) -> Result<Self> {
        crf.validate()?;
        let mut configs = configs;
        if configs.is_empty() {
            return Err(Error::Contract("model needs at least one sub-net".into()));
        }
        if !variant.is_multi() {
            configs.truncate(1);
        }
        let (h, w) = prior.tensor().hw()?;
        for c in &configs {
            c.validate()?;
            if c.image_size != h || h != w {
                return Err(Error::Shape(format!(
                    "sub-net {} expects {}x{} images but the prior is {h}x{w}",
                    c.name, c.image_size, c.image_size
                )));
            }
        }
        let position_kernel =
            variant.uses_crf().then(|| crf::position_kernel(h, w, crf.bandwidths.position));
        Ok(Self { variant, configs, crf, prior_bias: prior.log_bias(), prior, position_kernel })
    }

    pub fn prior(&self) -> &PositionPrior {
        &self.prior
    }

    pub fn image_size(&self) -> usize {
        self.configs[0].image_size
    }

    fn prefix(config: &FcnConfig) -> String {
        format!("{}.", config.name)
    }

    /// Seeded initial parameters for every learnable tensor of the variant.
    pub fn init_params(&self, seed: u64) -> Result<ParamMap> {
        let mut out = ParamMap::new();
        for (i, c) in self.configs.iter().enumerate() {
            let prefix = Self::prefix(c);
            for (k, v) in fcn::init_params(c, seed, i as u64)? {
                out.insert(format!("{prefix}{k}"), v);
            }
        }
        if self.variant.uses_crf() {
            out.insert(KERNEL_WEIGHTS.into(), Tensor::new(&[2], INITIAL_KERNEL_WEIGHTS.to_vec())?);
            if self.variant.is_multi() {
                out.insert(
                    SCALE_WEIGHTS.into(),
                    Tensor::full(&[self.configs.len()], INITIAL_SCALE_WEIGHT),
                );
            }
        }
        Ok(out)
    }

    /// Checks that `params` holds exactly the tensors this model needs.
    pub fn check_params(&self, params: &ParamMap) -> Result<()> {
        let expected = self.init_params(0)?;
        for (k, v) in &expected {
            let got = params.get(k).ok_or_else(|| Error::Contract(format!("missing parameter {k}")))?;
            got.expect_shape(v.shape(), k)?;
        }
        if let Some(extra) = params.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Contract(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    pub fn record<'t>(&self, tape: &'t Tape, params: &ParamMap) -> Result<ModelVars<'t>> {
        let fcns = self
            .configs
            .iter()
            .map(|c| FcnVars::record(tape, params, &Self::prefix(c)))
            .collect::<Result<_>>()?;
        let get = |k: &str| -> Result<Var<'t>> {
            let t = params.get(k).ok_or_else(|| Error::Contract(format!("missing parameter {k}")))?;
            Ok(tape.named_leaf(k, t.clone()))
        };
        let uses_crf = self.variant.uses_crf();
        Ok(ModelVars {
            fcns,
            scale: if uses_crf && self.variant.is_multi() { Some(get(SCALE_WEIGHTS)?) } else { None },
            kernel_weights: if uses_crf { Some(get(KERNEL_WEIGHTS)?) } else { None },
            prior_bias: tape.leaf(self.prior_bias.clone()),
        })
    }

    /// Kernel matrices for an intensity image in `[0,1]`, or `None` for
    /// variants without a CRF.
    pub fn kernels(&self, intensity: &Tensor) -> Result<Option<KernelMatrices>> {
        let Some(position) = &self.position_kernel else { return Ok(None) };
        let s = self.image_size();
        intensity.expect_shape(&[1, s, s], "intensity image")?;
        Ok(Some(KernelMatrices {
            appearance: crf::appearance_kernel(intensity, self.crf.bandwidths.appearance)?,
            position: Rc::clone(position),
        }))
    }

    /// Per-pixel log-probabilities `[2,H,W]` of `(background, mass)`.
    pub fn log_probs<'t>(
        &self,
        vars: &ModelVars<'t>,
        input: Var<'t>,
        kernels: Option<&KernelMatrices>,
        crf_steps: usize,
    ) -> Result<Var<'t>> {
        let per_scale = self
            .configs
            .iter()
            .zip(&vars.fcns)
            .map(|(c, v)| fcn::fcn_forward(c, v, input, vars.prior_bias))
            .collect::<Result<Vec<_>>>()?;

        if !self.variant.uses_crf() {
            if !self.variant.is_multi() {
                return Ok(per_scale[0]);
            }
            let probs: Vec<Var<'t>> = per_scale.iter().map(|lp| lp.exp()).collect();
            return Ok(fcn::average_prediction(&probs)?.ln());
        }

        let unary = if self.variant.is_multi() {
            let unaries: Vec<Var<'t>> = per_scale.iter().map(|lp| lp.neg()).collect();
            let scale = vars.scale.ok_or_else(|| Error::Contract("scale weights not recorded".into()))?;
            fcn::multiscale_unary(&unaries, scale)?
        } else {
            per_scale[0].neg()
        };
        let kernels = kernels.ok_or_else(|| Error::Contract("CRF variant needs kernel matrices".into()))?;
        let weights = vars
            .kernel_weights
            .ok_or_else(|| Error::Contract("kernel weights not recorded".into()))?;
        crf::crf_log_marginals(unary, kernels, weights, crf_steps)
    }

    /// Tape-free prediction: probabilities `[2,H,W]` using the test-time
    /// number of CRF steps.
    pub fn predict(&self, params: &ParamMap, input: &Tensor, intensity: &Tensor) -> Result<Tensor> {
        let kernels = self.kernels(intensity)?;
        let tape = Tape::new();
        let vars = self.record(&tape, params)?;
        let x = tape.leaf(input.clone());
        let lp = self.log_probs(&vars, x, kernels.as_ref(), self.crf.steps_test)?;
        let probs = lp.value().map(f64::exp);
        Ok(probs)
    }
}
