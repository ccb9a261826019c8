//! Numerical self-checks: finite-difference gradients of every primitive and
//! of the composed models, CRF oracles, and perturbation contracts.
//!
//! Each check reports the measured quantity next to its threshold so a
//! passing report still shows how much headroom there is.

use std::fmt;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::adversarial::{
    batch_objective, batch_perturbations, input_gradient, objective_with_fixed_perturbations, perturbation, Example,
};
use crate::autodiff::{compare_gradient, numeric_gradient, rel_error, ConstMatrix, Tape, Var};
use crate::crf::{self, Bandwidths, CrfSettings, KernelMatrices};
use crate::error::Result;
use crate::fcn::{ConvSpec, FcnConfig, ParamMap};
use crate::model::{Model, Variant};
use crate::ops::Padding;
use crate::rng::{sub_rng, Stream};
use crate::synth::{estimate_prior, fit_normalizer, generate, min_max_scale, GenSpec};
use crate::tensor::Tensor;
use crate::train::{train_epoch, AdvConfig, TrainState};

/// Central-difference step used by every gradient check.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted relative error between analytic and numeric gradients.
pub const FD_TOLERANCE: f64 = 1e-4;
pub const NORMALISATION_TOLERANCE: f64 = 1e-9;
pub const PERTURBATION_TOLERANCE: f64 = 1e-12;
/// Required share of 2×2 instances where mean-field and exact argmax agree.
pub const MIN_EXACT_AGREEMENT: f64 = 0.9;
pub const EXACT_INSTANCES: usize = 100;
/// Side length of the images used for the composite checks. Small images
/// keep the summed likelihood, and with it the rounding noise of central
/// differences, well below the gradient components being checked.
pub const COMPOSITE_SIZE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    Above,
    Below,
    AtMost,
    AtLeast,
}

impl Relation {
    fn holds(self, measured: f64, threshold: f64) -> bool {
        match self {
            Relation::Above => measured > threshold,
            Relation::Below => measured < threshold,
            Relation::AtMost => measured <= threshold,
            Relation::AtLeast => measured >= threshold,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Relation::Above => ">",
            Relation::Below => "<",
            Relation::AtMost => "<=",
            Relation::AtLeast => ">=",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub group: &'static str,
    pub name: String,
    pub measured: f64,
    pub relation: Relation,
    pub threshold: f64,
    pub passed: bool,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<9} {:<58} measured {:.3e} (need {} {:.1e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.group,
            self.name,
            self.measured,
            self.relation.symbol(),
            self.threshold
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn group(&self, group: &str) -> impl Iterator<Item = &Check> {
        let group = group.to_string();
        self.checks.iter().filter(move |c| c.group == group)
    }

    fn push(&mut self, group: &'static str, name: impl Into<String>, measured: f64, relation: Relation, threshold: f64) {
        let passed = !measured.is_nan() && relation.holds(measured, threshold);
        self.checks.push(Check { group, name: name.into(), measured, relation, threshold, passed });
    }

    fn extend(&mut self, other: Report) {
        self.checks.extend(other.checks);
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Options {
    pub seed: u64,
    /// Perturbs every analytic gradient before comparison. The gradient
    /// groups must then fail; used to show the checks have teeth.
    pub corrupt_gradients: bool,
}

/// Runs every group.
pub fn run(opts: Options) -> Result<Report> {
    let mut r = gradient_primitives(opts)?;
    r.extend(gradient_composites(opts)?);
    r.extend(crf_checks(opts.seed)?);
    r.extend(perturbation_checks(opts.seed)?);
    r.extend(variant_lattice(opts.seed)?);
    Ok(r)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn corrupt(analytic: &mut Tensor, coords: Option<&[usize]>) {
    let i = coords.map_or(0, |c| c[0]);
    let v = analytic.data()[i];
    analytic.data_mut()[i] = 1.1 * v + 1e-3;
}

/// FD check of `Σ r ⊙ f(x)` for a fixed random projection `r`.
fn check_op<F>(rng: &mut ChaCha8Rng, x: &Tensor, f: F, corrupt_grad: bool) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let probe = Tape::new();
    let out_shape = f(&probe, probe.leaf(x.clone()))?.shape();
    let r = uniform(rng, &out_shape, -1.0, 1.0);
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&tape, xv)?;
    let l = y.mul(tape.leaf(r.clone()))?.sum();
    let mut analytic = tape.backward(l)?.wrt(xv);
    if corrupt_grad {
        corrupt(&mut analytic, None);
    }
    let eval = |p: &Tensor| -> Result<f64> {
        let t = Tape::new();
        let y = f(&t, t.leaf(p.clone()))?;
        y.value().dot(&r)
    };
    Ok(compare_gradient(&eval, x, &analytic, FD_STEP, None)?.max_rel_error)
}

/// Random values whose pairwise gaps inside every 2×2 block exceed the FD
/// step, so max-pool argmaxes cannot switch under perturbation.
fn separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5 * n as f64 * 0.01).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        vals.swap(i, j);
    }
    Tensor::new(shape, vals).expect("consistent shape")
}

pub fn gradient_primitives(opts: Options) -> Result<Report> {
    let mut rng = sub_rng(opts.seed, Stream::Test, 100);
    let c = opts.corrupt_gradients;
    let mut rep = Report::default();
    let mut add = |name: &str, err: f64| rep.push("gradient", name, err, Relation::Below, FD_TOLERANCE);

    let x = uniform(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let other = uniform(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let positive = uniform(&mut rng, &[2, 3, 4], 0.5, 2.0);
    let s = uniform(&mut rng, &[3], -1.0, 1.0);

    let o = other.clone();
    add("add", check_op(&mut rng, &x, move |t, v| v.add(t.leaf(o.clone())), c)?);
    let o = other.clone();
    add("sub", check_op(&mut rng, &x, move |t, v| t.leaf(o.clone()).sub(v), c)?);
    let o = other.clone();
    add("mul", check_op(&mut rng, &x, move |t, v| v.mul(t.leaf(o.clone())), c)?);
    add("mul (shared operand)", check_op(&mut rng, &x, |_, v| v.mul(v), c)?);
    add("neg", check_op(&mut rng, &x, |_, v| Ok(v.neg()), c)?);
    add("scale", check_op(&mut rng, &x, |_, v| Ok(v.scale(-1.7)), c)?);
    let sv = s.clone();
    add("scale_by (tensor)", check_op(&mut rng, &x, move |t, v| v.scale_by(t.leaf(sv.clone()), 1), c)?);
    let xc = x.clone();
    add("scale_by (scale)", check_op(&mut rng, &s, move |t, v| t.leaf(xc.clone()).scale_by(v, 2), c)?);
    add("tanh", check_op(&mut rng, &x, |_, v| Ok(v.tanh()), c)?);
    add("exp", check_op(&mut rng, &x, |_, v| Ok(v.exp()), c)?);
    add("ln", check_op(&mut rng, &positive, |_, v| Ok(v.ln()), c)?);
    add("sum", check_op(&mut rng, &x, |_, v| Ok(v.sum()), c)?);

    let img = uniform(&mut rng, &[2, 6, 6], -1.0, 1.0);
    for (k, pad) in [(3, Padding::Same), (4, Padding::Same), (3, Padding::Valid), (2, Padding::Same)] {
        let kern = uniform(&mut rng, &[3, 2, k, k], -0.5, 0.5);
        let bias = uniform(&mut rng, &[3], -0.5, 0.5);
        let tag = format!("{k}x{k} {pad:?}").to_lowercase();
        let (kk, bb) = (kern.clone(), bias.clone());
        add(
            &format!("conv2d input ({tag})"),
            check_op(&mut rng, &img, move |t, v| v.conv2d(t.leaf(kk.clone()), t.leaf(bb.clone()), pad), c)?,
        );
        let (ii, bb) = (img.clone(), bias.clone());
        add(
            &format!("conv2d kernels ({tag})"),
            check_op(&mut rng, &kern, move |t, v| t.leaf(ii.clone()).conv2d(v, t.leaf(bb.clone()), pad), c)?,
        );
        let (ii, kk) = (img.clone(), kern.clone());
        add(
            &format!("conv2d bias ({tag})"),
            check_op(&mut rng, &bias, move |t, v| t.leaf(ii.clone()).conv2d(t.leaf(kk.clone()), v, pad), c)?,
        );
    }

    let small = uniform(&mut rng, &[3, 2, 3], -1.0, 1.0);
    let tk = uniform(&mut rng, &[3, 2, 4, 4], -0.5, 0.5);
    let kk = tk.clone();
    add("transpose_conv2d input", check_op(&mut rng, &small, move |t, v| v.transpose_conv2d(t.leaf(kk.clone())), c)?);
    let ss = small.clone();
    add("transpose_conv2d kernels", check_op(&mut rng, &tk, move |t, v| t.leaf(ss.clone()).transpose_conv2d(v), c)?);

    let cb = uniform(&mut rng, &[2], -1.0, 1.0);
    let bb = cb.clone();
    add("channel bias input", check_op(&mut rng, &x, move |t, v| v.add_channel_bias(t.leaf(bb.clone())), c)?);
    let xx = x.clone();
    add("channel bias bias", check_op(&mut rng, &cb, move |t, v| t.leaf(xx.clone()).add_channel_bias(v), c)?);

    let pool_in = separated(&mut rng, &[2, 4, 6]);
    add("maxpool2", check_op(&mut rng, &pool_in, |_, v| v.maxpool2(), c)?);

    let logits = uniform(&mut rng, &[2, 3, 3], -2.0, 2.0);
    add("softmax_pixelwise", check_op(&mut rng, &logits, |_, v| v.softmax_pixelwise(), c)?);
    add("log_softmax_pixelwise", check_op(&mut rng, &logits, |_, v| v.log_softmax_pixelwise(), c)?);
    let labels = Rc::new((0..9).map(|i| (i * 5 % 3 == 0) as usize).collect::<Vec<_>>());
    add("pick_nll", check_op(&mut rng, &logits, move |_, v| v.pick_nll(Rc::clone(&labels), 0.3), c)?);

    let m = Rc::new(ConstMatrix::new(9, uniform(&mut rng, &[81], 0.0, 1.0).into_data())?);
    add("mat_apply", check_op(&mut rng, &logits, move |_, v| v.mat_apply(Rc::clone(&m)), c)?);
    add("potts", check_op(&mut rng, &logits, |_, v| v.potts(), c)?);
    Ok(rep)
}

/// A small dataset of `size`×`size` samples prepared as model inputs.
fn tiny_examples(seed: u64, size: usize, count: usize) -> Result<(Vec<Example>, crate::fcn::PositionPrior)> {
    let spec = GenSpec {
        seed,
        count,
        size,
        center_jitter: 1.0,
        semi_axis_min: 2.0,
        semi_axis_max: size as f64 / 2.0 - 2.0,
        ..GenSpec::default()
    };
    let samples = generate(&spec)?;
    let scaled: Vec<Tensor> = samples.iter().map(|s| min_max_scale(&s.image)).collect();
    let norm = fit_normalizer(&scaled)?;
    let masks: Vec<&Tensor> = samples.iter().map(|s| &s.mask).collect();
    let prior = estimate_prior(&masks)?;
    let ex = samples.iter().map(|s| Example::prepare(s, &norm)).collect::<Result<Vec<_>>>()?;
    Ok((ex, prior))
}

/// Small sub-net architectures for `size`×`size` inputs.
pub fn tiny_architectures(size: usize) -> Vec<FcnConfig> {
    let c = |kernels, size| ConvSpec { kernels, size };
    vec![
        FcnConfig::new("fcn1", [c(3, 3), c(4, 3), c(5, 3)]).with_image_size(size),
        FcnConfig::new("fcn2", [c(3, 2), c(3, 2), c(4, 3)]).with_image_size(size),
        FcnConfig::new("fcn3", [c(4, 3), c(3, 3), c(3, 2)]).with_image_size(size),
        FcnConfig::new("fcn4", [c(5, 2), c(3, 2), c(3, 4)]).with_image_size(size),
    ]
}

/// Coordinates to probe: all of them for small tensors, else a seeded sample.
fn probe_coords(rng: &mut ChaCha8Rng, len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let mut all: Vec<usize> = (0..len).collect();
    for i in 0..max {
        let j = rng.random_range(i..len);
        all.swap(i, j);
    }
    all.truncate(max);
    all.sort_unstable();
    all
}

/// Outcome of a composite gradient check. Components whose analytic value
/// is below [`RESOLUTION_FLOOR`] are compared in absolute terms: there the
/// rounding noise of a step-`1e-5` central difference is of the same order
/// as the relative tolerance itself.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplitError {
    pub relative: f64,
    pub absolute_small: f64,
    pub large: usize,
    pub small: usize,
}

impl SplitError {
    fn merge(&mut self, o: SplitError) {
        let nan_max = |a: f64, b: f64| if a.is_nan() || b.is_nan() { f64::NAN } else { a.max(b) };
        self.relative = nan_max(self.relative, o.relative);
        self.absolute_small = nan_max(self.absolute_small, o.absolute_small);
        self.large += o.large;
        self.small += o.small;
    }
}

/// Gradient magnitude above which the relative criterion applies.
pub const RESOLUTION_FLOOR: f64 = 1e-4;
/// Absolute bound for components below [`RESOLUTION_FLOOR`].
pub const SMALL_COMPONENT_TOLERANCE: f64 = 1e-8;

fn compare_split<F>(f: &F, x: &Tensor, analytic: &Tensor, coords: &[usize]) -> Result<SplitError>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let numeric = numeric_gradient(f, x, FD_STEP, Some(coords))?;
    let mut out = SplitError::default();
    for (&i, &n) in coords.iter().zip(&numeric) {
        let a = analytic.data()[i];
        if a.abs() >= RESOLUTION_FLOOR {
            out.relative = out.relative.max(rel_error(a, n));
            out.large += 1;
        } else {
            out.absolute_small = out.absolute_small.max((a - n).abs());
            out.small += 1;
        }
        if (a - n).is_nan() {
            out.relative = f64::NAN;
        }
    }
    Ok(out)
}

fn push_split(rep: &mut Report, label: &str, e: SplitError) {
    rep.push(
        "gradient",
        format!("{label} ({} coords, rel.)", e.large),
        e.relative,
        Relation::Below,
        FD_TOLERANCE,
    );
    rep.push(
        "gradient",
        format!("{label} ({} small coords, abs.)", e.small),
        e.absolute_small,
        Relation::Below,
        SMALL_COMPONENT_TOLERANCE,
    );
}

/// Compares sampled coordinates of every parameter tensor.
fn check_params<F>(
    rng: &mut ChaCha8Rng,
    f: &F,
    params: &ParamMap,
    analytic: &ParamMap,
    max_per_tensor: usize,
    corrupt_grad: bool,
) -> Result<SplitError>
where
    F: Fn(&ParamMap) -> Result<f64>,
{
    let mut total = SplitError::default();
    for (name, value) in params {
        let coords = probe_coords(rng, value.len(), max_per_tensor);
        let mut a = analytic[name].clone();
        if corrupt_grad {
            corrupt(&mut a, Some(&coords));
        }
        let eval = |t: &Tensor| -> Result<f64> {
            let mut p = params.clone();
            p.insert(name.clone(), t.clone());
            f(&p)
        };
        total.merge(compare_split(&eval, value, &a, &coords)?);
    }
    Ok(total)
}

/// Parameters drawn uniformly from `[-PARAM_RANGE, PARAM_RANGE]`, with CRF
/// kernel weights in `[0, 0.1]`. Wider than the training initialisation so
/// that no gradient component sits near the rounding floor of the
/// central differences.
fn random_params(rng: &mut ChaCha8Rng, model: &Model) -> Result<ParamMap> {
    const PARAM_RANGE: f64 = 0.3;
    let mut params = model.init_params(0)?;
    for (name, t) in params.iter_mut() {
        let (lo, hi) = if name == crf::KERNEL_WEIGHTS { (0.0, 0.1) } else { (-PARAM_RANGE, PARAM_RANGE) };
        *t = uniform(rng, t.shape(), lo, hi);
    }
    Ok(params)
}

fn model_nll(model: &Model, params: &ParamMap, ex: &Example, kernels: Option<&KernelMatrices>, steps: usize) -> Result<f64> {
    let tape = Tape::new();
    let vars = model.record(&tape, params)?;
    let x = tape.leaf(ex.input.clone());
    Ok(model.log_probs(&vars, x, kernels, steps)?.pick_nll(Rc::clone(&ex.labels), 1.0)?.value().item())
}

pub fn gradient_composites(opts: Options) -> Result<Report> {
    let mut rng = sub_rng(opts.seed, Stream::Test, 200);
    let c = opts.corrupt_gradients;
    let mut rep = Report::default();
    let (examples, prior) = tiny_examples(opts.seed, COMPOSITE_SIZE, 4)?;
    let crf = CrfSettings { steps_train: 3, steps_test: 3, ..CrfSettings::default() };
    let ex = &examples[0];
    const PER_TENSOR: usize = 24;

    for variant in [Variant::Fcn, Variant::FcnCrf, Variant::MultiFcnCrf] {
        let model = Model::with_configs(variant, tiny_architectures(COMPOSITE_SIZE), prior.clone(), crf)?;
        let params = random_params(&mut rng, &model)?;
        let kernels = model.kernels(&ex.intensity)?;
        let steps = crf.steps_train;

        let tape = Tape::new();
        let vars = model.record(&tape, &params)?;
        let x = tape.leaf(ex.input.clone());
        let loss = model.log_probs(&vars, x, kernels.as_ref(), steps)?.pick_nll(Rc::clone(&ex.labels), 1.0)?;
        let grads = tape.backward(loss)?;
        let analytic = grads.named();
        let f = |p: &ParamMap| model_nll(&model, p, ex, kernels.as_ref(), steps);
        let e = check_params(&mut rng, &f, &params, &analytic, PER_TENSOR, c)?;
        push_split(&mut rep, &format!("{variant} loss wrt parameters"), e);

        let mut g_in = input_gradient(&model, &params, ex)?.scale(-1.0);
        if c {
            corrupt(&mut g_in, None);
        }
        let fi = |t: &Tensor| -> Result<f64> {
            let probe = Example { input: t.clone(), ..ex.clone() };
            model_nll(&model, &params, &probe, kernels.as_ref(), steps)
        };
        let coords = probe_coords(&mut rng, ex.input.len(), 64);
        let e = compare_split(&fi, &ex.input, &g_in, &coords)?;
        push_split(&mut rep, &format!("{variant} loss wrt input image"), e);
    }

    // mean-field recursion alone: 3 unrolled steps, wrt unary and kernel weights
    {
        let unary = uniform(&mut rng, &[2, 4, 4], 0.0, 2.0);
        let img = uniform(&mut rng, &[1, 4, 4], 0.0, 1.0);
        let k = crf::build_kernels(&img, Bandwidths { appearance: 0.3, position: 1.5 })?;
        let labels = Rc::new((0..16).map(|i| (i % 3 == 0) as usize).collect::<Vec<_>>());
        let weights = Tensor::new(&[2], vec![0.7, 0.4])?;
        let (kk, ll, ww) = (k.clone(), Rc::clone(&labels), weights.clone());
        let e = check_op(
            &mut rng,
            &unary,
            move |t, u| crf::crf_log_marginals(u, &kk, t.leaf(ww.clone()), 3)?.pick_nll(Rc::clone(&ll), 1.0),
            c,
        )?;
        rep.push("gradient", "mean-field 3 steps wrt unary", e, Relation::Below, FD_TOLERANCE);
        let uu = unary.clone();
        let e = check_op(
            &mut rng,
            &weights,
            move |t, w| crf::crf_infer(t.leaf(uu.clone()), &k, w, 3),
            c,
        )?;
        rep.push("gradient", "mean-field 3 steps wrt kernel weights", e, Relation::Below, FD_TOLERANCE);
    }

    // full objective with R held fixed at its value for the current θ
    for variant in [Variant::AdvFcn, Variant::AdvFcnCrf] {
        let model = Model::with_configs(variant, tiny_architectures(COMPOSITE_SIZE), prior.clone(), crf)?;
        let params = random_params(&mut rng, &model)?;
        let batch: Vec<&Example> = examples.iter().take(2).collect();
        let (eps, lambda) = (0.5, 0.5);
        let obj = batch_objective(&model, &params, &batch, eps, lambda)?;
        let r = batch_perturbations(&model, &params, &batch, eps)?;
        let f = |p: &ParamMap| objective_with_fixed_perturbations(&model, p, &batch, &r, lambda);
        let e = check_params(&mut rng, &f, &params, &obj.grads, PER_TENSOR, c)?;
        push_split(&mut rep, &format!("{variant} objective wrt parameters"), e);
    }
    Ok(rep)
}

/// Draws one 2×2 instance for the exact-enumeration comparison.
fn random_2x2(rng: &mut ChaCha8Rng) -> Result<(Tensor, KernelMatrices, [f64; 2])> {
    let p: Vec<f64> = (0..4).map(|_| rng.random_range(0.05..0.95)).collect();
    let mut u: Vec<f64> = p.iter().map(|p| -(1.0 - p).ln()).collect();
    u.extend(p.iter().map(|p| -p.ln()));
    let unary = Tensor::new(&[2, 2, 2], u)?;
    let img = uniform(rng, &[1, 2, 2], 0.0, 1.0);
    let k = crf::build_kernels(&img, Bandwidths::default())?;
    let w = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
    Ok((unary, k, w))
}

/// Share of seeded 2×2 instances where the mean-field argmax (test-time step
/// count) equals the argmax of the exact marginals at every pixel.
pub fn exact_agreement(seed: u64, instances: usize) -> Result<f64> {
    let mut rng = sub_rng(seed, Stream::Test, 300);
    let steps = CrfSettings::default().steps_test;
    let mut agree = 0;
    for _ in 0..instances {
        let (u, k, w) = random_2x2(&mut rng)?;
        let mf = crf::infer_marginals(&u, &k, w, steps)?;
        let ex = crf::exact_marginals(&u, &k, w)?;
        agree += (crf::argmax_labels(&mf) == crf::argmax_labels(&ex)) as usize;
    }
    Ok(agree as f64 / instances as f64)
}

pub fn crf_checks(seed: u64) -> Result<Report> {
    let mut rng = sub_rng(seed, Stream::Test, 400);
    let mut rep = Report::default();
    let unary = uniform(&mut rng, &[2, 40, 40], 0.0, 3.0);
    let img = uniform(&mut rng, &[1, 40, 40], 0.0, 1.0);
    let k = crf::build_kernels(&img, Bandwidths::default())?;

    let base = crf::unary_softmax(&unary)?;
    let mut worst: f64 = 0.0;
    for steps in 1..=10 {
        let q = crf::infer_marginals(&unary, &k, [0.0, 0.0], steps)?;
        worst = worst.max(q.sub(&base)?.max_abs());
    }
    rep.push("crf", "zero weights equal unary softmax, 1-10 steps", worst, Relation::AtMost, 0.0);

    let tape = Tape::new();
    let u = tape.leaf(unary.clone());
    let w = tape.leaf(Tensor::new(&[2], vec![1.0, 1.0])?);
    let mut q = crf::meanfield_init(u)?;
    let n = 1600;
    let mut dev: f64 = 0.0;
    for _ in 0..10 {
        q = crf::meanfield_step(q, u, &k, w)?;
        let v = q.value();
        for p in 0..n {
            dev = dev.max((v.data()[p] + v.data()[n + p] - 1.0).abs());
        }
    }
    rep.push("crf", "per-pixel normalisation over 10 steps", dev, Relation::AtMost, NORMALISATION_TOLERANCE);

    let rate = exact_agreement(seed, EXACT_INSTANCES)?;
    rep.push("crf", format!("2x2 mean-field vs exact argmax ({EXACT_INSTANCES} inst.)"), rate, Relation::AtLeast, MIN_EXACT_AGREEMENT);

    // three mass-leaning pixels pull the fourth over
    let p = [0.8, 0.8, 0.8, 0.4];
    let mut d: Vec<f64> = p.iter().map(|p: &f64| -(1.0 - p).ln()).collect();
    d.extend(p.iter().map(|p: &f64| -p.ln()));
    let u4 = Tensor::new(&[2, 2, 2], d)?;
    let k4 = crf::build_kernels(&Tensor::full(&[1, 2, 2], 0.5), Bandwidths::default())?;
    let mf = crf::infer_marginals(&u4, &k4, [0.0, 1.0], 10)?;
    let exact = crf::exact_marginals(&u4, &k4, [0.0, 1.0])?;
    // smaller of the two posteriors must still favour mass
    let p_mass = mf.at(&[1, 1, 1]).min(exact.at(&[1, 1, 1]));
    rep.push("crf", "2x2 odd pixel flips to mass (min P(mass))", p_mass, Relation::Above, 0.5);
    Ok(rep)
}

pub fn perturbation_checks(seed: u64) -> Result<Report> {
    let mut rng = sub_rng(seed, Stream::Test, 500);
    let mut rep = Report::default();
    let (mut norm_err, mut dir_err): (f64, f64) = (0.0, 0.0);
    for i in 0..200 {
        let scale = 10f64.powf(rng.random_range(-6.0..3.0));
        let g = uniform(&mut rng, &[1, 40, 40], -scale, scale);
        let eps = match i % 3 {
            0 => 0.1,
            1 => 0.5,
            _ => rng.random_range(0.0..1.0),
        };
        let r = perturbation(&g, eps)?;
        norm_err = norm_err.max((r.norm() - eps).abs());
        let target = -eps * g.norm();
        dir_err = dir_err.max((r.dot(&g)? - target).abs() / target.abs().max(f64::MIN_POSITIVE));
    }
    rep.push("perturb", "| ||R|| - eps | over 200 gradients", norm_err, Relation::AtMost, PERTURBATION_TOLERANCE);
    rep.push("perturb", "relative error of <R,g> = -eps ||g||", dir_err, Relation::AtMost, PERTURBATION_TOLERANCE);
    let zero = perturbation(&Tensor::zeros(&[1, 40, 40]), 0.5)?.max_abs();
    rep.push("perturb", "zero gradient gives zero perturbation", zero, Relation::AtMost, 0.0);
    let g = Tensor::new(&[2], vec![3.0, 4.0])?;
    let r = perturbation(&g, 0.1)?;
    let e = (r.data()[0] + 0.06).abs().max((r.data()[1] + 0.08).abs());
    rep.push("perturb", "g=(3,4), eps=0.1 gives (-0.06,-0.08)", e, Relation::AtMost, 1e-15);
    Ok(rep)
}

/// Largest absolute difference between two training states; 0 means bitwise
/// equal values (NaN-free states assumed).
pub fn state_distance(a: &TrainState, b: &TrainState) -> f64 {
    if a.step != b.step || a.epoch != b.epoch || a.params.len() != b.params.len() {
        return f64::INFINITY;
    }
    let mut worst: f64 = 0.0;
    for (ma, mb) in [(&a.params, &b.params), (&a.m, &b.m), (&a.v, &b.v)] {
        for (k, ta) in ma {
            match mb.get(k) {
                Some(tb) if tb.shape() == ta.shape() => {
                    for (x, y) in ta.data().iter().zip(tb.data()) {
                        if x.to_bits() != y.to_bits() {
                            worst = worst.max((x - y).abs()).max(f64::MIN_POSITIVE);
                        }
                    }
                }
                _ => return f64::INFINITY,
            }
        }
    }
    worst
}

/// Trains each adversarial variant at `ε = 0` next to its clean counterpart
/// for two epochs and measures how far the states drift apart.
pub fn variant_lattice(seed: u64) -> Result<Report> {
    let mut rep = Report::default();
    let (examples, prior) = tiny_examples(seed, COMPOSITE_SIZE, 6)?;
    let crf = CrfSettings { steps_train: 2, steps_test: 2, ..CrfSettings::default() };
    for adv in [Variant::AdvFcn, Variant::AdvFcnCrf, Variant::AdvMultiFcn, Variant::AdvMultiFcnCrf] {
        let mut states = Vec::new();
        for (variant, epsilon) in [(adv.clean(), 0.1), (adv, 0.0)] {
            let model = Model::with_configs(variant, tiny_architectures(COMPOSITE_SIZE), prior.clone(), crf)?;
            let cfg = AdvConfig { variant, epsilon, epochs: 2, batch_size: 4, seed, ..AdvConfig::default() };
            let mut state = TrainState::new(model.init_params(seed)?);
            for _ in 0..cfg.epochs {
                train_epoch(&model, &cfg, &mut state, &examples)?;
            }
            states.push(state);
        }
        let d = state_distance(&states[0], &states[1]);
        rep.push("lattice", format!("{adv} at eps=0 vs {}", adv.clean()), d, Relation::AtMost, 0.0);
    }
    Ok(rep)
}
