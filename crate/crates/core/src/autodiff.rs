//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation on a [`Var`] evaluates eagerly and appends a node to the
//! [`Tape`]. [`Tape::backward`] walks the nodes in exact reverse recording
//! order and accumulates gradients. Values are immutable once recorded.
//!
//! ```
//! use advseg::autodiff::Tape;
//! use advseg::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
//! let loss = x.mul(x).unwrap().sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, -4.0, 1.0]);
//! ```

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ops::{self, Padding};
use crate::tensor::Tensor;

/// Dense square matrix treated as a constant by differentiation.
#[derive(Debug, Clone)]
pub struct ConstMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl ConstMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Shape(format!("matrix of order {n} needs {} entries", n * n)));
        }
        Ok(Self { n, data })
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// `out[c] = M · x[c]` for each leading-axis slice of `x`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.apply_impl(x, false)
    }

    fn apply_impl(&self, x: &Tensor, transpose: bool) -> Result<Tensor> {
        let per = x.len() / x.shape()[0];
        if per != self.n {
            return Err(Error::Shape(format!(
                "matrix of order {} applied to slices of length {per}",
                self.n
            )));
        }
        let c = x.shape()[0];
        let mut out = vec![0.0; x.len()];
        // out[c×n] = x[c×n] · Mᵀ (or · M when transposed)
        let (rsb, csb) = if transpose { (self.n, 1) } else { (1, self.n) };
        ops::gemm(c, self.n, self.n, x.data(), self.n, 1, &self.data, rsb, csb, &mut out, false);
        Tensor::new(x.shape(), out)
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    ScaleConst(usize, f64),
    /// `x * s[index]` where `s` is any tensor.
    ScaleBy { x: usize, s: usize, index: usize },
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Conv2d { input: usize, kernels: usize, bias: usize, padding: Padding, cols: Vec<f64> },
    TransposeConv2d { input: usize, kernels: usize },
    ChannelBias { x: usize, bias: usize },
    MaxPool2 { input: usize, argmax: Vec<usize> },
    Softmax(usize),
    LogSoftmax(usize),
    /// `-scale * Σ_p x[label_p, p]` over the spatial positions of `[L,H,W]`.
    PickNll { x: usize, labels: Rc<Vec<usize>>, scale: f64 },
    MatApply { x: usize, matrix: Rc<ConstMatrix> },
    /// `out[l] = Σ_{l'≠l} x[l']` (Potts compatibility transform).
    Potts(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    name: Option<String>,
}

/// Records operations for one forward pass. Single-threaded by construction.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, name: None });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Records an input or parameter.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Records a leaf whose gradient is reported under `name` by
    /// [`Gradients::named`].
    pub fn named_leaf(&self, name: &str, value: Tensor) -> Var<'_> {
        let v = self.push(value, Op::Leaf);
        self.nodes.borrow_mut()[v.id].name = Some(name.to_string());
        v
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to every
    /// recorded value.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(loss.tape, self), "loss recorded on another tape");
        let nodes = self.nodes.borrow();
        if !nodes[loss.id].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::new(nodes[loss.id].value.shape(), vec![1.0])?);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            let mut acc = |target: usize, delta: Tensor| -> Result<()> {
                match &mut grads[target] {
                    Some(t) => t.add_assign(&delta),
                    slot @ None => {
                        *slot = Some(delta);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(*a, g.clone())?;
                    acc(*b, g.clone())?;
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone())?;
                    acc(*b, g.scale(-1.0))?;
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip_map(val(*b), |g, y| g * y)?)?;
                    acc(*b, g.zip_map(val(*a), |g, x| g * x)?)?;
                }
                Op::Neg(a) => acc(*a, g.scale(-1.0))?,
                Op::ScaleConst(a, k) => acc(*a, g.scale(*k))?,
                Op::ScaleBy { x, s, index } => {
                    let sv = val(*s);
                    acc(*x, g.scale(sv.data()[*index]))?;
                    let mut ds = Tensor::zeros(sv.shape());
                    ds.data_mut()[*index] = g.dot(val(*x))?;
                    acc(*s, ds)?;
                }
                Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |g, y| g * (1.0 - y * y))?)?,
                Op::Exp(a) => acc(*a, g.zip_map(&node.value, |g, y| g * y)?)?,
                Op::Log(a) => acc(*a, g.zip_map(val(*a), |g, x| g / x)?)?,
                Op::Sum(a) => acc(*a, Tensor::full(val(*a).shape(), g.item()))?,
                Op::Conv2d { input, kernels, bias, padding, cols } => {
                    let (di, dk, db) =
                        ops::conv2d_backward(val(*input), val(*kernels), *padding, cols, &g)?;
                    acc(*input, di)?;
                    acc(*kernels, dk)?;
                    acc(*bias, db)?;
                }
                Op::TransposeConv2d { input, kernels } => {
                    let (di, dk) = ops::transpose_conv2d_backward(val(*input), val(*kernels), &g)?;
                    acc(*input, di)?;
                    acc(*kernels, dk)?;
                }
                Op::ChannelBias { x, bias } => {
                    let c = g.shape()[0];
                    let db = (0..c).map(|ch| g.channel(ch).iter().sum()).collect();
                    acc(*bias, Tensor::new(&[c], db)?)?;
                    acc(*x, g)?;
                }
                Op::MaxPool2 { input, argmax } => {
                    let mut di = Tensor::zeros(val(*input).shape());
                    let d = di.data_mut();
                    for (gv, &src) in g.data().iter().zip(argmax) {
                        d[src] += gv;
                    }
                    acc(*input, di)?;
                }
                Op::Softmax(a) => {
                    // dx_l = y_l (g_l - Σ_k g_k y_k)
                    let y = &node.value;
                    let (l, h, w) = y.chw()?;
                    let n = h * w;
                    let (yd, gd) = (y.data(), g.data());
                    let mut dx = vec![0.0; yd.len()];
                    for p in 0..n {
                        let s: f64 = (0..l).map(|c| gd[c * n + p] * yd[c * n + p]).sum();
                        for c in 0..l {
                            dx[c * n + p] = yd[c * n + p] * (gd[c * n + p] - s);
                        }
                    }
                    acc(*a, Tensor::new(y.shape(), dx)?)?;
                }
                Op::LogSoftmax(a) => {
                    // dx_l = g_l - exp(y_l) Σ_k g_k
                    let y = &node.value;
                    let (l, h, w) = y.chw()?;
                    let n = h * w;
                    let (yd, gd) = (y.data(), g.data());
                    let mut dx = vec![0.0; yd.len()];
                    for p in 0..n {
                        let s: f64 = (0..l).map(|c| gd[c * n + p]).sum();
                        for c in 0..l {
                            dx[c * n + p] = gd[c * n + p] - yd[c * n + p].exp() * s;
                        }
                    }
                    acc(*a, Tensor::new(y.shape(), dx)?)?;
                }
                Op::PickNll { x, labels, scale } => {
                    let xs = val(*x);
                    let n = labels.len();
                    let mut dx = Tensor::zeros(xs.shape());
                    let d = dx.data_mut();
                    let coef = -scale * g.item();
                    for (p, &l) in labels.iter().enumerate() {
                        d[l * n + p] = coef;
                    }
                    acc(*x, dx)?;
                }
                Op::MatApply { x, matrix } => acc(*x, matrix.apply_impl(&g, true)?)?,
                Op::Potts(a) => acc(*a, potts(&g)?)?,
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let names = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.name.clone().map(|s| (s, i)))
            .collect();
        Ok(Gradients { grads, shapes, names })
    }
}

fn potts(x: &Tensor) -> Result<Tensor> {
    let (l, h, w) = x.chw()?;
    let n = h * w;
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    for p in 0..n {
        let total: f64 = (0..l).map(|c| d[c * n + p]).sum();
        for c in 0..l {
            out[c * n + p] = if l == 2 { d[(1 - c) * n + p] } else { total - d[c * n + p] };
        }
    }
    Tensor::new(x.shape(), out)
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    names: BTreeMap<String, usize>,
}

impl Gradients {
    /// Gradient with respect to `v`; exactly zero when `v` does not reach the loss.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.by_id(v.id)
    }

    fn by_id(&self, id: usize) -> Tensor {
        self.grads[id].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[id]))
    }

    /// Gradients of every leaf recorded with [`Tape::named_leaf`].
    pub fn named(&self) -> BTreeMap<String, Tensor> {
        self.names.iter().map(|(k, &id)| (k.clone(), self.by_id(id))).collect()
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op)
    }

    fn check_same(self, other: Var<'t>) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
        Ok((self.value(), other.value()))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.check_same(other)?;
        Ok(self.unary(a.add(&b)?, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.check_same(other)?;
        Ok(self.unary(a.sub(&b)?, Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.check_same(other)?;
        Ok(self.unary(a.zip_map(&b, |x, y| x * y)?, Op::Mul(self.id, other.id)))
    }

    pub fn neg(self) -> Var<'t> {
        let v = self.value().scale(-1.0);
        self.unary(v, Op::Neg(self.id))
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        let v = self.value().scale(k);
        self.unary(v, Op::ScaleConst(self.id, k))
    }

    /// `self * s[index]`, differentiable in both.
    pub fn scale_by(self, s: Var<'t>, index: usize) -> Result<Var<'t>> {
        let sv = s.value();
        if index >= sv.len() {
            return Err(Error::Shape(format!("scale index {index} out of {:?}", sv.shape())));
        }
        let v = self.value().scale(sv.data()[index]);
        Ok(self.unary(v, Op::ScaleBy { x: self.id, s: s.id, index }))
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().map(f64::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.value().map(f64::ln);
        self.unary(v, Op::Log(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn conv2d(self, kernels: Var<'t>, bias: Var<'t>, padding: Padding) -> Result<Var<'t>> {
        let (out, cols) =
            ops::conv2d_with_cols(&self.value(), &kernels.value(), &bias.value(), padding)?;
        Ok(self.unary(
            out,
            Op::Conv2d { input: self.id, kernels: kernels.id, bias: bias.id, padding, cols },
        ))
    }

    pub fn transpose_conv2d(self, kernels: Var<'t>) -> Result<Var<'t>> {
        let out = ops::transpose_conv2d(&self.value(), &kernels.value())?;
        Ok(self.unary(out, Op::TransposeConv2d { input: self.id, kernels: kernels.id }))
    }

    /// Adds `bias[c]` to every element of channel `c`.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let b = bias.value();
        let c = x.shape()[0];
        b.expect_shape(&[c], "channel bias")?;
        let per = x.len() / c;
        let mut out = (*x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b.data()[i / per];
        }
        Ok(self.unary(out, Op::ChannelBias { x: self.id, bias: bias.id }))
    }

    pub fn maxpool2(self) -> Result<Var<'t>> {
        let (out, argmax) = ops::maxpool2(&self.value())?;
        Ok(self.unary(out, Op::MaxPool2 { input: self.id, argmax }))
    }

    pub fn softmax_pixelwise(self) -> Result<Var<'t>> {
        let out = ops::softmax_pixelwise(&self.value())?;
        Ok(self.unary(out, Op::Softmax(self.id)))
    }

    pub fn log_softmax_pixelwise(self) -> Result<Var<'t>> {
        let out = ops::log_softmax_pixelwise(&self.value())?;
        Ok(self.unary(out, Op::LogSoftmax(self.id)))
    }

    /// `-scale · Σ_p self[labels[p], p]` for a `[L,H,W]` tensor of
    /// log-probabilities and one label per pixel.
    pub fn pick_nll(self, labels: Rc<Vec<usize>>, scale: f64) -> Result<Var<'t>> {
        let x = self.value();
        let (l, h, w) = x.chw()?;
        let n = h * w;
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {h}x{w} pixels", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&lab| lab >= l) {
            return Err(Error::Contract(format!("label {bad} out of range for {l} classes")));
        }
        let d = x.data();
        let s: f64 = labels.iter().enumerate().map(|(p, &lab)| d[lab * n + p]).sum();
        Ok(self.unary(Tensor::scalar(-scale * s), Op::PickNll { x: self.id, labels, scale }))
    }

    /// Applies a constant matrix to each leading-axis slice.
    pub fn mat_apply(self, matrix: Rc<ConstMatrix>) -> Result<Var<'t>> {
        let out = matrix.apply(&self.value())?;
        Ok(self.unary(out, Op::MatApply { x: self.id, matrix }))
    }

    pub fn potts(self) -> Result<Var<'t>> {
        let out = potts(&self.value())?;
        Ok(self.unary(out, Op::Potts(self.id)))
    }
}

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error with the denominator floored at `1e-8`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central-difference gradient of a scalar function at `x`, restricted to
/// `coords` (all coordinates when `None`).
pub fn numeric_gradient<F>(f: &F, x: &Tensor, step: f64, coords: Option<&[usize]>) -> Result<Vec<f64>>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::Contract("finite-difference step must be positive".into()));
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + step;
            let fp = f(&probe)?;
            probe.data_mut()[i] = orig - step;
            let fm = f(&probe)?;
            probe.data_mut()[i] = orig;
            Ok((fp - fm) / (2.0 * step))
        })
        .collect()
}

/// Compares `analytic` with central differences of `f` at `x`.
pub fn compare_gradient<F>(
    f: &F,
    x: &Tensor,
    analytic: &Tensor,
    step: f64,
    coords: Option<&[usize]>,
) -> Result<FdReport>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    x.expect_same_shape(analytic)?;
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let numeric = numeric_gradient(f, x, step, Some(coords))?;
    let mut report = FdReport { max_rel_error: 0.0, worst_index: 0, checked: coords.len() };
    for (&i, n) in coords.iter().zip(&numeric) {
        let e = rel_error(analytic.data()[i], *n);
        if e > report.max_rel_error || e.is_nan() {
            report.max_rel_error = e;
            report.worst_index = i;
        }
    }
    Ok(report)
}

/// Checks [`Tape::backward`] against central differences for a scalar
/// function built on a fresh tape from the leaf `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64, coords: Option<&[usize]>) -> Result<FdReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let loss = f(&tape, xv)?;
    let analytic = tape.backward(loss)?.wrt(xv);
    let eval = |p: &Tensor| -> Result<f64> {
        let t = Tape::new();
        let v = t.leaf(p.clone());
        Ok(f(&t, v)?.value().item())
    };
    compare_gradient(&eval, x, &analytic, step, coords)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed.wrapping_add(0x9e3779b97f4a7c15);
        Tensor::from_fn(shape, |_| {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn sum_and_square_gradients() {
        let x0 = pseudo(&[2, 3], 1);
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let g = tape.backward(x.sum()).unwrap().wrt(x);
        assert!(g.data().iter().all(|&v| v == 1.0));

        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let g = tape.backward(x.mul(x).unwrap().sum()).unwrap().wrt(x);
        for (a, b) in g.data().iter().zip(x0.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn unreachable_gradient_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(pseudo(&[4], 2));
        let y = tape.leaf(pseudo(&[3], 3));
        let _unused = y.tanh();
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.wrt(y).data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(pseudo(&[4], 2));
        assert!(matches!(tape.backward(x.tanh()), Err(Error::Contract(_))));
    }

    #[test]
    fn named_leaves_reported() {
        let tape = Tape::new();
        let w = tape.named_leaf("w", pseudo(&[2], 5));
        let b = tape.named_leaf("b", pseudo(&[2], 6));
        let loss = w.mul(b).unwrap().sum();
        let named = tape.backward(loss).unwrap().named();
        assert_eq!(named.len(), 2);
        assert_eq!(named["w"].data(), b.value().data());
    }

    #[test]
    fn fd_linear_is_exact() {
        let c = pseudo(&[5], 7);
        let r = finite_diff_check(
            |t, x| {
                let cv = t.leaf(c.clone());
                Ok(x.mul(cv)?.sum())
            },
            &pseudo(&[5], 8),
            1e-5,
            None,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn fd_tanh_self_check() {
        let r = finite_diff_check(|_, x| Ok(x.tanh().sum()), &pseudo(&[10], 9), 1e-5, None).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn fd_detects_corrupted_gradient() {
        let x = pseudo(&[6], 10);
        let f = |p: &Tensor| -> Result<f64> { Ok(p.map(f64::tanh).sum()) };
        let wrong = x.map(|v| 1.1 * (1.0 - v.tanh().powi(2)));
        let r = compare_gradient(&f, &x, &wrong, 1e-5, None).unwrap();
        assert!(r.max_rel_error > 1e-2);
    }

    #[test]
    fn backward_visits_in_reverse_order_through_reuse() {
        // y = x*x*x reuses x; gradient 3x² checks accumulation across uses
        let x0 = pseudo(&[3], 11);
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = x.mul(x).unwrap().mul(x).unwrap().sum();
        let g = tape.backward(y).unwrap().wrt(x);
        for (a, v) in g.data().iter().zip(x0.data()) {
            assert!((a - 3.0 * v * v).abs() < 1e-15);
        }
    }
}
