//! Fully connected pairwise CRF with Gaussian kernels and Potts compatibility.
//!
//! Mean-field inference is unrolled on the autodiff tape, one recorded
//! sub-graph per step, so gradients reach the unary potentials and the two
//! kernel weights. The kernel matrices themselves are constants.
//!
//! One step, for every pixel `i` and label `l`:
//!
//! ```text
//! msg_m(i,l)  = Σ_{j≠i} k_m(i,j) Q_j(l)          (m = appearance, position)
//! pair(i,l)   = Σ_m w_m msg_m(i,l)
//! compat(i,l) = Σ_{l'} μ(l,l') pair(i,l')        (Potts: μ = 1 iff l ≠ l')
//! Q_i(l)      ∝ exp(-ψ_u(i,l) - compat(i,l))
//! ```

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConstMatrix, Tape, Var};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Bandwidths of the two Gaussian kernels. Intensities are in image units,
/// positions in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Bandwidths {
    pub appearance: f64,
    pub position: f64,
}

impl Default for Bandwidths {
    fn default() -> Self {
        Self { appearance: 0.1, position: 5.0 }
    }
}

/// Non-learned CRF settings. The learnable kernel weights live with the
/// other parameters under [`KERNEL_WEIGHTS`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrfSettings {
    pub steps_train: usize,
    pub steps_test: usize,
    pub bandwidths: Bandwidths,
}

impl Default for CrfSettings {
    fn default() -> Self {
        Self { steps_train: 5, steps_test: 10, bandwidths: Bandwidths::default() }
    }
}

impl CrfSettings {
    pub fn validate(&self) -> Result<()> {
        if self.steps_train == 0 || self.steps_test == 0 {
            return Err(Error::Contract("CRF step counts must be at least 1".into()));
        }
        if !(self.bandwidths.appearance > 0.0 && self.bandwidths.position > 0.0) {
            return Err(Error::Contract("CRF bandwidths must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter name of the `[2]` tensor `(w_appearance, w_position)`.
pub const KERNEL_WEIGHTS: &str = "crf.kernel_weights";
pub const INITIAL_KERNEL_WEIGHTS: [f64; 2] = [0.5, 0.5];

/// Potts label compatibility.
pub fn potts(l: usize, l2: usize) -> f64 {
    if l == l2 {
        0.0
    } else {
        1.0
    }
}

/// Dense `N×N` appearance and position kernels with zeroed diagonals.
#[derive(Clone, Debug)]
pub struct KernelMatrices {
    pub appearance: Rc<ConstMatrix>,
    pub position: Rc<ConstMatrix>,
}

fn gaussian_matrix(n: usize, dist_sq: impl Fn(usize, usize) -> f64, bandwidth: f64) -> ConstMatrix {
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let k = (-dist_sq(i, j) * inv).exp();
            data[i * n + j] = k;
            data[j * n + i] = k;
        }
    }
    ConstMatrix { n, data }
}

/// Position kernel `exp(-‖p_i - p_j‖² / 2θ²)` on an `h×w` grid.
pub fn position_kernel(h: usize, w: usize, bandwidth: f64) -> Rc<ConstMatrix> {
    let pos = |i: usize| ((i / w) as f64, (i % w) as f64);
    Rc::new(gaussian_matrix(
        h * w,
        |i, j| {
            let (a, b) = (pos(i), pos(j));
            (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
        },
        bandwidth,
    ))
}

/// Appearance kernel `exp(-|I_i - I_j|² / 2θ²)` from a `[1,H,W]` image.
pub fn appearance_kernel(image: &Tensor, bandwidth: f64) -> Result<Rc<ConstMatrix>> {
    let (c, h, w) = image.chw()?;
    if c != 1 {
        return Err(Error::Shape(format!("appearance kernel needs one channel, got {c}")));
    }
    let d = image.data();
    Ok(Rc::new(gaussian_matrix(h * w, |i, j| (d[i] - d[j]).powi(2), bandwidth)))
}

pub fn build_kernels(image: &Tensor, bandwidths: Bandwidths) -> Result<KernelMatrices> {
    let (_, h, w) = image.chw()?;
    Ok(KernelMatrices {
        appearance: appearance_kernel(image, bandwidths.appearance)?,
        position: position_kernel(h, w, bandwidths.position),
    })
}

/// `Q_i ∝ exp(-ψ_u(i))`.
pub fn meanfield_init<'t>(unary: Var<'t>) -> Result<Var<'t>> {
    unary.neg().softmax_pixelwise()
}

/// Unnormalised log-marginals of one mean-field update:
/// `-ψ_u - compat(Σ_m w_m K_m Q)`. `weights` is the `[2]` kernel-weight tensor.
pub fn meanfield_logits<'t>(
    q: Var<'t>,
    unary: Var<'t>,
    kernels: &KernelMatrices,
    weights: Var<'t>,
) -> Result<Var<'t>> {
    let (l, _, _) = q.value().chw()?;
    if l != 2 {
        return Err(Error::Shape(format!("Potts step is implemented for 2 labels, got {l}")));
    }
    let app = q.mat_apply(Rc::clone(&kernels.appearance))?;
    let pos = q.mat_apply(Rc::clone(&kernels.position))?;
    let pair = app.scale_by(weights, 0)?.add(pos.scale_by(weights, 1)?)?;
    let compat = pair.potts()?;
    unary.neg().sub(compat)
}

/// One mean-field update.
pub fn meanfield_step<'t>(
    q: Var<'t>,
    unary: Var<'t>,
    kernels: &KernelMatrices,
    weights: Var<'t>,
) -> Result<Var<'t>> {
    meanfield_logits(q, unary, kernels, weights)?.softmax_pixelwise()
}

/// `steps` mean-field updates from [`meanfield_init`]. `steps = 0` returns
/// the initialisation.
pub fn crf_infer<'t>(
    unary: Var<'t>,
    kernels: &KernelMatrices,
    weights: Var<'t>,
    steps: usize,
) -> Result<Var<'t>> {
    let mut q = meanfield_init(unary)?;
    for _ in 0..steps {
        q = meanfield_step(q, unary, kernels, weights)?;
    }
    Ok(q)
}

/// Same recursion as [`crf_infer`] but returns `ln Q`, normalising the last
/// step in log space so the likelihood never sees `ln 0`.
pub fn crf_log_marginals<'t>(
    unary: Var<'t>,
    kernels: &KernelMatrices,
    weights: Var<'t>,
    steps: usize,
) -> Result<Var<'t>> {
    if steps == 0 {
        return unary.neg().log_softmax_pixelwise();
    }
    let mut q = meanfield_init(unary)?;
    for _ in 1..steps {
        q = meanfield_step(q, unary, kernels, weights)?;
    }
    meanfield_logits(q, unary, kernels, weights)?.log_softmax_pixelwise()
}

/// Tape-free convenience wrapper around [`crf_infer`].
pub fn infer_marginals(unary: &Tensor, kernels: &KernelMatrices, weights: [f64; 2], steps: usize) -> Result<Tensor> {
    let tape = Tape::new();
    let u = tape.leaf(unary.clone());
    let w = tape.leaf(Tensor::new(&[2], weights.to_vec())?);
    Ok((*crf_infer(u, kernels, w, steps)?.value()).clone())
}

/// Largest grid accepted by [`exact_marginals`].
pub const MAX_EXACT_PIXELS: usize = 16;

/// Gibbs energy of one labelling (bit `i` of `labels` is pixel `i`'s label).
pub fn gibbs_energy(unary: &Tensor, kernels: &KernelMatrices, weights: [f64; 2], labels: u32) -> f64 {
    let n = kernels.position.n;
    let u = unary.data();
    let lab = |i: usize| ((labels >> i) & 1) as usize;
    let mut e: f64 = (0..n).map(|i| u[lab(i) * n + i]).sum();
    for i in 0..n {
        for j in i + 1..n {
            let mu = potts(lab(i), lab(j));
            if mu != 0.0 {
                e += mu
                    * (weights[0] * kernels.appearance.at(i, j) + weights[1] * kernels.position.at(i, j));
            }
        }
    }
    e
}

/// Exact marginals of `P(y) ∝ exp(-E(y))` by enumerating all labellings.
pub fn exact_marginals(unary: &Tensor, kernels: &KernelMatrices, weights: [f64; 2]) -> Result<Tensor> {
    let (l, h, w) = unary.chw()?;
    let n = h * w;
    if l != 2 {
        return Err(Error::Shape(format!("exact marginals need 2 labels, got {l}")));
    }
    if n > MAX_EXACT_PIXELS {
        return Err(Error::Contract(format!(
            "exact enumeration limited to {MAX_EXACT_PIXELS} pixels, got {n}"
        )));
    }
    if kernels.position.n != n || kernels.appearance.n != n {
        return Err(Error::Shape("kernel order does not match unary".into()));
    }
    let energies: Vec<f64> = (0..1u32 << n).map(|y| gibbs_energy(unary, kernels, weights, y)).collect();
    let e_min = energies.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    let mut mass = vec![0.0; n];
    for (y, e) in energies.iter().enumerate() {
        let p = (e_min - e).exp();
        z += p;
        for (i, m) in mass.iter_mut().enumerate() {
            if (y >> i) & 1 == 1 {
                *m += p;
            }
        }
    }
    let mut out = Vec::with_capacity(2 * n);
    out.extend(mass.iter().map(|m| 1.0 - m / z));
    out.extend(mass.iter().map(|m| m / z));
    Tensor::new(&[2, h, w], out)
}

/// Per-pixel argmax label of a `[2,H,W]` field, ties to background.
pub fn argmax_labels(q: &Tensor) -> Vec<u8> {
    let n = q.len() / 2;
    (0..n).map(|p| (q.data()[n + p] > q.data()[p]) as u8).collect()
}

/// `softmax(-unary)` without a tape.
pub fn unary_softmax(unary: &Tensor) -> Result<Tensor> {
    ops::softmax_pixelwise(&unary.scale(-1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unary_from_probs(p_mass: &[f64], h: usize, w: usize) -> Tensor {
        let mut d: Vec<f64> = p_mass.iter().map(|p| -(1.0 - p).ln()).collect();
        d.extend(p_mass.iter().map(|p| -p.ln()));
        Tensor::new(&[2, h, w], d).unwrap()
    }

    #[test]
    fn kernel_values() {
        let img = Tensor::new(&[1, 1, 2], vec![0.0, 1.0]).unwrap();
        let k = build_kernels(&img, Bandwidths { appearance: 1.0, position: 1.0 }).unwrap();
        let e = (-0.5f64).exp();
        assert!((k.appearance.at(0, 1) - e).abs() < 1e-15);
        assert!((e - 0.606531).abs() < 1e-6);
        assert!((k.position.at(0, 1) - e).abs() < 1e-15);
        assert_eq!(k.appearance.at(0, 0), 0.0);
    }

    #[test]
    fn kernels_symmetric_bounded() {
        let img = Tensor::from_fn(&[1, 4, 5], |i| ((i * 37) % 11) as f64 / 11.0);
        let k = build_kernels(&img, Bandwidths::default()).unwrap();
        for m in [&k.appearance, &k.position] {
            for i in 0..20 {
                assert_eq!(m.at(i, i), 0.0);
                for j in 0..20 {
                    assert_eq!(m.at(i, j), m.at(j, i));
                    assert!((0.0..=1.0).contains(&m.at(i, j)));
                }
            }
        }
    }

    #[test]
    fn init_examples() {
        let q = unary_softmax(&Tensor::zeros(&[2, 1, 1])).unwrap();
        assert_eq!(q.data(), &[0.5, 0.5]);
        let u = Tensor::new(&[2, 1, 1], vec![-(0.9f64.ln()), -(0.1f64.ln())]).unwrap();
        let q = unary_softmax(&u).unwrap();
        assert!((q.data()[0] - 0.9).abs() < 1e-15 && (q.data()[1] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_reduce_to_unary() {
        let u = Tensor::from_fn(&[2, 3, 3], |i| ((i * 13) % 7) as f64 * 0.3 - 1.0);
        let img = Tensor::from_fn(&[1, 3, 3], |i| i as f64 / 9.0);
        let k = build_kernels(&img, Bandwidths::default()).unwrap();
        let base = unary_softmax(&u).unwrap();
        for steps in 0..=10 {
            assert_eq!(infer_marginals(&u, &k, [0.0, 0.0], steps).unwrap(), base);
        }
    }

    #[test]
    fn single_pixel_has_no_messages() {
        let u = Tensor::new(&[2, 1, 1], vec![0.2, 1.3]).unwrap();
        let k = build_kernels(&Tensor::full(&[1, 1, 1], 0.4), Bandwidths::default()).unwrap();
        assert_eq!(infer_marginals(&u, &k, [0.7, 0.9], 3).unwrap(), unary_softmax(&u).unwrap());
    }

    #[test]
    fn two_pixel_step_matches_hand_update() {
        let u = Tensor::new(&[2, 1, 2], vec![0.3, 1.1, 0.9, 0.2]).unwrap();
        let k = KernelMatrices {
            appearance: Rc::new(ConstMatrix::new(2, vec![0.0, 0.4, 0.4, 0.0]).unwrap()),
            position: Rc::new(ConstMatrix::new(2, vec![0.0, 0.7, 0.7, 0.0]).unwrap()),
        };
        let w = [0.8, 0.5];
        let got = infer_marginals(&u, &k, w, 1).unwrap();

        // hand-unrolled: q0 from unaries, then one update
        let q0 = |i: usize, l: usize| {
            let (a, b) = ((-u.at(&[0, 0, i])).exp(), (-u.at(&[1, 0, i])).exp());
            [a, b][l] / (a + b)
        };
        let coupling = w[0] * 0.4 + w[1] * 0.7;
        for i in 0..2 {
            let j = 1 - i;
            // Potts: label l is penalised by neighbour mass on the other label
            let s0 = -u.at(&[0, 0, i]) - coupling * q0(j, 1);
            let s1 = -u.at(&[1, 0, i]) - coupling * q0(j, 0);
            let p1 = s1.exp() / (s0.exp() + s1.exp());
            assert!((got.at(&[1, 0, i]) - p1).abs() < 1e-14);
        }
    }

    #[test]
    fn inference_smooths_odd_pixel() {
        let u = unary_from_probs(&[0.8, 0.8, 0.8, 0.4], 2, 2);
        let img = Tensor::full(&[1, 2, 2], 0.5);
        let k = build_kernels(&img, Bandwidths { appearance: 0.1, position: 5.0 }).unwrap();
        let w = [0.0, 1.0];
        let mf = infer_marginals(&u, &k, w, 10).unwrap();
        assert!(unary_softmax(&u).unwrap().at(&[1, 1, 1]) < 0.5);
        assert!(mf.at(&[1, 1, 1]) > 0.5);
        let exact = exact_marginals(&u, &k, w).unwrap();
        assert!(exact.at(&[1, 1, 1]) > 0.5);
    }

    #[test]
    fn exact_zero_coupling_is_unary() {
        let u = Tensor::from_fn(&[2, 2, 2], |i| (i as f64 * 0.77).sin());
        let k = build_kernels(&Tensor::from_fn(&[1, 2, 2], |i| i as f64 * 0.1), Bandwidths::default()).unwrap();
        let ex = exact_marginals(&u, &k, [0.0, 0.0]).unwrap();
        let un = unary_softmax(&u).unwrap();
        for (a, b) in ex.data().iter().zip(un.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn exact_symmetric_instance() {
        let u = unary_from_probs(&[0.3, 0.3, 0.3, 0.3], 2, 2);
        let k = build_kernels(&Tensor::full(&[1, 2, 2], 0.2), Bandwidths::default()).unwrap();
        let ex = exact_marginals(&u, &k, [0.6, 0.4]).unwrap();
        for p in 1..4 {
            assert!((ex.data()[4 + p] - ex.data()[4]).abs() < 1e-14);
        }
    }

    #[test]
    fn exact_rejects_large_grid() {
        let u = Tensor::zeros(&[2, 5, 4]);
        let k = build_kernels(&Tensor::zeros(&[1, 5, 4]), Bandwidths::default()).unwrap();
        assert!(matches!(exact_marginals(&u, &k, [0.1, 0.1]), Err(Error::Contract(_))));
    }

    #[test]
    fn marginals_stay_normalised() {
        let u = Tensor::from_fn(&[2, 4, 4], |i| ((i * 29) % 17) as f64 * 0.4 - 3.0);
        let img = Tensor::from_fn(&[1, 4, 4], |i| ((i * 5) % 7) as f64 / 7.0);
        let k = build_kernels(&img, Bandwidths::default()).unwrap();
        let tape = Tape::new();
        let uv = tape.leaf(u);
        let w = tape.leaf(Tensor::new(&[2], vec![3.0, 2.0]).unwrap());
        let mut q = meanfield_init(uv).unwrap();
        for _ in 0..10 {
            q = meanfield_step(q, uv, &k, w).unwrap();
            let v = q.value();
            for p in 0..16 {
                assert!((v.data()[p] + v.data()[16 + p] - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn log_marginals_agree_with_marginals() {
        let u = Tensor::from_fn(&[2, 3, 4], |i| ((i * 11) % 5) as f64 * 0.7 - 1.2);
        let img = Tensor::from_fn(&[1, 3, 4], |i| ((i * 3) % 7) as f64 / 7.0);
        let k = build_kernels(&img, Bandwidths::default()).unwrap();
        let tape = Tape::new();
        let uv = tape.leaf(u);
        let w = tape.leaf(Tensor::new(&[2], vec![1.5, 0.8]).unwrap());
        for steps in 0..6 {
            let q = crf_infer(uv, &k, w, steps).unwrap().value();
            let lq = crf_log_marginals(uv, &k, w, steps).unwrap().value();
            for (a, b) in q.data().iter().zip(lq.data()) {
                assert!((a - b.exp()).abs() < 1e-13);
            }
        }
    }
}
