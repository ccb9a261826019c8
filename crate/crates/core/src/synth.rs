//! Seeded synthetic stand-in for mass ROIs.
//!
//! Each sample is a rotated filled ellipse, slightly brighter than its
//! background, near the frame centre, with a soft edge and Gaussian pixel
//! noise. The mask is the exact ellipse interior evaluated at pixel centres.
//! Also here: flip augmentation, per-pixel normalisation and the empirical
//! position prior.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fcn::{PositionPrior, IMAGE_SIZE};
use crate::rng::{sub_rng, Stream};
use crate::tensor::Tensor;

/// Paired image `[1,S,S]` in `[0,1]` and binary mask `[S,S]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub mask: Tensor,
}

impl Sample {
    pub fn new(image: Tensor, mask: Tensor) -> Result<Self> {
        let (c, h, w) = image.chw()?;
        if c != 1 {
            return Err(Error::Shape(format!("sample image must have one channel, got {c}")));
        }
        mask.expect_shape(&[h, w], "sample mask")?;
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Contract("sample mask is not binary".into()));
        }
        if !image.all_finite() {
            return Err(Error::Contract("sample image has non-finite values".into()));
        }
        Ok(Self { image, mask })
    }

    pub fn size(&self) -> usize {
        self.mask.shape()[0]
    }
}

/// Generator parameters. Lengths are in pixels, intensities in `[0,1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSpec {
    pub seed: u64,
    pub count: usize,
    pub size: usize,
    /// Ellipse centres are drawn uniformly from a disk of this radius
    /// around the frame centre.
    pub center_jitter: f64,
    /// Both semi-axes are drawn independently from `[min, max]`.
    pub semi_axis_min: f64,
    pub semi_axis_max: f64,
    /// Rotation drawn from `[0, rotation_max)` radians.
    pub rotation_max: f64,
    pub background_mean: f64,
    pub contrast_gap: f64,
    pub noise_sigma: f64,
    /// Width (pixels) of the logistic ramp across the edge; 0 gives a hard edge.
    pub edge_softness: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 100,
            size: IMAGE_SIZE,
            center_jitter: 4.0,
            semi_axis_min: 5.0,
            semi_axis_max: 11.0,
            rotation_max: std::f64::consts::PI,
            background_mean: 0.35,
            contrast_gap: 0.15,
            noise_sigma: 0.08,
            edge_softness: 1.0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Contract(m));
        if self.count == 0 {
            return fail("sample count must be at least 1".into());
        }
        if self.size < 8 {
            return fail(format!("frame size {} too small", self.size));
        }
        if self.semi_axis_min < 2.0 || self.semi_axis_max < self.semi_axis_min {
            return fail(format!(
                "semi-axis range [{}, {}] invalid (min must be >= 2)",
                self.semi_axis_min, self.semi_axis_max
            ));
        }
        if self.contrast_gap <= 0.0 {
            return fail("contrast gap must be positive".into());
        }
        if self.noise_sigma < 0.0 || self.edge_softness < 0.0 || self.center_jitter < 0.0 {
            return fail("noise, softness and jitter must be non-negative".into());
        }
        let half = self.size as f64 / 2.0;
        if self.center_jitter + self.semi_axis_max > half - 1.0 {
            return fail(format!(
                "ellipse may leave the frame: jitter {} + semi-axis {} exceeds {}",
                self.center_jitter,
                self.semi_axis_max,
                half - 1.0
            ));
        }
        Ok(())
    }

    /// `π·E[a]·E[b]` for independently uniform semi-axes.
    pub fn expected_area(&self) -> f64 {
        let mean = 0.5 * (self.semi_axis_min + self.semi_axis_max);
        std::f64::consts::PI * mean * mean
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    /// `(ρ, approx signed distance)` at a point; `ρ ≤ 1` is inside.
    fn locate(&self, y: f64, x: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let rho = ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt();
        if rho == 0.0 {
            return (0.0, self.a.min(self.b));
        }
        let grad = ((u / (self.a * self.a)).powi(2) + (v / (self.b * self.b)).powi(2)).sqrt() / rho;
        (rho, (1.0 - rho) / grad)
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Deterministic dataset for `spec`. Sample `i` depends only on `(seed, i)`.
pub fn generate(spec: &GenSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..spec.count).map(|i| generate_one(spec, i as u64)).collect()
}

fn generate_one(spec: &GenSpec, index: u64) -> Result<Sample> {
    let mut rng = sub_rng(spec.seed, Stream::Data, index);
    let n = spec.size;
    let half = n as f64 / 2.0;
    let r = spec.center_jitter * rng.random::<f64>().sqrt();
    let phi = rng.random::<f64>() * std::f64::consts::TAU;
    let ellipse = Ellipse {
        cy: half + r * phi.sin(),
        cx: half + r * phi.cos(),
        a: rng.random_range(spec.semi_axis_min..=spec.semi_axis_max),
        b: rng.random_range(spec.semi_axis_min..=spec.semi_axis_max),
        theta: rng.random::<f64>() * spec.rotation_max,
    };
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Contract(e.to_string()))?;
    let fg = spec.background_mean + spec.contrast_gap;

    let mut image = Vec::with_capacity(n * n);
    let mut mask = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let (rho, dist) = ellipse.locate(y as f64 + 0.5, x as f64 + 0.5);
            let inside = rho <= 1.0;
            mask.push(if inside { 1.0 } else { 0.0 });
            let base = if spec.edge_softness == 0.0 {
                if inside {
                    fg
                } else {
                    spec.background_mean
                }
            } else {
                spec.background_mean + spec.contrast_gap * logistic(dist / spec.edge_softness)
            };
            let eps = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            image.push((base + eps).clamp(0.0, 1.0));
        }
    }
    Sample::new(Tensor::new(&[1, n, n], image)?, Tensor::new(&[n, n], mask)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flip {
    None,
    Horizontal,
    Vertical,
    Both,
}

impl Flip {
    pub const ALL: [Flip; 4] = [Flip::None, Flip::Horizontal, Flip::Vertical, Flip::Both];
}

/// Flips the trailing two (spatial) axes of a `[.., H, W]` tensor.
pub fn flip(t: &Tensor, how: Flip) -> Tensor {
    let shape = t.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let plane = h * w;
    let (fh, fv) = match how {
        Flip::None => (false, false),
        Flip::Horizontal => (true, false),
        Flip::Vertical => (false, true),
        Flip::Both => (true, true),
    };
    let src = t.data();
    Tensor::from_fn(shape, |i| {
        let (base, r) = (i - i % plane, i % plane);
        let (y, x) = (r / w, r % w);
        let sy = if fv { h - 1 - y } else { y };
        let sx = if fh { w - 1 - x } else { x };
        src[base + sy * w + sx]
    })
}

/// Each sample followed by its horizontal, vertical and double flips.
pub fn augment_flips(samples: &[Sample]) -> Vec<Sample> {
    samples
        .iter()
        .flat_map(|s| {
            Flip::ALL.iter().map(move |&f| Sample { image: flip(&s.image, f), mask: flip(&s.mask, f) })
        })
        .collect()
}

/// Rescales an image to span `[0,1]`; a constant image maps to zeros.
pub fn min_max_scale(image: &Tensor) -> Tensor {
    let lo = image.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = image.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        image.map(|v| (v - lo) / (hi - lo))
    } else {
        image.map(|_| 0.0)
    }
}

pub const STD_FLOOR: f64 = 1e-6;

/// Per-pixel mean and (floored, population) standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Tensor,
    pub std: Tensor,
}

pub fn fit_normalizer(images: &[Tensor]) -> Result<NormStats> {
    if images.len() < 2 {
        return Err(Error::Contract("normaliser needs at least 2 training images".into()));
    }
    let shape = images[0].shape().to_vec();
    let n = images.len() as f64;
    // shifted by the first image so constant pixels get their exact value
    let pivot = &images[0];
    let mut offset = Tensor::zeros(&shape);
    for im in images {
        offset.add_assign(&im.sub(pivot)?)?;
    }
    let mean = pivot.add(&offset.scale(1.0 / n))?;
    let mut var = Tensor::zeros(&shape);
    for im in images {
        let d = im.sub(&mean)?;
        var.add_assign(&d.zip_map(&d, |a, b| a * b)?)?;
    }
    let std = var.map(|v| (v / n).sqrt().max(STD_FLOOR));
    Ok(NormStats { mean, std })
}

impl NormStats {
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        image.sub(&self.mean)?.zip_map(&self.std, |d, s| d / s)
    }
}

pub fn apply_normalizer(stats: &NormStats, image: &Tensor) -> Result<Tensor> {
    stats.apply(image)
}

/// Laplace-smoothed mass frequency: `(count_i + 1) / (N + 2)`.
pub fn estimate_prior(masks: &[&Tensor]) -> Result<PositionPrior> {
    let Some(first) = masks.first() else {
        return Err(Error::Contract("prior needs at least one mask".into()));
    };
    let mut counts = Tensor::zeros(first.shape());
    for m in masks {
        counts.add_assign(m)?;
    }
    let n = masks.len() as f64;
    PositionPrior::new(counts.map(|c| (c + 1.0) / (n + 2.0)))
}
