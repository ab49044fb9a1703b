use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::LabeledImages;
use crate::error::{Error, Result};
use crate::substrate::Tensor;

pub const SYNTHETIC_SIDE: usize = 32;

/// Oriented sinusoidal gratings. Class `c` uses orientation
/// `c mod orientations` and frequency `c / orientations`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub orientations: usize,
    /// Spatial frequencies in cycles per image, one per frequency group.
    pub frequencies: Vec<f64>,
    pub noise_std: f64,
    /// Uniform orientation jitter in radians.
    pub orientation_jitter: f64,
    /// Uniform multiplicative frequency jitter.
    pub frequency_jitter: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 8,
            orientations: 4,
            frequencies: vec![3.0, 5.0],
            noise_std: 0.05,
            orientation_jitter: 0.0,
            frequency_jitter: 0.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.orientations == 0 {
            return Err(Error::Dataset(
                "synthetic data needs at least 2 classes".into(),
            ));
        }
        if self.classes > self.orientations * self.frequencies.len() {
            return Err(Error::Dataset(format!(
                "{} classes exceed {} orientations × {} frequencies",
                self.classes,
                self.orientations,
                self.frequencies.len()
            )));
        }
        if self.noise_std < 0.0 {
            return Err(Error::Dataset("noise std must be nonnegative".into()));
        }
        Ok(())
    }
}

/// `n` grating images, labels cycling through the classes so counts stay
/// balanced within one.
pub fn generate_synthetic(seed: u64, n: usize, spec: &SyntheticSpec) -> Result<LabeledImages> {
    spec.validate()?;
    if n < spec.classes {
        return Err(Error::Dataset(format!(
            "n = {n} is below the class count {}",
            spec.classes
        )));
    }
    let side = SYNTHETIC_SIDE;
    let plane = side * side;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut data = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.classes;
        let base_theta = PI * (c % spec.orientations) as f64 / spec.orientations as f64;
        let theta = base_theta + spec.orientation_jitter * rng.random_range(-1.0..=1.0);
        let freq = spec.frequencies[c / spec.orientations]
            * (1.0 + spec.frequency_jitter * rng.random_range(-1.0..=1.0));
        let phase = rng.random_range(0.0..2.0 * PI);
        let amp: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.45));
        let (ct, st) = (theta.cos(), theta.sin());
        for a in amp {
            for y in 0..side {
                for x in 0..side {
                    let u = (x as f64 * ct + y as f64 * st) / side as f64;
                    let mut v = 0.5 + a * (2.0 * PI * freq * u + phase).sin();
                    if spec.noise_std > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        labels.push(c);
    }
    Ok(LabeledImages {
        images: Tensor::new(vec![n, 3, side, side], data)?,
        labels,
        classes: spec.classes,
        source: format!("synthetic(seed={seed},n={n},classes={})", spec.classes),
    })
}
