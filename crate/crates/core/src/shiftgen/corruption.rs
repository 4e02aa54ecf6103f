//! Seven common corruptions with five severities each.
//!
//! Every kind has a scalar magnitude where 0 is the identity; severities index
//! a fixed table of increasing magnitudes.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::{Dataset, Image, LabeledExample, CHANNELS};
use crate::parallel::try_map_indexed;
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    Brightness,
    Contrast,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 7] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    /// Magnitudes for severities 1..=5.
    ///
    /// | kind | magnitude |
    /// |---|---|
    /// | gaussian_noise | noise std |
    /// | shot_noise | 1 / photon count |
    /// | impulse_noise | fraction of salt-and-pepper values |
    /// | defocus_blur | disk radius in pixels |
    /// | brightness | additive shift |
    /// | contrast | 1 − contrast factor |
    /// | pixelate | 1 − downscale factor |
    pub fn severity_table(self) -> [f64; 5] {
        match self {
            CorruptionKind::GaussianNoise => [0.08, 0.12, 0.18, 0.26, 0.38],
            CorruptionKind::ShotNoise => [1.0 / 60.0, 1.0 / 25.0, 1.0 / 12.0, 1.0 / 5.0, 1.0 / 3.0],
            CorruptionKind::ImpulseNoise => [0.03, 0.06, 0.09, 0.17, 0.27],
            CorruptionKind::DefocusBlur => [1.0, 1.5, 2.0, 2.5, 3.0],
            CorruptionKind::Brightness => [0.1, 0.2, 0.3, 0.4, 0.5],
            CorruptionKind::Contrast => [0.6, 0.7, 0.8, 0.9, 0.95],
            CorruptionKind::Pixelate => [0.4, 0.5, 0.6, 0.7, 0.75],
        }
    }
}

impl std::str::FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown corruption kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        let s = Self { kind, severity };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(invalid(format!("severity must be in 1..=5, got {}", self.severity)));
        }
        Ok(())
    }

    pub fn magnitude(&self) -> f64 {
        self.kind.severity_table()[self.severity as usize - 1]
    }
}

/// Applies a corruption at its tabulated severity. Output is clipped to [0,1].
pub fn apply_corruption(image: &Image, spec: CorruptionSpec, seed: u64) -> Result<Image> {
    spec.validate()?;
    apply_corruption_magnitude(image, spec.kind, spec.magnitude(), seed)
}

/// Applies a corruption at an explicit magnitude; 0 returns the input unchanged.
pub fn apply_corruption_magnitude(image: &Image, kind: CorruptionKind, magnitude: f64, seed: u64) -> Result<Image> {
    if !(magnitude >= 0.0 && magnitude.is_finite()) {
        return Err(invalid(format!("corruption magnitude must be >= 0, got {magnitude}")));
    }
    if magnitude == 0.0 {
        return Ok(image.clone());
    }
    let mut rng = substream(seed, kind.as_str(), 0);
    let (h, w) = (image.height(), image.width());
    let x = image.data();
    let out: Vec<f64> = match kind {
        CorruptionKind::GaussianNoise => {
            let n = Normal::new(0.0, magnitude).map_err(|e| invalid(e.to_string()))?;
            x.iter().map(|v| v + n.sample(&mut rng)).collect()
        }
        CorruptionKind::ShotNoise => {
            let photons = 1.0 / magnitude;
            x.iter()
                .map(|&v| {
                    let rate = v * photons;
                    if rate <= 0.0 {
                        return Ok(0.0);
                    }
                    let p = Poisson::new(rate).map_err(|e| invalid(e.to_string()))?;
                    Ok(p.sample(&mut rng) / photons)
                })
                .collect::<Result<_>>()?
        }
        CorruptionKind::ImpulseNoise => x
            .iter()
            .map(|&v| {
                if rng.random::<f64>() < magnitude {
                    if rng.random::<bool>() {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    v
                }
            })
            .collect(),
        CorruptionKind::DefocusBlur => defocus(image, magnitude),
        CorruptionKind::Brightness => x.iter().map(|v| v + magnitude).collect(),
        CorruptionKind::Contrast => {
            let factor = (1.0 - magnitude).max(0.0);
            let plane = h * w;
            let mut out = x.to_vec();
            for c in 0..CHANNELS {
                let ch = &x[c * plane..(c + 1) * plane];
                let mean = ch.iter().sum::<f64>() / plane as f64;
                for (o, v) in out[c * plane..(c + 1) * plane].iter_mut().zip(ch) {
                    *o = (v - mean) * factor + mean;
                }
            }
            out
        }
        CorruptionKind::Pixelate => pixelate(image, (1.0 - magnitude).max(0.0)),
    };
    Image::from_clamped(h, w, out)
}

fn defocus(image: &Image, radius: f64) -> Vec<f64> {
    let (h, w) = (image.height(), image.width());
    let r = radius.ceil() as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| ((dy * dy + dx * dx) as f64) <= radius * radius)
        .collect();
    let k = 1.0 / offsets.len() as f64;
    let mut out = vec![0.0; image.data().len()];
    for c in 0..CHANNELS {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for &(dy, dx) in &offsets {
                    let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    acc += image.get(c, sy, sx);
                }
                out[image.index(c, y, x)] = acc * k;
            }
        }
    }
    out
}

/// Averages over a coarse grid of `round(size · factor)` cells and paints
/// each cell's mean back.
fn pixelate(image: &Image, factor: f64) -> Vec<f64> {
    let (h, w) = (image.height(), image.width());
    let nh = ((h as f64 * factor).round() as usize).clamp(1, h);
    let nw = ((w as f64 * factor).round() as usize).clamp(1, w);
    let cell = |i: usize, n: usize, size: usize| i * n / size;
    let mut out = vec![0.0; image.data().len()];
    for c in 0..CHANNELS {
        let mut sum = vec![0.0; nh * nw];
        let mut count = vec![0usize; nh * nw];
        for y in 0..h {
            for x in 0..w {
                let j = cell(y, nh, h) * nw + cell(x, nw, w);
                sum[j] += image.get(c, y, x);
                count[j] += 1;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let j = cell(y, nh, h) * nw + cell(x, nw, w);
                out[image.index(c, y, x)] = sum[j] / count[j] as f64;
            }
        }
    }
    out
}

/// Corrupts every image; image `i` draws from `(seed, kind, i)`.
pub fn corrupt_dataset(dataset: &Dataset, spec: CorruptionSpec, seed: u64, workers: usize) -> Result<Dataset> {
    spec.validate()?;
    let examples = try_map_indexed(workers, dataset.len(), |i| {
        let e = &dataset.examples[i];
        let s = crate::rng::derive_seed(seed, spec.kind.as_str(), i as u64);
        Ok(LabeledExample { image: apply_corruption(&e.image, spec, s)?, ..e.clone() })
    })?;
    Dataset::new(format!("{}-{}-{}", dataset.name, spec.kind.as_str(), spec.severity), dataset.class_names.clone(), examples)
}
