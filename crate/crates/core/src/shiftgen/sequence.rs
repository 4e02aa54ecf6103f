//! Perturbation sequences for flip-rate style stability metrics.

use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::{Dataset, Image, CHANNELS};
use crate::metrics::Pairing;
use crate::parallel::try_map_indexed;
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceKind {
    GaussianNoise,
    ShotNoise,
    Translate,
    Rotate,
    Scale,
    Brightness,
    /// Horizontal shear standing in for a perspective tilt.
    Tilt,
}

/// Noise std of gaussian-noise frames.
const NOISE_STD: f64 = 0.04;
/// Photon count of shot-noise frames.
const SHOT_PHOTONS: f64 = 60.0;
/// Per-frame increments of the geometric kinds.
const ROTATE_DEGREES: f64 = 2.0;
const SCALE_STEP: f64 = 0.02;
const BRIGHTNESS_STEP: f64 = 0.02;
const SHEAR_STEP: f64 = 0.02;

impl SequenceKind {
    pub const ALL: [SequenceKind; 7] = [
        SequenceKind::GaussianNoise,
        SequenceKind::ShotNoise,
        SequenceKind::Translate,
        SequenceKind::Rotate,
        SequenceKind::Scale,
        SequenceKind::Brightness,
        SequenceKind::Tilt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SequenceKind::GaussianNoise => "gaussian_noise",
            SequenceKind::ShotNoise => "shot_noise",
            SequenceKind::Translate => "translate",
            SequenceKind::Rotate => "rotate",
            SequenceKind::Scale => "scale",
            SequenceKind::Brightness => "brightness",
            SequenceKind::Tilt => "tilt",
        }
    }

    pub fn is_noise(self) -> bool {
        matches!(self, SequenceKind::GaussianNoise | SequenceKind::ShotNoise)
    }

    /// Noise frames are compared with frame 1, transform frames with their predecessor.
    pub fn pairing(self) -> Pairing {
        if self.is_noise() {
            Pairing::FirstFrame
        } else {
            Pairing::Consecutive
        }
    }
}

impl std::str::FromStr for SequenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SequenceKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown perturbation kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSequence {
    pub kind: SequenceKind,
    pub source_index: usize,
    pub label: usize,
    pub frames: Vec<Image>,
}

/// One sequence per example. Transform kinds start from the clean frame and
/// grow linearly in magnitude; noise kinds draw every frame independently from
/// `(seed, "sequence/<kind>/<example>", frame)`. A length-1 sequence holds the
/// clean frame only.
pub fn build_perturbation_sequences(dataset: &Dataset, kind: SequenceKind, length: usize, seed: u64, workers: usize) -> Result<Vec<PerturbationSequence>> {
    if length < 1 {
        return Err(invalid("sequence length must be >= 1"));
    }
    try_map_indexed(workers, dataset.len(), |i| {
        let e = &dataset.examples[i];
        let frames = if length == 1 {
            vec![e.image.clone()]
        } else {
            let stream = format!("sequence/{}/{i}", kind.as_str());
            (0..length).map(|j| frame(&e.image, kind, j, seed, &stream)).collect::<Result<Vec<_>>>()?
        };
        Ok(PerturbationSequence { kind, source_index: i, label: e.label, frames })
    })
}

/// Frame `j` (0-based) of a sequence.
fn frame(clean: &Image, kind: SequenceKind, j: usize, seed: u64, stream: &str) -> Result<Image> {
    let (h, w) = (clean.height(), clean.width());
    let t = j as f64;
    match kind {
        SequenceKind::GaussianNoise => {
            let mut rng = substream(seed, stream, j as u64);
            let n = Normal::new(0.0, NOISE_STD).expect("positive std");
            Image::from_clamped(h, w, clean.data().iter().map(|v| v + n.sample(&mut rng)).collect())
        }
        SequenceKind::ShotNoise => {
            let mut rng = substream(seed, stream, j as u64);
            let data = clean
                .data()
                .iter()
                .map(|&v| {
                    let rate = v * SHOT_PHOTONS;
                    if rate <= 0.0 {
                        0.0
                    } else {
                        Poisson::new(rate).expect("positive rate").sample(&mut rng) / SHOT_PHOTONS
                    }
                })
                .collect();
            Image::from_clamped(h, w, data)
        }
        SequenceKind::Brightness => Image::from_clamped(h, w, clean.data().iter().map(|v| v + BRIGHTNESS_STEP * t).collect()),
        SequenceKind::Translate => Ok(warp(clean, |y, x| (y, x - t))),
        SequenceKind::Rotate => {
            let (s, c) = (ROTATE_DEGREES * t).to_radians().sin_cos();
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            Ok(warp(clean, |y, x| {
                let (dy, dx) = (y - cy, x - cx);
                (cy + c * dy - s * dx, cx + s * dy + c * dx)
            }))
        }
        SequenceKind::Scale => {
            let z = 1.0 + SCALE_STEP * t;
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            Ok(warp(clean, |y, x| (cy + (y - cy) / z, cx + (x - cx) / z)))
        }
        SequenceKind::Tilt => {
            let k = SHEAR_STEP * t;
            let cy = (h as f64 - 1.0) / 2.0;
            Ok(warp(clean, |y, x| (y, x - k * (y - cy))))
        }
    }
}

/// Nearest-neighbour inverse warp; `source(y, x)` gives the sampling point of
/// output pixel `(y, x)`. Points outside the image are black.
fn warp(image: &Image, source: impl Fn(f64, f64) -> (f64, f64)) -> Image {
    let (h, w) = (image.height(), image.width());
    let mut out = Image::filled(h, w, 0.0).expect("valid dimensions");
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = source(y as f64, x as f64);
            let (ry, rx) = (sy.round(), sx.round());
            if ry >= 0.0 && rx >= 0.0 && (ry as usize) < h && (rx as usize) < w {
                for c in 0..CHANNELS {
                    out.set(c, y, x, image.get(c, ry as usize, rx as usize));
                }
            }
        }
    }
    out
}
