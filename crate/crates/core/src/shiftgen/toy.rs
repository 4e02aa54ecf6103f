//! Toy shapes corpus: one class per shape, random colour, size and position.
//! Pixel values are multiples of 1/255 so PNG storage is lossless.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::{Dataset, Image, LabeledExample};
use crate::rng::substream;

/// Smallest image edge the shapes render legibly at.
pub const MIN_TOY_SIZE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Box,
    Tri,
    Plus,
    Ring,
    Gem,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [ShapeKind::Disk, ShapeKind::Box, ShapeKind::Tri, ShapeKind::Plus, ShapeKind::Ring, ShapeKind::Gem];

    /// Class name; short enough to render whole on a 32-pixel-wide image.
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disk => "disk",
            ShapeKind::Box => "box",
            ShapeKind::Tri => "tri",
            ShapeKind::Plus => "plus",
            ShapeKind::Ring => "ring",
            ShapeKind::Gem => "gem",
        }
    }

    /// Membership of offset `(dx, dy)` from the centre, for radius `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        let d = (dx * dx + dy * dy).sqrt();
        match self {
            ShapeKind::Disk => d <= r,
            ShapeKind::Box => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            ShapeKind::Tri => {
                let top = -r;
                let bottom = 0.8 * r;
                dy >= top && dy <= bottom && dx.abs() <= (dy - top) / (bottom - top) * r
            }
            ShapeKind::Plus => (dx.abs() <= 0.3 * r && dy.abs() <= r) || (dy.abs() <= 0.3 * r && dx.abs() <= r),
            ShapeKind::Ring => d <= r && d >= 0.55 * r,
            ShapeKind::Gem => dx.abs() + dy.abs() <= r,
        }
    }
}

impl std::str::FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| invalid(format!("unknown shape {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftVariant {
    /// Dark, faintly noisy backgrounds with solid shapes.
    #[default]
    None,
    /// Bright gradient backgrounds.
    Background,
    /// Striped shape fills.
    Texture,
}

impl ShiftVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            ShiftVariant::None => "none",
            ShiftVariant::Background => "background",
            ShiftVariant::Texture => "texture",
        }
    }
}

impl std::str::FromStr for ShiftVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [ShiftVariant::None, ShiftVariant::Background, ShiftVariant::Texture]
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown shift variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToySpec {
    #[serde(default = "all_shapes")]
    pub classes: Vec<ShapeKind>,
    pub n_per_class: usize,
    #[serde(default = "default_size")]
    pub size: usize,
    #[serde(default)]
    pub shift: ShiftVariant,
    #[serde(default)]
    pub seed: u64,
}

fn all_shapes() -> Vec<ShapeKind> {
    ShapeKind::ALL.to_vec()
}

fn default_size() -> usize {
    32
}

impl ToySpec {
    pub fn new(n_per_class: usize, seed: u64) -> Self {
        Self { classes: all_shapes(), n_per_class, size: default_size(), shift: ShiftVariant::None, seed }
    }

    pub fn with_shift(mut self, shift: ShiftVariant) -> Self {
        self.shift = shift;
        self
    }
}

fn level(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders one example of `shape`.
fn render(shape: ShapeKind, size: usize, shift: ShiftVariant, rng: &mut impl Rng) -> Result<Image> {
    let s = size as f64;
    let r = rng.random_range(0.2..0.32) * s;
    let cx = rng.random_range(0.35..0.65) * s;
    let cy = rng.random_range(0.35..0.65) * s;
    let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.45..1.0));
    let mut image = Image::filled(size, size, 0.0)?;
    match shift {
        ShiftVariant::Background => {
            let a: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.85));
            let b: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.85));
            for y in 0..size {
                let t = y as f64 / (s - 1.0).max(1.0);
                for x in 0..size {
                    image.set_rgb(y, x, std::array::from_fn(|c| level(a[c] * (1.0 - t) + b[c] * t)));
                }
            }
        }
        _ => {
            let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.25));
            for y in 0..size {
                for x in 0..size {
                    image.set_rgb(y, x, std::array::from_fn(|c| level(bg[c] + rng.random_range(-0.03..0.03))));
                }
            }
        }
    }
    let stripe = (s / 8.0).max(1.0) as usize;
    for y in 0..size {
        for x in 0..size {
            if shape.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r) {
                let dim = shift == ShiftVariant::Texture && ((x + y) / stripe) % 2 == 1;
                image.set_rgb(y, x, std::array::from_fn(|c| level(if dim { 0.35 * fg[c] } else { fg[c] })));
            }
        }
    }
    Ok(image)
}

/// Generates `n_per_class` images per shape, classes interleaved. Image `i`
/// draws from `(seed, "toy/<variant>", i)`.
pub fn generate_toy_dataset(spec: &ToySpec) -> Result<Dataset> {
    if spec.classes.len() < 2 {
        return Err(invalid("toy dataset needs at least 2 classes"));
    }
    if spec.size < MIN_TOY_SIZE {
        return Err(invalid(format!("image size {} is below the {MIN_TOY_SIZE}px minimum for shapes", spec.size)));
    }
    let mut seen = spec.classes.clone();
    seen.sort_by_key(|k| k.name());
    seen.dedup();
    if seen.len() != spec.classes.len() {
        return Err(invalid("duplicate shape classes"));
    }
    let stream = format!("toy/{}", spec.shift.as_str());
    let c = spec.classes.len();
    let examples = (0..spec.n_per_class * c)
        .map(|i| {
            let label = i % c;
            let mut rng = substream(spec.seed, &stream, i as u64);
            Ok(LabeledExample::new(render(spec.classes[label], spec.size, spec.shift, &mut rng)?, label))
        })
        .collect::<Result<Vec<_>>>()?;
    let names = spec.classes.iter().map(|k| k.name().to_string()).collect();
    Dataset::new(format!("toy-{}", spec.shift.as_str()), names, examples)
}
