//! Image tensors, labeled examples and datasets.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};

pub const CHANNELS: usize = 3;

/// Input geometry shared by images and models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputShape {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl InputShape {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w, c: CHANNELS }
    }

    pub fn len(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for InputShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

/// A 3-channel image with values in `[0, 1]`, stored channel-major
/// (`data[c * h * w + y * w + x]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid(format!("image dimensions must be positive, got {height}x{width}")));
        }
        let expected = CHANNELS * height * width;
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{expected} values for {height}x{width}x3"),
                got: format!("{} values", data.len()),
            });
        }
        if let Some((i, v)) = data.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("pixel {i} = {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image by clamping every value into `[0, 1]`. NaN maps to 0.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; CHANNELS * height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> InputShape {
        InputShape::new(self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    /// Sets a pixel, clamping into `[0, 1]`.
    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v.clamp(0.0, 1.0);
    }

    pub fn set_rgb(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    /// Maximum absolute elementwise difference.
    pub fn linf_distance(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean_abs_difference(&self, other: &Image) -> f64 {
        let total: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum();
        total / self.data.len() as f64
    }

    pub(crate) fn hash_into(&self, hasher: &mut Sha256) {
        hasher.update((self.height as u64).to_le_bytes());
        hasher.update((self.width as u64).to_le_bytes());
        for v in &self.data {
            hasher.update(v.to_bits().to_le_bytes());
        }
    }
}

/// An image with its true class and, for targeted attacks, a target class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub image: Image,
    pub label: usize,
    pub target: Option<usize>,
}

impl LabeledExample {
    pub fn new(image: Image, label: usize) -> Self {
        Self { image, label, target: None }
    }

    pub fn with_target(image: Image, label: usize, target: usize) -> Result<Self> {
        if target == label {
            return Err(invalid(format!("target {target} equals the true label")));
        }
        Ok(Self { image, label, target: Some(target) })
    }
}

/// An ordered, named collection of labeled examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub class_names: Vec<String>,
    pub examples: Vec<LabeledExample>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, class_names: Vec<String>, examples: Vec<LabeledExample>) -> Result<Self> {
        let ds = Self { name: name.into(), class_names, examples };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.class_names.len();
        if c == 0 {
            return Err(invalid("dataset has no classes"));
        }
        let mut shape = None;
        for (i, ex) in self.examples.iter().enumerate() {
            if ex.label >= c {
                return Err(invalid(format!("example {i}: label {} >= class count {c}", ex.label)));
            }
            if let Some(t) = ex.target {
                if t >= c || t == ex.label {
                    return Err(invalid(format!("example {i}: invalid target {t}")));
                }
            }
            match shape {
                None => shape = Some(ex.image.shape()),
                Some(s) if s != ex.image.shape() => {
                    return Err(Error::ShapeMismatch {
                        expected: s.to_string(),
                        got: format!("{} at example {i}", ex.image.shape()),
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn input_shape(&self) -> Option<InputShape> {
        self.examples.first().map(|e| e.image.shape())
    }

    /// SHA-256 over class names, labels, targets and pixel bits.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.class_names.len() as u64).to_le_bytes());
        for name in &self.class_names {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
        }
        hasher.update((self.examples.len() as u64).to_le_bytes());
        for ex in &self.examples {
            hasher.update((ex.label as u64).to_le_bytes());
            hasher.update(ex.target.map_or(u64::MAX, |t| t as u64).to_le_bytes());
            ex.image.hash_into(&mut hasher);
        }
        hex::encode(hasher.finalize())
    }

    /// `name@hash-prefix`, used as the dataset id in reports.
    pub fn identity(&self) -> String {
        format!("{}@{}", self.name, &self.content_hash()[..16])
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Returns a dataset restricted to the given indices, in order.
    pub fn subset(&self, name: impl Into<String>, indices: &[usize]) -> Dataset {
        Dataset {
            name: name.into(),
            class_names: self.class_names.clone(),
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_bad_lengths() {
        assert!(Image::new(2, 2, vec![0.5; 12]).is_ok());
        assert!(Image::new(2, 2, vec![0.5; 11]).is_err());
        assert!(Image::new(0, 2, vec![]).is_err());
        let mut d = vec![0.5; 12];
        d[3] = 1.5;
        assert!(Image::new(2, 2, d.clone()).is_err());
        let img = Image::from_clamped(2, 2, d).unwrap();
        assert_eq!(img.data()[3], 1.0);
    }

    #[test]
    fn channel_major_layout() {
        let mut img = Image::filled(2, 3, 0.0).unwrap();
        img.set(2, 1, 0, 1.0);
        assert_eq!(img.data()[2 * 6 + 3], 1.0);
    }

    #[test]
    fn dataset_validation_and_hash_stability() {
        let img = Image::filled(2, 2, 0.25).unwrap();
        let ds = Dataset::new("d", vec!["a".into(), "b".into()], vec![LabeledExample::new(img.clone(), 1)]).unwrap();
        assert_eq!(ds.content_hash(), ds.clone().content_hash());
        assert!(Dataset::new("d", vec!["a".into()], vec![LabeledExample::new(img.clone(), 1)]).is_err());
        assert!(LabeledExample::with_target(img, 1, 1).is_err());
    }
}
