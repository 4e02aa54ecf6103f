//! Typographic-attack sets: a randomly chosen wrong class name is rendered
//! onto every image at the same fixed coordinates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::font::{glyph_rows, render_text, text_width, GLYPH};
use crate::error::{invalid, Result};
use crate::image::{Dataset, LabeledExample};
use crate::parallel::try_map_indexed;
use crate::rng::substream;

/// Coordinate count for large (ImageNet-style) images.
pub const IMAGENET_STYLE_COORDS: usize = 8;
/// Coordinate count for small (CIFAR-style) images.
pub const CIFAR_STYLE_COORDS: usize = 4;
/// Characters the coordinate window keeps in bounds.
const WINDOW_CHARS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypographicSpec {
    pub k_coords: usize,
    /// Fixed `(x, y)` top-left corners; sampled from the seed when absent.
    #[serde(default)]
    pub coordinates: Option<Vec<(usize, usize)>>,
    /// Pixels per font pixel; derived from the image height when absent.
    #[serde(default)]
    pub font_scale: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl TypographicSpec {
    pub fn new(k_coords: usize, seed: u64) -> Self {
        Self { k_coords, coordinates: None, font_scale: None, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypographicEntry {
    pub index: usize,
    pub label: usize,
    pub target: usize,
    /// Text actually rendered at the narrowest coordinate.
    pub text: String,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypographicManifest {
    pub seed: u64,
    pub k_coords: usize,
    pub font_scale: usize,
    pub coordinates: Vec<(usize, usize)>,
    pub entries: Vec<TypographicEntry>,
    pub truncated_count: usize,
}

/// Scale giving a glyph height of about `max(8, 7% of the height)` pixels.
pub fn default_font_scale(height: usize) -> usize {
    let target = (0.07 * height as f64).max(GLYPH as f64);
    ((target / GLYPH as f64).round() as usize).max(1)
}

/// Draws `k` corners uniformly over positions that keep an 8-character
/// window (or the full width, if narrower) and one glyph row in bounds.
pub fn sample_coordinates(height: usize, width: usize, k: usize, scale: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let glyph = GLYPH * scale;
    if glyph > height || glyph > width {
        return Err(invalid(format!("{glyph}px glyphs do not fit a {height}x{width} image")));
    }
    let window = text_width(WINDOW_CHARS, scale).min(width);
    let mut rng = substream(seed, "typographic-coordinates", 0);
    Ok((0..k).map(|_| (rng.random_range(0..=width - window), rng.random_range(0..=height - glyph))).collect())
}

/// Uniform draw over every class except `label`.
fn sample_target(label: usize, classes: usize, rng: &mut impl Rng) -> usize {
    let r = rng.random_range(0..classes - 1);
    if r >= label {
        r + 1
    } else {
        r
    }
}

/// Renders each image's sampled target name (lowercased) at every coordinate.
/// Names too long for a position are truncated there and flagged.
pub fn generate_typographic_dataset(dataset: &Dataset, spec: &TypographicSpec, workers: usize) -> Result<(Dataset, TypographicManifest)> {
    let c = dataset.num_classes();
    if c < 2 {
        return Err(invalid("typographic attacks need at least 2 classes"));
    }
    let names: Vec<String> = dataset.class_names.iter().map(|n| n.to_lowercase()).collect();
    for n in &names {
        for ch in n.chars() {
            glyph_rows(ch).map_err(|_| invalid(format!("class name {n:?} is not renderable")))?;
        }
    }
    let shape = dataset.input_shape().ok_or_else(|| invalid("empty dataset"))?;
    let scale = spec.font_scale.unwrap_or_else(|| default_font_scale(shape.h));
    if scale == 0 {
        return Err(invalid("font scale must be >= 1"));
    }
    let coordinates = match &spec.coordinates {
        Some(c) if c.len() != spec.k_coords => {
            return Err(invalid(format!("{} coordinates given for k = {}", c.len(), spec.k_coords)));
        }
        Some(c) => c.clone(),
        None if spec.k_coords == 0 => Vec::new(),
        None => sample_coordinates(shape.h, shape.w, spec.k_coords, scale, spec.seed)?,
    };
    for &(x, y) in &coordinates {
        if x + GLYPH * scale > shape.w || y + GLYPH * scale > shape.h {
            return Err(invalid(format!("coordinate ({x},{y}) leaves no room for a glyph")));
        }
    }

    let rendered = try_map_indexed(workers, dataset.len(), |i| {
        let e = &dataset.examples[i];
        let mut rng = substream(spec.seed, "typographic-target", i as u64);
        let target = sample_target(e.label, c, &mut rng);
        let name = &names[target];
        let mut image = e.image.clone();
        let mut shortest = name.clone();
        for &(x, y) in &coordinates {
            let fit = (shape.w - x) / (GLYPH * scale);
            let text: String = name.chars().take(fit).collect();
            render_text(&mut image, &text, x, y, scale)?;
            if text.len() < shortest.len() {
                shortest = text;
            }
        }
        let truncated = shortest.len() < name.len();
        let entry = TypographicEntry { index: i, label: e.label, target, text: shortest, truncated };
        Ok((LabeledExample::with_target(image, e.label, target)?, entry))
    })?;
    let (examples, entries): (Vec<_>, Vec<_>) = rendered.into_iter().unzip();
    let manifest = TypographicManifest {
        seed: spec.seed,
        k_coords: spec.k_coords,
        font_scale: scale,
        coordinates,
        truncated_count: entries.iter().filter(|e: &&TypographicEntry| e.truncated).count(),
        entries,
    };
    let out = Dataset::new(format!("{}-typo{}", dataset.name, spec.k_coords), dataset.class_names.clone(), examples)?;
    Ok((out, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;

    fn dataset(n: usize, h: usize, w: usize, classes: usize) -> Dataset {
        let names = (0..classes).map(|i| format!("c{i}")).collect();
        let ex = (0..n)
            .map(|i| LabeledExample::new(Image::new(h, w, (0..3 * h * w).map(|k| ((k * 7 + i) % 13) as f64 / 13.0).collect()).unwrap(), i % classes))
            .collect();
        Dataset::new("d", names, ex).unwrap()
    }

    #[test]
    fn zero_coordinates_leave_images_untouched() {
        let ds = dataset(6, 16, 16, 3);
        let (out, m) = generate_typographic_dataset(&ds, &TypographicSpec::new(0, 5), 1).unwrap();
        for (a, b) in out.examples.iter().zip(&ds.examples) {
            assert_eq!(a.image, b.image);
            assert_ne!(a.target, Some(a.label));
        }
        assert!(m.coordinates.is_empty());
    }

    #[test]
    fn only_rectangles_change() {
        let ds = dataset(5, 32, 32, 4);
        let spec = TypographicSpec::new(4, 9);
        let (out, m) = generate_typographic_dataset(&ds, &spec, 2).unwrap();
        let cell = GLYPH * m.font_scale;
        for (i, (a, b)) in out.examples.iter().zip(&ds.examples).enumerate() {
            let len = m.entries[i].text.len();
            for y in 0..32 {
                for x in 0..32 {
                    let inside = m.coordinates.iter().any(|&(cx, cy)| {
                        let n = len.max(ds.class_names[m.entries[i].target].len()).min((32 - cx) / cell);
                        x >= cx && x < cx + n * cell && y >= cy && y < cy + cell
                    });
                    if !inside {
                        for c in 0..3 {
                            assert_eq!(a.image.get(c, y, x).to_bits(), b.image.get(c, y, x).to_bits());
                        }
                    }
                }
            }
        }
        let (again, _) = generate_typographic_dataset(&ds, &spec, 1).unwrap();
        assert_eq!(again.content_hash(), out.content_hash());
    }

    #[test]
    fn long_names_are_truncated_and_flagged() {
        let mut ds = dataset(3, 8, 16, 2);
        ds.class_names = vec!["abcdef".into(), "xy".into()];
        let (_, m) = generate_typographic_dataset(&ds, &TypographicSpec::new(1, 0), 1).unwrap();
        for e in &m.entries {
            assert_eq!(e.truncated, e.target == 0);
        }
        assert!(m.truncated_count > 0);
    }

    #[test]
    fn rejects_single_class_and_bad_names() {
        assert!(generate_typographic_dataset(&dataset(2, 8, 8, 1), &TypographicSpec::new(1, 0), 1).is_err());
        let mut ds = dataset(2, 8, 8, 2);
        ds.class_names[1] = "naïve".into();
        assert!(generate_typographic_dataset(&ds, &TypographicSpec::new(1, 0), 1).is_err());
    }

    #[test]
    fn font_scale_follows_height() {
        assert_eq!(default_font_scale(32), 1);
        assert_eq!(default_font_scale(224), 2);
    }
}
