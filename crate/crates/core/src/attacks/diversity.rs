//! Random resize-and-pad input transform used by DIM.

use rand::Rng;

use crate::image::InputShape;

/// Nearest-neighbour shrink by a factor in `[min_scale, 1]`, placed at a
/// random offset on a black canvas of the original size. The transform is
/// linear, so gradients flow back through [`ResizePad::transpose`].
#[derive(Debug, Clone, PartialEq)]
pub struct ResizePad {
    /// Source index for every output element; `None` is padding.
    map: Vec<Option<usize>>,
}

impl ResizePad {
    pub fn identity(shape: InputShape) -> Self {
        Self { map: (0..shape.len()).map(Some).collect() }
    }

    pub fn sample(shape: InputShape, min_scale: f64, rng: &mut impl Rng) -> Self {
        let InputShape { h, w, c } = shape;
        let s = rng.random_range(min_scale..=1.0);
        let nh = ((h as f64 * s).round() as usize).clamp(1, h);
        let nw = ((w as f64 * s).round() as usize).clamp(1, w);
        let top = rng.random_range(0..=h - nh);
        let left = rng.random_range(0..=w - nw);
        let mut map = vec![None; shape.len()];
        for ch in 0..c {
            for y in top..top + nh {
                let sy = (y - top) * h / nh;
                for x in left..left + nw {
                    let sx = (x - left) * w / nw;
                    map[(ch * h + y) * w + x] = Some((ch * h + sy) * w + sx);
                }
            }
        }
        Self { map }
    }

    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        self.map.iter().map(|m| m.map_or(0.0, |i| input[i])).collect()
    }

    /// Pulls an output-space gradient back to input space.
    pub fn transpose(&self, grad: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.map.len()];
        for (g, m) in grad.iter().zip(&self.map) {
            if let Some(i) = m {
                out[*i] += g;
            }
        }
        out
    }
}
