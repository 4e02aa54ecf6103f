//! Deterministic synthetic distribution shifts: a corruption suite,
//! perturbation sequences, typographic-attack sets and the toy shapes corpus.
//! Datasets are stored as PNG directories with a JSON manifest, or as raw
//! `ROZT` tensors.

mod corruption;
mod font;
pub mod io;
mod sequence;
mod toy;
mod typographic;

pub use corruption::{apply_corruption, apply_corruption_magnitude, corrupt_dataset, CorruptionKind, CorruptionSpec};
pub use font::{glyph_rows, render_text, text_width, GLYPH};
pub use sequence::{build_perturbation_sequences, PerturbationSequence, SequenceKind};
pub use toy::{generate_toy_dataset, ShapeKind, ShiftVariant, ToySpec};
pub use typographic::{
    default_font_scale, generate_typographic_dataset, sample_coordinates, TypographicEntry, TypographicManifest, TypographicSpec,
    IMAGENET_STYLE_COORDS, CIFAR_STYLE_COORDS,
};
