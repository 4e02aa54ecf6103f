//! Text rendering with the public-domain 8×8 bitmap font.

use crate::error::{invalid, Result};
use crate::image::Image;

/// Glyph cell edge in font pixels.
pub const GLYPH: usize = 8;

/// Bitmap rows of a printable ASCII character; bit 0 is the leftmost pixel.
pub fn glyph_rows(ch: char) -> Result<[u8; 8]> {
    if !(' '..='~').contains(&ch) {
        return Err(invalid(format!("character {ch:?} is not printable ASCII")));
    }
    Ok(font8x8::legacy::BASIC_LEGACY[ch as usize])
}

/// Width in pixels of `chars` characters at `scale`.
pub fn text_width(chars: usize, scale: usize) -> usize {
    chars * GLYPH * scale
}

/// Draws `text` with its top-left corner at `(x, y)`: a black rectangle
/// covering every glyph cell, white glyph pixels on top. The text must fit.
pub fn render_text(image: &mut Image, text: &str, x: usize, y: usize, scale: usize) -> Result<()> {
    let n = text.chars().count();
    if x + text_width(n, scale) > image.width() || y + GLYPH * scale > image.height() {
        return Err(invalid(format!("text {text:?} at ({x},{y}) does not fit a {}x{} image", image.height(), image.width())));
    }
    for (i, ch) in text.chars().enumerate() {
        let rows = glyph_rows(ch)?;
        for (gy, bits) in rows.iter().enumerate() {
            for gx in 0..GLYPH {
                let v = if bits >> gx & 1 == 1 { 1.0 } else { 0.0 };
                for sy in 0..scale {
                    for sx in 0..scale {
                        image.set_rgb(y + gy * scale + sy, x + (i * GLYPH + gx) * scale + sx, [v; 3]);
                    }
                }
            }
        }
    }
    Ok(())
}
