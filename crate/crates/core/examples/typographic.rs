//! Renders a wrong class name onto every image and writes one example out.
//!
//!     cargo run --example typographic -- /tmp/typo.png

use zsrobust::shiftgen::io::write_png;
use zsrobust::shiftgen::{generate_toy_dataset, generate_typographic_dataset, ToySpec, TypographicSpec};

fn main() -> anyhow::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("zsrobust-typo.png").display().to_string());
    let source = generate_toy_dataset(&ToySpec::new(5, 2))?;

    // Two candidate coordinates, each image picks one.
    let (attacked, manifest) = generate_typographic_dataset(&source, &TypographicSpec::new(2, 7), 4)?;
    println!("coordinates {:?}, font scale {}", manifest.coordinates, manifest.font_scale);
    for e in manifest.entries.iter().take(6) {
        println!("#{:<3} {:>4} -> wrote {:?}{}", e.index, source.class_names[e.label], e.text, if e.truncated { " (truncated)" } else { "" });
    }

    write_png(std::path::Path::new(&out), &attacked.examples[0].image)?;
    println!("first image saved to {out}");
    Ok(())
}
