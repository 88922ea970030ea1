//! Render one phantom per finding (plus the shifted style) into a PNG sheet.
//!
//! cargo run -p ldm-core --example motif_sheet -- out.png

use ldm_core::findings::{FindingLabel, LabelVector};
use ldm_core::imageio;
use ldm_core::phantom::{generate_phantom_styled, PhantomStyle};

fn main() -> ldm_core::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "motif_sheet.png".into());
    let size = 64;
    let mut tiles = Vec::new();
    for style in [PhantomStyle::default(), PhantomStyle::shifted()] {
        for label in FindingLabel::all() {
            let img = generate_phantom_styled(&LabelVector::single(label), size, 7, &style)?;
            tiles.push(img.pixels);
        }
    }
    let refs: Vec<&[f64]> = tiles.iter().map(|t| t.as_slice()).collect();
    let sheet = imageio::grid(&refs, size, 14);
    imageio::write_gray_png(out.as_ref(), sheet.width, sheet.height, &sheet.pixels)
}
