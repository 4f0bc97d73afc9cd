//! Image dumps: plain PPM (`P3`) for `d <= 3`, CSV of per-site vectors otherwise.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::tokenizer::Image;

/// Channel value `v` in `[-1, 1]` maps linearly onto `0..=255`, clamped.
fn to_byte(v: f64) -> u8 {
    (((v + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Plain-text pixmap; missing channels (`d < 3`) are written as 0.
pub fn to_ppm(image: &Image) -> String {
    let g = &image.0;
    assert!(g.dim <= 3, "PPM holds at most three channels");
    let mut out = format!("P3\n{} {}\n255\n", g.width, g.height);
    for i in 0..g.height {
        let row: Vec<String> = (0..g.width)
            .map(|j| {
                let v = g.vector(i * g.width + j);
                let px: Vec<String> = (0..3)
                    .map(|c| v.get(c).map_or(0, |&x| to_byte(x)).to_string())
                    .collect();
                px.join(" ")
            })
            .collect();
        let _ = writeln!(out, "{}", row.join("  "));
    }
    out
}

/// `row,col,v0,v1,...` with full-precision values.
pub fn to_csv(image: &Image) -> String {
    let g = &image.0;
    let mut out = String::from("row,col");
    for c in 0..g.dim {
        let _ = write!(out, ",v{c}");
    }
    out.push('\n');
    for i in 0..g.height {
        for j in 0..g.width {
            let _ = write!(out, "{i},{j}");
            for x in g.vector(i * g.width + j) {
                let _ = write!(out, ",{x}");
            }
            out.push('\n');
        }
    }
    out
}

/// Writes `stem.ppm` or `stem.csv` depending on the channel count; returns the path.
pub fn write_image(image: &Image, stem: &Path) -> Result<PathBuf> {
    let (path, body) = if image.0.dim <= 3 {
        (stem.with_extension("ppm"), to_ppm(image))
    } else {
        (stem.with_extension("csv"), to_csv(image))
    };
    std::fs::write(&path, body)?;
    Ok(path)
}
