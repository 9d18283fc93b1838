//! Heat-map renderings of square matrices: an 8-bit PGM for quick viewing
//! and an SVG with row/column labels and cell values.

use anyhow::{ensure, Context, Result};
use klgrade::preprocess::{write_pgm8, Image};
use std::fmt::Write as _;
use std::path::Path;

/// Writes `values` (rows × cols) as a grayscale PGM, `cell` pixels per
/// entry; `lo` maps to black and `hi` to white.
pub fn write_pgm(path: &Path, values: &[Vec<f64>], lo: f64, hi: f64, cell: usize) -> Result<()> {
    ensure!(!values.is_empty() && hi > lo, "heat map needs data and a non-empty range");
    let rows = values.len();
    let cols = values[0].len();
    let (w, h) = (cols * cell, rows * cell);
    let mut data = vec![0u8; w * h];
    for (y, px_row) in data.chunks_mut(w).enumerate() {
        for (x, px) in px_row.iter_mut().enumerate() {
            let v = values[y / cell][x / cell];
            *px = (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let img = Image {
        width: w,
        height: h,
        spacing: 1.0,
        data,
    };
    write_pgm8(path, &img).with_context(|| format!("cannot write {}", path.display()))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Labeled SVG heat map; cell text uses `decimals` digits.
pub fn write_svg(
    path: &Path,
    title: &str,
    row_labels: &[String],
    col_labels: &[String],
    values: &[Vec<f64>],
    lo: f64,
    hi: f64,
    decimals: usize,
) -> Result<()> {
    ensure!(values.len() == row_labels.len(), "row labels do not match the matrix");
    let cell = 56;
    let left = 110;
    let top = 90;
    let w = left + cell * col_labels.len() + 20;
    let h = top + cell * row_labels.len() + 20;
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#)?;
    writeln!(s, r#"<text x="{left}" y="20" font-size="14">{}</text>"#, escape(title))?;
    for (j, label) in col_labels.iter().enumerate() {
        let x = left + j * cell + cell / 2;
        writeln!(s, r#"<text x="{x}" y="{}" text-anchor="end" transform="rotate(-45 {x} {})">{}</text>"#, top - 6, top - 6, escape(label))?;
    }
    for (i, (label, row)) in row_labels.iter().zip(values).enumerate() {
        let y = top + i * cell;
        writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, left - 6, y + cell / 2 + 4, escape(label))?;
        for (j, &v) in row.iter().enumerate() {
            let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
            let shade = (255.0 - 200.0 * t).round() as u8;
            let ink = if t > 0.6 { "white" } else { "black" };
            let x = left + j * cell;
            writeln!(s, r#"<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)" stroke="gray"/>"#)?;
            writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{v:.decimals$}</text>"#, x + cell / 2, y + cell / 2 + 4)?;
        }
    }
    s.push_str("</svg>\n");
    std::fs::write(path, s).with_context(|| format!("cannot write {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_has_one_block_per_cell() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let v: Vec<Vec<f64>> = (0..5).map(|i| (0..5).map(|j| (i * 5 + j) as f64).collect()).collect();
        write_pgm(&p, &v, 0.0, 24.0, 4).unwrap();
        let img = klgrade::preprocess::read_pgm(&p, 1.0).unwrap();
        assert_eq!((img.width, img.height), (20, 20));
        assert_eq!(img.get(0, 0), 0);
        assert_eq!(img.get(19, 19), 255);
    }

    #[test]
    fn svg_contains_every_cell() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.svg");
        let labels: Vec<String> = (0..5).map(|i| i.to_string()).collect();
        let v = vec![vec![0.5; 5]; 5];
        write_svg(&p, "t", &labels, &labels, &v, 0.0, 1.0, 2).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.matches("<rect").count(), 25);
    }
}
