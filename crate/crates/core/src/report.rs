//! Exports for learned operators: CSV tables and SVG heatmaps.

use std::fmt::Write as _;

use crate::error::Result;
use crate::serial::fmt_f64;
use crate::synthetic::{spectral_response, Sample};
use crate::tensor::Matrix;

/// Largest number of cells drawn per heatmap side; bigger matrices are
/// block-averaged down to this.
pub const MAX_HEATMAP_CELLS: usize = 192;

/// One magnitude spectrum per operator row, `row,bin0,bin1,…`.
pub fn spectra_csv(op: &Matrix) -> Result<String> {
    let bins = op.cols().div_ceil(2);
    let mut out = String::from("row");
    for b in 0..bins {
        let _ = write!(out, ",bin{b}");
    }
    out.push('\n');
    for r in 0..op.rows() {
        let mag = spectral_response(op.row(r))?;
        let _ = write!(out, "{r}");
        for &v in mag.data() {
            let _ = write!(out, ",{}", fmt_f64(v));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Long-format reconstruction table `sample,regime,t,noisy,clean,predicted`.
pub fn reconstruction_csv(samples: &[Sample], predictions: &[Matrix]) -> String {
    let mut out = String::from("sample,regime,t,noisy,clean,predicted\n");
    for (i, (s, p)) in samples.iter().zip(predictions).enumerate() {
        for t in 0..s.clean.cols() {
            let _ = writeln!(
                out,
                "{i},{},{t},{},{},{}",
                s.regime,
                fmt_f64(s.noisy[(0, t)]),
                fmt_f64(s.clean[(0, t)]),
                fmt_f64(p[(0, t)])
            );
        }
    }
    out
}

/// Diverging map: blue below zero, white at zero, red above, saturating at
/// `±vmax`.
pub fn diverging_color(v: f64, vmax: f64) -> [u8; 3] {
    if vmax <= 0.0 || v == 0.0 || !v.is_finite() {
        return [255, 255, 255];
    }
    let t = (v / vmax).clamp(-1.0, 1.0);
    let fade = (255.0 * (1.0 - t.abs())).round() as u8;
    if t > 0.0 {
        [255, fade, fade]
    } else {
        [fade, fade, 255]
    }
}

/// Block-averages `m` so neither side exceeds `max_cells`.
pub fn downsample(m: &Matrix, max_cells: usize) -> Matrix {
    let fr = m.rows().div_ceil(max_cells).max(1);
    let fc = m.cols().div_ceil(max_cells).max(1);
    if fr == 1 && fc == 1 {
        return m.clone();
    }
    let rows = m.rows().div_ceil(fr);
    let cols = m.cols().div_ceil(fc);
    Matrix::from_fn(rows, cols, |r, c| {
        let (r0, r1) = (r * fr, ((r + 1) * fr).min(m.rows()));
        let (c0, c1) = (c * fc, ((c + 1) * fc).min(m.cols()));
        let mut total = 0.0;
        for i in r0..r1 {
            for j in c0..c1 {
                total += m[(i, j)];
            }
        }
        total / ((r1 - r0) * (c1 - c0)) as f64
    })
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Standalone SVG heatmap of `m` with a symmetric scale at `max |entry|`.
pub fn heatmap_svg(m: &Matrix, title: &str) -> String {
    let grid = downsample(m, MAX_HEATMAP_CELLS);
    let vmax = grid.max_abs();
    let cell = (480 / grid.rows().max(grid.cols())).clamp(2, 40);
    let margin = 24;
    let width = grid.cols() * cell + 2 * margin;
    let height = grid.rows() * cell + 2 * margin;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(out, "<title>{}</title>", escape(title));
    let _ = writeln!(
        out,
        r#"<desc>{}x{} operator, color scale ±{}</desc>"#,
        m.rows(),
        m.cols(),
        fmt_f64(vmax)
    );
    let _ = writeln!(
        out,
        r##"<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>"##
    );
    let _ = writeln!(out, r#"<g shape-rendering="crispEdges">"#);
    for r in 0..grid.rows() {
        for c in 0..grid.cols() {
            let [red, green, blue] = diverging_color(grid[(r, c)], vmax);
            let _ = writeln!(
                out,
                r##"<rect x="{}" y="{}" width="{cell}" height="{cell}" fill="#{red:02x}{green:02x}{blue:02x}"/>"##,
                margin + c * cell,
                margin + r * cell,
            );
        }
    }
    out.push_str("</g>\n");
    let _ = writeln!(
        out,
        r##"<text x="{margin}" y="16" font-family="sans-serif" font-size="12" fill="#000000">{}</text>"##,
        escape(title)
    );
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell_fills(svg: &str) -> Vec<String> {
        let doc = roxmltree::Document::parse(svg).expect("well-formed SVG");
        doc.descendants()
            .filter(|n| n.has_tag_name("rect") && n.parent().is_some_and(|p| p.has_tag_name("g")))
            .map(|n| n.attribute("fill").unwrap().to_string())
            .collect()
    }

    #[test]
    fn identity_heatmap_is_a_red_diagonal() {
        let fills = cell_fills(&heatmap_svg(&Matrix::identity(5), "identity"));
        assert_eq!(fills.len(), 25);
        for (i, f) in fills.iter().enumerate() {
            let want = if i / 5 == i % 5 { "#ff0000" } else { "#ffffff" };
            assert_eq!(f, want);
        }
    }

    #[test]
    fn mixed_sign_heatmap_has_both_hues() {
        let m = Matrix::from_rows(&[[1.0, -0.5], [0.0, -2.0]]).unwrap();
        let fills = cell_fills(&heatmap_svg(&m, "a < b & c"));
        assert_eq!(fills, vec!["#ff8080", "#bfbfff", "#ffffff", "#0000ff"]);
    }

    #[test]
    fn large_operators_are_downsampled() {
        let m = Matrix::identity(400);
        let grid = downsample(&m, MAX_HEATMAP_CELLS);
        assert_eq!(grid.shape(), (134, 134));
        assert!((grid.sum() - (133.0 / 3.0 + 1.0)).abs() < 1e-9);
        assert_eq!(cell_fills(&heatmap_svg(&m, "big")).len(), 134 * 134);
    }

    #[test]
    fn zero_matrix_is_all_white() {
        let fills = cell_fills(&heatmap_svg(&Matrix::zeros(3, 3), "zero"));
        assert!(fills.iter().all(|f| f == "#ffffff"));
    }

    #[test]
    fn spectra_table_shape() {
        let csv = spectra_csv(&Matrix::filled(3, 8, 0.125)).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "row,bin0,bin1,bin2,bin3");
        assert!(lines[1].starts_with("0,1.00000000000000000e0,"));
    }
}
