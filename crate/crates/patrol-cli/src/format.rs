//! File formats: strategy CSV (one row per node, full-precision decimals)
//! and the SVG heatmap export.

use std::path::Path;

use ndarray::Array2;

use patrol::chain::TransitionMatrix;

use crate::{CliError, CliResult};

/// Render a strategy as CSV. Entries use the shortest decimal form that
/// parses back to the identical f64, so write → read → write is stable.
pub fn strategy_to_csv(p: &TransitionMatrix) -> String {
    let arr = p.as_array();
    let n = arr.nrows();
    let mut out = String::new();
    for i in 0..n {
        for j in 0..n {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}", arr[(i, j)]));
        }
        out.push('\n');
    }
    out
}

/// Parse a strategy CSV. Shape and number-format problems, and rows whose
/// sums are off by more than 1e-9, are all reported as invalid matrices.
pub fn strategy_from_csv(text: &str) -> CliResult<TransitionMatrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|_| {
                    CliError::InvalidMatrix(format!(
                        "line {}: `{}` is not a number",
                        lineno + 1,
                        cell.trim()
                    ))
                })
            })
            .collect::<CliResult<_>>()?;
        rows.push(row);
    }
    let n = rows.len();
    if n == 0 {
        return Err(CliError::InvalidMatrix("empty strategy file".into()));
    }
    if rows.iter().any(|r| r.len() != n) {
        return Err(CliError::InvalidMatrix(format!(
            "expected a square {n}x{n} matrix"
        )));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let arr = Array2::from_shape_vec((n, n), flat).expect("shape checked above");
    TransitionMatrix::new(arr).map_err(|e| CliError::InvalidMatrix(e.to_string()))
}

/// Load a strategy CSV from disk. A missing or unreadable file is a spec
/// problem (exit 2); bad content is an invalid matrix (exit 3).
pub fn load_strategy(path: &Path) -> CliResult<TransitionMatrix> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Spec(format!("cannot read strategy file {}: {e}", path.display())))?;
    strategy_from_csv(&text)
}

pub fn write_file(path: &Path, content: &str) -> CliResult<()> {
    std::fs::write(path, content)
        .map_err(|e| CliError::Unwritable(format!("{}: {e}", path.display())))
}

/// Linear [0,1] → color ramp (light to dark blue), endpoints clamped.
fn ramp(v: f64) -> (u8, u8, u8) {
    let t = v.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    (lerp(247.0, 8.0), lerp(251.0, 48.0), lerp(255.0, 107.0))
}

/// Standalone SVG heatmap of a row-stochastic matrix. Colors map [0,1]
/// linearly; cells are annotated with two-decimal values, axes with node
/// labels when provided.
pub fn heatmap_svg(p: &Array2<f64>, labels: Option<&[String]>) -> String {
    let n = p.nrows();
    let cell = 42.0;
    let margin = if labels.is_some() { 90.0 } else { 24.0 };
    let size = margin + cell * n as f64 + 12.0;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size:.0}\" height=\"{size:.0}\" \
         viewBox=\"0 0 {size:.0} {size:.0}\">\n"
    ));
    svg.push_str("<style>text{font-family:monospace;font-size:11px;}</style>\n");
    for i in 0..n {
        for j in 0..n {
            let v = p[(i, j)];
            let (r, g, b) = ramp(v);
            let x = margin + cell * j as f64;
            let y = margin + cell * i as f64;
            svg.push_str(&format!(
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{cell:.1}\" height=\"{cell:.1}\" \
                 fill=\"rgb({r},{g},{b})\" stroke=\"white\"/>\n"
            ));
            let text_fill = if v > 0.55 { "white" } else { "black" };
            svg.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" fill=\"{text_fill}\">{v:.2}</text>\n",
                x + cell / 2.0,
                y + cell / 2.0 + 4.0
            ));
        }
    }
    if let Some(labels) = labels {
        for (i, label) in labels.iter().enumerate().take(n) {
            let y = margin + cell * i as f64 + cell / 2.0 + 4.0;
            svg.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{y:.1}\" text-anchor=\"end\">{label}</text>\n",
                margin - 8.0
            ));
            let x = margin + cell * i as f64 + cell / 2.0;
            svg.push_str(&format!(
                "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{label}</text>\n",
                margin - 8.0
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}
