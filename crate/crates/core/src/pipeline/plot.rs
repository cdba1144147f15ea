//! Minimal static SVG output: line plots with uncertainty bands and
//! heatmaps. Plots are derived artifacts; the numbers behind every figure
//! are always written as CSV alongside.

use std::io::Write;
use std::path::Path;

const W: f64 = 720.0;
const H: f64 = 480.0;
const MARGIN: f64 = 50.0;

fn scale(v: f64, lo: f64, hi: f64, out_lo: f64, out_hi: f64) -> f64 {
    if hi > lo {
        out_lo + (v - lo) / (hi - lo) * (out_hi - out_lo)
    } else {
        0.5 * (out_lo + out_hi)
    }
}

fn bounds(series: &[&[f64]]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in series {
        for v in s.iter().filter(|v| v.is_finite()) {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn polyline(x: &[f64], y: &[f64], xr: (f64, f64), yr: (f64, f64)) -> String {
    x.iter()
        .zip(y.iter())
        .map(|(a, b)| {
            format!(
                "{:.2},{:.2}",
                scale(*a, xr.0, xr.1, MARGIN, W - MARGIN),
                scale(*b, yr.0, yr.1, H - MARGIN, MARGIN)
            )
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Mean line with a shaded band (e.g. +-2 std), optional truth line and
/// observation markers.
#[allow(clippy::too_many_arguments)]
pub fn line_plot_with_band(
    path: &Path,
    title: &str,
    x: &[f64],
    mean: &[f64],
    lo: &[f64],
    hi: &[f64],
    truth: Option<&[f64]>,
    obs: Option<(&[f64], &[f64])>,
) -> std::io::Result<()> {
    let xr = bounds(&[x]);
    let mut all: Vec<&[f64]> = vec![mean, lo, hi];
    if let Some(t) = truth {
        all.push(t);
    }
    if let Some((_, oy)) = obs {
        all.push(oy);
    }
    let yr = bounds(&all);

    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )?;
    writeln!(f, r#"<rect width="{W}" height="{H}" fill="white"/>"#)?;
    writeln!(
        f,
        r#"<text x="{:.0}" y="24" font-size="16" font-family="sans-serif">{}</text>"#,
        MARGIN, title
    )?;
    // band polygon: hi forward, lo backward
    let mut pts = Vec::new();
    for (a, b) in x.iter().zip(hi.iter()) {
        pts.push(format!(
            "{:.2},{:.2}",
            scale(*a, xr.0, xr.1, MARGIN, W - MARGIN),
            scale(*b, yr.0, yr.1, H - MARGIN, MARGIN)
        ));
    }
    for (a, b) in x.iter().zip(lo.iter()).rev() {
        pts.push(format!(
            "{:.2},{:.2}",
            scale(*a, xr.0, xr.1, MARGIN, W - MARGIN),
            scale(*b, yr.0, yr.1, H - MARGIN, MARGIN)
        ));
    }
    writeln!(
        f,
        r##"<polygon points="{}" fill="#9ecae1" fill-opacity="0.45" stroke="none"/>"##,
        pts.join(" ")
    )?;
    if let Some(t) = truth {
        writeln!(
            f,
            r##"<polyline points="{}" fill="none" stroke="#333333" stroke-width="1.5" stroke-dasharray="6,4"/>"##,
            polyline(x, t, xr, yr)
        )?;
    }
    writeln!(
        f,
        r##"<polyline points="{}" fill="none" stroke="#d62728" stroke-width="2"/>"##,
        polyline(x, mean, xr, yr)
    )?;
    if let Some((ox, oy)) = obs {
        for (a, b) in ox.iter().zip(oy.iter()) {
            writeln!(
                f,
                r##"<circle cx="{:.2}" cy="{:.2}" r="4" fill="#2ca02c"/>"##,
                scale(*a, xr.0, xr.1, MARGIN, W - MARGIN),
                scale(*b, yr.0, yr.1, H - MARGIN, MARGIN)
            )?;
        }
    }
    // axes
    writeln!(
        f,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="black"/>"#,
        m = MARGIN,
        r = W - MARGIN,
        t = MARGIN,
        b = H - MARGIN
    )?;
    for k in 0..=4 {
        let xv = xr.0 + (xr.1 - xr.0) * k as f64 / 4.0;
        let yv = yr.0 + (yr.1 - yr.0) * k as f64 / 4.0;
        writeln!(
            f,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" font-family="sans-serif" text-anchor="middle">{:.2}</text>"#,
            scale(xv, xr.0, xr.1, MARGIN, W - MARGIN),
            H - MARGIN + 18.0,
            xv
        )?;
        writeln!(
            f,
            r#"<text x="{:.1}" y="{:.1}" font-size="11" font-family="sans-serif" text-anchor="end">{:.2}</text>"#,
            MARGIN - 6.0,
            scale(yv, yr.0, yr.1, H - MARGIN, MARGIN) + 4.0,
            yv
        )?;
    }
    writeln!(f, "</svg>")?;
    Ok(())
}

/// Diverging blue-white-red color ramp.
fn ramp(t: f64) -> (u8, u8, u8) {
    let t = t.clamp(0.0, 1.0);
    if t < 0.5 {
        let s = t / 0.5;
        (
            (49.0 + s * (247.0 - 49.0)) as u8,
            (54.0 + s * (247.0 - 54.0)) as u8,
            (149.0 + s * (247.0 - 149.0)) as u8,
        )
    } else {
        let s = (t - 0.5) / 0.5;
        (
            (247.0 + s * (165.0 - 247.0)) as u8,
            (247.0 + s * (0.0 - 247.0)) as u8,
            (247.0 + s * (38.0 - 247.0)) as u8,
        )
    }
}

/// Heatmap of `values[(i, j)]` laid out with i along x and j along y
/// (row-major over the x index, matching the solver grids).
pub fn heatmap(
    path: &Path,
    title: &str,
    n1: usize,
    n2: usize,
    values: &[f64],
) -> std::io::Result<()> {
    assert_eq!(values.len(), n1 * n2);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let side = 520.0;
    let cw = side / n1 as f64;
    let ch = side / n2 as f64;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let width = side + 2.0 * MARGIN + 60.0;
    let height = side + 2.0 * MARGIN;
    writeln!(
        f,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    )?;
    writeln!(f, r#"<rect width="{width}" height="{height}" fill="white"/>"#)?;
    writeln!(
        f,
        r#"<text x="{:.0}" y="26" font-size="16" font-family="sans-serif">{} (min {:.3e}, max {:.3e})</text>"#,
        MARGIN, title, lo, hi
    )?;
    for i in 0..n1 {
        for j in 0..n2 {
            let v = values[i * n2 + j];
            let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
            let (r, g, b) = ramp(t);
            // y axis points up
            let x = MARGIN + i as f64 * cw;
            let y = MARGIN + side - (j + 1) as f64 * ch;
            writeln!(
                f,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="rgb({r},{g},{b})"/>"#,
                cw + 0.5,
                ch + 0.5
            )?;
        }
    }
    // color bar
    for k in 0..64 {
        let t = k as f64 / 63.0;
        let (r, g, b) = ramp(t);
        let y = MARGIN + side - (t * side);
        writeln!(
            f,
            r#"<rect x="{:.1}" y="{:.1}" width="18" height="{:.2}" fill="rgb({r},{g},{b})"/>"#,
            MARGIN + side + 18.0,
            y - side / 63.0,
            side / 63.0 + 0.5
        )?;
    }
    writeln!(f, "</svg>")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_wellformed_svg() {
        let dir = tempfile::tempdir().unwrap();
        let x: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
        let mean: Vec<f64> = x.iter().map(|v| (6.0 * v).sin()).collect();
        let lo: Vec<f64> = mean.iter().map(|v| v - 0.3).collect();
        let hi: Vec<f64> = mean.iter().map(|v| v + 0.3).collect();
        let p = dir.path().join("line.svg");
        line_plot_with_band(&p, "test", &x, &mean, &lo, &hi, Some(&mean), None).unwrap();
        let body = std::fs::read_to_string(&p).unwrap();
        assert!(body.starts_with("<svg"));
        assert!(body.trim_end().ends_with("</svg>"));

        let p2 = dir.path().join("heat.svg");
        let vals: Vec<f64> = (0..36).map(|i| i as f64).collect();
        heatmap(&p2, "grid", 6, 6, &vals).unwrap();
        let body = std::fs::read_to_string(&p2).unwrap();
        assert!(body.contains("rect"));
    }
}
