//! Minimal SVG line plot.

use std::fmt::Write;

/// Line plot of `(x, y)` points with a labelled frame.
pub fn line_plot(points: &[(f64, f64)], x_label: &str, y_label: &str) -> String {
    let (w, h, m) = (480.0, 320.0, 50.0);
    let finite: Vec<(f64, f64)> = points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (0.0, 1.0, 0.0, 1.0);
    if !finite.is_empty() {
        x0 = finite.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        x1 = finite.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        y0 = finite.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        y1 = finite.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        let pad = if y0 == 0.0 { 1.0 } else { y0.abs() * 0.1 };
        y0 -= pad;
        y1 += pad;
    }
    let px = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let py = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let _ = writeln!(
        s,
        "<rect x=\"{m}\" y=\"{m}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>",
        w - 2.0 * m,
        h - 2.0 * m
    );
    let label = |s: &mut String, x: f64, y: f64, anchor: &str, text: &str| {
        let _ = writeln!(s, "<text x=\"{x:.1}\" y=\"{y:.1}\" font-size=\"11\" text-anchor=\"{anchor}\">{text}</text>");
    };
    label(&mut s, m, h - m + 15.0, "start", &format!("{x0:.4}"));
    label(&mut s, w - m, h - m + 15.0, "end", &format!("{x1:.4}"));
    label(&mut s, m - 4.0, h - m, "end", &format!("{y0:.4}"));
    label(&mut s, m - 4.0, m + 10.0, "end", &format!("{y1:.4}"));
    label(&mut s, w / 2.0, h - 12.0, "middle", x_label);
    label(&mut s, 12.0, m - 12.0, "start", y_label);
    if !finite.is_empty() {
        let pts: Vec<String> = finite.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\"/>",
            pts.join(" ")
        );
        for &(x, y) in &finite {
            let _ = writeln!(s, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"#1f77b4\"/>", px(x), py(y));
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plot_contains_every_point() {
        let s = line_plot(&[(0.0, 1.0), (1.0, 2.0), (2.0, f64::NAN)], "epoch", "perf");
        assert_eq!(s.matches("<circle").count(), 2);
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
        assert!(line_plot(&[], "x", "y").contains("</svg>"));
    }
}
