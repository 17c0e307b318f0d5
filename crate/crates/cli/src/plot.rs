//! Static SVG figures: metric curves and orthographic scatter snapshots.

use std::fmt::Write as _;

use pcc_core::PointCloud;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Axis range with a little padding; degenerate ranges are widened.
fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

/// Line chart of named series of `(x, y)` points.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 150.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let (x0, x1) = range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)));
    let (y0, y1) = range(series.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)));
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = x0 + t * (x1 - x0);
        let yv = y0 + t * (y1 - y0);
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(xv),
            top + ph + 16.0,
            fmt_tick(xv)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            sy(yv) + 4.0,
            fmt_tick(yv)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, (name, points)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        let ly = top + 14.0 + 18.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            w - right + 10.0,
            w - right + 30.0,
            w - right + 36.0,
            ly + 4.0,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Three orthographic views (x–y, x–z, y–z) of overlaid clouds in
/// `[-1, 1]³`-ish coordinates.
pub fn scatter_views(title: &str, clouds: &[(&str, &PointCloud)]) -> String {
    let panel = 240.0;
    let gap = 20.0;
    let top = 50.0;
    let w = 3.0 * panel + 4.0 * gap;
    let h = top + panel + 30.0;
    let (lo, hi) = range(clouds.iter().flat_map(|(_, c)| c.points().iter().flat_map(|p| p.iter().copied())));
    let views = [(0usize, 1usize, "x-y"), (0, 2, "x-z"), (1, 2, "y-z")];

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title));
    for (i, (name, _)) in clouds.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.1}" cy="36" r="4" fill="{}"/><text x="{:.1}" y="40">{}</text>"#,
            gap + 120.0 * i as f64,
            PALETTE[i % PALETTE.len()],
            gap + 8.0 + 120.0 * i as f64,
            escape(name)
        );
    }
    for (v, &(a, b, label)) in views.iter().enumerate() {
        let ox = gap + v as f64 * (panel + gap);
        let s = |t: f64| (t - lo) / (hi - lo) * panel;
        let _ = writeln!(
            svg,
            r#"<rect x="{ox}" y="{top}" width="{panel}" height="{panel}" fill="none" stroke="gray"/><text x="{:.1}" y="{:.1}" text-anchor="middle">{label}</text>"#,
            ox + panel / 2.0,
            top + panel + 18.0
        );
        for (i, (_, cloud)) in clouds.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let _ = write!(svg, r#"<g fill="{color}" fill-opacity="0.7">"#);
            for p in cloud.points() {
                let _ = write!(
                    svg,
                    r#"<circle cx="{:.1}" cy="{:.1}" r="1.4"/>"#,
                    ox + s(p[a]),
                    top + panel - s(p[b])
                );
            }
            svg.push_str("</g>\n");
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_chart_has_one_polyline_per_series() {
        let svg = line_chart(
            "emd",
            "epoch",
            "value",
            &[
                ("train".into(), vec![(1.0, 0.5), (2.0, 0.4)]),
                ("val <b>".into(), vec![(0.0, 0.9), (2.0, 0.3)]),
            ],
        );
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("val &lt;b&gt;"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn scatter_draws_every_point_in_every_view() {
        let c = PointCloud::canonical(vec![[0.0, 0.0, 0.0], [1.0, -1.0, 0.5]]).unwrap();
        let svg = scatter_views("snap", &[("pred", &c), ("gt", &c)]);
        assert_eq!(svg.matches(r#"r="1.4""#).count(), 2 * 2 * 3);
    }

    #[test]
    fn degenerate_ranges_are_widened() {
        assert_eq!(range([2.0, 2.0].into_iter()), (1.5, 2.5));
        assert_eq!(range(std::iter::empty()), (0.0, 1.0));
    }
}
