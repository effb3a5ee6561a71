//! Tiny static SVG line charts for run artifacts. Fixed-size polyline
//! plots with nice-number ticks, a legend, and an emphasized zero line
//! when the vertical range crosses zero; no drawing dependencies.

/// One named curve.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 76.0;
const RIGHT: f64 = 842.0;
const TOP: f64 = 46.0;
const BOTTOM: f64 = 424.0;
/// Dense trajectories are strided down to at most this many vertices.
const MAX_POINTS: usize = 1600;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Renders a complete standalone SVG document.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let mut svg = String::with_capacity(16 * 1024);
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
        (LEFT + RIGHT) / 2.0,
        escape(title)
    ));

    let finite: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    if finite.is_empty() {
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\">no data</text>\n</svg>\n",
            (LEFT + RIGHT) / 2.0,
            (TOP + BOTTOM) / 2.0
        ));
        return svg;
    }

    let (x_min, x_max) = padded_range(finite.iter().map(|p| p.0), 0.0);
    let (y_min, y_max) = padded_range(finite.iter().map(|p| p.1), 0.04);
    let x_px = |x: f64| LEFT + (x - x_min) / (x_max - x_min) * (RIGHT - LEFT);
    let y_px = |y: f64| BOTTOM - (y - y_min) / (y_max - y_min) * (BOTTOM - TOP);

    // Grid and tick labels.
    let x_step = nice_step(x_max - x_min, 6);
    let y_step = nice_step(y_max - y_min, 6);
    for tick in ticks(x_min, x_max, x_step) {
        let px = x_px(tick);
        svg.push_str(&format!(
            "<line x1=\"{px:.2}\" y1=\"{TOP}\" x2=\"{px:.2}\" y2=\"{BOTTOM}\" stroke=\"#e0e0e0\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{px:.2}\" y=\"{}\" text-anchor=\"middle\" font-size=\"11\">{}</text>\n",
            BOTTOM + 16.0,
            fmt_tick(tick, x_step)
        ));
    }
    for tick in ticks(y_min, y_max, y_step) {
        let py = y_px(tick);
        svg.push_str(&format!(
            "<line x1=\"{LEFT}\" y1=\"{py:.2}\" x2=\"{RIGHT}\" y2=\"{py:.2}\" stroke=\"#e0e0e0\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"11\">{}</text>\n",
            LEFT - 6.0,
            py + 4.0,
            fmt_tick(tick, y_step)
        ));
    }
    if y_min < 0.0 && y_max > 0.0 {
        let py = y_px(0.0);
        svg.push_str(&format!(
            "<line class=\"zero\" x1=\"{LEFT}\" y1=\"{py:.2}\" x2=\"{RIGHT}\" y2=\"{py:.2}\" \
             stroke=\"#555555\" stroke-dasharray=\"5 4\"/>\n"
        ));
    }

    // Axes frame and labels.
    svg.push_str(&format!(
        "<rect x=\"{LEFT}\" y=\"{TOP}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#333333\"/>\n",
        RIGHT - LEFT,
        BOTTOM - TOP
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        (LEFT + RIGHT) / 2.0,
        BOTTOM + 40.0,
        escape(x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"20\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\" \
         transform=\"rotate(-90 20 {})\">{}</text>\n",
        (TOP + BOTTOM) / 2.0,
        (TOP + BOTTOM) / 2.0,
        escape(y_label)
    ));

    // Curves.
    for (idx, s) in series.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        let pts: Vec<&(f64, f64)> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .collect();
        if pts.is_empty() {
            continue;
        }
        let stride = pts.len().div_ceil(MAX_POINTS).max(1);
        let mut coords = String::new();
        for (i, (x, y)) in pts.iter().enumerate() {
            if i % stride != 0 && i != pts.len() - 1 {
                continue;
            }
            coords.push_str(&format!("{:.2},{:.2} ", x_px(*x), y_px(*y)));
        }
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            coords.trim_end()
        ));
    }

    // Legend, top-right inside the frame.
    for (idx, s) in series.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        let y = TOP + 16.0 + 16.0 * idx as f64;
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y:.2}\" x2=\"{}\" y2=\"{y:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            RIGHT - 150.0,
            RIGHT - 126.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.2}\" font-size=\"12\">{}</text>\n",
            RIGHT - 120.0,
            y + 4.0,
            escape(&s.label)
        ));
    }

    svg.push_str("</svg>\n");
    svg
}

/// Extends (min, max) of an iterator by a symmetric fraction, handling
/// empty and degenerate (flat) data.
fn padded_range(values: impl Iterator<Item = f64>, pad: f64) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        let delta = lo.abs().max(1.0) * 0.1;
        return (lo - delta, hi + delta);
    }
    let span = hi - lo;
    (lo - pad * span, hi + pad * span)
}

/// Largest 1/2/5 decade step giving at most `max_ticks` intervals.
fn nice_step(span: f64, max_ticks: usize) -> f64 {
    let raw = span / max_ticks as f64;
    let mag = 10f64.powf(raw.log10().floor());
    for mult in [1.0, 2.0, 5.0, 10.0] {
        if mag * mult >= raw {
            return mag * mult;
        }
    }
    mag * 10.0
}

fn ticks(min: f64, max: f64, step: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut k = (min / step).ceil();
    // Snap ticks to exact multiples so labels round cleanly.
    while k * step <= max + 1e-9 * step {
        out.push(k * step);
        k += 1.0;
    }
    out
}

fn fmt_tick(v: f64, step: f64) -> String {
    let v = if v == 0.0 { 0.0 } else { v };
    if step >= 1e5 || step < 1e-4 {
        return format!("{v:.1e}");
    }
    let decimals = if step >= 1.0 {
        0
    } else {
        (-step.log10().floor()) as usize
    };
    format!("{v:.decimals$}")
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize, f: impl Fn(f64) -> f64) -> Vec<(f64, f64)> {
        (0..n).map(|i| (i as f64, f(i as f64))).collect()
    }

    #[test]
    fn chart_holds_one_polyline_and_legend_entry_per_series() {
        let chart = line_chart(
            "demo",
            "t",
            "y",
            &[
                Series {
                    label: "first".into(),
                    points: ramp(100, |x| x * 0.5),
                },
                Series {
                    label: "second".into(),
                    points: ramp(100, |x| 50.0 - x),
                },
            ],
        );
        assert_eq!(chart.matches("<polyline").count(), 2);
        assert!(chart.contains(">first<"));
        assert!(chart.contains(">second<"));
        assert!(chart.contains("<svg "));
        assert!(chart.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn zero_line_appears_only_when_the_range_crosses_zero() {
        let crossing = line_chart(
            "c",
            "x",
            "y",
            &[Series {
                label: "s".into(),
                points: ramp(10, |x| x - 5.0),
            }],
        );
        assert!(crossing.contains("class=\"zero\""));
        let positive = line_chart(
            "p",
            "x",
            "y",
            &[Series {
                label: "s".into(),
                points: ramp(10, |x| x + 5.0),
            }],
        );
        assert!(!positive.contains("class=\"zero\""));
    }

    #[test]
    fn labels_are_xml_escaped() {
        let chart = line_chart(
            "a < b & c",
            "x",
            "y",
            &[Series {
                label: "u<v".into(),
                points: ramp(3, |x| x),
            }],
        );
        assert!(chart.contains("a &lt; b &amp; c"));
        assert!(chart.contains("u&lt;v"));
        assert!(!chart.contains("u<v"));
    }

    #[test]
    fn degenerate_and_empty_data_render_without_nans() {
        let flat = line_chart(
            "flat",
            "x",
            "y",
            &[Series {
                label: "s".into(),
                points: vec![(1.0, 2.0)],
            }],
        );
        assert!(!flat.contains("NaN"));
        let empty = line_chart("none", "x", "y", &[]);
        assert!(empty.contains("no data"));
        assert!(!empty.contains("NaN"));
    }

    #[test]
    fn dense_series_are_strided_below_the_vertex_cap() {
        let chart = line_chart(
            "dense",
            "x",
            "y",
            &[Series {
                label: "s".into(),
                points: ramp(100_000, |x| (x * 0.001).sin()),
            }],
        );
        let points_attr = chart
            .split("points=\"")
            .nth(1)
            .unwrap()
            .split('"')
            .next()
            .unwrap();
        let vertices = points_attr.split_whitespace().count();
        assert!(vertices <= MAX_POINTS + 1, "{vertices} vertices");
        assert!(vertices > 100);
    }

    #[test]
    fn tick_formats_match_the_step_scale() {
        assert_eq!(fmt_tick(0.30000000000000004, 0.1), "0.3");
        assert_eq!(fmt_tick(1500.0, 500.0), "1500");
        assert_eq!(fmt_tick(-0.0, 0.5), "0.0");
        assert_eq!(fmt_tick(2e-6, 1e-6), "2.0e-6");
    }
}
