//! Standalone SVG charts.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, WIDTH / 2.0, escape(title));
    s
}

fn axes(s: &mut String, x_label: &str, y_label: &str, y_max: f64) {
    let (x0, y0, x1, y1) = (LEFT, HEIGHT - BOTTOM, WIDTH - RIGHT, TOP);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for i in 0..=4 {
        let v = y_max * i as f64 / 4.0;
        let y = y0 - (y0 - y1) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, x0 - 6.0, y + 4.0);
        let _ = writeln!(s, r##"<line x1="{x0}" y1="{y:.1}" x2="{x1}" y2="{y:.1}" stroke="#ddd"/>"##);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, HEIGHT - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn nice_max(values: &[f64]) -> f64 {
    let m = values.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max);
    if m <= 0.0 {
        1.0
    } else {
        m * 1.1
    }
}

/// Explicit empty-data chart.
pub fn placeholder(title: &str, message: &str) -> String {
    let mut s = open(title);
    let _ = writeln!(
        s,
        r##"<text class="placeholder" x="{}" y="{}" text-anchor="middle" font-size="18" fill="#888">{}</text>"##,
        WIDTH / 2.0,
        HEIGHT / 2.0,
        escape(message)
    );
    s.push_str("</svg>\n");
    s
}

/// One bar per value; flagged bars are drawn in the highlight colour and
/// marked with `*` under the axis. Bars are labelled by index unless
/// `labels` is given.
pub fn bar_chart(title: &str, x_label: &str, y_label: &str, values: &[f64], flagged: &[bool], labels: Option<&[String]>) -> String {
    let mut s = open(title);
    let y_max = nice_max(values);
    axes(&mut s, x_label, y_label, y_max);
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let slot = plot_w / values.len().max(1) as f64;
    for (i, &v) in values.iter().enumerate() {
        let target = flagged.get(i).copied().unwrap_or(false);
        let h = if v.is_finite() { (v / y_max * plot_h).max(0.0) } else { 0.0 };
        let x = LEFT + i as f64 * slot + slot * 0.15;
        let y = HEIGHT - BOTTOM - h;
        let (class, fill) = if target { ("bar target", "#2b7bba") } else { ("bar outlier", "#d9822b") };
        let _ = writeln!(
            s,
            r#"<rect class="{class}" x="{x:.2}" y="{y:.2}" width="{:.2}" height="{h:.2}" fill="{fill}"><title>class {i}: {v:.4}</title></rect>"#,
            slot * 0.7
        );
        let mark = if target { "*" } else { "" };
        let name = labels.and_then(|l| l.get(i)).map(|l| escape(l)).unwrap_or_else(|| i.to_string());
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{name}{mark}</text>"#,
            x + slot * 0.35,
            HEIGHT - BOTTOM + 16.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// One polyline through `(x, y)` points with a dot per point.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, xs: &[f64], ys: &[f64]) -> String {
    let mut s = open(title);
    let y_max = nice_max(ys);
    axes(&mut s, x_label, y_label, y_max);
    let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let points: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| (LEFT + (x - lo) / span * plot_w, HEIGHT - BOTTOM - y.max(0.0) / y_max * plot_h))
        .collect();
    let path: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#2b7bba" stroke-width="2"/>"##, path.join(" "));
    for ((px, py), (&x, &y)) in points.iter().zip(xs.iter().zip(ys)) {
        let _ = writeln!(s, r##"<circle cx="{px:.2}" cy="{py:.2}" r="3" fill="#2b7bba"><title>{x}: {y:.4}</title></circle>"##);
        let _ = writeln!(s, r#"<text x="{px:.2}" y="{}" text-anchor="middle">{x}</text>"#, HEIGHT - BOTTOM + 16.0);
    }
    s.push_str("</svg>\n");
    s
}
