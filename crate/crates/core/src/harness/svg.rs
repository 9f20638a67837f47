//! Minimal static SVG charts.

use std::fmt::Write;

/// One bar group member: per-layer `(mean, std)`.
#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub values: Vec<(Option<f64>, Option<f64>)>,
}

const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#edc948", "#b07aa1", "#9c755f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grouped bars per layer on a fixed `[-1, 1]` axis, with std error bars.
/// Missing means are drawn as nothing.
pub fn layer_bars(title: &str, series: &[Series]) -> String {
    let n_layers = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    let (left, top, plot_h) = (50.0, 40.0, 240.0);
    let group_w = 40.0 + 18.0 * series.len() as f64;
    let plot_w = group_w * n_layers.max(1) as f64;
    let legend_h = 16.0 * series.len() as f64;
    let (w, h) = (left + plot_w + 20.0, top + plot_h + 40.0 + legend_h);
    let y = |v: f64| top + (1.0 - v.clamp(-1.0, 1.0)) / 2.0 * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{left}" y="20" font-size="14">{}</text>"#, escape(title));
    for tick in [-1.0, -0.5, 0.0, 0.5, 1.0] {
        let ty = y(tick);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{ty:.1}" x2="{:.1}" y2="{ty:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{tick}</text>"##,
            left + plot_w,
            left - 4.0,
            ty + 4.0
        );
    }
    let zero = y(0.0);
    for l in 0..n_layers {
        let gx = left + l as f64 * group_w + 20.0;
        for (k, ser) in series.iter().enumerate() {
            let Some(&(Some(mean), std)) = ser.values.get(l) else {
                continue;
            };
            let x = gx + k as f64 * 18.0;
            let (y0, y1) = (zero.min(y(mean)), zero.max(y(mean)));
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{y0:.1}" width="14" height="{:.1}" fill="{}"/>"#,
                (y1 - y0).max(0.5),
                PALETTE[k % PALETTE.len()]
            );
            if let Some(sd) = std.filter(|sd| *sd > 0.0) {
                let cx = x + 7.0;
                let _ = writeln!(
                    s,
                    r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
                    y(mean + sd),
                    y(mean - sd)
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">layer {l}</text>"#,
            gx + 9.0 * series.len() as f64,
            top + plot_h + 16.0
        );
    }
    for (k, ser) in series.iter().enumerate() {
        let ly = top + plot_h + 34.0 + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{left}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{ly:.1}">{}</text>"#,
            ly - 9.0,
            PALETTE[k % PALETTE.len()],
            left + 14.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Interpolates white to dark blue.
fn color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        lerp(247.0, 8.0),
        lerp(251.0, 48.0),
        lerp(255.0, 107.0)
    )
}

/// Layers × steps heatmap. With `log_scale`, colors follow `log10` of the
/// values, zeros drawn at the smallest positive value.
pub fn heatmap(title: &str, rows: &[Vec<f64>], log_scale: bool) -> String {
    let n_steps = rows.iter().map(Vec::len).max().unwrap_or(0);
    let cell = (600.0 / n_steps.max(1) as f64).clamp(2.0, 24.0);
    let (left, top) = (60.0, 40.0);
    let (w, h) = (
        left + cell * n_steps as f64 + 90.0,
        top + 24.0 * rows.len() as f64 + 30.0,
    );
    let floor = rows
        .iter()
        .flatten()
        .copied()
        .filter(|v| *v > 0.0)
        .fold(f64::INFINITY, f64::min);
    let scale = |v: f64| {
        if log_scale {
            if floor.is_finite() {
                v.max(floor).log10()
            } else {
                0.0
            }
        } else {
            v
        }
    };
    let vals: Vec<f64> = rows.iter().flatten().map(|&v| scale(v)).collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{left}" y="20" font-size="14">{}</text>"#, escape(title));
    for (l, row) in rows.iter().enumerate() {
        let y = top + 24.0 * l as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">layer {l}</text>"#,
            left - 4.0,
            y + 15.0
        );
        for (k, &v) in row.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{y:.1}" width="{cell:.2}" height="22" fill="{}"><title>{v:.3e}</title></rect>"#,
                left + cell * k as f64,
                color((scale(v) - lo) / span)
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="{:.1}">step →  range [{lo:.3}, {hi:.3}]{}</text>"#,
        h - 8.0,
        if log_scale { " log10" } else { "" }
    );
    s.push_str("</svg>\n");
    s
}
