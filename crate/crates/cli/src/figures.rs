//! Static figures: PNG heatmaps and small hand-rolled SVG charts.

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::CliError;

const VIRIDIS: [[u8; 3]; 9] = [
    [68, 1, 84],
    [71, 44, 122],
    [59, 81, 139],
    [44, 113, 142],
    [33, 144, 141],
    [39, 173, 129],
    [92, 200, 99],
    [170, 220, 50],
    [253, 231, 37],
];
const UNDEFINED: [u8; 3] = [200, 200, 200];
const GAP: u32 = 4;

pub fn colormap(v: f64) -> [u8; 3] {
    if !v.is_finite() {
        return UNDEFINED;
    }
    let x = v.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f64;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f64;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    [0, 1, 2].map(|k| (a[k] as f64 + f * (b[k] as f64 - a[k] as f64)).round() as u8)
}

/// Writes a grid of heatmap tiles. `rows[r][c]` holds `nx * ny` values,
/// row-major; `NaN` renders grey. Values map linearly from `range`.
pub fn tiles_png(path: &Path, rows: &[Vec<Vec<f64>>], nx: usize, ny: usize, range: (f64, f64), scale: u32) -> Result<(), CliError> {
    let n_rows = rows.len() as u32;
    let n_cols = rows.iter().map(Vec::len).max().unwrap_or(0) as u32;
    if n_rows == 0 || n_cols == 0 {
        return Err(CliError::Figure {
            path: path.to_path_buf(),
            reason: "no tiles".into(),
        });
    }
    let (tw, th) = (nx as u32 * scale, ny as u32 * scale);
    let width = n_cols * tw + (n_cols - 1) * GAP;
    let height = n_rows * th + (n_rows - 1) * GAP;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let span = (range.1 - range.0).max(1e-12);
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            let (ox, oy) = (c as u32 * (tw + GAP), r as u32 * (th + GAP));
            for y in 0..th {
                for x in 0..tw {
                    let v = tile[(y / scale) as usize * nx + (x / scale) as usize];
                    img.put_pixel(ox + x, oy + y, Rgb(colormap((v - range.0) / span)));
                }
            }
        }
    }
    img.save(path).map_err(|e| CliError::Figure {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Minimal SVG document builder.
pub struct Svg {
    width: f64,
    height: f64,
    body: String,
}

impl Svg {
    pub fn new(width: f64, height: f64) -> Self {
        Svg {
            width,
            height,
            body: String::new(),
        }
    }

    pub fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, extra: &str) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{stroke}" {extra}/>"#
        );
    }

    pub fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(self.body, r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}"/>"#);
    }

    pub fn circle(&mut self, x: f64, y: f64, r: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r:.2}" fill="{fill}" fill-opacity="0.75"/>"#
        );
    }

    pub fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str) {
        let p: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="1.5"/>"#,
            p.join(" ")
        );
    }

    pub fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, s: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" font-size="{size}" font-family="sans-serif" text-anchor="{anchor}">{}</text>"#,
            escape(s)
        );
    }

    pub fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

pub fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn hex_color(rgb: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", rgb[0], rgb[1], rgb[2])
}

/// Plot area with linear axes and tick labels.
struct Axes {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    xr: (f64, f64),
    yr: (f64, f64),
}

impl Axes {
    fn px(&self, x: f64) -> f64 {
        self.x0 + (x - self.xr.0) / (self.xr.1 - self.xr.0) * self.w
    }

    fn py(&self, y: f64) -> f64 {
        self.y0 + self.h - (y - self.yr.0) / (self.yr.1 - self.yr.0) * self.h
    }

    fn draw(&self, svg: &mut Svg, xlabel: &str, ylabel: &str, title: &str) {
        svg.line(self.x0, self.y0 + self.h, self.x0 + self.w, self.y0 + self.h, "black", "");
        svg.line(self.x0, self.y0, self.x0, self.y0 + self.h, "black", "");
        for k in 0..=4 {
            let f = k as f64 / 4.0;
            let xv = self.xr.0 + f * (self.xr.1 - self.xr.0);
            let yv = self.yr.0 + f * (self.yr.1 - self.yr.0);
            let (px, py) = (self.px(xv), self.py(yv));
            svg.line(px, self.y0 + self.h, px, self.y0 + self.h + 4.0, "black", "");
            svg.text(px, self.y0 + self.h + 16.0, 10.0, "middle", &tick(xv));
            svg.line(self.x0 - 4.0, py, self.x0, py, "black", "");
            svg.text(self.x0 - 6.0, py + 3.0, 10.0, "end", &tick(yv));
        }
        svg.text(self.x0 + self.w / 2.0, self.y0 + self.h + 34.0, 12.0, "middle", xlabel);
        let (lx, ly) = (self.x0 - 42.0, self.y0 + self.h / 2.0);
        let _ = writeln!(
            svg.body,
            r#"<text x="{lx:.2}" y="{ly:.2}" font-size="12" font-family="sans-serif" text-anchor="middle" transform="rotate(-90 {lx:.2} {ly:.2})">{}</text>"#,
            escape(ylabel)
        );
        svg.text(self.x0 + self.w / 2.0, self.y0 - 10.0, 13.0, "middle", title);
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else if v.abs() >= 0.01 {
        format!("{v:.2}")
    } else {
        format!("{v:.1e}")
    }
}

fn padded_range(values: impl Iterator<Item = f64>, floor: Option<(f64, f64)>) -> (f64, f64) {
    let (mut lo, mut hi) = floor.unwrap_or((f64::INFINITY, f64::NEG_INFINITY));
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

/// Per-episode scatter of baseline score (x) against network score (y),
/// with the identity line.
pub fn scatter_svg(points: &[(f64, f64)], xlabel: &str, ylabel: &str, title: &str) -> String {
    let r = padded_range(points.iter().flat_map(|p| [p.0, p.1]), Some((0.0, 1.0)));
    let ax = Axes {
        x0: 60.0,
        y0: 30.0,
        w: 300.0,
        h: 300.0,
        xr: r,
        yr: r,
    };
    let mut svg = Svg::new(390.0, 380.0);
    ax.draw(&mut svg, xlabel, ylabel, title);
    svg.line(ax.px(r.0), ax.py(r.0), ax.px(r.1), ax.py(r.1), "#888888", r#"stroke-dasharray="4 3""#);
    for &(x, y) in points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
        let fill = if y > x { "#1f77b4" } else { "#d62728" };
        svg.circle(ax.px(x), ax.py(y), 4.0, fill);
    }
    svg.finish()
}

/// Box plots (quartiles, min-max whiskers) with the individual points.
pub fn box_svg(groups: &[(&str, Vec<f64>)], ylabel: &str, title: &str) -> String {
    let yr = padded_range(groups.iter().flat_map(|g| g.1.iter().copied()), Some((0.0, 1.0)));
    let n = groups.len().max(1) as f64;
    let ax = Axes {
        x0: 60.0,
        y0: 30.0,
        w: 120.0 * n,
        h: 280.0,
        xr: (0.0, n),
        yr,
    };
    let mut svg = Svg::new(ax.w + 90.0, 370.0);
    svg.line(ax.x0, ax.y0 + ax.h, ax.x0 + ax.w, ax.y0 + ax.h, "black", "");
    svg.line(ax.x0, ax.y0, ax.x0, ax.y0 + ax.h, "black", "");
    for k in 0..=4 {
        let v = yr.0 + k as f64 / 4.0 * (yr.1 - yr.0);
        svg.line(ax.x0 - 4.0, ax.py(v), ax.x0, ax.py(v), "black", "");
        svg.text(ax.x0 - 6.0, ax.py(v) + 3.0, 10.0, "end", &tick(v));
    }
    svg.text(ax.x0 + ax.w / 2.0, ax.y0 - 10.0, 13.0, "middle", title);
    svg.text(20.0, ax.y0 + ax.h / 2.0, 12.0, "middle", ylabel);
    for (g, (name, values)) in groups.iter().enumerate() {
        let cx = ax.px(g as f64 + 0.5);
        svg.text(cx, ax.y0 + ax.h + 18.0, 12.0, "middle", name);
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            continue;
        }
        v.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let x = p * (v.len() - 1) as f64;
            let i = x.floor() as usize;
            let j = (i + 1).min(v.len() - 1);
            v[i] + (x - i as f64) * (v[j] - v[i])
        };
        let (q1, q2, q3) = (q(0.25), q(0.5), q(0.75));
        svg.line(cx, ax.py(v[0]), cx, ax.py(v[v.len() - 1]), "black", "");
        svg.rect(cx - 25.0, ax.py(q3), 50.0, (ax.py(q1) - ax.py(q3)).max(1.0), "#c6dbef");
        svg.line(cx - 25.0, ax.py(q2), cx + 25.0, ax.py(q2), "black", r#"stroke-width="2""#);
        for (i, &x) in values.iter().filter(|x| x.is_finite()).enumerate() {
            // Deterministic jitter.
            let j = ((i * 37) % 21) as f64 - 10.0;
            svg.circle(cx + 35.0 + j, ax.py(x), 2.5, "#333333");
        }
    }
    svg.finish()
}

/// Line chart of one or more `(x, y)` series.
pub fn curves_svg(series: &[(&str, &str, Vec<(f64, f64)>)], xlabel: &str, ylabel: &str, title: &str) -> String {
    let xr = padded_range(series.iter().flat_map(|s| s.2.iter().map(|p| p.0)), None);
    let yr = padded_range(series.iter().flat_map(|s| s.2.iter().map(|p| p.1)), None);
    let yr = (yr.0.min(0.0), yr.1);
    let ax = Axes {
        x0: 70.0,
        y0: 30.0,
        w: 360.0,
        h: 240.0,
        xr,
        yr,
    };
    let mut svg = Svg::new(540.0, 320.0);
    ax.draw(&mut svg, xlabel, ylabel, title);
    for (k, (name, color, pts)) in series.iter().enumerate() {
        let mapped: Vec<(f64, f64)> = pts
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| (ax.px(x), ax.py(y)))
            .collect();
        svg.polyline(&mapped, color);
        let ly = ax.y0 + 14.0 * k as f64 + 10.0;
        svg.line(ax.x0 + ax.w + 10.0, ly, ax.x0 + ax.w + 30.0, ly, color, r#"stroke-width="2""#);
        svg.text(ax.x0 + ax.w + 34.0, ly + 4.0, 11.0, "start", name);
    }
    svg.finish()
}

/// Isochrone panels: each cell coloured by its activation band.
pub fn isochrone_svg(panels: &[(&str, Vec<f64>)], nx: usize, ny: usize, window_ms: (f64, f64), step_ms: f64) -> String {
    let cell = 6.0;
    let (pw, ph) = (nx as f64 * cell, ny as f64 * cell);
    let n_bands = ((window_ms.1 - window_ms.0) / step_ms).ceil().max(1.0);
    let mut svg = Svg::new(panels.len() as f64 * (pw + 20.0) + 20.0, ph + 70.0);
    for (p, (name, act)) in panels.iter().enumerate() {
        let ox = 20.0 + p as f64 * (pw + 20.0);
        svg.text(ox + pw / 2.0, 18.0, 13.0, "middle", name);
        for r in 0..ny {
            for c in 0..nx {
                let t = act[r * nx + c];
                let fill = if t.is_finite() {
                    let band = ((t - window_ms.0) / step_ms).floor();
                    hex_color(colormap(band / (n_bands - 1.0).max(1.0)))
                } else {
                    hex_color(UNDEFINED)
                };
                svg.rect(ox + c as f64 * cell, 28.0 + r as f64 * cell, cell, cell, &fill);
            }
        }
    }
    svg.text(
        20.0,
        ph + 50.0,
        11.0,
        "start",
        &format!(
            "activation {:.0} to {:.0} ms, {:.0} ms bands (dark = early), grey = no activation",
            window_ms.0, window_ms.1, step_ms
        ),
    );
    svg.finish()
}
