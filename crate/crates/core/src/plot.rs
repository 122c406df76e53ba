//! Minimal static SVG line charts. Output is a deterministic function of the input.

use std::fmt::Write;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 200.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// Optional symmetric error per point, drawn as a shaded band.
    pub errors: Option<Vec<f64>>,
}

pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
    pub series: Vec<Series>,
}

fn nice_ticks(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if hi.is_nan() || lo.is_nan() || hi <= lo {
        return vec![lo];
    }
    let raw = (hi - lo) / count as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(t);
        t += step;
    }
    out
}

impl Chart {
    pub fn to_svg(&self) -> String {
        let ty = |y: f64| if self.log_y { y.max(1e-300).log10() } else { y };
        let pts = self.series.iter().flat_map(|s| {
            s.points.iter().enumerate().flat_map(move |(i, &(x, y))| {
                let e = s.errors.as_ref().map_or(0.0, |e| e[i]);
                [(x, y - e), (x, y + e)]
            })
        });
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in pts {
            if !x.is_finite() || !y.is_finite() || (self.log_y && y <= 0.0) {
                continue;
            }
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(ty(y));
            y1 = y1.max(ty(y));
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 == x0 {
            x1 = x0 + 1.0;
        }
        if y1 == y0 {
            y1 = y0 + 1.0;
        }
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + (1.0 - (ty(y) - y0) / (y1 - y0)) * ph;

        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#);
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, LEFT + pw / 2.0, escape(&self.title));
        let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
        for t in nice_ticks(x0, x1, 8) {
            let x = sx(t);
            let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="black"/><text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#, TOP + ph, TOP + ph + 5.0, TOP + ph + 18.0, fmt_tick(t));
        }
        for t in nice_ticks(y0, y1, 6) {
            let y = TOP + (1.0 - (t - y0) / (y1 - y0)) * ph;
            let label = if self.log_y { format!("1e{}", fmt_tick(t)) } else { fmt_tick(t) };
            let _ = writeln!(s, r##"<line x1="{}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="black"/><line x1="{LEFT}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">{label}</text>"##, LEFT - 5.0, LEFT + pw, LEFT - 8.0, y + 4.0);
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, HEIGHT - 15.0, escape(&self.x_label));
        let _ = writeln!(s, r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#, TOP + ph / 2.0, TOP + ph / 2.0, escape(&self.y_label));

        for (k, series) in self.series.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let valid: Vec<(usize, f64, f64)> = series
                .points
                .iter()
                .enumerate()
                .filter(|(_, (x, y))| x.is_finite() && y.is_finite() && (!self.log_y || *y > 0.0))
                .map(|(i, &(x, y))| (i, x, y))
                .collect();
            if let Some(errs) = &series.errors {
                let upper: Vec<String> = valid.iter().map(|&(i, x, y)| format!("{:.2},{:.2}", sx(x), sy(y + errs[i]))).collect();
                let lower: Vec<String> = valid
                    .iter()
                    .rev()
                    .map(|&(i, x, y)| {
                        let lo = if self.log_y { (y - errs[i]).max(y * 1e-3) } else { y - errs[i] };
                        format!("{:.2},{:.2}", sx(x), sy(lo))
                    })
                    .collect();
                let _ = writeln!(s, r#"<polygon points="{} {}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, upper.join(" "), lower.join(" "));
            }
            let line: Vec<String> = valid.iter().map(|&(_, x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.6"/>"#, line.join(" "));
            let ly = TOP + 15.0 + 20.0 * k as f64;
            let lx = WIDTH - RIGHT + 15.0;
            let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#, lx + 20.0, lx + 26.0, ly + 4.0, escape(&series.label));
        }
        s.push_str("</svg>\n");
        s
    }
}

fn fmt_tick(t: f64) -> String {
    let r = (t * 1e6).round() / 1e6;
    if r == r.trunc() && r.abs() < 1e9 {
        format!("{}", r as i64)
    } else {
        format!("{r}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_deterministic_svg() {
        let chart = Chart {
            title: "loss <a&b>".into(),
            x_label: "step".into(),
            y_label: "loss".into(),
            log_y: true,
            series: vec![Series {
                label: "train".into(),
                points: vec![(0.0, 1.0), (1.0, 0.1), (2.0, 0.0)],
                errors: Some(vec![0.1, 0.01, 0.0]),
            }],
        };
        let a = chart.to_svg();
        assert_eq!(a, chart.to_svg());
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        assert!(a.contains("loss &lt;a&amp;b&gt;"));
        assert!(!a.contains("NaN") && !a.contains("inf"));
    }
}
