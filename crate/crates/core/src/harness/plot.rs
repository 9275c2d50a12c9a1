//! Deterministic hand-written SVG line charts.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bounds::{variance_factor_curves, FACTOR_SWEEP_EPSILONS};
use crate::error::{Error, Result};
use crate::metrics::{read_metrics, MetricsRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum PlotKind {
    RewardCurve,
    VarianceFactor,
    Staleness,
    Slack,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_y: bool,
    pub series: Vec<Series>,
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Shortest round-trip float text, safe inside an XML comment.
fn num(v: f64) -> String {
    format!("{v:?}")
}

fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|i| i as f64 * step).collect()
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-3 {
        format!("{v:.0e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

impl Chart {
    pub fn render(&self) -> Result<String> {
        let points: Vec<(f64, f64)> = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().copied())
            .filter(|(x, y)| x.is_finite() && y.is_finite() && (!self.log_y || *y > 0.0))
            .collect();
        if points.is_empty() {
            return Err(Error::Validation(format!(
                "chart {:?} has no finite points",
                self.title
            )));
        }
        let ty = |y: f64| if self.log_y { y.log10() } else { y };
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y) in &points {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(ty(y));
            y1 = y1.max(ty(y));
        }
        if self.log_y {
            y0 = y0.floor();
            y1 = y1.ceil();
        }
        if x1 == x0 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 == y0 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + ph - (ty(y) - y0) / (y1 - y0) * ph;

        let mut out = String::new();
        let w = &mut out;
        let _ = writeln!(
            w,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(w, "<!-- data");
        for s in &self.series {
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|(x, y)| format!("{},{}", num(*x), num(*y)))
                .collect();
            let _ = writeln!(w, "{}: {}", escape(&s.label).replace("--", "- -"), pts.join(" "));
        }
        let _ = writeln!(w, "-->");
        let _ = writeln!(
            w,
            r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
        );
        let _ = writeln!(
            w,
            r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            LEFT + pw / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            w,
            r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
        );
        for t in nice_ticks(x0, x1) {
            let x = sx(t);
            let _ = writeln!(
                w,
                r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#444"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
                TOP + ph,
                TOP + ph + 5.0,
                TOP + ph + 18.0,
                tick_label(t)
            );
        }
        let y_ticks: Vec<f64> = if self.log_y {
            (y0 as i64..=y1 as i64).map(|e| 10f64.powi(e as i32)).collect()
        } else {
            nice_ticks(y0, y1)
        };
        for t in y_ticks {
            let y = sy(t);
            let _ = writeln!(
                w,
                r##"<line x1="{:.2}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="#444"/><line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
                LEFT - 5.0,
                LEFT + pw,
                LEFT - 8.0,
                y + 4.0,
                tick_label(t)
            );
        }
        let _ = writeln!(
            w,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            w,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );
        for (i, s) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            // break the line wherever a point is missing
            let mut segments: Vec<Vec<String>> = vec![Vec::new()];
            for &(x, y) in &s.points {
                if x.is_finite() && y.is_finite() && (!self.log_y || y > 0.0) {
                    segments.last_mut().unwrap().push(format!("{:.2},{:.2}", sx(x), sy(y)));
                } else if !segments.last().unwrap().is_empty() {
                    segments.push(Vec::new());
                }
            }
            for seg in segments.iter().filter(|s| !s.is_empty()) {
                let _ = writeln!(
                    w,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                    seg.join(" ")
                );
            }
            let ly = TOP + 10.0 + 18.0 * i as f64;
            let lx = LEFT + pw + 12.0;
            let _ = writeln!(
                w,
                r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                lx + 20.0,
                lx + 26.0,
                ly + 4.0,
                escape(&s.label)
            );
        }
        let _ = writeln!(w, "</svg>");
        Ok(out)
    }
}

fn run_label(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn metric_series(files: &[&Path], pick: impl Fn(&MetricsRecord) -> Option<f64>) -> Result<Vec<Series>> {
    files
        .iter()
        .map(|f| {
            let records = read_metrics(f)?;
            Ok(Series {
                label: run_label(f),
                points: records
                    .iter()
                    .filter_map(|r| pick(r).map(|v| (r.global_iteration as f64, v)))
                    .collect(),
            })
        })
        .collect()
}

/// Factor curves for the default epsilon sweep, `p` in steps of 0.005.
pub fn variance_factor_chart() -> Result<Chart> {
    let curves = variance_factor_curves(&FACTOR_SWEEP_EPSILONS, 200)?;
    Ok(Chart {
        title: "Bernoulli variance factor (1 - s)/s, s = sqrt(p(1-p) + eps)".into(),
        x_label: "success probability p (step 0.005)".into(),
        y_label: "factor (log scale)".into(),
        log_y: true,
        series: curves
            .iter()
            .map(|c| Series {
                label: format!("eps = {:e}", c.var_epsilon),
                points: c.points.iter().map(|(p, f)| (*p, f.unwrap_or(f64::INFINITY))).collect(),
            })
            .collect(),
    })
}

/// Builds the chart for `kind` from metrics files.
pub fn build_chart(kind: PlotKind, files: &[&Path]) -> Result<Chart> {
    if kind != PlotKind::VarianceFactor && files.is_empty() {
        return Err(Error::Config("no metrics files given".into()));
    }
    let chart = match kind {
        PlotKind::VarianceFactor => variance_factor_chart()?,
        PlotKind::RewardCurve => Chart {
            title: "Mean success rate".into(),
            x_label: "iteration".into(),
            y_label: "E_x J(pi | x)".into(),
            log_y: false,
            series: metric_series(files, |r| Some(r.mean_reward))?,
        },
        PlotKind::Staleness => Chart {
            title: "Sampler staleness".into(),
            x_label: "iteration".into(),
            y_label: "E_x TV(theta_old, theta)".into(),
            log_y: false,
            series: metric_series(files, |r| Some(r.staleness_tv))?,
        },
        PlotKind::Slack => Chart {
            title: "Improvement bound slack".into(),
            x_label: "iteration".into(),
            y_label: "min_x (lhs - rhs)".into(),
            log_y: false,
            series: metric_series(files, |r| r.bound_slack)?,
        },
    };
    if chart.series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::Validation(format!(
            "{kind:?}: the inputs contain no data for this plot"
        )));
    }
    Ok(chart)
}

pub fn write_plot(kind: PlotKind, files: &[&Path], out: &Path) -> Result<()> {
    let svg = build_chart(kind, files)?.render()?;
    std::fs::write(out, svg).map_err(|e| Error::io(out, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_factor_curve_values() {
        let chart = variance_factor_chart().unwrap();
        let eps4 = chart.series.iter().find(|s| s.label == "eps = 1e-4").unwrap();
        assert_eq!(eps4.points.len(), 201);
        assert!((eps4.points[0].1 - 99.0).abs() < 1e-12);
        assert!((eps4.points[200].1 - 99.0).abs() < 1e-12);
        let mid = eps4.points[100].1;
        let s = 0.2501f64.sqrt();
        assert!((mid - (1.0 - s) / s).abs() < 1e-12);
        assert!((mid - 0.9996).abs() < 1e-4);
        assert!(eps4.points.iter().all(|(_, f)| *f >= mid));
        let eps0 = &chart.series[0];
        assert!(eps0.points[0].1.is_infinite());
    }

    #[test]
    fn svg_is_stable() {
        let a = variance_factor_chart().unwrap().render().unwrap();
        let b = variance_factor_chart().unwrap().render().unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        let comment = &a[a.find("<!--").unwrap() + 4..a.find("-->").unwrap()];
        assert!(!comment.contains("--"));
    }

    #[test]
    fn empty_inputs_fail() {
        assert!(build_chart(PlotKind::RewardCurve, &[]).is_err());
        let empty = Chart {
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            log_y: false,
            series: vec![],
        };
        assert!(empty.render().is_err());
    }

    #[test]
    fn ticks_cover_range() {
        let t = nice_ticks(0.0, 1.0);
        assert_eq!(t.first(), Some(&0.0));
        assert!((t.last().unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(tick_label(0.25), "0.25");
    }
}
