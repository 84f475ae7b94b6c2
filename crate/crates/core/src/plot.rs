//! Native SVG figures. Every plot is written next to a CSV holding the
//! plotted values, so it can be re-rendered elsewhere.

use std::fmt::Write as _;
use std::path::Path;

use crate::io::write_atomic;
use crate::models::VarianceTerms;
use crate::Result;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 44.0;
/// Floor applied before taking logs, so exact zeros stay on the canvas.
const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesStyle {
    Line,
    Markers,
    LineMarkers,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub style: SeriesStyle,
}

/// Shaded region between `lower` and `upper`.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub x: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Panel {
    pub title: String,
    pub series: Vec<Series>,
    pub bands: Vec<Band>,
    /// Plots `log10(max(|y|, 1e-12))`.
    pub log_y: bool,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn finite_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-300 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.04 * (hi - lo);
    (lo - pad, hi + pad)
}

fn fmt_tick(v: f64, log: bool) -> String {
    if log {
        format!("1e{}", v.round() as i64)
    } else if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

impl Panel {
    fn ty(&self, y: f64) -> f64 {
        if self.log_y {
            y.abs().max(LOG_FLOOR).log10()
        } else {
            y
        }
    }

    fn render(&self, out: &mut String, ox: f64, oy: f64) {
        let xs = self
            .series
            .iter()
            .flat_map(|s| s.x.iter().copied())
            .chain(self.bands.iter().flat_map(|b| b.x.iter().copied()));
        let (x0, x1) = finite_range(xs);
        let ys: Vec<f64> = self
            .series
            .iter()
            .flat_map(|s| s.y.iter().map(|&y| self.ty(y)))
            .chain(
                self.bands
                    .iter()
                    .flat_map(|b| b.lower.iter().chain(&b.upper).map(|&y| self.ty(y))),
            )
            .collect();
        let (y0, y1) = finite_range(ys.into_iter());
        let (w, h) = (PANEL_W - 1.5 * MARGIN, PANEL_H - 1.5 * MARGIN);
        let (left, top) = (ox + MARGIN, oy + 0.5 * MARGIN);
        let px = |x: f64| left + (x - x0) / (x1 - x0) * w;
        let py = |y: f64| top + h - (y - y0) / (y1 - y0) * h;

        let _ = writeln!(
            out,
            r##"<rect x="{left:.2}" y="{top:.2}" width="{w:.2}" height="{h:.2}" fill="none" stroke="#444"/>"##
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{}</text>"#,
            left + w / 2.0,
            top - 6.0,
            escape(&self.title)
        );
        for (v, anchor_y) in [(y0, top + h), (y1, top + 8.0)] {
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{anchor_y:.2}" font-size="9" text-anchor="end">{}</text>"#,
                left - 3.0,
                fmt_tick(v, self.log_y)
            );
        }
        for (v, anchor) in [(x0, "start"), (x1, "end")] {
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" font-size="9" text-anchor="{anchor}">{}</text>"#,
                px(v),
                top + h + 11.0,
                fmt_tick(v, false)
            );
        }

        for b in &self.bands {
            let mut pts = String::new();
            let fwd = b.x.iter().zip(&b.upper);
            let back = b.x.iter().zip(&b.lower).rev();
            for (&x, &y) in fwd.chain(back) {
                let _ = write!(pts, "{:.2},{:.2} ", px(x), py(self.ty(y)));
            }
            let _ = writeln!(
                out,
                r##"<polygon points="{}" fill="#1f77b4" fill-opacity="0.2" stroke="none"/>"##,
                pts.trim_end()
            );
        }
        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<(f64, f64)> = s
                .x
                .iter()
                .zip(&s.y)
                .map(|(&x, &y)| (px(x), py(self.ty(y))))
                .filter(|(a, b)| a.is_finite() && b.is_finite())
                .collect();
            if matches!(s.style, SeriesStyle::Line | SeriesStyle::LineMarkers) {
                let joined: Vec<String> = pts.iter().map(|(a, b)| format!("{a:.2},{b:.2}")).collect();
                let _ = writeln!(
                    out,
                    r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.4"/>"#,
                    joined.join(" ")
                );
            }
            if matches!(s.style, SeriesStyle::Markers | SeriesStyle::LineMarkers) {
                for (a, b) in &pts {
                    let _ = writeln!(out, r#"<circle cx="{a:.2}" cy="{b:.2}" r="1.8" fill="{color}"/>"#);
                }
            }
            let ly = top + 10.0 + 11.0 * i as f64;
            let _ = writeln!(
                out,
                r#"<text x="{:.2}" y="{ly:.2}" font-size="9" fill="{color}" text-anchor="end">{}</text>"#,
                left + w - 4.0,
                escape(&s.label)
            );
        }
    }
}

/// Lays panels out row-major on a grid with `cols` columns.
pub fn render_grid(panels: &[Panel], cols: usize) -> String {
    let cols = cols.max(1);
    let rows = panels.len().div_ceil(cols).max(1);
    let (width, height) = (cols as f64 * PANEL_W, rows as f64 * PANEL_H);
    let mut out = format!(
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif">
<rect width="100%" height="100%" fill="white"/>
"#
    );
    for (i, p) in panels.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        out.push_str("<g>\n");
        p.render(&mut out, c as f64 * PANEL_W, r as f64 * PANEL_H);
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

/// Writes `<stem>.svg` and `<stem>.csv` atomically.
pub fn write_figure(dir: &Path, stem: &str, svg: &str, csv: &str) -> Result<()> {
    write_atomic(&dir.join(format!("{stem}.svg")), svg.as_bytes())?;
    write_atomic(&dir.join(format!("{stem}.csv")), csv.as_bytes())
}

/// One kernel/activation pair of the coefficient comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumPanel {
    pub kernel: String,
    pub activation: String,
    /// `√λ_ℓ` for `ℓ = 0..=L`.
    pub sqrt_lambda: Vec<f64>,
    /// `ς_ℓ` for `ℓ = 0..=L`.
    pub varsigma: Vec<f64>,
}

/// Grid with kernels down the rows and activations across the columns,
/// magnitudes on a log axis.
pub fn spectrum_grid(panels: &[SpectrumPanel]) -> (String, String) {
    let mut activations: Vec<&str> = Vec::new();
    for p in panels {
        if !activations.contains(&p.activation.as_str()) {
            activations.push(&p.activation);
        }
    }
    let mut csv = String::from("kernel,activation,level,sqrt_lambda,varsigma\n");
    let drawn: Vec<Panel> = panels
        .iter()
        .map(|p| {
            let levels: Vec<f64> = (0..p.sqrt_lambda.len()).map(|l| l as f64).collect();
            for (l, (a, b)) in p.sqrt_lambda.iter().zip(&p.varsigma).enumerate() {
                let _ = writeln!(csv, "{},{},{l},{a:e},{b:e}", p.kernel, p.activation);
            }
            Panel {
                title: format!("{} / {}", p.kernel, p.activation),
                series: vec![
                    Series {
                        label: "√λ".into(),
                        x: levels.clone(),
                        y: p.sqrt_lambda.clone(),
                        style: SeriesStyle::LineMarkers,
                    },
                    Series {
                        label: "|ς|".into(),
                        x: levels,
                        y: p.varsigma.clone(),
                        style: SeriesStyle::LineMarkers,
                    },
                ],
                bands: vec![],
                log_y: true,
            }
        })
        .collect();
    (render_grid(&drawn, activations.len()), csv)
}

/// Predictive mean with a ±2σ band and optional training data.
pub fn band_plot(x: &[f64], mean: &[f64], var: &[f64], data: Option<(&[f64], &[f64])>) -> (String, String) {
    let sd: Vec<f64> = var.iter().map(|v| v.max(0.0).sqrt()).collect();
    let lower: Vec<f64> = mean.iter().zip(&sd).map(|(m, s)| m - 2.0 * s).collect();
    let upper: Vec<f64> = mean.iter().zip(&sd).map(|(m, s)| m + 2.0 * s).collect();
    let mut series = vec![Series {
        label: "mean".into(),
        x: x.to_vec(),
        y: mean.to_vec(),
        style: SeriesStyle::Line,
    }];
    if let Some((dx, dy)) = data {
        series.push(Series {
            label: "data".into(),
            x: dx.to_vec(),
            y: dy.to_vec(),
            style: SeriesStyle::Markers,
        });
    }
    let panel = Panel {
        title: "predictive mean ± 2 sd".into(),
        series,
        bands: vec![Band {
            x: x.to_vec(),
            lower: lower.clone(),
            upper: upper.clone(),
        }],
        log_y: false,
    };
    let mut csv = String::from("x,mean,variance,lower,upper\n");
    for i in 0..x.len() {
        let _ = writeln!(csv, "{},{},{},{},{}", x[i], mean[i], var[i], lower[i], upper[i]);
    }
    (render_grid(&[panel], 1), csv)
}

/// The signed variance contributions, one panel per term.
pub fn variance_terms_plot(x: &[f64], terms: &VarianceTerms) -> (String, String) {
    let named: [(&str, &[f64]); 6] = [
        ("K**", terms.prior.as_slice()),
        ("base projection (−)", terms.base_projection.as_slice()),
        ("base posterior (+)", terms.base_posterior.as_slice()),
        ("orthogonal projection (−)", terms.orthogonal_projection.as_slice()),
        ("orthogonal posterior (+)", terms.orthogonal_posterior.as_slice()),
        ("total", &[]),
    ];
    let total = terms.total();
    let panels: Vec<Panel> = named
        .iter()
        .map(|(name, ys)| {
            let y = if ys.is_empty() { total.as_slice().to_vec() } else { ys.to_vec() };
            Panel {
                title: name.to_string(),
                series: vec![Series {
                    label: String::new(),
                    x: x.to_vec(),
                    y,
                    style: SeriesStyle::Line,
                }],
                bands: vec![],
                log_y: false,
            }
        })
        .collect();
    let mut csv = String::from("x,prior,base_projection,base_posterior,orthogonal_projection,orthogonal_posterior,total\n");
    for i in 0..x.len() {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            x[i],
            terms.prior[i],
            terms.base_projection[i],
            terms.base_posterior[i],
            terms.orthogonal_projection[i],
            terms.orthogonal_posterior[i],
            total[i]
        );
    }
    (render_grid(&panels, 3), csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn polyline_points(svg: &str) -> Vec<usize> {
        let doc = roxmltree::Document::parse(svg).expect("well-formed svg");
        doc.descendants()
            .filter(|n| n.has_tag_name("polyline"))
            .map(|n| n.attribute("points").unwrap().split_whitespace().count())
            .collect()
    }

    #[test]
    fn band_plot_is_well_formed_with_one_vertex_per_point() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 / 10.0).collect();
        let mean: Vec<f64> = x.iter().map(|v| v.sin()).collect();
        let var = vec![0.04; 50];
        let (svg, csv) = band_plot(&x, &mean, &var, Some((&x[..5], &mean[..5])));
        assert_eq!(polyline_points(&svg), vec![50]);
        assert_eq!(csv.lines().count(), 51);
    }

    #[test]
    fn spectrum_grid_handles_exact_zeros_on_log_axis() {
        let p = SpectrumPanel {
            kernel: "arccos1".into(),
            activation: "relu".into(),
            sqrt_lambda: vec![1.0, 0.5, 0.0, 0.1],
            varsigma: vec![0.3, 0.2, 0.0, 0.0],
        };
        let (svg, csv) = spectrum_grid(&[p.clone(), SpectrumPanel { activation: "softplus".into(), ..p }]);
        assert_eq!(polyline_points(&svg), vec![4, 4, 4, 4]);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
        assert_eq!(csv.lines().count(), 9);
    }

    #[test]
    fn constant_series_and_empty_grid_render() {
        let panel = Panel {
            title: "a<b & c".into(),
            series: vec![Series {
                label: "flat".into(),
                x: vec![1.0, 1.0],
                y: vec![2.0, 2.0],
                style: SeriesStyle::Line,
            }],
            ..Default::default()
        };
        let svg = render_grid(&[panel], 2);
        assert!(!svg.contains("NaN"));
        roxmltree::Document::parse(&svg).unwrap();
        roxmltree::Document::parse(&render_grid(&[], 1)).unwrap();
    }
}
