//! Render serialized result files to SVG line/bar charts.
//!
//! Rendering reads only result files, never a model: figures are
//! reproducible from archived results. Layer axes are 1-based.

use std::path::Path;

use crate::error::{Error, Result};
use crate::results::{self, read_json};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    Line,
    Bar,
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 160.0;
const MARGIN_T: f64 = 44.0;
const MARGIN_B: f64 = 56.0;
const PALETTE: &[&str] = &[
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#17becf", "#7f7f7f",
];

#[derive(Debug, Clone)]
pub struct ChartSeries {
    pub label: String,
    pub ys: Vec<f64>,
    /// Symmetric band half-width around each y, when present.
    pub band: Option<Vec<f64>>,
}

impl ChartSeries {
    pub fn new(label: impl Into<String>, ys: Vec<f64>) -> Self {
        Self {
            label: label.into(),
            ys,
            band: None,
        }
    }

    pub fn with_band(mut self, band: Vec<f64>) -> Self {
        self.band = Some(band);
        self
    }
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(1e-3..1e5).contains(&a) {
        return format!("{v:.2e}");
    }
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        let span = (self.x_max - self.x_min).max(1e-12);
        MARGIN_L + (v - self.x_min) / span * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn y(&self, v: f64) -> f64 {
        let span = (self.y_max - self.y_min).max(1e-12);
        HEIGHT - MARGIN_B - (v - self.y_min) / span * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

/// Build one chart. `xs` must be as long as every series.
pub fn chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    xs: &[f64],
    series: &[ChartSeries],
    style: Style,
) -> Result<String> {
    if xs.is_empty() || series.is_empty() {
        return Err(Error::InvalidArgument("nothing to plot".into()));
    }
    for s in series {
        if s.ys.len() != xs.len() {
            return Err(Error::ShapeMismatch(format!(
                "series {:?} has {} points for {} x values",
                s.label,
                s.ys.len(),
                xs.len()
            )));
        }
    }

    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for s in series {
        for (i, &y) in s.ys.iter().enumerate() {
            let half = s.band.as_ref().map_or(0.0, |b| b[i]);
            y_min = y_min.min(y - half);
            y_max = y_max.max(y + half);
        }
    }
    if style == Style::Bar {
        y_min = y_min.min(0.0);
        y_max = y_max.max(0.0);
    }
    if !y_min.is_finite() || !y_max.is_finite() {
        return Err(Error::InvalidArgument("non-finite values in plot".into()));
    }
    let pad = ((y_max - y_min) * 0.08).max(1e-9);
    let frame = Frame {
        x_min: xs[0] - if style == Style::Bar { 0.5 } else { 0.0 },
        x_max: xs[xs.len() - 1] + if style == Style::Bar { 0.5 } else { 0.0 },
        y_min: y_min - pad,
        y_max: y_max + pad,
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        escape(title)
    ));

    // Axes.
    let x0 = frame.x(frame.x_min);
    let x1 = frame.x(frame.x_max);
    let y0 = frame.y(frame.y_min);
    let y1 = frame.y(frame.y_max);
    svg.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n"
    ));
    svg.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"
    ));

    // Y ticks.
    for i in 0..=4 {
        let v = frame.y_min + (frame.y_max - frame.y_min) * i as f64 / 4.0;
        let y = frame.y(v);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{x0}\" y2=\"{y}\" stroke=\"black\"/>\n",
            x0 - 4.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            x0 - 7.0,
            y + 4.0,
            fmt_num(v)
        ));
    }
    // X ticks: at most 13 of them, at data positions.
    let stride = (xs.len() / 13).max(1);
    for (i, &xv) in xs.iter().enumerate() {
        if i % stride != 0 && i != xs.len() - 1 {
            continue;
        }
        let x = frame.x(xv);
        svg.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{y0}\" x2=\"{x}\" y2=\"{}\" stroke=\"black\"/>\n",
            y0 + 4.0
        ));
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            y0 + 18.0,
            fmt_num(xv)
        ));
    }
    // Axis labels.
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
        (x0 + x1) / 2.0,
        HEIGHT - 14.0,
        escape(x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{}</text>\n",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    ));

    // Series.
    match style {
        Style::Line => {
            for (si, s) in series.iter().enumerate() {
                let color = PALETTE[si % PALETTE.len()];
                if let Some(band) = &s.band {
                    let mut pts = String::new();
                    for (i, &xv) in xs.iter().enumerate() {
                        pts.push_str(&format!(
                            "{},{} ",
                            frame.x(xv),
                            frame.y(s.ys[i] + band[i])
                        ));
                    }
                    for (i, &xv) in xs.iter().enumerate().rev() {
                        pts.push_str(&format!(
                            "{},{} ",
                            frame.x(xv),
                            frame.y(s.ys[i] - band[i])
                        ));
                    }
                    svg.push_str(&format!(
                        "<polygon points=\"{}\" fill=\"{color}\" fill-opacity=\"0.15\" stroke=\"none\"/>\n",
                        pts.trim_end()
                    ));
                }
                let pts: Vec<String> = xs
                    .iter()
                    .zip(&s.ys)
                    .map(|(&xv, &yv)| format!("{},{}", frame.x(xv), frame.y(yv)))
                    .collect();
                svg.push_str(&format!(
                    "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n",
                    pts.join(" ")
                ));
                for (&xv, &yv) in xs.iter().zip(&s.ys) {
                    svg.push_str(&format!(
                        "<circle cx=\"{}\" cy=\"{}\" r=\"2.4\" fill=\"{color}\"/>\n",
                        frame.x(xv),
                        frame.y(yv)
                    ));
                }
            }
        }
        Style::Bar => {
            let slot = (x1 - x0) / xs.len() as f64;
            let group = slot * 0.8;
            let bar_w = group / series.len() as f64;
            let base_y = frame.y(0.0);
            for (si, s) in series.iter().enumerate() {
                let color = PALETTE[si % PALETTE.len()];
                for (i, &yv) in s.ys.iter().enumerate() {
                    let cx = frame.x(xs[i]);
                    let x = cx - group / 2.0 + si as f64 * bar_w;
                    let y = frame.y(yv);
                    let (top, h) = if yv >= 0.0 {
                        (y, base_y - y)
                    } else {
                        (base_y, y - base_y)
                    };
                    svg.push_str(&format!(
                        "<rect x=\"{x}\" y=\"{top}\" width=\"{bar_w}\" height=\"{}\" fill=\"{color}\"/>\n",
                        h.max(0.0)
                    ));
                }
            }
        }
    }

    // Legend.
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let ly = MARGIN_T + 16.0 * si as f64;
        let lx = WIDTH - MARGIN_R + 12.0;
        svg.push_str(&format!(
            "<rect x=\"{lx}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n",
            ly - 9.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{ly}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            lx + 14.0,
            escape(&s.label)
        ));
    }

    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn layer_axis(n: usize) -> Vec<f64> {
    (1..=n).map(|l| l as f64).collect()
}

/// Render a result file; the chart kind follows the file's schema, with
/// `style` overriding line-vs-bar where it makes sense.
pub fn render_result_file(path: &Path, style: Option<Style>) -> Result<String> {
    let schema = results::peek_schema(path)?;
    match schema.as_str() {
        results::SCHEMA_LAYER_STATS => {
            let f: results::LayerStatsFile = read_json(path)?;
            let xs = layer_axis(f.mean.len());
            let series = vec![
                ChartSeries::new("mean", f.mean),
                ChartSeries::new("std", f.std),
                ChartSeries::new("max", f.max),
            ];
            chart(
                &format!("Layer statistics over {} prompts", f.n_prompts),
                "layer",
                "attribution score",
                &xs,
                &series,
                style.unwrap_or(Style::Line),
            )
        }
        results::SCHEMA_OVERLAP_CURVE => {
            let f: results::OverlapCurveFile = read_json(path)?;
            let series = vec![
                ChartSeries::new("jaccard", f.jaccard),
                ChartSeries::new("common/min", f.overlap_min),
            ];
            chart(
                &format!("Neuron overlap vs threshold (P={})", f.support_percent),
                "t",
                "overlap",
                &f.t_grid,
                &series,
                style.unwrap_or(Style::Line),
            )
        }
        results::SCHEMA_LAYER_OVERLAP => {
            let f: results::LayerOverlapFile = read_json(path)?;
            let xs = layer_axis(f.counts.len());
            let title = match f.t {
                Some(t) => format!("Common neurons per layer (t={t})"),
                None => "Common neurons per layer".to_string(),
            };
            let ys: Vec<f64> = f.counts.iter().map(|&c| c as f64).collect();
            chart(
                &title,
                "layer",
                "common neurons",
                &xs,
                &[ChartSeries::new("common", ys)],
                style.unwrap_or(Style::Bar),
            )
        }
        results::SCHEMA_ATTRIBUTION => {
            let f: results::AttributionMapFile = read_json(path)?;
            let map = f.to_map()?;
            let layers = map.layer_count();
            let dim = map.intermediate_dim() as f64;
            let mut mean = Vec::with_capacity(layers);
            let mut max = Vec::with_capacity(layers);
            for row in map.scores().outer_iter() {
                mean.push(row.sum() / dim);
                max.push(row.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
            }
            chart(
                &format!("Attribution profile: {}", f.prompt.target),
                "layer",
                "score",
                &layer_axis(layers),
                &[ChartSeries::new("mean", mean), ChartSeries::new("max", max)],
                style.unwrap_or(Style::Line),
            )
        }
        results::SCHEMA_SUPPRESSION => {
            let f: results::SuppressionFile = read_json(path)?;
            chart(
                &format!("Probability drop: attributed set vs {} random sets", f.trials),
                "1 = attributed, 2 = random mean",
                "probability drop",
                &[1.0, 2.0],
                &[ChartSeries::new(
                    "drop",
                    vec![f.attributed_delta, f.random_mean],
                )],
                style.unwrap_or(Style::Bar),
            )
        }
        results::SCHEMA_GRAMMAR_STATS => {
            let f: results::GrammarStatsFile = read_json(path)?;
            let layers = f
                .strata
                .first()
                .map(|s| s.good.mean.len())
                .ok_or_else(|| Error::Format("grammar stats file has no strata".into()))?;
            let xs = layer_axis(layers);
            let mut series = Vec::new();
            for s in &f.strata {
                let n = s.n_examples.max(1) as f64;
                let band = |std: &[f64]| -> Vec<f64> {
                    std.iter().map(|sd| 1.96 * sd / n.sqrt()).collect()
                };
                series.push(
                    ChartSeries::new(
                        format!("good (attr={})", s.n_attractors),
                        s.good.mean.clone(),
                    )
                    .with_band(band(&s.good.std)),
                );
                series.push(
                    ChartSeries::new(
                        format!("bad (attr={})", s.n_attractors),
                        s.bad.mean.clone(),
                    )
                    .with_band(band(&s.bad.std)),
                );
            }
            chart(
                "Agreement attribution: correct vs incorrect number",
                "layer",
                "mean score",
                &xs,
                &series,
                style.unwrap_or(Style::Line),
            )
        }
        results::SCHEMA_GRAMMAR_NEURONS => {
            let f: results::GrammarNeuronsFile = read_json(path)?;
            let layers = f
                .strata
                .first()
                .map(|s| s.common_mean.len())
                .ok_or_else(|| Error::Format("grammar neurons file has no strata".into()))?;
            let xs = layer_axis(layers);
            let mut series = Vec::new();
            for s in &f.strata {
                series.push(ChartSeries::new(
                    format!("undecided (attr={})", s.n_attractors),
                    s.common_mean.clone(),
                ));
                series.push(ChartSeries::new(
                    format!("decided (attr={})", s.n_attractors),
                    s.distinct_mean.clone(),
                ));
            }
            chart(
                "Refined neurons per layer (mean over examples)",
                "layer",
                "neurons",
                &xs,
                &series,
                style.unwrap_or(Style::Line),
            )
        }
        other => Err(Error::Format(format!(
            "no chart defined for schema {other}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::results::{write_json, LayerStatsFile, Manifest};

    #[test]
    fn chart_rejects_ragged_series() {
        let err = chart(
            "t",
            "x",
            "y",
            &[1.0, 2.0],
            &[ChartSeries::new("s", vec![1.0])],
            Style::Line,
        );
        assert!(err.is_err());
    }

    #[test]
    fn line_and_bar_charts_are_valid_svg() {
        let xs = vec![1.0, 2.0, 3.0];
        let series = vec![
            ChartSeries::new("a", vec![0.1, 0.5, 0.2]).with_band(vec![0.02, 0.05, 0.01]),
            ChartSeries::new("b", vec![-0.1, 0.0, 0.4]),
        ];
        for style in [Style::Line, Style::Bar] {
            let svg = chart("demo", "x", "y", &xs, &series, style).unwrap();
            assert!(svg.starts_with("<svg"));
            assert!(svg.ends_with("</svg>\n"));
            assert!(svg.contains("polyline") || svg.contains("rect"));
        }
    }

    #[test]
    fn renders_a_layer_stats_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.json");
        let file = LayerStatsFile::build(
            Manifest::new("stats"),
            &crate::analysis::LayerStats {
                mean: vec![0.1, 0.4, 0.2],
                std: vec![0.0, 0.1, 0.05],
                max: vec![0.3, 0.9, 0.5],
                n_prompts: 7,
            },
        );
        write_json(&file, &path).unwrap();
        let svg = render_result_file(&path, None).unwrap();
        assert!(svg.contains("Layer statistics"));
        // Deterministic output for identical input.
        assert_eq!(svg, render_result_file(&path, None).unwrap());
    }
}
