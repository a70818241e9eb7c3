//! Standalone SVG charts, written by hand so plots need no renderer.
//!
//! All numbers are formatted with fixed precision, so identical inputs
//! produce byte-identical files. Series become `<polyline>` elements,
//! reference levels become dashed `<line class="chance-line">` elements,
//! and vertical markers carry `class="marker-line"`; tests and downstream
//! checks key off those class names.

use crate::{Result, VgsError};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN_LEFT: f64 = 62.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 34.0;
const MARGIN_BOTTOM: f64 = 52.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One named line in a plot.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// A dashed horizontal reference level (e.g. a chance rate).
#[derive(Debug, Clone)]
pub struct HLine {
    pub y: f64,
    pub label: String,
}

/// A vertical marker (e.g. a phoneme boundary), with a label drawn at the
/// top of the plot area.
#[derive(Debug, Clone)]
pub struct VLine {
    pub x: f64,
    pub label: String,
}

/// A line chart over numeric axes.
#[derive(Debug, Clone, Default)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    pub h_lines: Vec<HLine>,
    pub v_lines: Vec<VLine>,
    /// Extra provenance line (e.g. "seed=42") embedded as an XML comment.
    pub comment: Option<String>,
    pub x_range: Option<(f64, f64)>,
    pub y_range: Option<(f64, f64)>,
}

fn finite_or_err(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(VgsError::Invalid(format!("non-finite {what} in plot")))
    }
}

/// Expands a degenerate range so the scale stays invertible.
fn pad_range(lo: f64, hi: f64) -> (f64, f64) {
    if lo < hi {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

struct Scale {
    lo: f64,
    hi: f64,
    px_lo: f64,
    px_hi: f64,
}

impl Scale {
    fn map(&self, v: f64) -> f64 {
        self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo)
    }
}

fn axis_ticks(lo: f64, hi: f64) -> Vec<f64> {
    (0..=4).map(|i| lo + (hi - lo) * i as f64 / 4.0).collect()
}

impl LinePlot {
    fn data_range(&self) -> Result<((f64, f64), (f64, f64))> {
        let mut xs: Vec<f64> = Vec::new();
        let mut ys: Vec<f64> = Vec::new();
        for s in &self.series {
            for &(x, y) in &s.points {
                xs.push(finite_or_err(x, "x")?);
                ys.push(finite_or_err(y, "y")?);
            }
        }
        for h in &self.h_lines {
            ys.push(finite_or_err(h.y, "h-line")?);
        }
        for v in &self.v_lines {
            xs.push(finite_or_err(v.x, "v-line")?);
        }
        if xs.is_empty() || ys.is_empty() {
            return Err(VgsError::Invalid("plot has no data".into()));
        }
        let fold = |v: &[f64]| {
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            pad_range(lo, hi)
        };
        Ok((fold(&xs), fold(&ys)))
    }

    pub fn render(&self) -> Result<String> {
        let ((dx_lo, dx_hi), (dy_lo, dy_hi)) = self.data_range()?;
        let (x_lo, x_hi) = self.x_range.map_or((dx_lo, dx_hi), |(a, b)| pad_range(a, b));
        let (y_lo, y_hi) = self.y_range.map_or((dy_lo, dy_hi), |(a, b)| pad_range(a, b));
        let x = Scale {
            lo: x_lo,
            hi: x_hi,
            px_lo: MARGIN_LEFT,
            px_hi: WIDTH - MARGIN_RIGHT,
        };
        let y = Scale {
            lo: y_lo,
            hi: y_hi,
            px_lo: HEIGHT - MARGIN_BOTTOM,
            px_hi: MARGIN_TOP,
        };
        let mut out = String::new();
        out.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" \
             viewBox=\"0 0 {} {}\" font-family=\"sans-serif\">\n",
            WIDTH as u32, HEIGHT as u32, WIDTH as u32, HEIGHT as u32
        ));
        if let Some(c) = &self.comment {
            out.push_str(&format!("<!-- {} -->\n", esc(c)));
        }
        out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
        out.push_str(&format!(
            "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
            fmt(WIDTH / 2.0),
            esc(&self.title)
        ));
        self.render_axes(&mut out, &x, &y);
        for v in &self.v_lines {
            let px = x.map(v.x);
            out.push_str(&format!(
                "<line class=\"marker-line\" x1=\"{px}\" y1=\"{top}\" x2=\"{px}\" y2=\"{bot}\" \
                 stroke=\"#999999\" stroke-width=\"0.8\"/>\n",
                px = fmt(px),
                top = fmt(MARGIN_TOP),
                bot = fmt(HEIGHT - MARGIN_BOTTOM)
            ));
            if !v.label.is_empty() {
                out.push_str(&format!(
                    "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"9\" \
                     fill=\"#666666\">{}</text>\n",
                    fmt(px),
                    fmt(MARGIN_TOP - 3.0),
                    esc(&v.label)
                ));
            }
        }
        for h in &self.h_lines {
            let py = y.map(h.y);
            out.push_str(&format!(
                "<line class=\"chance-line\" x1=\"{l}\" y1=\"{py}\" x2=\"{r}\" y2=\"{py}\" \
                 stroke=\"#555555\" stroke-width=\"1\" stroke-dasharray=\"5 4\"/>\n",
                l = fmt(MARGIN_LEFT),
                r = fmt(WIDTH - MARGIN_RIGHT),
                py = fmt(py)
            ));
            if !h.label.is_empty() {
                out.push_str(&format!(
                    "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"9\" \
                     fill=\"#555555\">{}</text>\n",
                    fmt(WIDTH - MARGIN_RIGHT - 2.0),
                    fmt(py - 3.0),
                    esc(&h.label)
                ));
            }
        }
        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let points: Vec<String> = s
                .points
                .iter()
                .map(|&(px, py)| format!("{},{}", fmt(x.map(px)), fmt(y.map(py))))
                .collect();
            out.push_str(&format!(
                "<polyline class=\"series-{i}\" fill=\"none\" stroke=\"{color}\" \
                 stroke-width=\"1.5\" points=\"{}\"/>\n",
                points.join(" ")
            ));
            let legend_y = MARGIN_TOP + 14.0 * i as f64 + 10.0;
            out.push_str(&format!(
                "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" \
                 stroke-width=\"2\"/>\n<text x=\"{}\" y=\"{ty}\" font-size=\"10\">{}</text>\n",
                fmt(WIDTH - MARGIN_RIGHT - 140.0),
                fmt(WIDTH - MARGIN_RIGHT - 120.0),
                fmt(WIDTH - MARGIN_RIGHT - 116.0),
                esc(&s.label),
                ly = fmt(legend_y),
                ty = fmt(legend_y + 3.0)
            ));
        }
        out.push_str("</svg>\n");
        Ok(out)
    }

    fn render_axes(&self, out: &mut String, x: &Scale, y: &Scale) {
        out.push_str(&format!(
            "<line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
             <line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"black\"/>\n",
            l = fmt(MARGIN_LEFT),
            r = fmt(WIDTH - MARGIN_RIGHT),
            t = fmt(MARGIN_TOP),
            b = fmt(HEIGHT - MARGIN_BOTTOM)
        ));
        for tick in axis_ticks(x.lo, x.hi) {
            let px = x.map(tick);
            out.push_str(&format!(
                "<line x1=\"{px}\" y1=\"{b}\" x2=\"{px}\" y2=\"{b2}\" stroke=\"black\"/>\n\
                 <text x=\"{px}\" y=\"{ty}\" text-anchor=\"middle\" font-size=\"9\">{v}</text>\n",
                px = fmt(px),
                b = fmt(HEIGHT - MARGIN_BOTTOM),
                b2 = fmt(HEIGHT - MARGIN_BOTTOM + 4.0),
                ty = fmt(HEIGHT - MARGIN_BOTTOM + 15.0),
                v = fmt(tick)
            ));
        }
        for tick in axis_ticks(y.lo, y.hi) {
            let py = y.map(tick);
            out.push_str(&format!(
                "<line x1=\"{l2}\" y1=\"{py}\" x2=\"{l}\" y2=\"{py}\" stroke=\"black\"/>\n\
                 <text x=\"{tx}\" y=\"{ty}\" text-anchor=\"end\" font-size=\"9\">{v}</text>\n",
                l = fmt(MARGIN_LEFT),
                l2 = fmt(MARGIN_LEFT - 4.0),
                py = fmt(py),
                tx = fmt(MARGIN_LEFT - 6.0),
                ty = fmt(py + 3.0),
                v = fmt(tick)
            ));
        }
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"11\">{}</text>\n",
            fmt((MARGIN_LEFT + WIDTH - MARGIN_RIGHT) / 2.0),
            fmt(HEIGHT - 14.0),
            esc(&self.x_label)
        ));
        out.push_str(&format!(
            "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-size=\"11\" \
             transform=\"rotate(-90 16 {})\">{}</text>\n",
            fmt((MARGIN_TOP + HEIGHT - MARGIN_BOTTOM) / 2.0),
            fmt((MARGIN_TOP + HEIGHT - MARGIN_BOTTOM) / 2.0),
            esc(&self.y_label)
        ));
    }
}

/// A labeled bar chart (one bar per category).
#[derive(Debug, Clone, Default)]
pub struct BarPlot {
    pub title: String,
    pub y_label: String,
    pub bars: Vec<(String, f64)>,
    pub h_lines: Vec<HLine>,
    pub comment: Option<String>,
    /// Defaults to (0, max value).
    pub y_range: Option<(f64, f64)>,
}

impl BarPlot {
    pub fn render(&self) -> Result<String> {
        if self.bars.is_empty() {
            return Err(VgsError::Invalid("bar plot has no data".into()));
        }
        for (_, v) in &self.bars {
            finite_or_err(*v, "bar value")?;
        }
        let max = self
            .bars
            .iter()
            .map(|(_, v)| *v)
            .fold(0.0_f64, f64::max)
            .max(self.h_lines.iter().map(|h| h.y).fold(0.0, f64::max));
        let (y_lo, y_hi) = pad_range(
            self.y_range.map_or(0.0, |(a, _)| a),
            self.y_range.map_or(max, |(_, b)| b),
        );
        let y = Scale {
            lo: y_lo,
            hi: y_hi,
            px_lo: HEIGHT - MARGIN_BOTTOM,
            px_hi: MARGIN_TOP,
        };
        let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        let slot = plot_w / self.bars.len() as f64;
        let bar_w = (slot * 0.8).min(40.0);
        let mut out = String::new();
        out.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" \
             viewBox=\"0 0 {} {}\" font-family=\"sans-serif\">\n",
            WIDTH as u32, HEIGHT as u32, WIDTH as u32, HEIGHT as u32
        ));
        if let Some(c) = &self.comment {
            out.push_str(&format!("<!-- {} -->\n", esc(c)));
        }
        out.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
        out.push_str(&format!(
            "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
            fmt(WIDTH / 2.0),
            esc(&self.title)
        ));
        out.push_str(&format!(
            "<line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
             <line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"black\"/>\n",
            l = fmt(MARGIN_LEFT),
            r = fmt(WIDTH - MARGIN_RIGHT),
            t = fmt(MARGIN_TOP),
            b = fmt(HEIGHT - MARGIN_BOTTOM)
        ));
        for tick in axis_ticks(y.lo, y.hi) {
            let py = y.map(tick);
            out.push_str(&format!(
                "<line x1=\"{l2}\" y1=\"{py}\" x2=\"{l}\" y2=\"{py}\" stroke=\"black\"/>\n\
                 <text x=\"{tx}\" y=\"{ty}\" text-anchor=\"end\" font-size=\"9\">{v}</text>\n",
                l = fmt(MARGIN_LEFT),
                l2 = fmt(MARGIN_LEFT - 4.0),
                py = fmt(py),
                tx = fmt(MARGIN_LEFT - 6.0),
                ty = fmt(py + 3.0),
                v = fmt(tick)
            ));
        }
        for (i, (label, v)) in self.bars.iter().enumerate() {
            let x0 = MARGIN_LEFT + slot * i as f64 + (slot - bar_w) / 2.0;
            let top = y.map(*v);
            let base = HEIGHT - MARGIN_BOTTOM;
            out.push_str(&format!(
                "<rect class=\"bar\" x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" \
                 fill=\"#1f77b4\"/>\n",
                fmt(x0),
                fmt(top.min(base)),
                fmt(bar_w),
                fmt((base - top).abs())
            ));
            let cx = x0 + bar_w / 2.0;
            out.push_str(&format!(
                "<text x=\"{cx}\" y=\"{ly}\" text-anchor=\"end\" font-size=\"8\" \
                 transform=\"rotate(-60 {cx} {ly})\">{}</text>\n",
                esc(label),
                cx = fmt(cx),
                ly = fmt(base + 10.0)
            ));
        }
        for h in &self.h_lines {
            let py = y.map(h.y);
            out.push_str(&format!(
                "<line class=\"chance-line\" x1=\"{l}\" y1=\"{py}\" x2=\"{r}\" y2=\"{py}\" \
                 stroke=\"#555555\" stroke-width=\"1\" stroke-dasharray=\"5 4\"/>\n",
                l = fmt(MARGIN_LEFT),
                r = fmt(WIDTH - MARGIN_RIGHT),
                py = fmt(py)
            ));
            if !h.label.is_empty() {
                out.push_str(&format!(
                    "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"9\" \
                     fill=\"#555555\">{}</text>\n",
                    fmt(WIDTH - MARGIN_RIGHT - 2.0),
                    fmt(py - 3.0),
                    esc(&h.label)
                ));
            }
        }
        out.push_str(&format!(
            "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-size=\"11\" \
             transform=\"rotate(-90 16 {})\">{}</text>\n",
            fmt((MARGIN_TOP + HEIGHT - MARGIN_BOTTOM) / 2.0),
            fmt((MARGIN_TOP + HEIGHT - MARGIN_BOTTOM) / 2.0),
            esc(&self.y_label)
        ));
        out.push_str("</svg>\n");
        Ok(out)
    }
}

/// Stacks already-rendered plots vertically into one SVG document by
/// nesting them; used for multi-panel figures.
pub fn panel_column(panels: &[String]) -> Result<String> {
    if panels.is_empty() {
        return Err(VgsError::Invalid("no panels".into()));
    }
    let total_h = HEIGHT as u32 * panels.len() as u32;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{total_h}\" \
         viewBox=\"0 0 {} {total_h}\">\n",
        WIDTH as u32, WIDTH as u32
    );
    for (i, panel) in panels.iter().enumerate() {
        let inner = panel
            .replacen(
                "<svg xmlns=\"http://www.w3.org/2000/svg\"",
                &format!(
                    "<svg y=\"{}\" xmlns=\"http://www.w3.org/2000/svg\"",
                    HEIGHT as u32 * i as u32
                ),
                1,
            );
        out.push_str(&inner);
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_plot() -> LinePlot {
        LinePlot {
            title: "demo".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![
                Series {
                    label: "a".into(),
                    points: vec![(0.0, 0.0), (1.0, 1.0), (2.0, 0.5)],
                },
                Series {
                    label: "b".into(),
                    points: vec![(0.0, 1.0), (2.0, 0.0)],
                },
            ],
            h_lines: vec![HLine {
                y: 0.25,
                label: "chance".into(),
            }],
            v_lines: vec![VLine {
                x: 1.0,
                label: "k".into(),
            }],
            comment: Some("seed=42".into()),
            ..LinePlot::default()
        }
    }

    #[test]
    fn line_plot_structure_matches_inputs() {
        let svg = sample_plot().render().unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("class=\"chance-line\"").count(), 1);
        assert_eq!(svg.matches("class=\"marker-line\"").count(), 1);
        assert!(svg.contains("<!-- seed=42 -->"));
        assert!(svg.starts_with("<svg "));
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn rendering_is_deterministic() {
        assert_eq!(
            sample_plot().render().unwrap(),
            sample_plot().render().unwrap()
        );
    }

    #[test]
    fn known_scale_maps_corners_to_plot_edges() {
        // Two points spanning the data range land on the plot margins.
        let plot = LinePlot {
            series: vec![Series {
                label: "s".into(),
                points: vec![(0.0, 0.0), (1.0, 1.0)],
            }],
            ..LinePlot::default()
        };
        let svg = plot.render().unwrap();
        let expect = format!(
            "points=\"{},{} {},{}\"",
            fmt(MARGIN_LEFT),
            fmt(HEIGHT - MARGIN_BOTTOM),
            fmt(WIDTH - MARGIN_RIGHT),
            fmt(MARGIN_TOP)
        );
        assert!(svg.contains(&expect), "missing {expect}");
    }

    #[test]
    fn empty_or_non_finite_data_is_rejected() {
        assert!(LinePlot::default().render().is_err());
        let plot = LinePlot {
            series: vec![Series {
                label: "s".into(),
                points: vec![(0.0, f64::NAN)],
            }],
            ..LinePlot::default()
        };
        assert!(plot.render().is_err());
        assert!(BarPlot::default().render().is_err());
    }

    #[test]
    fn bar_plot_emits_one_rect_per_bar_plus_background() {
        let plot = BarPlot {
            title: "bars".into(),
            y_label: "v".into(),
            bars: vec![("a".into(), 0.5), ("b".into(), 0.9), ("c".into(), 0.1)],
            h_lines: vec![HLine {
                y: 0.2,
                label: "chance".into(),
            }],
            comment: None,
            y_range: Some((0.0, 1.0)),
        };
        let svg = plot.render().unwrap();
        assert_eq!(svg.matches("class=\"bar\"").count(), 3);
        assert_eq!(svg.matches("class=\"chance-line\"").count(), 1);
    }

    #[test]
    fn degenerate_constant_series_still_renders() {
        let plot = LinePlot {
            series: vec![Series {
                label: "flat".into(),
                points: vec![(0.0, 0.7), (1.0, 0.7)],
            }],
            ..LinePlot::default()
        };
        let svg = plot.render().unwrap();
        assert!(svg.contains("<polyline"));
    }

    #[test]
    fn panel_column_nests_every_panel() {
        let p = sample_plot().render().unwrap();
        let stacked = panel_column(&[p.clone(), p.clone(), p]).unwrap();
        assert_eq!(stacked.matches("<svg ").count(), 4);
        assert!(stacked.contains("y=\"360\""));
        assert!(stacked.contains("y=\"720\""));
    }
}
