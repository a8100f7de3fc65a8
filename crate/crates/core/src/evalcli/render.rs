use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::ohlc::{Candle, CandleColor};

const UP_COLOR: &str = "#1a9850";
const DOWN_COLOR: &str = "#000000";
const BOX_COLOR: &str = "#d73027";
const MARGIN: f64 = 24.0;
const LABEL_SPACE: f64 = 28.0;

/// A chart of candles with a detection box around the last `window_size` bars.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderSpec {
    pub candles: Vec<Candle>,
    pub window_size: usize,
    pub label: String,
    pub score: Option<f64>,
    pub width: u32,
    pub height: u32,
}

impl RenderSpec {
    pub fn new(candles: Vec<Candle>, window_size: usize, label: impl Into<String>, score: Option<f64>) -> Self {
        RenderSpec {
            candles,
            window_size,
            label: label.into(),
            score,
            width: 640,
            height: 360,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.candles.is_empty() {
            return Err(Error::invalid("nothing to render"));
        }
        if self.window_size == 0 || self.window_size > self.candles.len() {
            return Err(Error::invalid(format!(
                "box of {} bars over {} candles",
                self.window_size,
                self.candles.len()
            )));
        }
        if f64::from(self.width) <= 2.0 * MARGIN || f64::from(self.height) <= 2.0 * MARGIN + LABEL_SPACE {
            return Err(Error::invalid("chart too small"));
        }
        Ok(())
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn render_chart(spec: &RenderSpec) -> Result<String> {
    spec.validate()?;
    let (w, h) = (f64::from(spec.width), f64::from(spec.height));
    let n = spec.candles.len();
    let lo = spec.candles.iter().map(|c| c.low).fold(f64::INFINITY, f64::min);
    let hi = spec.candles.iter().map(|c| c.high).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let top = MARGIN + LABEL_SPACE;
    let plot_h = h - top - MARGIN;
    let y = |p: f64| top + (hi - p) / span * plot_h;
    let slot = (w - 2.0 * MARGIN) / n as f64;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        spec.width, spec.height, spec.width, spec.height
    );
    let _ = writeln!(svg, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    for (i, c) in spec.candles.iter().enumerate() {
        let color = match c.color() {
            CandleColor::White => UP_COLOR,
            CandleColor::Black | CandleColor::Doji => DOWN_COLOR,
        };
        let cx = MARGIN + (i as f64 + 0.5) * slot;
        let body_top = y(c.body_top());
        let body_h = (y(c.body_bottom()) - body_top).max(1.0);
        let _ = writeln!(
            svg,
            r#"<g class="candle"><line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="{color}"/><rect x="{:.2}" y="{body_top:.2}" width="{:.2}" height="{body_h:.2}" fill="{color}" stroke="{color}"/></g>"#,
            y(c.high),
            y(c.low),
            cx - 0.3 * slot,
            0.6 * slot,
        );
    }
    let first = n - spec.window_size;
    let boxed = &spec.candles[first..];
    let bhi = boxed.iter().map(|c| c.high).fold(f64::NEG_INFINITY, f64::max);
    let blo = boxed.iter().map(|c| c.low).fold(f64::INFINITY, f64::min);
    let bx = MARGIN + first as f64 * slot;
    let by = y(bhi) - 4.0;
    let _ = writeln!(
        svg,
        r#"<rect class="box" x="{bx:.2}" y="{by:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="{BOX_COLOR}" stroke-width="2"/>"#,
        spec.window_size as f64 * slot,
        y(blo) - by + 4.0,
    );
    let text = match spec.score {
        Some(s) => format!("{} {:.2} (w={})", escape(&spec.label), s, spec.window_size),
        None => format!("{} (w={})", escape(&spec.label), spec.window_size),
    };
    let _ = writeln!(
        svg,
        r#"<text x="{bx:.2}" y="{:.2}" font-family="sans-serif" font-size="14" fill="{BOX_COLOR}">{text}</text>"#,
        (by - 6.0).max(16.0),
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}
