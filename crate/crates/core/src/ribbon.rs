//! Qualitative phase ribbons rendered as SVG.

use std::fmt::Write as _;

use thiserror::Error;

use crate::metrics::{to_segments, Segment};

#[derive(Debug, Error, PartialEq)]
pub enum RibbonError {
    #[error("row {row} has {got} frames, expected {expected}")]
    RowLength { row: String, expected: usize, got: usize },
    #[error("nothing to render")]
    Empty,
    #[error("pixels per frame must be positive and finite")]
    Scale,
}

/// Fixed categorical palette; class `c` uses entry `c % len`.
pub const PALETTE: [&str; 20] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
    "#aec7e8", "#ffbb78", "#98df8a", "#ff9896", "#c5b0d5", "#c49c94", "#f7b6d2", "#c7c7c7", "#dbdb8d", "#9edae5",
];

pub fn class_color(c: usize) -> &'static str {
    PALETTE[c % PALETTE.len()]
}

pub const BAND_HEIGHT: f64 = 24.0;
const ROW_GAP: f64 = 8.0;
const LABEL_WIDTH: f64 = 120.0;
const MARGIN: f64 = 10.0;

pub struct RibbonRender {
    /// `(row title, labels)`; ground truth first by convention.
    pub rows: Vec<(String, Vec<usize>)>,
    /// Legend entries, indexed by class.
    pub class_names: Vec<String>,
    pub px_per_frame: f64,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

impl RibbonRender {
    pub fn validate(&self) -> Result<usize, RibbonError> {
        let first = self.rows.first().ok_or(RibbonError::Empty)?;
        let t = first.1.len();
        if t == 0 {
            return Err(RibbonError::Empty);
        }
        if !(self.px_per_frame.is_finite() && self.px_per_frame > 0.0) {
            return Err(RibbonError::Scale);
        }
        for (name, labels) in &self.rows {
            if labels.len() != t {
                return Err(RibbonError::RowLength {
                    row: name.clone(),
                    expected: t,
                    got: labels.len(),
                });
            }
        }
        Ok(t)
    }

    /// Deterministic SVG document.
    pub fn to_svg(&self) -> Result<String, RibbonError> {
        let t = self.validate()?;
        let max_label = self.rows.iter().flat_map(|r| r.1.iter().copied()).max().unwrap_or(0);
        let classes = self.class_names.len().max(max_label + 1);
        let band_w = t as f64 * self.px_per_frame;
        let rows_h = self.rows.len() as f64 * (BAND_HEIGHT + ROW_GAP);
        let legend_y = MARGIN + rows_h + ROW_GAP;
        let width = MARGIN * 2.0 + LABEL_WIDTH + band_w;
        let height = legend_y + classes as f64 * 18.0 + MARGIN;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
        );
        for (i, (name, labels)) in self.rows.iter().enumerate() {
            let y = MARGIN + i as f64 * (BAND_HEIGHT + ROW_GAP);
            let _ = writeln!(
                s,
                r#"<text x="{MARGIN}" y="{}">{}</text>"#,
                num(y + BAND_HEIGHT * 0.7),
                escape(name)
            );
            let _ = writeln!(s, r#"<g class="band" data-row="{i}">"#);
            let segs: Vec<Segment> = to_segments(labels).map_err(|_| RibbonError::Empty)?;
            for seg in segs {
                let _ = writeln!(
                    s,
                    r#"<rect x="{}" y="{}" width="{}" height="{BAND_HEIGHT}" fill="{}" data-class="{}" data-start="{}" data-end="{}"/>"#,
                    num(MARGIN + LABEL_WIDTH + seg.start as f64 * self.px_per_frame),
                    num(y),
                    num(seg.len() as f64 * self.px_per_frame),
                    class_color(seg.label),
                    seg.label,
                    seg.start,
                    seg.end,
                );
            }
            s.push_str("</g>\n");
        }
        s.push_str("<g class=\"legend\">\n");
        for c in 0..classes {
            let y = legend_y + c as f64 * 18.0;
            let name = self.class_names.get(c).cloned().unwrap_or_else(|| format!("class {c}"));
            let _ = writeln!(
                s,
                r#"<rect x="{MARGIN}" y="{}" width="12" height="12" fill="{}"/><text x="{}" y="{}">{}</text>"#,
                num(y),
                class_color(c),
                MARGIN + 18.0,
                num(y + 10.0),
                escape(&name)
            );
        }
        s.push_str("</g>\n</svg>\n");
        Ok(s)
    }
}

/// Coordinates rounded to 0.01 px without trailing zeros.
fn num(v: f64) -> String {
    format!("{}", (v * 100.0).round() / 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn band_rects(svg: &str, row: usize) -> Vec<String> {
        let start = svg.find(&format!("data-row=\"{row}\"")).unwrap();
        let end = start + svg[start..].find("</g>").unwrap();
        svg[start..end].lines().filter(|l| l.starts_with("<rect")).map(str::to_string).collect()
    }

    #[test]
    fn single_segment_spans_band() {
        let r = RibbonRender {
            rows: vec![("gt".into(), vec![2; 50])],
            class_names: vec![],
            px_per_frame: 2.0,
        };
        let svg = r.to_svg().unwrap();
        let rects = band_rects(&svg, 0);
        assert_eq!(rects.len(), 1);
        assert!(rects[0].contains("width=\"100\""));
        assert!(svg.contains("class 2"));
    }

    #[test]
    fn identical_rows_identical_bands() {
        let labels = vec![0, 0, 1, 1, 1, 3];
        let r = RibbonRender {
            rows: vec![("gt".into(), labels.clone()), ("pred".into(), labels)],
            class_names: vec!["a".into(), "b<".into()],
            px_per_frame: 1.5,
        };
        let svg = r.to_svg().unwrap();
        let strip = |v: Vec<String>| v.into_iter().map(|l| l.split(" width").nth(1).unwrap().to_string()).collect::<Vec<_>>();
        assert_eq!(strip(band_rects(&svg, 0)), strip(band_rects(&svg, 1)));
        assert!(svg.contains("b&lt;"));
        assert_eq!(svg, r.to_svg().unwrap());
    }

    #[test]
    fn coordinates_are_rounded() {
        assert_eq!(num(26.799999999999997), "26.8");
        assert_eq!(num(100.0), "100");
        assert_eq!(num(0.0), "0");
        assert_eq!(num(1.005001), "1.01");
    }

    #[test]
    fn row_mismatch_rejected() {
        let r = RibbonRender {
            rows: vec![("gt".into(), vec![0; 5]), ("pred".into(), vec![0; 4])],
            class_names: vec![],
            px_per_frame: 1.0,
        };
        assert_eq!(
            r.to_svg(),
            Err(RibbonError::RowLength { row: "pred".into(), expected: 5, got: 4 })
        );
    }
}
