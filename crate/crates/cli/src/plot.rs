//! SVG line charts and heatmaps.

use std::path::Path;

use plotters::prelude::*;
use repap_core::{Error, Result};

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("plot: {e}"))
}

const COLORS: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(255, 127, 14),
    RGBColor(148, 103, 189),
    RGBColor(23, 190, 207),
];

/// Line chart; `log_y` plots `log10(y)` for positive values.
pub fn line_chart(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series], log_y: bool) -> Result<()> {
    let tr = |y: f64| if log_y { y.max(1e-300).log10() } else { y };
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().map(|&(x, y)| (x, tr(y)))).filter(|p| p.1.is_finite()).collect();
    if pts.is_empty() {
        return Err(Error::Argument("plot: no finite points".into()));
    }
    let (mut x0, mut x1, mut y0, mut y1) = pts.iter().fold((f64::MAX, f64::MIN, f64::MAX, f64::MIN), |(a, b, c, d), &(x, y)| (a.min(x), b.max(x), c.min(y), d.max(y)));
    if x1 <= x0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-9);
    y0 -= pad;
    y1 += pad;
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(err)?;
    let yl = if log_y { format!("log10 {y_label}") } else { y_label.to_string() };
    chart.configure_mesh().x_desc(x_label).y_desc(yl).draw().map_err(err)?;
    for (k, s) in series.iter().enumerate() {
        let c = COLORS[k % COLORS.len()];
        let data: Vec<(f64, f64)> = s.points.iter().map(|&(x, y)| (x, tr(y))).filter(|p| p.1.is_finite()).collect();
        chart
            .draw_series(LineSeries::new(data.clone(), c.stroke_width(2)))
            .map_err(err)?
            .label(s.name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], c.stroke_width(2)));
        chart.draw_series(data.into_iter().map(|p| Circle::new(p, 3, c.filled()))).map_err(err)?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(err)?;
    root.present().map_err(err)
}

/// Row-major `rows x cols` matrix in `[0, 1]` as a grey-to-blue heatmap.
pub fn heatmap(path: &Path, title: &str, row_labels: &[String], col_labels: &[String], values: &[f64]) -> Result<()> {
    let (r, c) = (row_labels.len(), col_labels.len());
    if values.len() != r * c || r == 0 || c == 0 {
        return Err(Error::Shape("heatmap: values do not match labels".into()));
    }
    let root = SVGBackend::new(path, (120 + 70 * c as u32, 100 + 40 * r as u32)).into_drawing_area();
    root.fill(&WHITE).map_err(err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(100)
        .build_cartesian_2d(0..c, 0..r)
        .map_err(err)?;
    chart
        .configure_mesh()
        .disable_mesh()
        .x_labels(c)
        .y_labels(r)
        .x_label_formatter(&|i| col_labels.get(*i).cloned().unwrap_or_default())
        .y_label_formatter(&|j| row_labels.get(*j).cloned().unwrap_or_default())
        .draw()
        .map_err(err)?;
    chart
        .draw_series((0..r).flat_map(|i| (0..c).map(move |j| (i, j))).map(|(i, j)| {
            let v = values[i * c + j].clamp(0.0, 1.0);
            let shade = |a: f64, b: f64| (a + (b - a) * v) as u8;
            let color = RGBColor(shade(235.0, 31.0), shade(235.0, 119.0), shade(235.0, 180.0));
            Rectangle::new([(j, i), (j + 1, i + 1)], color.filled())
        }))
        .map_err(err)?;
    root.present().map_err(err)
}
