//! Minimal in-process SVG rendering for one-dimensional band plots: a
//! ribbon between the band limits, the center line, and an optional true
//! function overlay. No external plotting dependency.

use crate::error::{Error, Result};

/// Data for a one-dimensional band plot.
pub struct BandPlot<'a> {
    pub x: &'a [f64],
    pub center: &'a [f64],
    pub lower: &'a [f64],
    pub upper: &'a [f64],
    pub truth: Option<&'a [f64]>,
    pub title: &'a str,
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 46.0;

fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let step = if norm < 1.5 {
        1.0
    } else if norm < 3.0 {
        2.0
    } else if norm < 7.0 {
        5.0
    } else {
        10.0
    } * mag;
    let first = (lo / step).ceil() * step;
    let mut ticks = Vec::new();
    let mut t = first;
    while t <= hi + 1e-9 * span {
        ticks.push(t);
        t += step;
    }
    ticks
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if a >= 100.0 || a < 0.01 {
        format!("{v:.1e}")
    } else if a >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.3}")
    }
}

/// Render the plot to an SVG document; `header_comment` lines become an XML
/// comment carrying version/seed/digest metadata.
pub fn render_band_svg(plot: &BandPlot<'_>, header_comment: &str) -> Result<String> {
    let m = plot.x.len();
    if m < 2
        || plot.center.len() != m
        || plot.lower.len() != m
        || plot.upper.len() != m
        || plot.truth.map_or(false, |t| t.len() != m)
    {
        return Err(Error::GridMismatch);
    }
    let xmin = plot.x[0];
    let xmax = plot.x[m - 1];
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for series in [Some(plot.lower), Some(plot.upper), plot.truth].into_iter().flatten() {
        for &v in series {
            ymin = ymin.min(v);
            ymax = ymax.max(v);
        }
    }
    let pad = 0.05 * (ymax - ymin).max(1e-12);
    ymin -= pad;
    ymax += pad;

    let px = |x: f64| MARGIN_L + (x - xmin) / (xmax - xmin) * (WIDTH - MARGIN_L - MARGIN_R);
    let py = |y: f64| HEIGHT - MARGIN_B - (y - ymin) / (ymax - ymin) * (HEIGHT - MARGIN_T - MARGIN_B);

    let polyline = |ys: &[f64]| -> String {
        plot.x
            .iter()
            .zip(ys)
            .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect::<Vec<_>>()
            .join(" ")
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    for line in header_comment.lines() {
        svg.push_str(&format!("<!-- {} -->\n", line.replace("--", "- -")));
    }
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    // ribbon: upper path forward, lower path reversed
    let mut ribbon = String::new();
    for (&x, &y) in plot.x.iter().zip(plot.upper) {
        ribbon.push_str(&format!("{:.2},{:.2} ", px(x), py(y)));
    }
    for (&x, &y) in plot.x.iter().rev().zip(plot.lower.iter().rev()) {
        ribbon.push_str(&format!("{:.2},{:.2} ", px(x), py(y)));
    }
    svg.push_str(&format!(
        "<polygon points=\"{}\" fill=\"#4878cf\" fill-opacity=\"0.25\" stroke=\"none\"/>\n",
        ribbon.trim_end()
    ));

    // axes
    svg.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        MARGIN_L,
        HEIGHT - MARGIN_B,
        WIDTH - MARGIN_R,
        HEIGHT - MARGIN_B
    ));
    svg.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        MARGIN_L, MARGIN_T, MARGIN_L,
        HEIGHT - MARGIN_B
    ));
    for t in nice_ticks(xmin, xmax, 8) {
        let tx = px(t);
        svg.push_str(&format!(
            "<line x1=\"{tx:.2}\" y1=\"{:.2}\" x2=\"{tx:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
            HEIGHT - MARGIN_B,
            HEIGHT - MARGIN_B + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{tx:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            HEIGHT - MARGIN_B + 18.0,
            fmt_tick(t)
        ));
    }
    for t in nice_ticks(ymin, ymax, 6) {
        let ty = py(t);
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{ty:.2}\" x2=\"{:.2}\" y2=\"{ty:.2}\" stroke=\"black\"/>\n",
            MARGIN_L - 5.0,
            MARGIN_L
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L - 8.0,
            ty + 4.0,
            fmt_tick(t)
        ));
    }

    // band limits
    svg.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#4878cf\" stroke-width=\"1.2\" stroke-dasharray=\"6 4\"/>\n",
        polyline(plot.upper)
    ));
    svg.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#4878cf\" stroke-width=\"1.2\" stroke-dasharray=\"6 4\"/>\n",
        polyline(plot.lower)
    ));
    // truth overlay
    if let Some(truth) = plot.truth {
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#d1495b\" stroke-width=\"1.6\"/>\n",
            polyline(truth)
        ));
    }
    // center
    svg.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f3b70\" stroke-width=\"1.6\"/>\n",
        polyline(plot.center)
    ));

    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        0.5 * WIDTH,
        MARGIN_T - 12.0,
        plot.title
    ));
    let legend_y = MARGIN_T + 6.0;
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{legend_y:.2}\" font-size=\"12\" fill=\"#1f3b70\">center</text>\n",
        WIDTH - MARGIN_R - 170.0
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{legend_y:.2}\" font-size=\"12\" fill=\"#4878cf\">band</text>\n",
        WIDTH - MARGIN_R - 110.0
    ));
    if plot.truth.is_some() {
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{legend_y:.2}\" font-size=\"12\" fill=\"#d1495b\">truth</text>\n",
            WIDTH - MARGIN_R - 60.0
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
