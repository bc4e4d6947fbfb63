//! Static SVG figures: trajectories with phoneme boundaries and attention heat maps.

use std::fmt::Write as _;

use artic::corpus::PhonemeAlignment;
use artic::numerics::Tensor;

const WIDTH: f64 = 900.0;
const PANEL_HEIGHT: f64 = 180.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 30.0;
const GAP: f64 = 40.0;

fn header(height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{height}\" viewBox=\"0 0 {WIDTH} {height}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn polyline(out: &mut String, xs: impl Iterator<Item = (f64, f64)>, style: &str) {
    let pts: Vec<String> = xs.map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let _ = writeln!(out, "<polyline fill=\"none\" {style} points=\"{}\"/>", pts.join(" "));
}

/// One panel per channel: reference (solid) and prediction (dashed) over time,
/// with vertical lines at phoneme boundaries. Both series are `(name, values)`
/// sampled every `frame_period_s`.
pub fn trajectories_svg(
    title: &str,
    channels: &[(&str, Vec<f64>, Vec<f64>)],
    alignment: &PhonemeAlignment,
    frame_period_s: f64,
) -> String {
    let height = MARGIN_TOP + channels.len() as f64 * (PANEL_HEIGHT + GAP);
    let mut out = header(height);
    let _ = writeln!(out, "<text x=\"{MARGIN_LEFT}\" y=\"18\" font-size=\"13\">{}</text>", escape(title));
    let longest = channels
        .iter()
        .map(|(_, r, p)| r.len().max(p.len()))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let span_s = (longest * frame_period_s).max(alignment.duration_s());
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let x_of = |t: f64| MARGIN_LEFT + plot_w * t / span_s;
    for (k, (name, reference, predicted)) in channels.iter().enumerate() {
        let top = MARGIN_TOP + k as f64 * (PANEL_HEIGHT + GAP) + 14.0;
        let (lo, hi) = reference
            .iter()
            .chain(predicted)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (lo.min(0.0) - 1.0, hi.max(0.0) + 1.0) };
        let y_of = |v: f64| top + PANEL_HEIGHT * (1.0 - (v - lo) / (hi - lo));
        let _ = writeln!(
            out,
            "<rect x=\"{MARGIN_LEFT}\" y=\"{top:.2}\" width=\"{plot_w:.2}\" height=\"{PANEL_HEIGHT}\" fill=\"none\" stroke=\"#888\"/>"
        );
        let _ = writeln!(out, "<text x=\"8\" y=\"{:.2}\">{}</text>", top + PANEL_HEIGHT / 2.0, escape(name));
        let _ = writeln!(out, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{hi:.2}</text>", MARGIN_LEFT - 4.0, top + 10.0);
        let _ = writeln!(out, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{lo:.2}</text>", MARGIN_LEFT - 4.0, top + PANEL_HEIGHT);
        for iv in alignment.intervals() {
            let x = x_of(iv.start_s);
            let _ = writeln!(
                out,
                "<line class=\"boundary\" x1=\"{x:.2}\" y1=\"{top:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"#ccc\" stroke-dasharray=\"2,2\"/>",
                top + PANEL_HEIGHT
            );
            let _ = writeln!(
                out,
                "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" fill=\"#555\">{}</text>",
                x_of(iv.midpoint()),
                top - 3.0,
                escape(&iv.phoneme)
            );
        }
        let at = |i: usize| x_of(i as f64 * frame_period_s);
        polyline(&mut out, reference.iter().enumerate().map(|(i, &v)| (at(i), y_of(v))), "class=\"reference\" stroke=\"black\" stroke-width=\"1.5\"");
        polyline(
            &mut out,
            predicted.iter().enumerate().map(|(i, &v)| (at(i), y_of(v))),
            "class=\"prediction\" stroke=\"#d62728\" stroke-width=\"1.5\" stroke-dasharray=\"5,3\"",
        );
    }
    out.push_str("</svg>\n");
    out
}

/// `T × N` attention weights as a heat map: time on the x axis, input tokens
/// (labelled) on the y axis, darker for larger weights.
pub fn attention_svg(title: &str, alphas: &Tensor, tokens: &[String]) -> String {
    let (frames, n) = (alphas.rows().max(1), alphas.cols().max(1));
    let row_h = (360.0 / n as f64).clamp(6.0, 24.0);
    let plot_h = row_h * n as f64;
    let height = MARGIN_TOP + plot_h + 40.0;
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let col_w = plot_w / frames as f64;
    let mut out = header(height);
    let _ = writeln!(out, "<text x=\"{MARGIN_LEFT}\" y=\"18\" font-size=\"13\">{}</text>", escape(title));
    for t in 0..alphas.rows() {
        for (j, &a) in alphas.row(t).iter().enumerate() {
            if a < 1e-3 {
                continue;
            }
            let shade = (255.0 * (1.0 - a.clamp(0.0, 1.0))).round() as u8;
            // first token at the bottom
            let y = MARGIN_TOP + plot_h - (j + 1) as f64 * row_h;
            let _ = writeln!(
                out,
                "<rect class=\"cell\" x=\"{:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{row_h:.2}\" fill=\"rgb({shade},{shade},255)\"/>",
                MARGIN_LEFT + t as f64 * col_w,
                col_w + 0.05
            );
        }
    }
    for (j, label) in tokens.iter().enumerate().take(n) {
        let y = MARGIN_TOP + plot_h - j as f64 * row_h - row_h / 2.0 + 4.0;
        let _ = writeln!(out, "<text x=\"{:.2}\" y=\"{y:.2}\" text-anchor=\"end\">{}</text>", MARGIN_LEFT - 4.0, escape(label));
    }
    let _ = writeln!(
        out,
        "<rect x=\"{MARGIN_LEFT}\" y=\"{MARGIN_TOP}\" width=\"{plot_w:.2}\" height=\"{plot_h:.2}\" fill=\"none\" stroke=\"#888\"/>"
    );
    let _ = writeln!(
        out,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">decoder frame (0 to {})</text>",
        MARGIN_LEFT + plot_w / 2.0,
        MARGIN_TOP + plot_h + 24.0,
        alphas.rows()
    );
    out.push_str("</svg>\n");
    out
}
