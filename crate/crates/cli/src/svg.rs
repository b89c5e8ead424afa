//! Reliability-diagram rendering.
//!
//! Produces a self-contained SVG: one bar per confidence bin showing
//! tolerance accuracy, the identity diagonal as the perfect-calibration
//! reference, and tick labels on both axes. SVG keeps the output
//! structurally checkable — tests count bars instead of decoding pixels.

use tolcal_core::metrics::ReliabilityBin;

const WIDTH: f64 = 420.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 50.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 20.0;
const MARGIN_BOTTOM: f64 = 50.0;

/// Renders one reliability diagram. Every bin gets a `<rect class="bar">`,
/// empty bins as zero-height bars, so the bar count always equals the bin
/// count.
pub fn render_reliability_svg(bins: &[ReliabilityBin], title: &str) -> String {
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let x = |v: f64| MARGIN_LEFT + v * plot_w;
    let y = |v: f64| MARGIN_TOP + (1.0 - v) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str(&format!(
        "  <title>{}</title>\n",
        escape_text(title)
    ));
    svg.push_str(&format!(
        "  <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));

    for bin in bins {
        let accuracy = bin.tolerance_accuracy.unwrap_or(0.0);
        let left = x(bin.lower);
        let right = x(bin.upper);
        let top = y(accuracy);
        svg.push_str(&format!(
            "  <rect class=\"bar\" x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" \
             fill=\"#4878a8\" stroke=\"#1f3550\" stroke-width=\"1\"><title>[{:.2}, {:.2}] \
             n={} acc={}</title></rect>\n",
            left,
            top,
            right - left,
            y(0.0) - top,
            bin.lower,
            bin.upper,
            bin.count,
            bin.tolerance_accuracy
                .map(|a| format!("{a:.3}"))
                .unwrap_or_else(|| "n/a".into()),
        ));
    }

    svg.push_str(&format!(
        "  <line class=\"diagonal\" x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" \
         stroke=\"#c04040\" stroke-width=\"2\" stroke-dasharray=\"6 4\"/>\n",
        x(0.0),
        y(0.0),
        x(1.0),
        y(1.0)
    ));

    // Axes.
    svg.push_str(&format!(
        "  <line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        x(0.0),
        y(0.0),
        x(1.0),
        y(0.0)
    ));
    svg.push_str(&format!(
        "  <line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        x(0.0),
        y(0.0),
        x(0.0),
        y(1.0)
    ));
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        svg.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"middle\">{tick}</text>\n",
            x(tick),
            y(0.0) + 16.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"end\">{tick}</text>\n",
            x(0.0) - 6.0,
            y(tick) + 4.0
        ));
    }
    svg.push_str(&format!(
        "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\">confidence</text>\n",
        x(0.5),
        HEIGHT - 12.0
    ));
    svg.push_str(&format!(
        "  <text x=\"14\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"middle\" \
         transform=\"rotate(-90 14 {:.2})\">tolerance accuracy</text>\n",
        y(0.5),
        y(0.5)
    ));
    svg.push_str("</svg>\n");
    svg
}

fn escape_text(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
