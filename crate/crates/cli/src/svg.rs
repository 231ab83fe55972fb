//! SVG rendering of the angle distribution: three overlaid histograms (pt,
//! mt, tl slots) over 18 fixed bins spanning 0..90 degrees.

use cobbkit_core::geometry::CobbTriple;

pub const BIN_COUNT: usize = 18;
const BIN_WIDTH_DEG: f64 = 90.0 / BIN_COUNT as f64;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 50.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 40.0;

const SERIES: [(&str, &str); 3] = [
    ("angle1 (pt)", "#4e79a7"),
    ("angle2 (mt)", "#e15759"),
    ("angle3 (tl)", "#76b7b2"),
];

fn bin_of(angle: f64) -> usize {
    ((angle / BIN_WIDTH_DEG) as usize).min(BIN_COUNT - 1)
}

/// Render the histogram document. Exactly 3 x 18 `<rect>` elements are
/// emitted, one per (slot, bin), including zero-count bins.
pub fn render_angle_histograms(triples: &[CobbTriple]) -> String {
    let mut counts = [[0usize; BIN_COUNT]; 3];
    for t in triples {
        for (slot, &angle) in t.slots().iter().enumerate() {
            counts[slot][bin_of(angle)] += 1;
        }
    }
    let max_count = counts
        .iter()
        .flat_map(|c| c.iter())
        .copied()
        .max()
        .unwrap_or(0)
        .max(1) as f64;

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let base_y = MARGIN_TOP + plot_h;
    let bin_w = plot_w / BIN_COUNT as f64;

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    out.push_str(&format!(
        "  <line x1=\"{MARGIN_LEFT}\" y1=\"{base_y}\" x2=\"{:.1}\" y2=\"{base_y}\" \
         stroke=\"#333\" stroke-width=\"1\"/>\n",
        MARGIN_LEFT + plot_w
    ));
    out.push_str(&format!(
        "  <line x1=\"{MARGIN_LEFT}\" y1=\"{MARGIN_TOP}\" x2=\"{MARGIN_LEFT}\" y2=\"{base_y}\" \
         stroke=\"#333\" stroke-width=\"1\"/>\n"
    ));

    for (slot, (label, color)) in SERIES.iter().enumerate() {
        for (bin, &count) in counts[slot].iter().enumerate() {
            let h = plot_h * count as f64 / max_count;
            let x = MARGIN_LEFT + bin as f64 * bin_w;
            let y = base_y - h;
            out.push_str(&format!(
                "  <rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{bin_w:.2}\" height=\"{h:.2}\" \
                 fill=\"{color}\" fill-opacity=\"0.55\"/>\n"
            ));
        }
        let legend_y = MARGIN_TOP + 14.0 * slot as f64;
        out.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{legend_y:.1}\" font-size=\"11\" fill=\"{color}\">{label}</text>\n",
            MARGIN_LEFT + plot_w - 90.0
        ));
    }

    for deg in (0..=90).step_by(15) {
        let x = MARGIN_LEFT + plot_w * deg as f64 / 90.0;
        out.push_str(&format!(
            "  <text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"10\" fill=\"#333\" \
             text-anchor=\"middle\">{deg}</text>\n",
            base_y + 16.0
        ));
    }
    out.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" fill=\"#333\" \
         text-anchor=\"middle\">degrees</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 8.0
    ));
    out.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" fill=\"#333\">count (max {})</text>\n",
        MARGIN_LEFT + 4.0,
        MARGIN_TOP - 10.0,
        max_count as usize
    ));
    out.push_str("</svg>\n");
    out
}
