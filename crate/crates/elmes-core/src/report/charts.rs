//! Self-contained SVG comparison charts with the score axis fixed to [1, 5].

use super::{round_half_up2, ReportTable};

const PALETTE: [&str; 12] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7",
    "#9c755f", "#bab0ac", "#2f4b7c", "#665191",
];

const AXIS_MIN: f64 = 1.0;
const AXIS_MAX: f64 = 5.0;

/// One chart ready to be written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartDoc {
    pub file_name: String,
    pub svg: String,
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Emits one grouped bar chart (dimension groups, one bar per row) plus one
/// radar chart per row.
pub fn emit_charts(run_name: &str, table: &ReportTable) -> Vec<ChartDoc> {
    assert!(
        !table.rows.is_empty(),
        "emit_charts requires at least one row"
    );
    let mut docs = vec![ChartDoc {
        file_name: format!("{}_bars.svg", sanitize(run_name)),
        svg: grouped_bars(table),
    }];
    for row in &table.rows {
        docs.push(ChartDoc {
            file_name: format!("{}_radar_{}.svg", sanitize(run_name), sanitize(&row.label)),
            svg: radar(&table.fields, &row.label, &row.means),
        });
    }
    docs
}

fn grouped_bars(table: &ReportTable) -> String {
    let rows = table.rows.len();
    let dims = table.fields.len();
    let bar_width = 14.0_f64;
    let group_gap = 24.0_f64;
    let group_width = rows as f64 * bar_width + group_gap;
    let margin_left = 60.0;
    let margin_top = 30.0;
    let plot_height = 260.0;
    let legend_height = 22.0 * rows as f64 + 10.0;
    let width = margin_left + dims as f64 * group_width + 40.0;
    let height = margin_top + plot_height + 60.0 + legend_height;

    let y_of = |value: f64| {
        let clamped = value.clamp(AXIS_MIN, AXIS_MAX);
        margin_top + plot_height * (1.0 - (clamped - AXIS_MIN) / (AXIS_MAX - AXIS_MIN))
    };

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    // Axis, gridlines and tick labels for the fixed 1..5 range.
    for tick in 1..=5 {
        let y = y_of(tick as f64);
        svg.push_str(&format!(
            "  <line x1=\"{margin_left}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/>\n",
            width - 20.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{tick}</text>\n",
            margin_left - 8.0,
            y + 4.0
        ));
    }
    for (d, field) in table.fields.iter().enumerate() {
        let group_x = margin_left + d as f64 * group_width;
        for (r, row) in table.rows.iter().enumerate() {
            let value = round_half_up2(row.means[d]);
            let x = group_x + r as f64 * bar_width;
            let y = y_of(value);
            let bar_height = margin_top + plot_height - y;
            svg.push_str(&format!(
                "  <rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{bar_height:.1}\" fill=\"{}\"><title>{}: {value:.2}</title></rect>\n",
                bar_width - 2.0,
                PALETTE[r % PALETTE.len()],
                escape(&row.label),
            ));
        }
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            group_x + (group_width - group_gap) / 2.0,
            margin_top + plot_height + 16.0,
            escape(field)
        ));
    }
    for (r, row) in table.rows.iter().enumerate() {
        let y = margin_top + plot_height + 40.0 + r as f64 * 22.0;
        svg.push_str(&format!(
            "  <rect x=\"{margin_left}\" y=\"{:.1}\" width=\"12\" height=\"12\" fill=\"{}\"/>\n",
            y - 10.0,
            PALETTE[r % PALETTE.len()]
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{y:.1}\">{}</text>\n",
            margin_left + 18.0,
            escape(&row.label)
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn radar(fields: &[String], label: &str, means: &[f64]) -> String {
    let size = 420.0_f64;
    let center = size / 2.0;
    let radius = 150.0_f64;
    let n = fields.len().max(1);

    let point = |index: usize, value: f64| -> (f64, f64) {
        let angle =
            -std::f64::consts::FRAC_PI_2 + index as f64 * 2.0 * std::f64::consts::PI / n as f64;
        let clamped = value.clamp(AXIS_MIN, AXIS_MAX);
        let r = radius * (clamped - AXIS_MIN) / (AXIS_MAX - AXIS_MIN);
        (center + r * angle.cos(), center + r * angle.sin())
    };

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size:.0}\" height=\"{size:.0}\" viewBox=\"0 0 {size:.0} {size:.0}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    svg.push_str(&format!(
        "  <text x=\"{center:.1}\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        escape(label)
    ));
    // Rings at scores 2..=5; score 1 is the center.
    for ring in 2..=5 {
        let points: Vec<String> = (0..n)
            .map(|i| {
                let (x, y) = point(i, ring as f64);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        svg.push_str(&format!(
            "  <polygon points=\"{}\" fill=\"none\" stroke=\"#dddddd\"/>\n",
            points.join(" ")
        ));
    }
    for (i, field) in fields.iter().enumerate() {
        let (x, y) = point(i, AXIS_MAX);
        svg.push_str(&format!(
            "  <line x1=\"{center:.1}\" y1=\"{center:.1}\" x2=\"{x:.2}\" y2=\"{y:.2}\" stroke=\"#bbbbbb\"/>\n"
        ));
        let (lx, ly) = point(i, AXIS_MAX + 0.55);
        svg.push_str(&format!(
            "  <text x=\"{lx:.1}\" y=\"{ly:.1}\" text-anchor=\"middle\">{}</text>\n",
            escape(field)
        ));
    }
    let polygon: Vec<String> = means
        .iter()
        .enumerate()
        .map(|(i, &value)| {
            let (x, y) = point(i, value);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    svg.push_str(&format!(
        "  <polygon points=\"{}\" fill=\"{}\" fill-opacity=\"0.25\" stroke=\"{}\" stroke-width=\"2\"/>\n",
        polygon.join(" "),
        PALETTE[0],
        PALETTE[0]
    ));
    svg.push_str("</svg>\n");
    svg
}
