//! Standalone SVG line plot for one or more ROC traces with an AUC legend.

/// One plotted curve: (fpr, tpr) points plus its legend entries.
#[derive(Clone, Debug)]
pub struct RocTrace {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

const SIZE: f64 = 480.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = [
    "#0072b2", "#d55e00", "#009e73", "#cc79a7", "#e69f00", "#56b4e9",
];

fn px(fpr: f64) -> f64 {
    MARGIN + fpr * (SIZE - 2.0 * MARGIN)
}

fn py(tpr: f64) -> f64 {
    SIZE - MARGIN - tpr * (SIZE - 2.0 * MARGIN)
}

/// Render ROC traces with a dashed chance diagonal and per-trace AUC legend.
pub fn roc_svg(traces: &[RocTrace]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{s}\" height=\"{s}\" viewBox=\"0 0 {s} {s}\">\n",
        s = SIZE
    ));
    out.push_str(&format!(
        "  <rect width=\"{s}\" height=\"{s}\" fill=\"white\"/>\n",
        s = SIZE
    ));

    // Axes box and gridlines at 0.25 steps.
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        out.push_str(&format!(
            "  <line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#dddddd\"/>\n",
            px(f), py(0.0), px(f), py(1.0)
        ));
        out.push_str(&format!(
            "  <line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#dddddd\"/>\n",
            px(0.0), py(f), px(1.0), py(f)
        ));
        out.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\" fill=\"#444444\">{:.2}</text>\n",
            px(f), py(0.0) + 16.0, f
        ));
        out.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\" fill=\"#444444\">{:.2}</text>\n",
            px(0.0) - 6.0, py(f) + 4.0, f
        ));
    }
    out.push_str(&format!(
        "  <rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"black\"/>\n",
        px(0.0), py(1.0), SIZE - 2.0 * MARGIN, SIZE - 2.0 * MARGIN
    ));

    // Chance diagonal.
    out.push_str(&format!(
        "  <line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#888888\" stroke-dasharray=\"6 4\"/>\n",
        px(0.0), py(0.0), px(1.0), py(1.0)
    ));

    for (i, trace) in traces.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = trace
            .points
            .iter()
            .map(|&(fpr, tpr)| format!("{:.2},{:.2}", px(fpr), py(tpr)))
            .collect();
        out.push_str(&format!(
            "  <polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            path.join(" ")
        ));
        let ly = py(1.0) + 18.0 + 18.0 * i as f64;
        out.push_str(&format!(
            "  <line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            px(0.0) + 10.0, ly - 4.0, px(0.0) + 34.0, ly - 4.0
        ));
        out.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" fill=\"#222222\">{} (AUC = {:.2})</text>\n",
            px(0.0) + 40.0, ly, trace.name, trace.auc
        ));
    }

    out.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\" fill=\"#222222\">False positive rate</text>\n",
        SIZE / 2.0, SIZE - 14.0
    ));
    out.push_str(&format!(
        "  <text x=\"16\" y=\"{:.1}\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\" fill=\"#222222\">True positive rate</text>\n",
        SIZE / 2.0, SIZE / 2.0
    ));
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_contains_one_polyline_and_legend_entry_per_trace() {
        let traces: Vec<RocTrace> = (0..3)
            .map(|i| RocTrace {
                name: format!("model{i}"),
                points: vec![(0.0, 0.0), (0.2, 0.8), (1.0, 1.0)],
                auc: 0.5 + 0.1 * i as f64,
            })
            .collect();
        let svg = roc_svg(&traces);
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.contains("model0 (AUC = 0.50)"));
        assert!(svg.contains("model2 (AUC = 0.70)"));
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }
}
