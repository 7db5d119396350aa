//! Loss-curve figure: retain loss, forget loss, and average total loss per
//! epoch rendered to a standalone SVG. Output is a deterministic function of
//! the run log.

use std::path::Path;

use unlearn_core::lru::UnlearnRunLog;

use crate::error::{LabError, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 30.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 55.0;

struct Series<'a> {
    label: &'a str,
    color: &'a str,
    values: Vec<f64>,
}

fn polyline(xs: &[f64], ys: &[f64]) -> String {
    xs.iter()
        .zip(ys)
        .map(|(x, y)| format!("{x:.2},{y:.2}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Render the loss curves; errors on an empty log.
pub fn render_loss_svg(log: &UnlearnRunLog) -> Result<String> {
    if log.epochs.is_empty() {
        return Err(LabError::Usage("run log has no epochs to plot".into()));
    }
    let series = [
        Series {
            label: "retain loss",
            color: "#1f77b4",
            values: log.epochs.iter().map(|e| e.retain).collect(),
        },
        Series {
            label: "forget loss",
            color: "#d62728",
            values: log.epochs.iter().map(|e| e.forget).collect(),
        },
        Series {
            label: "average total loss",
            color: "#2ca02c",
            values: log.epochs.iter().map(|e| e.total).collect(),
        },
    ];

    let n = log.epochs.len();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in &series {
        for &v in &s.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if (hi - lo).abs() < 1e-12 {
        hi = lo + 1.0;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);

    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let x_of = |epoch: usize| {
        if n == 1 {
            MARGIN_LEFT + plot_w / 2.0
        } else {
            MARGIN_LEFT + plot_w * epoch as f64 / (n - 1) as f64
        }
    };
    let y_of = |v: f64| MARGIN_TOP + plot_h * (1.0 - (v - lo) / (hi - lo));

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{:.0}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">Unlearning losses per epoch</text>\n",
        WIDTH / 2.0
    ));

    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_LEFT}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        HEIGHT - MARGIN_BOTTOM,
        WIDTH - MARGIN_RIGHT,
        HEIGHT - MARGIN_BOTTOM
    ));
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_LEFT}\" y1=\"{MARGIN_TOP}\" x2=\"{MARGIN_LEFT}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        HEIGHT - MARGIN_BOTTOM
    ));
    svg.push_str(&format!(
        "<text x=\"{:.0}\" y=\"{:.0}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">epoch</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{:.0}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.0})\">loss</text>\n",
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0
    ));

    // Y ticks.
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = y_of(v);
        svg.push_str(&format!(
            "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{MARGIN_LEFT}\" y2=\"{y:.1}\" stroke=\"black\"/>\n",
            MARGIN_LEFT - 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{v:.3}</text>\n",
            MARGIN_LEFT - 8.0,
            y + 4.0
        ));
    }
    // X ticks: at most 10, integer epochs.
    let step = (n / 10).max(1);
    for epoch in (0..n).step_by(step) {
        let x = x_of(epoch);
        svg.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
            HEIGHT - MARGIN_BOTTOM,
            HEIGHT - MARGIN_BOTTOM + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{epoch}</text>\n",
            HEIGHT - MARGIN_BOTTOM + 18.0
        ));
    }

    // Curves + point markers.
    for s in &series {
        let xs: Vec<f64> = (0..n).map(x_of).collect();
        let ys: Vec<f64> = s.values.iter().map(|&v| y_of(v)).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>\n",
            s.color,
            polyline(&xs, &ys)
        ));
        for (x, y) in xs.iter().zip(&ys) {
            svg.push_str(&format!(
                "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"2.5\" fill=\"{}\"/>\n",
                s.color
            ));
        }
    }

    // Legend.
    for (i, s) in series.iter().enumerate() {
        let y = MARGIN_TOP + 14.0 * i as f64;
        let x = WIDTH - MARGIN_RIGHT - 170.0;
        svg.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"{}\" stroke-width=\"2\"/>\n",
            x + 22.0,
            s.color
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
            x + 28.0,
            y + 4.0,
            s.label
        ));
    }

    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn plot_losses(log: &UnlearnRunLog, path: &Path) -> Result<()> {
    let svg = render_loss_svg(log)?;
    std::fs::write(path, svg).map_err(|e| LabError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use unlearn_core::lru::EpochRecord;

    fn log_of(n: usize) -> UnlearnRunLog {
        UnlearnRunLog {
            epochs: (0..n)
                .map(|i| EpochRecord {
                    image: -(i as f64) * 0.1,
                    retain: 0.001 * i as f64,
                    forget: 2.0 - 0.1 * i as f64,
                    reg: 0.05,
                    total: 1.0 - 0.05 * i as f64,
                })
                .collect(),
            wall_seconds: 1.0,
        }
    }

    #[test]
    fn ten_epoch_log_has_ten_markers_per_curve() {
        let svg = render_loss_svg(&log_of(10)).unwrap();
        let circles = svg.matches("<circle").count();
        assert_eq!(circles, 30);
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.contains("epoch"));
        assert!(svg.contains("loss"));
    }

    #[test]
    fn single_epoch_log_renders() {
        let svg = render_loss_svg(&log_of(1)).unwrap();
        assert!(svg.contains("<svg"));
        assert_eq!(svg.matches("<circle").count(), 3);
    }

    #[test]
    fn empty_log_rejected() {
        let log = UnlearnRunLog::default();
        assert!(render_loss_svg(&log).is_err());
    }

    #[test]
    fn output_is_deterministic() {
        assert_eq!(
            render_loss_svg(&log_of(5)).unwrap(),
            render_loss_svg(&log_of(5)).unwrap()
        );
    }
}
