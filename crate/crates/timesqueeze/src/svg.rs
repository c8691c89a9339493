//! Hand-emitted SVG charts: a series polyline with patch-boundary rules, and
//! a context/forecast/truth overlay. No plotting dependency; output is fully
//! deterministic so artifacts can be compared byte for byte.

const WIDTH: f64 = 960.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 24.0;

/// Stamped into every file; bump when the drawing routine changes shape.
pub const GENERATOR_VERSION: &str = "timesqueeze-svg/1";

struct Frame {
    n: usize,
    lo: f64,
    hi: f64,
}

impl Frame {
    fn over(series: &[&[f64]]) -> Frame {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut n = 0;
        for s in series {
            n = n.max(s.len());
            for &v in *s {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if !(hi > lo) {
            // Flat or empty data still needs a non-degenerate vertical range.
            lo -= 1.0;
            hi += 1.0;
        }
        Frame { n, lo, hi }
    }

    fn x(&self, i: usize) -> f64 {
        let span = (self.n.max(2) - 1) as f64;
        MARGIN + (WIDTH - 2.0 * MARGIN) * i as f64 / span
    }

    fn y(&self, v: f64) -> f64 {
        let t = (v - self.lo) / (self.hi - self.lo);
        HEIGHT - MARGIN - (HEIGHT - 2.0 * MARGIN) * t
    }

    fn polyline(&self, values: &[f64], offset: usize, color: &str) -> String {
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", self.x(offset + i), self.y(v)))
            .collect();
        format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        )
    }
}

fn document(body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" data-generator=\"{GENERATOR_VERSION}\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n{body}</svg>\n"
    )
}

/// Series polyline with a vertical rule at the start of every patch.
pub fn patch_chart(values: &[f64], boundaries: &[usize]) -> String {
    let frame = Frame::over(&[values]);
    let mut body = String::new();
    for &b in boundaries {
        let x = frame.x(b);
        body.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{MARGIN}\" x2=\"{x:.2}\" y2=\"{:.2}\" \
             stroke=\"#d0d0d0\" stroke-width=\"1\"/>\n",
            HEIGHT - MARGIN
        ));
    }
    body.push_str(&frame.polyline(values, 0, "#1f6fb2"));
    document(&body)
}

/// Context, truth, and forecast on one frame; the forecast picks up where the
/// context ends.
pub fn forecast_chart(context: &[f64], truth: &[f64], forecast: &[f64]) -> String {
    let joined_len = context.len() + truth.len().max(forecast.len());
    let frame = {
        let mut f = Frame::over(&[context, truth, forecast]);
        f.n = joined_len;
        f
    };
    let split_x = frame.x(context.len().saturating_sub(1));
    let mut body = format!(
        "<line x1=\"{split_x:.2}\" y1=\"{MARGIN}\" x2=\"{split_x:.2}\" y2=\"{:.2}\" \
         stroke=\"#b0b0b0\" stroke-width=\"1\" stroke-dasharray=\"4 3\"/>\n",
        HEIGHT - MARGIN
    );
    body.push_str(&frame.polyline(context, 0, "#1f6fb2"));
    body.push_str(&frame.polyline(truth, context.len(), "#2e8b57"));
    body.push_str(&frame.polyline(forecast, context.len(), "#d2691e"));
    document(&body)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_chart_draws_one_rule_per_boundary() {
        let values: Vec<f64> = (0..32).map(|t| (t as f64 * 0.5).sin()).collect();
        let svg = patch_chart(&values, &[0, 8, 16, 24]);
        assert!(svg.starts_with("<svg "));
        assert!(svg.contains(GENERATOR_VERSION));
        assert_eq!(svg.matches("<line ").count(), 4);
        assert_eq!(svg.matches("<polyline ").count(), 1);
    }

    #[test]
    fn forecast_chart_has_three_polylines() {
        let ctx: Vec<f64> = (0..16).map(|t| t as f64 * 0.1).collect();
        let truth = vec![1.7, 1.8, 1.9, 2.0];
        let fc = vec![1.6, 1.7, 1.9, 2.2];
        let svg = forecast_chart(&ctx, &truth, &fc);
        assert_eq!(svg.matches("<polyline ").count(), 3);
        assert!(svg.contains("stroke-dasharray"));
    }

    #[test]
    fn output_is_deterministic() {
        let values: Vec<f64> = (0..20).map(|t| ((t * t) as f64 * 0.01).cos()).collect();
        assert_eq!(patch_chart(&values, &[0, 5]), patch_chart(&values, &[0, 5]));
    }

    #[test]
    fn flat_data_stays_in_frame() {
        let svg = patch_chart(&[3.0; 10], &[0]);
        // Every plotted y must stay inside the canvas.
        for chunk in svg.split("points=\"").skip(1) {
            let pts = chunk.split('"').next().unwrap();
            for pair in pts.split(' ') {
                let y: f64 = pair.split(',').nth(1).unwrap().parse().unwrap();
                assert!((0.0..=HEIGHT).contains(&y), "{pair}");
            }
        }
    }
}
