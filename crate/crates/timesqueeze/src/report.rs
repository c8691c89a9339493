//! Sliding-window evaluation: MSE and MAE per requested horizon.
//!
//! Errors are measured in standardized units (raw error divided by each
//! context window's own scale) so that metrics are comparable across windows
//! and series of different magnitudes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::{predict, ModelConfig};
use crate::params::ParamStore;
use crate::series::{standardize, TimeSeries, WindowSpec};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub mse: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForecastReport {
    pub series_id: String,
    pub context: usize,
    pub stride: usize,
    pub windows: usize,
    pub metrics: Vec<HorizonMetrics>,
}

/// Evaluate a trained model over every sliding window of the series, once per
/// requested horizon. Forecasts come from the full autoregressive `predict`
/// path, so long horizons exercise the emission scheduler too.
pub fn evaluate(
    store: &ParamStore,
    cfg: &ModelConfig,
    series: &TimeSeries,
    context: usize,
    stride: usize,
    horizons: &[usize],
) -> Result<ForecastReport> {
    if horizons.is_empty() {
        return Err(Error::config("no evaluation horizons requested"));
    }
    let max_h = *horizons.iter().max().unwrap();
    let spec = WindowSpec { context, horizon: max_h, stride };
    spec.validate()?;
    if series.len() < context + max_h {
        return Err(Error::data(format!(
            "series '{}' has {} points, needs {} for context {context} + horizon {max_h}",
            series.id,
            series.len(),
            context + max_h
        )));
    }

    let starts: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|off| off + context + max_h <= series.len())
        .collect();
    let mut metrics = Vec::with_capacity(horizons.len());
    for &h in horizons {
        let mut se = 0.0;
        let mut ae = 0.0;
        let mut count = 0usize;
        for &off in &starts {
            let ctx = &series.values[off..off + context];
            let truth = &series.values[off + context..off + context + h];
            let scale = standardize(ctx, &[]).scale;
            let pred = predict(store, cfg, ctx, h)?;
            for (p, y) in pred.iter().zip(truth) {
                let e = (p - y) / scale;
                se += e * e;
                ae += e.abs();
                count += 1;
            }
        }
        metrics.push(HorizonMetrics {
            horizon: h,
            mse: se / count as f64,
            mae: ae / count as f64,
        });
    }
    Ok(ForecastReport {
        series_id: series.id.clone(),
        context,
        stride,
        windows: starts.len(),
        metrics,
    })
}

/// Forecast for the final full window of a series, in raw units, paired with
/// the ground truth. Rows are (absolute timestep, prediction, truth).
pub fn tail_forecast(
    store: &ParamStore,
    cfg: &ModelConfig,
    series: &TimeSeries,
    context: usize,
    horizon: usize,
) -> Result<Vec<(usize, f64, f64)>> {
    if series.len() < context + horizon {
        return Err(Error::data(format!(
            "series '{}' too short for a {context} + {horizon} tail window",
            series.id
        )));
    }
    let start = series.len() - context - horizon;
    let ctx = &series.values[start..start + context];
    let truth = &series.values[start + context..];
    let pred = predict(store, cfg, ctx, horizon)?;
    Ok(pred
        .iter()
        .zip(truth)
        .enumerate()
        .map(|(i, (&p, &y))| (start + context + i, p, y))
        .collect())
}

pub fn forecast_to_csv(rows: &[(usize, f64, f64)]) -> String {
    let mut out = String::from("t,y_hat,y\n");
    for (t, p, y) in rows {
        out.push_str(&format!("{t},{p},{y}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::forecaster::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            backbone: BackboneConfig {
                layers: 1,
                heads: 2,
                d_model: 8,
                experts: 2,
                top_k: 1,
                d_expert: 8,
                ..Default::default()
            },
            horizons: vec![1, 8],
            ..Default::default()
        }
    }

    #[test]
    fn fresh_model_is_exact_on_constant_data() {
        // All biases start at zero and a constant context standardizes to the
        // zero vector, so an untrained model forecasts the mean exactly.
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let store = init_params(&cfg, &mut rng);
        let series = TimeSeries::new(vec![5.0; 64], "const").unwrap();
        let report = evaluate(&store, &cfg, &series, 32, 8, &[1, 4]).unwrap();
        for m in &report.metrics {
            assert!(m.mse.abs() < 1e-10, "horizon {}: mse {}", m.horizon, m.mse);
            assert!(m.mae.abs() < 1e-10);
        }
        assert_eq!(report.windows, 4);
    }

    #[test]
    fn metrics_are_scale_free() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = init_params(&cfg, &mut rng);
        let base: Vec<f64> = (0..72).map(|t| (t as f64 * 0.4).sin() + 0.01 * t as f64).collect();
        let scaled: Vec<f64> = base.iter().map(|v| v * 250.0 - 40.0).collect();
        let a = evaluate(&store, &cfg, &TimeSeries::new(base, "a").unwrap(), 32, 4, &[1, 8])
            .unwrap();
        let b = evaluate(&store, &cfg, &TimeSeries::new(scaled, "b").unwrap(), 32, 4, &[1, 8])
            .unwrap();
        for (ma, mb) in a.metrics.iter().zip(&b.metrics) {
            assert!((ma.mse - mb.mse).abs() < 1e-9, "{} vs {}", ma.mse, mb.mse);
            assert!((ma.mae - mb.mae).abs() < 1e-9);
        }
    }

    #[test]
    fn short_series_is_a_data_error() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let store = init_params(&cfg, &mut rng);
        let series = TimeSeries::new(vec![1.0; 20], "short").unwrap();
        let err = evaluate(&store, &cfg, &series, 32, 8, &[8]).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert_eq!(evaluate(&store, &cfg, &series, 8, 8, &[]).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn tail_forecast_rows_align_with_series_indices() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = init_params(&cfg, &mut rng);
        let series =
            TimeSeries::new((0..48).map(|t| (t as f64 * 0.3).cos()).collect(), "s").unwrap();
        let rows = tail_forecast(&store, &cfg, &series, 32, 8).unwrap();
        assert_eq!(rows.len(), 8);
        assert_eq!(rows[0].0, 40);
        assert_eq!(rows[7].0, 47);
        for (t, _, y) in &rows {
            assert_eq!(*y, series.values[*t]);
        }
        let csv = forecast_to_csv(&rows);
        assert!(csv.starts_with("t,y_hat,y\n"));
        assert_eq!(csv.lines().count(), 9);
    }
}
