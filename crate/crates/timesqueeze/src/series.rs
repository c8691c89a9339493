//! CSV ingestion, synthetic corpora, and standardized sliding windows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct TimeSeries {
    pub values: Vec<f64>,
    pub id: String,
    pub frequency_hint: Option<String>,
}

impl TimeSeries {
    pub fn new(values: Vec<f64>, id: impl Into<String>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::data("empty series"));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!("non-finite value at index {pos}")));
        }
        Ok(TimeSeries { values, id: id.into(), frequency_hint: None })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    /// Context length T.
    pub context: usize,
    /// Forecast horizon H.
    pub horizon: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.context == 0 || self.horizon == 0 || self.stride == 0 {
            return Err(Error::config(format!(
                "window spec must be positive: context {}, horizon {}, stride {}",
                self.context, self.horizon, self.stride
            )));
        }
        Ok(())
    }
}

pub const SCALE_FLOOR: f64 = 1e-6;

/// A context/target pair standardized by the context's own statistics.
#[derive(Debug, Clone)]
pub struct StandardizedWindow {
    pub context: Vec<f64>,
    pub target: Vec<f64>,
    pub mean: f64,
    pub scale: f64,
}

impl StandardizedWindow {
    pub fn destandardize(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|x| x * self.scale + self.mean).collect()
    }
}

/// Standardize a context window and carry its (mean, scale) onto the target.
pub fn standardize(context: &[f64], target: &[f64]) -> StandardizedWindow {
    let n = context.len() as f64;
    let mean = context.iter().sum::<f64>() / n;
    let var = context.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let scale = var.sqrt().max(SCALE_FLOOR);
    StandardizedWindow {
        context: context.iter().map(|x| (x - mean) / scale).collect(),
        target: target.iter().map(|x| (x - mean) / scale).collect(),
        mean,
        scale,
    }
}

/// Sliding windows at offsets 0, stride, 2*stride, ...
pub fn make_windows(series: &TimeSeries, spec: &WindowSpec) -> Result<Vec<StandardizedWindow>> {
    spec.validate()?;
    let (t, h) = (spec.context, spec.horizon);
    if series.len() < t + h {
        return Err(Error::data(format!(
            "series '{}' has {} points, needs at least {} for context {t} + horizon {h}",
            series.id,
            series.len(),
            t + h
        )));
    }
    let mut out = Vec::new();
    let mut off = 0;
    while off + t + h <= series.len() {
        out.push(standardize(&series.values[off..off + t], &series.values[off + t..off + t + h]));
        off += spec.stride;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColumnSel {
    Index(usize),
    Name(String),
    All,
}

impl ColumnSel {
    /// "all" selects every column; digits select by index; anything else by header name.
    pub fn parse(s: &str) -> ColumnSel {
        if s == "all" {
            ColumnSel::All
        } else if let Ok(i) = s.parse::<usize>() {
            ColumnSel::Index(i)
        } else {
            ColumnSel::Name(s.to_string())
        }
    }
}

/// Parse a comma-separated file into one series per selected column.
/// An optional single header row is detected by its cells failing to parse.
pub fn load_csv(path: &Path, column: &ColumnSel) -> Result<Vec<TimeSeries>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<&str>> = Vec::new();
    for line in text.lines() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        rows.push(line.split(',').map(str::trim).collect());
    }
    if rows.is_empty() {
        return Err(Error::data(format!("{}: no rows", path.display())));
    }
    let cols = rows[0].len();
    if let Some((i, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != cols) {
        return Err(Error::data(format!(
            "{}: row {} has {} cells, expected {cols}",
            path.display(),
            i + 1,
            row.len()
        )));
    }

    let has_header = rows[0].iter().any(|cell| cell.parse::<f64>().is_err());
    let header: Vec<String> = if has_header {
        rows[0].iter().map(|s| s.to_string()).collect()
    } else {
        (0..cols).map(|i| format!("col{i}")).collect()
    };
    let data_rows = if has_header { &rows[1..] } else { &rows[..] };
    if data_rows.is_empty() {
        return Err(Error::data(format!("{}: header only, no data rows", path.display())));
    }

    let selected: Vec<usize> = match column {
        ColumnSel::Index(i) => {
            if *i >= cols {
                return Err(Error::data(format!(
                    "{}: column index {i} out of range (file has {cols})",
                    path.display()
                )));
            }
            vec![*i]
        }
        ColumnSel::Name(name) => {
            let Some(i) = header.iter().position(|h| h == name) else {
                return Err(Error::data(format!(
                    "{}: no column named '{name}' (have: {})",
                    path.display(),
                    header.join(", ")
                )));
            };
            vec![i]
        }
        ColumnSel::All => (0..cols).collect(),
    };

    let mut out = Vec::new();
    for &c in &selected {
        let mut values = Vec::with_capacity(data_rows.len());
        for (r, row) in data_rows.iter().enumerate() {
            let file_row = r + 1 + usize::from(has_header);
            let cell = row[c];
            let v: f64 = cell.parse().map_err(|_| {
                Error::data(format!(
                    "{}: row {file_row}, column {}: '{cell}' is not a number",
                    path.display(),
                    c + 1
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::data(format!(
                    "{}: row {file_row}, column {}: non-finite value",
                    path.display(),
                    c + 1
                )));
            }
            values.push(v);
        }
        out.push(TimeSeries::new(values, header[c].clone())?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SineNoiseParams {
    pub period: f64,
    pub amplitude: f64,
    pub noise_std: f64,
}

impl Default for SineNoiseParams {
    fn default() -> Self {
        SineNoiseParams { period: 32.0, amplitude: 1.0, noise_std: 0.1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PiecewiseBurstyParams {
    /// Quiet samples between bursts.
    pub plateau_len: usize,
    /// Samples per burst (the ramp to the next level).
    pub burst_len: usize,
    pub calm_std: f64,
    pub burst_std: f64,
    /// Spread of the per-segment levels the bursts ramp between.
    pub level_std: f64,
}

impl Default for PiecewiseBurstyParams {
    fn default() -> Self {
        PiecewiseBurstyParams {
            plateau_len: 24,
            burst_len: 8,
            calm_std: 0.05,
            burst_std: 0.6,
            level_std: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ar1Params {
    pub coeff: f64,
    pub noise_std: f64,
}

impl Default for Ar1Params {
    fn default() -> Self {
        Ar1Params { coeff: 0.9, noise_std: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum SynthSpec {
    SineNoise(#[serde(default)] SineNoiseParams),
    PiecewiseBursty(#[serde(default)] PiecewiseBurstyParams),
    Ar1(#[serde(default)] Ar1Params),
}

impl SynthSpec {
    pub fn default_sine() -> SynthSpec {
        SynthSpec::SineNoise(SineNoiseParams::default())
    }

    pub fn default_bursty() -> SynthSpec {
        SynthSpec::PiecewiseBursty(PiecewiseBurstyParams::default())
    }

    pub fn default_ar1() -> SynthSpec {
        SynthSpec::Ar1(Ar1Params::default())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::config(format!("synth params: {what}")));
        match self {
            SynthSpec::SineNoise(p) => {
                if !(p.period > 0.0) || !p.period.is_finite() {
                    return bad("period must be positive");
                }
                if p.noise_std < 0.0 || !p.noise_std.is_finite() || !p.amplitude.is_finite() {
                    return bad("amplitude must be finite, noise_std non-negative");
                }
            }
            SynthSpec::PiecewiseBursty(p) => {
                if p.plateau_len == 0 || p.burst_len == 0 {
                    return bad("plateau_len and burst_len must be positive");
                }
                if [p.calm_std, p.burst_std, p.level_std].iter().any(|s| *s < 0.0 || !s.is_finite())
                {
                    return bad("std params must be non-negative");
                }
            }
            SynthSpec::Ar1(p) => {
                if !p.coeff.is_finite() || p.coeff.abs() >= 1.0 {
                    return bad("ar1 coeff must satisfy |coeff| < 1");
                }
                if p.noise_std < 0.0 || !p.noise_std.is_finite() {
                    return bad("noise_std must be non-negative");
                }
            }
        }
        Ok(())
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            SynthSpec::SineNoise(_) => "sine_noise",
            SynthSpec::PiecewiseBursty(_) => "piecewise_bursty",
            SynthSpec::Ar1(_) => "ar1",
        }
    }
}

/// Generate a synthetic series; a pure function of (spec, length, seed).
pub fn synth(spec: &SynthSpec, length: usize, seed: u64) -> Result<TimeSeries> {
    spec.validate()?;
    if length == 0 {
        return Err(Error::config("synth length must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };
    let values = match spec {
        SynthSpec::SineNoise(p) => (0..length)
            .map(|t| {
                let clean = p.amplitude * (2.0 * std::f64::consts::PI * t as f64 / p.period).sin();
                clean + p.noise_std * normal()
            })
            .collect(),
        SynthSpec::PiecewiseBursty(p) => {
            let period = p.plateau_len + p.burst_len;
            let segments = length / period + 2;
            let levels: Vec<f64> = (0..segments).map(|_| p.level_std * normal()).collect();
            let mut values = Vec::with_capacity(length);
            'outer: for seg in 0.. {
                let (from, to) = (levels[seg], levels[seg + 1]);
                for _ in 0..p.plateau_len {
                    values.push(from + p.calm_std * normal());
                    if values.len() == length {
                        break 'outer;
                    }
                }
                for k in 0..p.burst_len {
                    let frac = (k + 1) as f64 / p.burst_len as f64;
                    values.push(from + frac * (to - from) + p.burst_std * normal());
                    if values.len() == length {
                        break 'outer;
                    }
                }
            }
            values
        }
        SynthSpec::Ar1(p) => {
            let mut values = Vec::with_capacity(length);
            let mut prev = p.noise_std * normal();
            values.push(prev);
            for _ in 1..length {
                prev = p.coeff * prev + p.noise_std * normal();
                values.push(prev);
            }
            values
        }
    };
    let mut ts = TimeSeries::new(values, format!("{}_{seed}", spec.kind_name()))?;
    ts.frequency_hint = None;
    Ok(ts)
}

/// Parse a kind string plus flat params object into a spec. Null or a missing
/// object means all-default parameters.
pub fn synth_spec_from_json(kind: &str, params: &serde_json::Value) -> Result<SynthSpec> {
    let empty = serde_json::json!({});
    let params = if params.is_null() { &empty } else { params };
    let spec = match kind {
        "sine_noise" => SynthSpec::SineNoise(
            serde_json::from_value(params.clone())
                .map_err(|e| Error::config(format!("sine_noise params: {e}")))?,
        ),
        "piecewise_bursty" => SynthSpec::PiecewiseBursty(
            serde_json::from_value(params.clone())
                .map_err(|e| Error::config(format!("piecewise_bursty params: {e}")))?,
        ),
        "ar1" => SynthSpec::Ar1(
            serde_json::from_value(params.clone())
                .map_err(|e| Error::config(format!("ar1 params: {e}")))?,
        ),
        other => return Err(Error::config(format!("unknown synth kind '{other}'"))),
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_sine_is_exact() {
        let spec = SynthSpec::SineNoise(SineNoiseParams {
            period: 8.0,
            amplitude: 1.0,
            noise_std: 0.0,
        });
        let ts = synth(&spec, 8, 123).unwrap();
        for (t, v) in ts.values.iter().enumerate() {
            let want = (2.0 * std::f64::consts::PI * t as f64 / 8.0).sin();
            assert!((v - want).abs() < 1e-15, "t={t}");
        }
    }

    #[test]
    fn ar1_zero_coeff_is_iid_and_reproducible() {
        let spec = SynthSpec::Ar1(Ar1Params { coeff: 0.0, noise_std: 1.0 });
        let a = synth(&spec, 64, 7).unwrap();
        let b = synth(&spec, 64, 7).unwrap();
        assert_eq!(a.values, b.values);
        let c = synth(&spec, 64, 8).unwrap();
        assert_ne!(a.values, c.values);
        // Sanity: i.i.d. N(0,1) sample mean of 64 draws stays small.
        let mean = a.values.iter().sum::<f64>() / 64.0;
        assert!(mean.abs() < 0.5, "mean {mean}");
    }

    #[test]
    fn bursty_is_deterministic_and_has_calm_and_loud_regions() {
        let spec = SynthSpec::PiecewiseBursty(PiecewiseBurstyParams::default());
        let a = synth(&spec, 512, 3).unwrap();
        let b = synth(&spec, 512, 3).unwrap();
        assert_eq!(a.values, b.values);
        // Mean |step| during bursts should dominate the plateau steps.
        let p = PiecewiseBurstyParams::default();
        let period = p.plateau_len + p.burst_len;
        let (mut calm, mut loud) = (Vec::new(), Vec::new());
        for t in 1..a.len() {
            let step = (a.values[t] - a.values[t - 1]).abs();
            if t % period >= p.plateau_len {
                loud.push(step);
            } else if t % period > 0 {
                calm.push(step);
            }
        }
        let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(avg(&loud) > 4.0 * avg(&calm), "loud {} calm {}", avg(&loud), avg(&calm));
    }

    #[test]
    fn window_count_matches_formula() {
        let cases = [(10usize, 4usize, 2usize, 4usize), (100, 16, 8, 3), (33, 8, 1, 1), (24, 8, 8, 5)];
        for (len, t, h, stride) in cases {
            let ts = TimeSeries::new((0..len).map(|i| i as f64).collect(), "x").unwrap();
            let spec = WindowSpec { context: t, horizon: h, stride };
            let wins = make_windows(&ts, &spec).unwrap();
            let want = (len - t - h) / stride + 1;
            assert_eq!(wins.len(), want, "len={len} t={t} h={h} stride={stride}");
        }
    }

    #[test]
    fn two_windows_at_expected_offsets() {
        let ts = TimeSeries::new((0..10).map(|i| i as f64).collect(), "x").unwrap();
        let wins =
            make_windows(&ts, &WindowSpec { context: 4, horizon: 2, stride: 4 }).unwrap();
        assert_eq!(wins.len(), 2);
        assert!((wins[0].mean - 1.5).abs() < 1e-12);
        assert!((wins[1].mean - 5.5).abs() < 1e-12);
    }

    #[test]
    fn standardization_round_trips() {
        let raw: Vec<f64> = (0..32).map(|i| (i as f64 * 0.7).sin() * 3.0 + 11.0).collect();
        let w = standardize(&raw[..24], &raw[24..]);
        let back = w.destandardize(&w.context);
        for (x, y) in back.iter().zip(&raw[..24]) {
            assert!((x - y).abs() < 1e-12);
        }
        let back_t = w.destandardize(&w.target);
        for (x, y) in back_t.iter().zip(&raw[24..]) {
            assert!((x - y).abs() < 1e-12);
        }
        // Zero mean, unit variance.
        let mean: f64 = w.context.iter().sum::<f64>() / 24.0;
        let var: f64 = w.context.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 24.0;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn constant_window_floors_scale() {
        let w = standardize(&[5.0; 16], &[5.0; 4]);
        assert_eq!(w.scale, SCALE_FLOOR);
        assert!(w.context.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn alternating_window_standardizes_to_unit() {
        let w = standardize(&[0.0, 2.0, 0.0, 2.0], &[]);
        assert_eq!(w.context, vec![-1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn short_series_is_rejected() {
        let ts = TimeSeries::new(vec![1.0; 5], "x").unwrap();
        let err = make_windows(&ts, &WindowSpec { context: 4, horizon: 2, stride: 1 });
        assert!(err.is_err());
    }

    #[test]
    fn csv_single_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        std::fs::write(&p, "1.0\n2.0\n3.0\n").unwrap();
        let series = load_csv(&p, &ColumnSel::Index(0)).unwrap();
        assert_eq!(series.len(), 1);
        assert_eq!(series[0].values, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn csv_header_and_second_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        std::fs::write(&p, "time,load\n0,10.5\n1,11.5\n").unwrap();
        let series = load_csv(&p, &ColumnSel::Index(1)).unwrap();
        assert_eq!(series[0].id, "load");
        assert_eq!(series[0].values, vec![10.5, 11.5]);
    }

    #[test]
    fn csv_column_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.csv");
        std::fs::write(&p, "time,load\n0,10.5\n1,11.5\n").unwrap();
        let series = load_csv(&p, &ColumnSel::parse("load")).unwrap();
        assert_eq!(series[0].values, vec![10.5, 11.5]);
        let err = load_csv(&p, &ColumnSel::parse("power")).unwrap_err();
        assert!(err.to_string().contains("power"), "{err}");
    }

    #[test]
    fn csv_bad_cell_names_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        std::fs::write(&p, "v\n1.0\nabc\n").unwrap();
        let err = load_csv(&p, &ColumnSel::Index(0)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 3") && msg.contains("column 1"), "{msg}");
    }

    #[test]
    fn unknown_synth_kind_and_params_are_config_errors() {
        let err = synth_spec_from_json("sawtooth", &serde_json::json!({})).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err =
            synth_spec_from_json("ar1", &serde_json::json!({"coefficient": 0.5})).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let err = synth_spec_from_json("ar1", &serde_json::json!({"coeff": 1.5})).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
