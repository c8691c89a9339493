//! Named parameter store with matching gradients, flat-binary checkpoints, and
//! the finite-difference gradient oracle used to certify every backward path.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

struct Entry {
    value: Tensor,
    grad: Tensor,
}

/// Parameters keyed by path ("encoder.layer0.w_in", ...). BTreeMap keeps
/// iteration order deterministic, which checkpointing and the optimizer rely on.
#[derive(Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let grad = Tensor::zeros(value.rows(), value.cols());
        let prev = self.entries.insert(name.to_string(), Entry { value, grad });
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    /// Weight init: U(-s, s) with s = sqrt(1/fan_in).
    pub fn insert_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let s = (1.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-s..s)).collect();
        self.insert(name, Tensor::new(fan_in, fan_out, data));
    }

    pub fn insert_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Tensor::zeros(rows, cols));
    }

    pub fn insert_full(&mut self, name: &str, rows: usize, cols: usize, v: f64) {
        self.insert(name, Tensor::full(rows, cols, v));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.entries.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    pub fn grad(&self, name: &str) -> &Tensor {
        &self.entries.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).grad
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn num_params(&self) -> usize {
        self.entries.len()
    }

    pub fn num_coords(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, delta: &Tensor) {
        let e = self.entries.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(e.value.shape(), delta.shape(), "grad shape for {name}");
        for (g, d) in e.grad.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
    }

    pub fn scale_grads(&mut self, c: f64) {
        for e in self.entries.values_mut() {
            for g in e.grad.data_mut() {
                *g *= c;
            }
        }
    }

    pub fn grad_global_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|e| e.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Deterministic (name, value, grad) walk in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), &e.value, &e.grad))
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor, &Tensor)) {
        for (n, e) in self.entries.iter_mut() {
            f(n, &mut e.value, &e.grad);
        }
    }

    /// Write `params.bin` (little-endian f64, name order) and `manifest.json`.
    pub fn save(&self, dir: &Path, extra: &serde_json::Value) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut shapes = Vec::new();
        let bin_path = dir.join("params.bin");
        let mut bin = std::io::BufWriter::new(
            std::fs::File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?,
        );
        for (name, e) in &self.entries {
            shapes.push(ParamShape {
                name: name.clone(),
                rows: e.value.rows(),
                cols: e.value.cols(),
            });
            for v in e.value.data() {
                bin.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&bin_path, e))?;
            }
        }
        bin.flush().map_err(|e| Error::io(&bin_path, e))?;
        let manifest = CheckpointManifest {
            format_version: 1,
            params: shapes,
            extra: extra.clone(),
        };
        let manifest_path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::data(format!("manifest encode: {e}")))?;
        std::fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;
        Ok(())
    }

    /// Load a checkpoint written by `save`; returns the store and the manifest extra.
    pub fn load(dir: &Path) -> Result<(ParamStore, serde_json::Value)> {
        let manifest_path = dir.join("manifest.json");
        let text =
            std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)
            .map_err(|e| Error::data(format!("{}: {e}", manifest_path.display())))?;
        if manifest.format_version != 1 {
            return Err(Error::data(format!(
                "unsupported checkpoint format {}",
                manifest.format_version
            )));
        }
        let bin_path = dir.join("params.bin");
        let mut bytes = Vec::new();
        std::fs::File::open(&bin_path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&bin_path, e))?;
        let expected: usize = manifest.params.iter().map(|p| p.rows * p.cols * 8).sum();
        if bytes.len() != expected {
            return Err(Error::data(format!(
                "params.bin holds {} bytes, manifest expects {expected}",
                bytes.len()
            )));
        }
        let mut store = ParamStore::new();
        let mut off = 0;
        for p in &manifest.params {
            let n = p.rows * p.cols;
            let data: Vec<f64> = bytes[off..off + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += n * 8;
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::data(format!("non-finite value in checkpoint param {}", p.name)));
            }
            store.insert(&p.name, Tensor::new(p.rows, p.cols, data));
        }
        Ok((store, manifest.extra))
    }
}

#[derive(Serialize, Deserialize)]
struct ParamShape {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    params: Vec<ParamShape>,
    #[serde(default)]
    extra: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    /// Number of coordinates to sample (at least; capped by the store size).
    pub sample: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { sample: 200, step: 1e-5, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CoordReport {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub coords_checked: usize,
    pub max_rel_err: f64,
    /// Worst offenders, highest relative error first (up to five).
    pub worst: Vec<CoordReport>,
}

/// Compare tape gradients against central finite differences on a seeded sample
/// of parameter coordinates. `eval` must deterministically compute the scalar
/// loss and accumulate fresh gradients into the store.
pub fn grad_check<F>(
    mut eval: F,
    store: &mut ParamStore,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore) -> Result<f64>,
{
    use rand::SeedableRng;

    store.zero_grads();
    let base = eval(store)?;
    if !base.is_finite() {
        return Err(Error::numeric(format!("loss is {base} at gradient check start")));
    }
    let analytic: BTreeMap<String, Tensor> =
        store.iter().map(|(n, _, g)| (n.to_string(), g.clone())).collect();

    let layout: Vec<(String, usize)> =
        store.iter().map(|(n, v, _)| (n.to_string(), v.len())).collect();
    let total: usize = layout.iter().map(|(_, l)| l).sum();
    let k = cfg.sample.min(total);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let picks = rand::seq::index::sample(&mut rng, total, k);

    let mut report = GradCheckReport { coords_checked: k, max_rel_err: 0.0, worst: Vec::new() };
    for flat in picks.iter() {
        let (name, index) = locate(&layout, flat);
        let theta = store.get(&name).data()[index];
        let h = cfg.step * theta.abs().max(1.0);

        store.get_mut(&name).data_mut()[index] = theta + h;
        let up = eval(store)?;
        store.get_mut(&name).data_mut()[index] = theta - h;
        let down = eval(store)?;
        store.get_mut(&name).data_mut()[index] = theta;

        if !up.is_finite() || !down.is_finite() {
            return Err(Error::numeric(format!("non-finite loss probing {name}[{index}]")));
        }
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[&name].data()[index];
        let rel = (a - numeric).abs() / numeric.abs().max(1.0);
        let coord = CoordReport { name, index, analytic: a, numeric, rel_err: rel };
        report.max_rel_err = report.max_rel_err.max(rel);
        report.worst.push(coord);
        report.worst.sort_by(|x, y| y.rel_err.total_cmp(&x.rel_err));
        report.worst.truncate(5);
    }
    Ok(report)
}

fn locate(layout: &[(String, usize)], mut flat: usize) -> (String, usize) {
    for (name, len) in layout {
        if flat < *len {
            return (name.clone(), flat);
        }
        flat -= len;
    }
    unreachable!("flat index out of range")
}
