//! AdamW training loop with linear warmup, cosine decay, gradient clipping,
//! and deterministic batching.
//!
//! Every step evaluates each window of the batch on its own tape, collects the
//! per-window gradients into name-keyed maps, and merges them in window order.
//! Worker threads only change who computes a map, never the merge order, so
//! the result is bit-identical at any thread count.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::{composite_loss, forward, LossConfig, ModelConfig};
use crate::params::ParamStore;
use crate::series::StandardizedWindow;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Checkpoint cadence in steps; 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 16,
            lr_max: 1e-3,
            lr_min: 5e-5,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            eps: 1e-8,
            clip_norm: 1.0,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::config("steps and batch_size must be positive"));
        }
        if !(0.0 < self.lr_min && self.lr_min <= self.lr_max) {
            return Err(Error::config(format!(
                "need 0 < lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.warmup_steps >= self.steps {
            return Err(Error::config(format!(
                "warmup {} must be shorter than the run of {}",
                self.warmup_steps, self.steps
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::config("weight_decay >= 0, eps > 0, clip_norm > 0 required"));
        }
        Ok(())
    }

    /// Learning rate at a step: linear ramp to lr_max over the warmup, then
    /// cosine decay to lr_min ending exactly at the final step.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step >= self.steps {
            return Err(Error::config(format!("step {step} outside run of {}", self.steps)));
        }
        if step < self.warmup_steps {
            return Ok(self.lr_max * (step + 1) as f64 / self.warmup_steps as f64);
        }
        let span = (self.steps - 1).saturating_sub(self.warmup_steps);
        if span == 0 {
            return Ok(self.lr_min);
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        Ok(self.lr_min + (self.lr_max - self.lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

pub struct TrainOutcome {
    pub store: ParamStore,
    pub curve: Vec<StepLog>,
}

struct AdamState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: usize,
}

impl AdamState {
    fn new(store: &ParamStore) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, value, _) in store.iter() {
            m.insert(name.to_string(), Tensor::zeros(value.rows(), value.cols()));
            v.insert(name.to_string(), Tensor::zeros(value.rows(), value.cols()));
        }
        AdamState { m, v, t: 0 }
    }

    /// One AdamW step with decoupled weight decay: with zero gradient the
    /// parameter moves by exactly -lr * wd * theta.
    fn update(&mut self, store: &mut ParamStore, cfg: &TrainConfig, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let (m, v, t) = (&mut self.m, &mut self.v, self.t);
        let _ = t;
        store.for_each_mut(|name, value, grad| {
            let ms = m.get_mut(name).expect("adam state").data_mut();
            let vs = v.get_mut(name).expect("adam state").data_mut();
            for ((theta, &g), (mi, vi)) in
                value.data_mut().iter_mut().zip(grad.data()).zip(ms.iter_mut().zip(vs.iter_mut()))
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *theta -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * *theta);
            }
        });
    }
}

fn window_gradients(
    store: &ParamStore,
    model_cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    window: &StandardizedWindow,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let pass = forward(&mut tape, store, model_cfg, &window.context)?;
    let loss = composite_loss(&mut tape, &pass, &window.context, loss_cfg)?;
    let value = tape.value(loss).item();
    Ok((value, tape.backward_named(loss)))
}

/// Evaluate a batch: mean loss plus per-window gradient maps merged into the
/// store in window order. `threads` > 1 fans windows out across a thread
/// scope; the merge order is fixed either way.
fn batch_pass(
    store: &mut ParamStore,
    model_cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    batch: &[&StandardizedWindow],
    threads: usize,
) -> Result<f64> {
    let results: Vec<Result<(f64, BTreeMap<String, Tensor>)>> = if threads <= 1 || batch.len() <= 1
    {
        batch.iter().map(|w| window_gradients(store, model_cfg, loss_cfg, w)).collect()
    } else {
        let mut slots: Vec<Option<Result<(f64, BTreeMap<String, Tensor>)>>> =
            (0..batch.len()).map(|_| None).collect();
        let frozen: &ParamStore = store;
        std::thread::scope(|scope| {
            let chunk = batch.len().div_ceil(threads);
            let mut rest: &mut [Option<_>] = &mut slots;
            let mut offset = 0;
            while !rest.is_empty() {
                let take = chunk.min(rest.len());
                let (mine, tail) = rest.split_at_mut(take);
                rest = tail;
                let windows = &batch[offset..offset + take];
                scope.spawn(move || {
                    for (slot, w) in mine.iter_mut().zip(windows) {
                        *slot = Some(window_gradients(frozen, model_cfg, loss_cfg, w));
                    }
                });
                offset += take;
            }
        });
        slots.into_iter().map(|s| s.expect("worker filled slot")).collect()
    };

    let mut total = 0.0;
    for result in results {
        let (loss, grads) = result?;
        total += loss;
        for (name, g) in &grads {
            store.accumulate_grad(name, g);
        }
    }
    store.scale_grads(1.0 / batch.len() as f64);
    Ok(total / batch.len() as f64)
}

pub fn train(
    windows: &[StandardizedWindow],
    model_cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
    out_dir: Option<&Path>,
    threads: usize,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    loss_cfg.validate()?;
    train_cfg.validate()?;
    if windows.len() < train_cfg.batch_size {
        return Err(Error::data(format!(
            "{} windows cannot fill a batch of {}",
            windows.len(),
            train_cfg.batch_size
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut store = crate::forecaster::init_params(model_cfg, &mut rng);
    let mut adam = AdamState::new(&store);
    let mut curve = Vec::with_capacity(train_cfg.steps);

    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    for step in 0..train_cfg.steps {
        if cursor + train_cfg.batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch: Vec<&StandardizedWindow> = order[cursor..cursor + train_cfg.batch_size]
            .iter()
            .map(|&i| &windows[i])
            .collect();
        cursor += train_cfg.batch_size;

        store.zero_grads();
        let loss = batch_pass(&mut store, model_cfg, loss_cfg, &batch, threads)?;
        if !loss.is_finite() {
            let pn = param_global_norm(&store);
            let gn = store.grad_global_norm();
            return Err(Error::numeric(format!(
                "non-finite loss at step {step} (param norm {pn:.3e}, grad norm {gn:.3e})"
            )));
        }

        let grad_norm = store.grad_global_norm();
        if grad_norm > train_cfg.clip_norm {
            store.scale_grads(train_cfg.clip_norm / grad_norm);
        }
        let lr = train_cfg.lr_at(step)?;
        adam.update(&mut store, train_cfg, lr);
        curve.push(StepLog { step, lr, loss, grad_norm });

        if let Some(dir) = out_dir {
            let due = train_cfg.checkpoint_every > 0
                && (step + 1) % train_cfg.checkpoint_every == 0
                && step + 1 < train_cfg.steps;
            if due {
                save_checkpoint(&store, model_cfg, loss_cfg, &dir.join(format!("step_{:06}", step + 1)))?;
            }
        }
    }

    if let Some(dir) = out_dir {
        save_checkpoint(&store, model_cfg, loss_cfg, &dir.join("final"))?;
    }
    Ok(TrainOutcome { store, curve })
}

fn param_global_norm(store: &ParamStore) -> f64 {
    let mut sq = 0.0;
    for (_, value, _) in store.iter() {
        for v in value.data() {
            sq += v * v;
        }
    }
    sq.sqrt()
}

pub fn save_checkpoint(
    store: &ParamStore,
    model_cfg: &ModelConfig,
    loss_cfg: &LossConfig,
    dir: &Path,
) -> Result<()> {
    let extra = serde_json::json!({ "model": model_cfg, "loss": loss_cfg });
    store.save(dir, &extra)
}

/// Load a checkpoint saved by `save_checkpoint`, recovering the configs.
pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore, ModelConfig, LossConfig)> {
    let (store, extra) = ParamStore::load(dir)?;
    let model_cfg: ModelConfig = serde_json::from_value(
        extra.get("model").cloned().ok_or_else(|| Error::data("checkpoint missing model config"))?,
    )
    .map_err(|e| Error::data(format!("checkpoint model config: {e}")))?;
    let loss_cfg: LossConfig = match extra.get("loss") {
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| Error::data(format!("checkpoint loss config: {e}")))?,
        None => LossConfig::default(),
    };
    Ok((store, model_cfg, loss_cfg))
}

/// Render a loss curve as CSV.
pub fn curve_to_csv(curve: &[StepLog]) -> String {
    let mut out = String::from("step,lr,loss,grad_norm\n");
    for log in curve {
        out.push_str(&format!("{},{},{},{}\n", log.step, log.lr, log.loss, log.grad_norm));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::forecaster::{init_params, Patching};
    use crate::series::{make_windows, synth, SynthSpec, WindowSpec};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            backbone: BackboneConfig {
                layers: 1,
                heads: 2,
                d_model: 8,
                experts: 4,
                top_k: 2,
                d_expert: 12,
                ..Default::default()
            },
            horizons: vec![1, 8],
            ..Default::default()
        }
    }

    fn sine_windows(count: usize, t_len: usize) -> Vec<StandardizedWindow> {
        let series = synth(&SynthSpec::default_sine(), t_len + count + 8, 11).unwrap();
        let spec = WindowSpec { context: t_len, horizon: 8, stride: 1 };
        make_windows(&series, &spec).unwrap()
    }

    #[test]
    fn lr_schedule_hits_the_pinned_points() {
        let cfg = TrainConfig { steps: 1000, warmup_steps: 100, ..Default::default() };
        assert!((cfg.lr_at(0).unwrap() - cfg.lr_max / 100.0).abs() < 1e-15);
        assert!((cfg.lr_at(99).unwrap() - cfg.lr_max).abs() < 1e-15);
        assert!((cfg.lr_at(100).unwrap() - cfg.lr_max).abs() < 1e-15);
        assert!((cfg.lr_at(999).unwrap() - cfg.lr_min).abs() < 1e-12);
        assert_eq!(cfg.lr_at(1000).unwrap_err().exit_code(), 2);
        // Monotone decay after the warmup.
        for s in 100..999 {
            assert!(cfg.lr_at(s).unwrap() >= cfg.lr_at(s + 1).unwrap());
        }
    }

    #[test]
    fn config_validation_rejects_bad_ranges() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { lr_min: 2e-3, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { warmup_steps: 2000, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { beta2: 1.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { clip_norm: 0.0, ..ok.clone() }.validate().is_err());
    }

    #[test]
    fn zero_gradient_step_is_pure_weight_decay() {
        let model = tiny_model();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = init_params(&model, &mut rng);
        let before: Vec<(String, Tensor)> =
            store.iter().map(|(n, v, _)| (n.to_string(), v.clone())).collect();
        store.zero_grads();
        let cfg = TrainConfig::default();
        let mut adam = AdamState::new(&store);
        let lr = 1e-3;
        adam.update(&mut store, &cfg, lr);
        for (name, old) in &before {
            let new = store.get(name);
            for (o, n) in old.data().iter().zip(new.data()) {
                let expected = o - lr * cfg.weight_decay * o;
                assert_eq!(*n, expected, "{name}");
            }
        }
    }

    #[test]
    fn same_seed_gives_identical_curves_and_params() {
        let model = tiny_model();
        let windows = sine_windows(12, 32);
        let cfg = TrainConfig { steps: 8, batch_size: 4, warmup_steps: 2, ..Default::default() };
        let a = train(&windows, &model, &LossConfig::default(), &cfg, None, 1).unwrap();
        let b = train(&windows, &model, &LossConfig::default(), &cfg, None, 1).unwrap();
        for (la, lb) in a.curve.iter().zip(&b.curve) {
            assert_eq!(la.loss.to_bits(), lb.loss.to_bits());
            assert_eq!(la.grad_norm.to_bits(), lb.grad_norm.to_bits());
        }
        for ((_, va, _), (_, vb, _)) in a.store.iter().zip(b.store.iter()) {
            for (x, y) in va.data().iter().zip(vb.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn thread_fanout_does_not_change_bits() {
        let model = tiny_model();
        let windows = sine_windows(12, 32);
        let cfg = TrainConfig { steps: 4, batch_size: 4, warmup_steps: 1, ..Default::default() };
        let a = train(&windows, &model, &LossConfig::default(), &cfg, None, 1).unwrap();
        let b = train(&windows, &model, &LossConfig::default(), &cfg, None, 3).unwrap();
        for (la, lb) in a.curve.iter().zip(&b.curve) {
            assert_eq!(la.loss.to_bits(), lb.loss.to_bits());
        }
        for ((_, va, _), (_, vb, _)) in a.store.iter().zip(b.store.iter()) {
            for (x, y) in va.data().iter().zip(vb.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn training_on_sine_cuts_loss_by_ninety_percent() {
        let model = tiny_model();
        let windows = sine_windows(48, 48);
        let cfg = TrainConfig {
            steps: 2000,
            batch_size: 8,
            warmup_steps: 100,
            ..Default::default()
        };
        let out = train(&windows, &model, &LossConfig::default(), &cfg, None, 1).unwrap();
        let first = out.curve.first().unwrap().loss;
        let last = out.curve.last().unwrap().loss;
        assert!(last < 0.1 * first, "first {first}, last {last}");
        assert!(out.curve.iter().all(|l| l.loss.is_finite()));
    }

    #[test]
    fn loss_curve_finite_on_all_bundled_generators() {
        let model = ModelConfig { patching: Patching::Dynamic, ..tiny_model() };
        for spec in [SynthSpec::default_sine(), SynthSpec::default_bursty(), SynthSpec::default_ar1()]
        {
            let series = synth(&spec, 120, 5).unwrap();
            let windows =
                make_windows(&series, &WindowSpec { context: 32, horizon: 8, stride: 4 }).unwrap();
            let cfg =
                TrainConfig { steps: 6, batch_size: 4, warmup_steps: 2, ..Default::default() };
            let out = train(&windows, &model, &LossConfig::default(), &cfg, None, 1).unwrap();
            assert!(out.curve.iter().all(|l| l.loss.is_finite()), "{}", spec.kind_name());
        }
    }

    #[test]
    fn balanced_run_keeps_higher_expert_entropy() {
        let model = tiny_model();
        let windows = sine_windows(24, 40);
        let cfg = TrainConfig { steps: 300, batch_size: 8, warmup_steps: 20, ..Default::default() };
        let entropy_after = |alpha: f64| {
            let loss_cfg = LossConfig { aux_weight: alpha, ..Default::default() };
            let out = train(&windows, &model, &loss_cfg, &cfg, None, 1).unwrap();
            let mut traces = Vec::new();
            for w in windows.iter().take(8) {
                let mut tape = Tape::new();
                let pass = forward(&mut tape, &out.store, &model, &w.context).unwrap();
                traces.push(pass.trace);
            }
            crate::backbone::RouterTrace::aggregate(&traces).usage_entropy()
        };
        let balanced = entropy_after(0.02);
        let unbalanced = entropy_after(0.0);
        assert!(
            balanced > unbalanced,
            "expected aux loss to raise usage entropy: {balanced} vs {unbalanced}"
        );
    }

    #[test]
    fn too_few_windows_is_a_data_error() {
        let model = tiny_model();
        let windows = sine_windows(3, 32);
        let cfg = TrainConfig { batch_size: 16, ..Default::default() };
        let err = match train(&windows, &model, &LossConfig::default(), &cfg, None, 1) {
            Err(e) => e,
            Ok(_) => panic!("expected a data error"),
        };
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn checkpoints_round_trip_with_configs() {
        let model = tiny_model();
        let windows = sine_windows(12, 32);
        let cfg = TrainConfig {
            steps: 4,
            batch_size: 4,
            warmup_steps: 1,
            checkpoint_every: 2,
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let out =
            train(&windows, &model, &LossConfig::default(), &cfg, Some(dir.path()), 1).unwrap();
        assert!(dir.path().join("step_000002").join("params.bin").exists());
        let (loaded, loaded_model, loaded_loss) =
            load_checkpoint(&dir.path().join("final")).unwrap();
        assert_eq!(loaded_model.horizons, model.horizons);
        assert_eq!(loaded_loss.aux_weight, 0.02);
        for ((_, va, _), (_, vb, _)) in out.store.iter().zip(loaded.iter()) {
            for (x, y) in va.data().iter().zip(vb.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn curve_csv_has_header_and_rows() {
        let curve = vec![
            StepLog { step: 0, lr: 0.001, loss: 0.5, grad_norm: 1.2 },
            StepLog { step: 1, lr: 0.002, loss: 0.4, grad_norm: 0.9 },
        ];
        let csv = curve_to_csv(&curve);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "step,lr,loss,grad_norm");
        assert!(lines[1].starts_with("0,0.001,"));
    }
}
