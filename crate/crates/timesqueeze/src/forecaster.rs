//! End-to-end model: embed, encode, patch, backbone, unpatch, decode, and the
//! multi-horizon forecast heads, plus the composite training loss and the
//! autoregressive inference scheduler.
//!
//! The pipeline runs entirely in standardized units; `predict` handles the
//! round trip to raw values. Patch boundaries are a pure function of the input
//! series, so gradients never flow through the segmentation itself.

use serde::{Deserialize, Serialize};

use crate::backbone::{aux_loss_node, backbone_forward, init_backbone, BackboneConfig, RouterTrace};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::patcher::{detect_boundaries, PatchConfig, PatchPlan};
use crate::series::standardize;
use crate::ssm::{self, Fusion};
use crate::tape::{Id, Tape};
use crate::tensor::Tensor;

/// Huber penalty: quadratic inside the knee, linear outside.
pub fn huber(e: f64, delta: f64) -> f64 {
    let a = e.abs();
    if a <= delta {
        0.5 * e * e
    } else {
        delta * (a - 0.5 * delta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenizer {
    /// Affine embedding followed by the recurrent encoder stack.
    Ssm,
    /// Affine embedding alone; the ablation control.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positions {
    /// Rotary positions use each patch's original start timestep.
    Absolute,
    /// Rotary positions use the patch index; the ablation control.
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Patching {
    Dynamic,
    Fixed { size: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub patch: PatchConfig,
    pub backbone: BackboneConfig,
    /// Forecast block length per head, strictly increasing.
    pub horizons: Vec<usize>,
    pub tokenizer: Tokenizer,
    /// Feed encoder features into the decoder alongside the upsampled tokens.
    pub residual: bool,
    pub positions: Positions,
    pub patching: Patching,
    pub fusion: Fusion,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            patch: PatchConfig::default(),
            backbone: BackboneConfig::default(),
            horizons: vec![1, 8, 32, 64],
            tokenizer: Tokenizer::Ssm,
            residual: true,
            positions: Positions::Absolute,
            patching: Patching::Dynamic,
            fusion: Fusion::Additive,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::config("encoder and decoder need at least one layer"));
        }
        self.patch.validate()?;
        self.backbone.validate()?;
        if self.horizons.is_empty() {
            return Err(Error::config("at least one forecast horizon required"));
        }
        if self.horizons[0] < 1 || self.horizons.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "horizons must be strictly increasing and >= 1, got {:?}",
                self.horizons
            )));
        }
        if let Patching::Fixed { size } = self.patching {
            if size == 0 {
                return Err(Error::config("fixed patch size must be positive"));
            }
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.backbone.d_model
    }
}

pub fn init_params(cfg: &ModelConfig, rng: &mut impl rand::Rng) -> ParamStore {
    let d = cfg.d_model();
    let mut store = ParamStore::new();
    ssm::init_embed(&mut store, d, rng);
    if cfg.tokenizer == Tokenizer::Ssm {
        ssm::init_stack(&mut store, "encoder", cfg.enc_layers, d, rng);
    }
    init_backbone(&mut store, &cfg.backbone, rng);
    ssm::init_stack(&mut store, "decoder", cfg.dec_layers, d, rng);
    ssm::init_decoder_fusion(&mut store, d, cfg.fusion, rng);
    for &p in &cfg.horizons {
        store.insert_linear(&format!("head{p}.w"), d, p, rng);
        store.insert_zeros(&format!("head{p}.b"), 1, p);
    }
    store
}

/// One full forward pass over a standardized context window.
pub struct ForwardPass {
    /// Decoder output, T x D.
    pub y: Id,
    /// Per-horizon prediction tensors, T x p each, keyed by horizon.
    pub heads: Vec<(usize, Id)>,
    pub trace: RouterTrace,
    /// On-tape layer-averaged router probabilities, 1 x N.
    pub r_bar: Id,
    pub plan: PatchPlan,
}

pub fn forward(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ModelConfig,
    context: &[f64],
) -> Result<ForwardPass> {
    if context.is_empty() {
        return Err(Error::data("empty context window"));
    }
    let t_len = context.len();
    let plan = match cfg.patching {
        Patching::Dynamic => detect_boundaries(context, &cfg.patch)?,
        Patching::Fixed { size } => PatchPlan::fixed(t_len, size),
    };

    let x = tape.constant(Tensor::column(context));
    let embedded = ssm::linear_tokenizer(tape, store, x);
    let h = match cfg.tokenizer {
        Tokenizer::Ssm => ssm::encode(tape, store, cfg.enc_layers, embedded),
        Tokenizer::Linear => embedded,
    };

    let tokens = tape.gather_rows(h, &plan.boundaries);
    // The backbone must see exactly one token per patch; anything else means
    // the compression plumbing is broken.
    assert_eq!(
        tape.value(tokens).rows(),
        plan.num_patches(),
        "token count diverged from patch count"
    );
    let relative_ids: Vec<usize>;
    let position_ids: &[usize] = match cfg.positions {
        Positions::Absolute => &plan.position_ids,
        Positions::Relative => {
            relative_ids = (0..plan.num_patches()).collect();
            &relative_ids
        }
    };
    let (z, trace, r_bar) = backbone_forward(tape, store, tokens, position_ids, &cfg.backbone);
    assert_eq!(tape.value(z).rows(), plan.num_patches(), "backbone changed the token count");

    let upsampled = tape.broadcast_rows(z, &plan.sizes);
    let y = ssm::decode(tape, store, cfg.dec_layers, h, upsampled, cfg.residual, cfg.fusion);

    let mut heads = Vec::with_capacity(cfg.horizons.len());
    for &p in &cfg.horizons {
        let w = tape.param(store, &format!("head{p}.w"));
        let b = tape.param(store, &format!("head{p}.b"));
        let proj = tape.matmul(y, w);
        let pred = tape.add_row(proj, b);
        heads.push((p, pred));
    }
    Ok(ForwardPass { y, heads, trace, r_bar, plan })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub huber_delta: f64,
    pub aux_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { huber_delta: 1.0, aux_weight: 0.02 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.huber_delta > 0.0) {
            return Err(Error::config("huber_delta must be positive"));
        }
        if !(self.aux_weight >= 0.0) {
            return Err(Error::config("aux_weight must be non-negative"));
        }
        Ok(())
    }
}

/// Composite loss for one window: heads are teacher-forced at every issue time
/// t whose full block t+1 .. t+p stays inside the context, each contributing
/// the mean Huber penalty over its block; head means average and the
/// load-balancing term adds on top.
pub fn composite_loss(
    tape: &mut Tape,
    pass: &ForwardPass,
    context: &[f64],
    loss_cfg: &LossConfig,
) -> Result<Id> {
    let t_len = context.len();
    let mut head_terms = Vec::with_capacity(pass.heads.len());
    for &(p, pred) in &pass.heads {
        if t_len < p + 1 {
            return Err(Error::data(format!(
                "window of {t_len} has no valid issue position for horizon {p}"
            )));
        }
        let issues = t_len - p;
        let mut target = Tensor::zeros(issues, p);
        for t in 0..issues {
            target.row_mut(t).copy_from_slice(&context[t + 1..t + 1 + p]);
        }
        let valid = tape.slice(pred, 0, issues, 0, p);
        let penalties = tape.huber_loss(valid, target, loss_cfg.huber_delta);
        head_terms.push(tape.mean(penalties));
    }
    let mut total = head_terms[0];
    for &term in &head_terms[1..] {
        total = tape.add(total, term);
    }
    let main = tape.scale(total, 1.0 / head_terms.len() as f64);
    let aux = aux_loss_node(tape, &pass.trace, pass.r_bar);
    let aux_scaled = tape.scale(aux, loss_cfg.aux_weight);
    Ok(tape.add(main, aux_scaled))
}

/// Greedy emission plan: cover the remainder with the smallest sufficient head
/// (truncating its block), otherwise emit a full block from the largest head
/// and continue on the rest.
pub fn schedule_horizons(requested: usize, heads: &[usize]) -> Result<Vec<(usize, usize)>> {
    if heads.is_empty() {
        return Err(Error::config("no forecast heads to schedule"));
    }
    assert!(heads.windows(2).all(|w| w[0] < w[1]), "heads must be sorted");
    if requested == 0 {
        return Err(Error::config("requested horizon must be positive"));
    }
    let largest = *heads.last().unwrap();
    let mut out = Vec::new();
    let mut remaining = requested;
    while remaining > 0 {
        match heads.iter().find(|&&p| p >= remaining) {
            Some(&p) => {
                out.push((p, remaining));
                remaining = 0;
            }
            None => {
                out.push((largest, largest));
                remaining -= largest;
            }
        }
    }
    Ok(out)
}

/// H-step forecast in raw units. Each emission block re-standardizes the
/// rolling context, forecasts from its final timestep, and de-standardizes
/// with that block's statistics before appending.
pub fn predict(
    store: &ParamStore,
    cfg: &ModelConfig,
    context: &[f64],
    requested: usize,
) -> Result<Vec<f64>> {
    if context.is_empty() {
        return Err(Error::data("empty context"));
    }
    let schedule = schedule_horizons(requested, &cfg.horizons)?;
    let mut rolling = context.to_vec();
    let mut out = Vec::with_capacity(requested);
    for (head, emit) in schedule {
        let window = standardize(&rolling, &[]);
        let mut tape = Tape::new();
        let pass = forward(&mut tape, store, cfg, &window.context)?;
        let (_, pred) = *pass
            .heads
            .iter()
            .find(|(p, _)| *p == head)
            .expect("scheduled head exists");
        let last = tape.value(pred).rows() - 1;
        let block: Vec<f64> = tape.value(pred).row(last)[..emit].to_vec();
        let raw = window.destandardize(&block);
        out.extend_from_slice(&raw);
        rolling.extend_from_slice(&raw);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{grad_check, GradCheckConfig};
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
                experts: 4,
                top_k: 2,
                d_expert: 12,
                ..Default::default()
            },
            horizons: vec![1, 8],
            ..Default::default()
        }
    }

    fn tiny_store(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_params(cfg, &mut rng)
    }

    fn wavy(t_len: usize, seed: f64) -> Vec<f64> {
        (0..t_len).map(|t| ((t as f64 + seed) * 0.7).sin() + 0.3 * ((t as f64) * 0.13).cos()).collect()
    }

    #[test]
    fn huber_closed_forms() {
        assert_eq!(huber(0.0, 1.0), 0.0);
        assert_eq!(huber(0.5, 1.0), 0.125);
        assert_eq!(huber(2.0, 1.0), 1.5);
        assert_eq!(huber(-2.0, 1.0), 1.5);
        // C1 at the knee: both branches give 0.5 and slope 1.
        assert!((huber(1.0 + 1e-9, 1.0) - huber(1.0, 1.0) - 1e-9).abs() < 1e-12);
    }

    #[test]
    fn constant_window_compresses_to_two_tokens() {
        let cfg = tiny_cfg();
        let store = tiny_store(&cfg, 1);
        let mut tape = Tape::new();
        let pass = forward(&mut tape, &store, &cfg, &vec![0.0; 16]).unwrap();
        assert_eq!(pass.plan.sizes, vec![8, 8]);
        assert_eq!(pass.plan.num_patches(), 2);
        assert_eq!(pass.trace.tokens.len(), 2 * cfg.backbone.layers);
    }

    #[test]
    fn head_outputs_have_per_horizon_shapes() {
        let cfg = tiny_cfg();
        let store = tiny_store(&cfg, 2);
        let mut tape = Tape::new();
        let pass = forward(&mut tape, &store, &cfg, &wavy(20, 0.0)).unwrap();
        assert_eq!(pass.heads.len(), 2);
        assert_eq!(tape.value(pass.heads[0].1).shape(), (20, 1));
        assert_eq!(tape.value(pass.heads[1].1).shape(), (20, 8));
        assert_eq!(tape.value(pass.y).shape(), (20, 8));
    }

    #[test]
    fn end_to_end_causality_at_the_prediction_level() {
        let cfg = tiny_cfg();
        let store = tiny_store(&cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..20 {
            let t_len = 24 + (trial % 5) * 8;
            let base = wavy(t_len, trial as f64);
            let at = 1 + (rng.next_u64() as usize) % (t_len - 1);
            let mut bumped = base.clone();
            bumped[at] += 2.5;
            let run = |ctx: &[f64]| {
                let mut tape = Tape::new();
                let pass = forward(&mut tape, &store, &cfg, ctx).unwrap();
                pass.heads
                    .iter()
                    .map(|&(_, id)| tape.value(id).clone())
                    .collect::<Vec<_>>()
            };
            let (a, b) = (run(&base), run(&bumped));
            for (pa, pb) in a.iter().zip(&b) {
                for t in 0..at {
                    assert_eq!(pa.row(t), pb.row(t), "issue time {t} saw perturbation at {at}");
                }
            }
        }
    }

    #[test]
    fn composite_loss_zero_for_perfect_predictions() {
        // Drive the loss arithmetic directly with a hand-built pass.
        let context = [0.1, 0.2, 0.3, 0.4];
        let mut tape = Tape::new();
        let mut pred = Tensor::zeros(4, 1);
        for t in 0..3 {
            pred.set(t, 0, context[t + 1]);
        }
        let pred = tape.constant(pred);
        let trace = RouterTrace {
            experts: 2,
            top_k: 1,
            tokens: Vec::new(),
            fractions: vec![0.5, 0.5],
            avg_probs: vec![0.5, 0.5],
        };
        let r_bar = tape.constant(Tensor::new(1, 2, vec![0.5, 0.5]));
        let plan = PatchPlan::fixed(4, 2);
        let pass = ForwardPass { y: pred, heads: vec![(1, pred)], trace, r_bar, plan };
        let cfg = LossConfig { aux_weight: 0.0, ..Default::default() };
        let loss = composite_loss(&mut tape, &pass, &context, &cfg).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn composite_loss_single_position_linear_branch() {
        // One head, one issue position, error 2, delta 1: the huber example.
        let context = [0.0, 2.0];
        let mut tape = Tape::new();
        let pred = tape.constant(Tensor::zeros(2, 1));
        let trace = RouterTrace {
            experts: 2,
            top_k: 1,
            tokens: Vec::new(),
            fractions: vec![1.0, 0.0],
            avg_probs: vec![1.0, 0.0],
        };
        let r_bar = tape.constant(Tensor::new(1, 2, vec![1.0, 0.0]));
        let pass =
            ForwardPass { y: pred, heads: vec![(1, pred)], trace, r_bar, plan: PatchPlan::fixed(2, 1) };
        let cfg = LossConfig { aux_weight: 0.0, ..Default::default() };
        let loss = composite_loss(&mut tape, &pass, &context, &cfg).unwrap();
        assert_eq!(tape.value(loss).item(), 1.5);
    }

    #[test]
    fn composite_loss_combines_heads_and_aux() {
        // Per-head means 0.2 and 0.4 with aux 1.0 at weight 0.02 give 0.32.
        // Errors inside the quadratic branch: 0.5 e^2 = 0.2 and 0.4.
        let e1 = (2.0 * 0.2_f64).sqrt();
        let e2 = (2.0 * 0.4_f64).sqrt();
        let context = [0.0, 0.0];
        let mut tape = Tape::new();
        let p1 = tape.constant(Tensor::full(2, 1, e1));
        let p2 = tape.constant(Tensor::full(2, 1, e2));
        let trace = RouterTrace {
            experts: 2,
            top_k: 1,
            tokens: Vec::new(),
            fractions: vec![0.5, 0.5],
            avg_probs: vec![0.5, 0.5],
        };
        let r_bar = tape.constant(Tensor::new(1, 2, vec![0.5, 0.5]));
        let pass = ForwardPass {
            y: p1,
            heads: vec![(1, p1), (1, p2)],
            trace,
            r_bar,
            plan: PatchPlan::fixed(2, 1),
        };
        let cfg = LossConfig { huber_delta: 1.0, aux_weight: 0.02 };
        let loss = composite_loss(&mut tape, &pass, &context, &cfg).unwrap();
        assert!((tape.value(loss).item() - 0.32).abs() < 1e-12);
    }

    #[test]
    fn composite_loss_rejects_short_windows() {
        let cfg = tiny_cfg();
        let store = tiny_store(&cfg, 4);
        let context = wavy(8, 1.0);
        let mut tape = Tape::new();
        let pass = forward(&mut tape, &store, &cfg, &context).unwrap();
        let err = composite_loss(&mut tape, &pass, &context, &LossConfig::default()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn full_pipeline_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let mut store = tiny_store(&cfg, 5);
        let context = wavy(32, 2.0);
        let loss_cfg = LossConfig::default();
        let report = grad_check(
            |s: &mut ParamStore| {
                s.zero_grads();
                let mut tape = Tape::new();
                let pass = forward(&mut tape, s, &cfg, &context)?;
                let loss = composite_loss(&mut tape, &pass, &context, &loss_cfg)?;
                let v = tape.value(loss).item();
                tape.backward_params(loss, s);
                Ok(v)
            },
            &mut store,
            &GradCheckConfig { sample: 250, seed: 2, ..Default::default() },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "rel err {} at {:?}", report.max_rel_err, report.worst);
    }

    #[test]
    fn batch_loss_mean_is_order_invariant() {
        let cfg = tiny_cfg();
        let store = tiny_store(&cfg, 6);
        let windows: Vec<Vec<f64>> = (0..4).map(|i| wavy(24, i as f64 * 3.0)).collect();
        let loss_of = |ctx: &[f64]| {
            let mut tape = Tape::new();
            let pass = forward(&mut tape, &store, &cfg, ctx).unwrap();
            let loss = composite_loss(&mut tape, &pass, ctx, &LossConfig::default()).unwrap();
            tape.value(loss).item()
        };
        let forward_order: f64 = windows.iter().map(|w| loss_of(w)).sum::<f64>() / 4.0;
        let reverse_order: f64 = windows.iter().rev().map(|w| loss_of(w)).sum::<f64>() / 4.0;
        assert!((forward_order - reverse_order).abs() < 1e-12);
    }

    #[test]
    fn schedule_covers_exactly_the_requested_horizon() {
        let heads = [1usize, 8, 32, 64];
        assert_eq!(schedule_horizons(64, &heads).unwrap(), vec![(64, 64)]);
        assert_eq!(schedule_horizons(96, &heads).unwrap(), vec![(64, 64), (32, 32)]);
        assert_eq!(schedule_horizons(5, &heads).unwrap(), vec![(8, 5)]);
        assert_eq!(schedule_horizons(1, &heads).unwrap(), vec![(1, 1)]);
        for h in 1..200 {
            let plan = schedule_horizons(h, &heads).unwrap();
            let total: usize = plan.iter().map(|&(_, emit)| emit).sum();
            assert_eq!(total, h, "H={h}");
            for &(head, emit) in &plan {
                assert!(emit <= head);
            }
        }
        assert_eq!(schedule_horizons(3, &[]).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn predict_emits_requested_lengths_deterministically() {
        let cfg = tiny_cfg();
        let store = tiny_store(&cfg, 7);
        let context = wavy(40, 4.0);
        for h in [1usize, 5, 12] {
            let a = predict(&store, &cfg, &context, h).unwrap();
            let b = predict(&store, &cfg, &context, h).unwrap();
            assert_eq!(a.len(), h);
            assert_eq!(a, b);
            assert!(a.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn config_validation_flags_bad_horizons() {
        let mut cfg = tiny_cfg();
        cfg.horizons = vec![8, 8];
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
        cfg.horizons = vec![8, 1];
        assert!(cfg.validate().is_err());
        cfg.horizons = vec![];
        assert!(cfg.validate().is_err());
        cfg.horizons = vec![1, 8];
        assert!(cfg.validate().is_ok());
        cfg.patching = Patching::Fixed { size: 0 };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fixed_patching_uses_uniform_plan() {
        let cfg = ModelConfig { patching: Patching::Fixed { size: 4 }, ..tiny_cfg() };
        let store = tiny_store(&cfg, 8);
        let mut tape = Tape::new();
        let pass = forward(&mut tape, &store, &cfg, &wavy(18, 5.0)).unwrap();
        assert_eq!(pass.plan.sizes, vec![4, 4, 4, 4, 2]);
    }

    #[test]
    fn linear_tokenizer_skips_recurrent_encoder() {
        let cfg = ModelConfig { tokenizer: Tokenizer::Linear, ..tiny_cfg() };
        let store = tiny_store(&cfg, 9);
        assert!(store.iter().all(|(name, _, _)| !name.starts_with("encoder.")));
        let mut tape = Tape::new();
        let pass = forward(&mut tape, &store, &cfg, &wavy(16, 6.0)).unwrap();
        assert!(tape.value(pass.y).is_finite());
    }

    use rand::RngCore;
}
