//! Causal-attention backbone over compressed patch tokens.
//!
//! Each layer is pre-norm: RMSNorm -> multi-head causal attention with rotary
//! embeddings on the patches' original timestep positions -> residual, then
//! RMSNorm -> top-K mixture-of-experts feed-forward with an always-on shared
//! expert -> residual. A final RMSNorm closes the stack. Routing statistics are
//! collected per layer and averaged for the load-balancing loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{Id, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub experts: usize,
    pub top_k: usize,
    pub d_expert: usize,
    pub rope_base: f64,
    /// Renormalize the selected top-K probabilities to sum to one.
    pub renormalize_topk: bool,
    /// Gate the shared expert's output by a learned per-token sigmoid.
    pub gate_shared: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            layers: 2,
            heads: 4,
            d_model: 32,
            experts: 4,
            top_k: 2,
            d_expert: 64,
            rope_base: 10000.0,
            renormalize_topk: true,
            gate_shared: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_expert == 0 {
            return Err(Error::config("backbone sizes must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if (self.d_model / self.heads) % 2 != 0 {
            return Err(Error::config(format!(
                "head dim {} must be even for the rotary pairs",
                self.d_model / self.heads
            )));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(Error::config(format!(
                "top_k {} must lie in 1..={} experts",
                self.top_k, self.experts
            )));
        }
        if !(self.rope_base > 1.0) || !self.rope_base.is_finite() {
            return Err(Error::config("rope_base must exceed 1"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Routing decisions for one token: the K selected experts and the full
/// probability row they were drawn from.
#[derive(Debug, Clone)]
pub struct TokenRouting {
    pub selected: Vec<usize>,
    pub probs: Vec<f64>,
}

/// Aggregated routing statistics. `fractions` is f in the load-balancing loss
/// (share of assignments per expert, normalized by K * tokens so it sums to 1);
/// `avg_probs` is r (mean router probability per expert).
#[derive(Debug, Clone)]
pub struct RouterTrace {
    pub experts: usize,
    pub top_k: usize,
    pub tokens: Vec<TokenRouting>,
    pub fractions: Vec<f64>,
    pub avg_probs: Vec<f64>,
}

impl RouterTrace {
    /// Merge per-layer traces: tokens concatenate, f and r average.
    pub fn aggregate(layers: &[RouterTrace]) -> RouterTrace {
        assert!(!layers.is_empty());
        let n = layers[0].experts;
        let mut fractions = vec![0.0; n];
        let mut avg_probs = vec![0.0; n];
        let mut tokens = Vec::new();
        for layer in layers {
            assert_eq!(layer.experts, n);
            for i in 0..n {
                fractions[i] += layer.fractions[i] / layers.len() as f64;
                avg_probs[i] += layer.avg_probs[i] / layers.len() as f64;
            }
            tokens.extend(layer.tokens.iter().cloned());
        }
        RouterTrace { experts: n, top_k: layers[0].top_k, tokens, fractions, avg_probs }
    }

    /// Shannon entropy of the assignment fractions, in nats.
    pub fn usage_entropy(&self) -> f64 {
        -self
            .fractions
            .iter()
            .filter(|&&f| f > 0.0)
            .map(|&f| f * f.ln())
            .sum::<f64>()
    }
}

/// Load-balancing loss N * sum_i f_i r_i; equals 1 under uniform routing.
pub fn aux_loss(trace: &RouterTrace) -> f64 {
    trace.experts as f64
        * trace.fractions.iter().zip(&trace.avg_probs).map(|(f, r)| f * r).sum::<f64>()
}

pub fn init_backbone(store: &mut ParamStore, cfg: &BackboneConfig, rng: &mut impl Rng) {
    let d = cfg.d_model;
    for i in 0..cfg.layers {
        let p = format!("backbone.layer{i}");
        store.insert_full(&format!("{p}.attn.norm_gain"), 1, d, 1.0);
        for w in ["wq", "wk", "wv", "wo"] {
            store.insert_linear(&format!("{p}.attn.{w}"), d, d, rng);
        }
        store.insert_full(&format!("{p}.moe.norm_gain"), 1, d, 1.0);
        store.insert_linear(&format!("{p}.moe.router"), d, cfg.experts, rng);
        for j in 0..cfg.experts {
            init_ffn(store, &format!("{p}.moe.expert{j}"), d, cfg.d_expert, rng);
        }
        init_ffn(store, &format!("{p}.moe.shared"), d, cfg.d_expert, rng);
        if cfg.gate_shared {
            store.insert_linear(&format!("{p}.moe.shared_gate"), d, 1, rng);
        }
    }
    store.insert_full("backbone.norm_gain", 1, d, 1.0);
}

fn init_ffn(store: &mut ParamStore, prefix: &str, d: usize, d_hidden: usize, rng: &mut impl Rng) {
    store.insert_linear(&format!("{prefix}.w1"), d, d_hidden, rng);
    store.insert_zeros(&format!("{prefix}.b1"), 1, d_hidden);
    store.insert_linear(&format!("{prefix}.w2"), d_hidden, d, rng);
    store.insert_zeros(&format!("{prefix}.b2"), 1, d);
}

fn ffn(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Id) -> Id {
    let w1 = tape.param(store, &format!("{prefix}.w1"));
    let b1 = tape.param(store, &format!("{prefix}.b1"));
    let w2 = tape.param(store, &format!("{prefix}.w2"));
    let b2 = tape.param(store, &format!("{prefix}.b2"));
    let h = tape.matmul(x, w1);
    let h = tape.add_row(h, b1);
    let h = tape.silu(h);
    let out = tape.matmul(h, w2);
    tape.add_row(out, b2)
}

// Large negative score for masked attention slots. Finite on purpose: after the
// row-max shift, exp underflows to exactly 0.0, so future tokens contribute
// nothing at all and appending tokens never perturbs earlier rows.
const MASKED_SCORE: f64 = -1e30;

fn causal_mask(p: usize) -> Tensor {
    let mut m = Tensor::zeros(p, p);
    for i in 0..p {
        for j in i + 1..p {
            m.set(i, j, MASKED_SCORE);
        }
    }
    m
}

/// Pre-norm multi-head causal attention with rotary positions, plus residual.
pub fn attention_block(
    tape: &mut Tape,
    store: &ParamStore,
    layer: usize,
    z: Id,
    position_ids: &[usize],
    cfg: &BackboneConfig,
) -> Id {
    let p = tape.value(z).rows();
    assert_eq!(p, position_ids.len(), "attention: {p} tokens vs {} positions", position_ids.len());
    let prefix = format!("backbone.layer{layer}.attn");
    let gain = tape.param(store, &format!("{prefix}.norm_gain"));
    let zn = tape.rmsnorm_rows(z, gain);

    let wq = tape.param(store, &format!("{prefix}.wq"));
    let wk = tape.param(store, &format!("{prefix}.wk"));
    let wv = tape.param(store, &format!("{prefix}.wv"));
    let wo = tape.param(store, &format!("{prefix}.wo"));
    let q = tape.matmul(zn, wq);
    let k = tape.matmul(zn, wk);
    let v = tape.matmul(zn, wv);

    let hd = cfg.head_dim();
    let mask = tape.constant(causal_mask(p));
    let mut head_outputs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (c0, c1) = (h * hd, (h + 1) * hd);
        let qh = tape.slice(q, 0, p, c0, c1);
        let kh = tape.slice(k, 0, p, c0, c1);
        let vh = tape.slice(v, 0, p, c0, c1);
        let qr = tape.rope(qh, position_ids, cfg.rope_base);
        let kr = tape.rope(kh, position_ids, cfg.rope_base);
        let kt = tape.transpose(kr);
        let scores = tape.matmul(qr, kt);
        let scaled = tape.scale(scores, 1.0 / (hd as f64).sqrt());
        let masked = tape.add(scaled, mask);
        let probs = tape.softmax_rows(masked);
        head_outputs.push(tape.matmul(probs, vh));
    }
    let ctx = tape.concat_cols(&head_outputs);
    let mixed = tape.matmul(ctx, wo);
    tape.add(z, mixed)
}

/// Pre-norm mixture-of-experts feed-forward with residual. Every expert runs
/// densely; unselected experts are weighted by an exact 0.0 so they contribute
/// neither value nor gradient.
pub fn moe_block(
    tape: &mut Tape,
    store: &ParamStore,
    layer: usize,
    z: Id,
    cfg: &BackboneConfig,
) -> (Id, RouterTrace, Id) {
    let p = tape.value(z).rows();
    let n = cfg.experts;
    let prefix = format!("backbone.layer{layer}.moe");
    let gain = tape.param(store, &format!("{prefix}.norm_gain"));
    let zn = tape.rmsnorm_rows(z, gain);

    let router = tape.param(store, &format!("{prefix}.router"));
    let logits = tape.matmul(zn, router);
    let probs = tape.softmax_rows(logits);

    // Selection happens on values; gradients flow only through the kept probs.
    let mut mask = Tensor::zeros(p, n);
    let mut counts = vec![0usize; n];
    let mut tokens = Vec::with_capacity(p);
    for t in 0..p {
        let row = tape.value(probs).row(t).to_vec();
        let selected = top_k_indices(&row, cfg.top_k);
        for &j in &selected {
            mask.set(t, j, 1.0);
            counts[j] += 1;
        }
        tokens.push(TokenRouting { selected, probs: row });
    }
    let mask = tape.constant(mask);
    let kept = tape.mul(probs, mask);
    let weights = if cfg.renormalize_topk {
        let sums = tape.row_sums(kept);
        let inv = tape.recip(sums);
        tape.mul_col(kept, inv)
    } else {
        kept
    };

    let mut acc = ffn(tape, store, &format!("{prefix}.shared"), zn);
    if cfg.gate_shared {
        let wg = tape.param(store, &format!("{prefix}.shared_gate"));
        let g_in = tape.matmul(zn, wg);
        let g = tape.sigmoid(g_in);
        acc = tape.mul_col(acc, g);
    }
    for j in 0..n {
        let out_j = ffn(tape, store, &format!("{prefix}.expert{j}"), zn);
        let w_j = tape.slice(weights, 0, p, j, j + 1);
        let weighted = tape.mul_col(out_j, w_j);
        acc = tape.add(acc, weighted);
    }
    let out = tape.add(z, acc);

    let fractions: Vec<f64> =
        counts.iter().map(|&c| c as f64 / (cfg.top_k * p) as f64).collect();
    let uniform = tape.constant(Tensor::full(1, p, 1.0 / p as f64));
    let r_avg = tape.matmul(uniform, probs);
    let avg_probs = tape.value(r_avg).data().to_vec();
    let trace = RouterTrace { experts: n, top_k: cfg.top_k, tokens, fractions, avg_probs };
    (out, trace, r_avg)
}

/// Top-K by probability, ties broken toward the lower expert index.
fn top_k_indices(probs: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut out = order[..k].to_vec();
    out.sort_unstable();
    out
}

/// Full stack over patch tokens. Returns the normalized output, the aggregated
/// routing trace, and the on-tape layer-averaged router probabilities (1 x N)
/// through which the load-balancing loss receives gradients.
pub fn backbone_forward(
    tape: &mut Tape,
    store: &ParamStore,
    z: Id,
    position_ids: &[usize],
    cfg: &BackboneConfig,
) -> (Id, RouterTrace, Id) {
    let mut z = z;
    let mut traces = Vec::with_capacity(cfg.layers);
    let mut r_nodes = Vec::with_capacity(cfg.layers);
    for layer in 0..cfg.layers {
        z = attention_block(tape, store, layer, z, position_ids, cfg);
        let (out, trace, r_avg) = moe_block(tape, store, layer, z, cfg);
        z = out;
        traces.push(trace);
        r_nodes.push(r_avg);
    }
    let gain = tape.param(store, "backbone.norm_gain");
    let out = tape.rmsnorm_rows(z, gain);

    let mut r_sum = r_nodes[0];
    for &r in &r_nodes[1..] {
        r_sum = tape.add(r_sum, r);
    }
    let r_bar = tape.scale(r_sum, 1.0 / cfg.layers as f64);
    (out, RouterTrace::aggregate(&traces), r_bar)
}

/// On-tape load-balancing loss: N * <f, r_bar> with f held constant.
pub fn aux_loss_node(tape: &mut Tape, trace: &RouterTrace, r_bar: Id) -> Id {
    let f = tape.constant(Tensor::new(1, trace.experts, trace.fractions.clone()));
    let prod = tape.mul(f, r_bar);
    let s = tape.sum_all(prod);
    tape.scale(s, trace.experts as f64)
}
