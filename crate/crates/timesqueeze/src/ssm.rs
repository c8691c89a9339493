//! Gated linear-recurrence encoder and decoder stacks.
//!
//! Each layer runs, per channel, h_t = a_t * h_{t-1} + (1 - a_t) * (W_in u_t)_d
//! with a data-dependent decay a_t = sigmoid(lambda + W_g u_t), then projects
//! silu(h) through W_out and adds the input back. The convex combination keeps
//! the state bounded by the largest projected input seen so far, and the
//! left-to-right scan makes every output strictly causal.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tape::{Id, Tape};

pub fn init_embed(store: &mut ParamStore, d: usize, rng: &mut impl Rng) {
    store.insert_linear("embed.w", 1, d, rng);
    store.insert_zeros("embed.b", 1, d);
}

pub fn init_stack(store: &mut ParamStore, prefix: &str, layers: usize, d: usize, rng: &mut impl Rng) {
    for i in 0..layers {
        store.insert_linear(&format!("{prefix}.layer{i}.w_in"), d, d, rng);
        store.insert_linear(&format!("{prefix}.layer{i}.w_g"), d, d, rng);
        store.insert_linear(&format!("{prefix}.layer{i}.w_out"), d, d, rng);
        // Positive decay logits start the state with moderate retention.
        store.insert_full(&format!("{prefix}.layer{i}.decay"), 1, d, 1.0);
    }
}

/// Per-timestep affine embedding of the raw scalar series; doubles as the
/// linear tokenizer the ablation harness swaps in for the recurrent stacks.
pub fn linear_tokenizer(tape: &mut Tape, store: &ParamStore, x: Id) -> Id {
    let w = tape.param(store, "embed.w");
    let b = tape.param(store, "embed.b");
    let proj = tape.matmul(x, w);
    tape.add_row(proj, b)
}

fn ssm_layer(tape: &mut Tape, store: &ParamStore, prefix: &str, u: Id) -> Id {
    let w_in = tape.param(store, &format!("{prefix}.w_in"));
    let w_g = tape.param(store, &format!("{prefix}.w_g"));
    let w_out = tape.param(store, &format!("{prefix}.w_out"));
    let decay = tape.param(store, &format!("{prefix}.decay"));

    let t = tape.value(u).rows();
    let d = tape.value(u).cols();
    let gate_in = tape.matmul(u, w_g);
    let gate_shifted = tape.add_row(gate_in, decay);
    let a = tape.sigmoid(gate_shifted);
    let v = tape.matmul(u, w_in);

    let mut states = Vec::with_capacity(t);
    let mut prev: Option<Id> = None;
    for step in 0..t {
        let a_t = tape.slice(a, step, step + 1, 0, d);
        let v_t = tape.slice(v, step, step + 1, 0, d);
        let keep = tape.scale(a_t, -1.0);
        let keep = tape.add_scalar(keep, 1.0);
        let fresh = tape.mul(keep, v_t);
        let h = match prev {
            Some(p) => {
                let carried = tape.mul(a_t, p);
                tape.add(carried, fresh)
            }
            None => fresh,
        };
        states.push(h);
        prev = Some(h);
    }
    let h_seq = tape.concat_rows(&states);
    let activated = tape.silu(h_seq);
    let out = tape.matmul(activated, w_out);
    tape.add(u, out)
}

/// Run the named recurrent stack over a T x D input.
pub fn run_stack(tape: &mut Tape, store: &ParamStore, prefix: &str, layers: usize, x: Id) -> Id {
    let mut h = x;
    for i in 0..layers {
        h = ssm_layer(tape, store, &format!("{prefix}.layer{i}"), h);
    }
    h
}

pub fn encode(tape: &mut Tape, store: &ParamStore, layers: usize, x_embedded: Id) -> Id {
    run_stack(tape, store, "encoder", layers, x_embedded)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Decoder input is H + W_mix * U.
    Additive,
    /// Decoder input is H + sigmoid(U W_gate) * (W_mix * U), elementwise.
    Gated,
}

pub fn init_decoder_fusion(store: &mut ParamStore, d: usize, fusion: Fusion, rng: &mut impl Rng) {
    store.insert_linear("decoder.mix", d, d, rng);
    if fusion == Fusion::Gated {
        store.insert_linear("decoder.fuse_gate", d, d, rng);
    }
}

/// Combine encoder features with upsampled backbone tokens and run the decoder
/// stack. `residual` off drops the H term, leaving the upsampled path alone.
pub fn decode(
    tape: &mut Tape,
    store: &ParamStore,
    layers: usize,
    h: Id,
    upsampled: Id,
    residual: bool,
    fusion: Fusion,
) -> Id {
    let mix = tape.param(store, "decoder.mix");
    let mut mixed = tape.matmul(upsampled, mix);
    if fusion == Fusion::Gated {
        let wg = tape.param(store, "decoder.fuse_gate");
        let gate_in = tape.matmul(upsampled, wg);
        let gate = tape.sigmoid(gate_in);
        mixed = tape.mul(gate, mixed);
    }
    let input = if residual { tape.add(h, mixed) } else { mixed };
    run_stack(tape, store, "decoder", layers, input)
}
