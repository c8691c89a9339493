//! Relative-deviation dynamic patching.
//!
//! A boundary opens a new patch at index i when the step |x_i - x_{i-1}| exceeds
//! tau * sqrt(P_i), where P_i is the mean squared value over the trailing window
//! of length `power_window` (shrunk to the available prefix while i < L). Index 0
//! is always a boundary, and a patch is force-split once it reaches `max_patch`.
//! Both sides of the rule scale together, so boundaries are scale invariant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub tau: f64,
    pub power_window: usize,
    pub max_patch: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig { tau: 0.3, power_window: 16, max_patch: 8 }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.power_window == 0 {
            return Err(Error::config("power_window must be at least 1"));
        }
        if self.max_patch == 0 {
            return Err(Error::config("max_patch must be at least 1"));
        }
        Ok(())
    }
}

/// The contract between compression and unpatching: where patches start, how
/// long each one is, and the original timestep of each retained element.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PatchPlan {
    /// Strictly increasing, always starting at 0.
    pub boundaries: Vec<usize>,
    pub sizes: Vec<usize>,
    /// Original timestep of each patch's first element; equals `boundaries`.
    pub position_ids: Vec<usize>,
    pub source_len: usize,
}

impl PatchPlan {
    fn from_boundaries(boundaries: Vec<usize>, source_len: usize) -> PatchPlan {
        debug_assert_eq!(boundaries.first(), Some(&0));
        let mut sizes = Vec::with_capacity(boundaries.len());
        for (k, &b) in boundaries.iter().enumerate() {
            let end = boundaries.get(k + 1).copied().unwrap_or(source_len);
            sizes.push(end - b);
        }
        PatchPlan { position_ids: boundaries.clone(), boundaries, sizes, source_len }
    }

    /// Fixed-size patching used by the ablation harness: a boundary every `size` steps.
    pub fn fixed(source_len: usize, size: usize) -> PatchPlan {
        assert!(size >= 1 && source_len >= 1);
        PatchPlan::from_boundaries((0..source_len).step_by(size).collect(), source_len)
    }

    pub fn num_patches(&self) -> usize {
        self.boundaries.len()
    }
}

/// Mean squared value over the window trailing index i, shrunk while i < L.
pub fn local_power(x: &[f64], i: usize, power_window: usize) -> f64 {
    assert!(i >= 1, "local_power queried at index 0");
    assert!(i <= x.len());
    let lo = i.saturating_sub(power_window);
    let sum: f64 = x[lo..i].iter().map(|v| v * v).sum();
    sum / (i - lo) as f64
}

/// Indices where the deviation rule alone fires, ignoring max_patch forcing.
/// Monotone in tau: raising tau can only remove boundaries.
pub fn rule_boundaries(x: &[f64], cfg: &PatchConfig) -> Vec<usize> {
    let mut out = Vec::new();
    let mut power = IncrementalPower::new(x, cfg.power_window);
    for i in 1..x.len() {
        if rule_fires(x, i, power.advance(), cfg.tau) {
            out.push(i);
        }
    }
    out
}

fn rule_fires(x: &[f64], i: usize, power: f64, tau: f64) -> bool {
    (x[i] - x[i - 1]).abs() > tau * power.sqrt()
}

/// Running sum of squares over the trailing window; yields P_i for i = 1, 2, ...
struct IncrementalPower<'a> {
    x: &'a [f64],
    window: usize,
    sum: f64,
    next: usize,
}

impl<'a> IncrementalPower<'a> {
    fn new(x: &'a [f64], window: usize) -> Self {
        IncrementalPower { x, window, sum: 0.0, next: 1 }
    }

    fn advance(&mut self) -> f64 {
        let i = self.next;
        self.next += 1;
        self.sum += self.x[i - 1] * self.x[i - 1];
        if i > self.window {
            self.sum -= self.x[i - 1 - self.window] * self.x[i - 1 - self.window];
            // Cancellation can leave a tiny negative residue.
            if self.sum < 0.0 {
                self.sum = 0.0;
            }
        }
        let len = i.min(self.window);
        self.sum / len as f64
    }
}

/// Detect boundaries with the incremental power window plus max_patch forcing.
pub fn detect_boundaries(x: &[f64], cfg: &PatchConfig) -> Result<PatchPlan> {
    cfg.validate()?;
    if x.is_empty() {
        return Err(Error::data("cannot patch an empty signal"));
    }
    if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::data(format!("non-finite value at index {pos}")));
    }
    let mut boundaries = vec![0];
    let mut run = 1;
    let mut power = IncrementalPower::new(x, cfg.power_window);
    for i in 1..x.len() {
        let p = power.advance();
        if run == cfg.max_patch || rule_fires(x, i, p, cfg.tau) {
            boundaries.push(i);
            run = 1;
        } else {
            run += 1;
        }
    }
    Ok(PatchPlan::from_boundaries(boundaries, x.len()))
}

/// Reference implementation: recompute the power window from scratch at every
/// index. Exists purely to verify `detect_boundaries`; never used by the model.
pub fn detect_boundaries_naive(x: &[f64], cfg: &PatchConfig) -> Result<PatchPlan> {
    cfg.validate()?;
    if x.is_empty() {
        return Err(Error::data("cannot patch an empty signal"));
    }
    let mut boundaries = vec![0];
    let mut run = 1;
    for i in 1..x.len() {
        let p = local_power(x, i, cfg.power_window);
        if run == cfg.max_patch || rule_fires(x, i, p, cfg.tau) {
            boundaries.push(i);
            run = 1;
        } else {
            run += 1;
        }
    }
    Ok(PatchPlan::from_boundaries(boundaries, x.len()))
}

/// Keep only the boundary rows of a T x D embedding matrix.
pub fn compress(h: &Tensor, plan: &PatchPlan) -> Tensor {
    assert_eq!(h.rows(), plan.source_len, "compress: {h} vs plan over {}", plan.source_len);
    let mut out = Tensor::zeros(plan.num_patches(), h.cols());
    for (k, &b) in plan.boundaries.iter().enumerate() {
        out.row_mut(k).copy_from_slice(h.row(b));
    }
    out
}

/// Repeat each patch token across its patch's timesteps. Row t of the output
/// depends only on the token whose patch starts at or before t.
pub fn unpatch(z: &Tensor, plan: &PatchPlan) -> Tensor {
    assert_eq!(z.rows(), plan.num_patches(), "unpatch: {z} vs {} patches", plan.num_patches());
    let mut out = Tensor::zeros(plan.source_len, z.cols());
    let mut t = 0;
    for (k, &s) in plan.sizes.iter().enumerate() {
        for _ in 0..s {
            out.row_mut(t).copy_from_slice(z.row(k));
            t += 1;
        }
    }
    out
}

pub fn compression_ratio(plan: &PatchPlan) -> f64 {
    plan.source_len as f64 / plan.num_patches() as f64
}

#[derive(Debug, Clone, Serialize)]
pub struct Calibration {
    pub tau: f64,
    pub achieved_ratio: f64,
    pub iterations: usize,
    pub target_ratio: f64,
}

const TAU_BRACKET: (f64, f64) = (1e-4, 10.0);
const CALIBRATE_MAX_ITERS: usize = 60;
const CALIBRATE_TOLERANCE: f64 = 0.02;

/// Bisection over tau until the corpus mean compression ratio lands within
/// 2% of the target. Relies on the ratio being nondecreasing in tau.
pub fn calibrate_tau(
    corpus: &[Vec<f64>],
    target_ratio: f64,
    template: &PatchConfig,
) -> Result<Calibration> {
    template.validate()?;
    if corpus.is_empty() {
        return Err(Error::config("calibration corpus is empty"));
    }
    if !(target_ratio > 1.0) || target_ratio > template.max_patch as f64 {
        return Err(Error::config(format!(
            "target ratio {target_ratio} must lie in (1, max_patch = {}]",
            template.max_patch
        )));
    }
    let mean_ratio = |tau: f64| -> Result<f64> {
        let mut sum = 0.0;
        for x in corpus {
            let plan = detect_boundaries(x, &PatchConfig { tau, ..template.clone() })?;
            sum += compression_ratio(&plan);
        }
        Ok(sum / corpus.len() as f64)
    };
    let within = |ratio: f64| (ratio - target_ratio).abs() <= CALIBRATE_TOLERANCE * target_ratio;

    let (mut lo, mut hi) = TAU_BRACKET;
    let ratio_lo = mean_ratio(lo)?;
    if within(ratio_lo) {
        return Ok(Calibration { tau: lo, achieved_ratio: ratio_lo, iterations: 0, target_ratio });
    }
    let ratio_hi = mean_ratio(hi)?;
    if within(ratio_hi) {
        return Ok(Calibration { tau: hi, achieved_ratio: ratio_hi, iterations: 0, target_ratio });
    }
    if ratio_lo > target_ratio || ratio_hi < target_ratio {
        return Err(Error::numeric(format!(
            "target ratio {target_ratio} unreachable: tau {lo} gives {ratio_lo:.4}, tau {hi} gives {ratio_hi:.4}"
        )));
    }
    for iter in 1..=CALIBRATE_MAX_ITERS {
        let mid = 0.5 * (lo + hi);
        let ratio = mean_ratio(mid)?;
        if within(ratio) {
            return Ok(Calibration { tau: mid, achieved_ratio: ratio, iterations: iter, target_ratio });
        }
        if ratio < target_ratio {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::numeric(format!(
        "calibration did not converge in {CALIBRATE_MAX_ITERS} steps: bracket [{lo}, {hi}], \
         ratios [{:.4}, {:.4}], target {target_ratio}",
        mean_ratio(lo)?,
        mean_ratio(hi)?
    )))
}

/// Patch-size histogram over a corpus: counts[s - 1] = patches of length s.
pub fn patch_histogram(corpus: &[Vec<f64>], cfg: &PatchConfig) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; cfg.max_patch];
    for x in corpus {
        let plan = detect_boundaries(x, cfg)?;
        for &s in &plan.sizes {
            counts[s - 1] += 1;
        }
    }
    Ok(counts)
}
