//! Non-learned patch selection and the comparison/sweep tables.

use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{patch_center_distance, PatchGrid, PatchMask, NUM_PATCHES};
use crate::nn::{Network, Tensor};
use crate::policy::{greedy_action, policy_forward_batch};
use crate::rng::Rng;

/// Horizontal-axis priority order. The published list has 15 entries; patch 12
/// is missing there and is given the lowest priority here.
pub const FIXED_H_ORDER: [usize; 16] = [5, 6, 9, 10, 13, 14, 1, 2, 0, 3, 4, 7, 8, 11, 15, 12];
pub const FIXED_V_ORDER: [usize; 16] = [4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 0, 1, 2, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineKind {
    FixedH,
    FixedV,
    StochasticCenter,
    AllDrop,
    AllKeep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselinePolicy {
    pub kind: BaselineKind,
    /// Number of patches for the fixed orders.
    pub budget: usize,
    /// Decay rate `lambda` for the stochastic baseline.
    pub decay: f64,
}

impl BaselinePolicy {
    pub fn fixed(kind: BaselineKind, budget: usize) -> Result<Self> {
        if budget > NUM_PATCHES {
            return Err(Error::InvalidArgument(format!("budget {budget} exceeds {NUM_PATCHES} patches")));
        }
        Ok(BaselinePolicy { kind, budget, decay: 0.0 })
    }

    pub fn stochastic(decay: f64) -> Result<Self> {
        if !(decay.is_finite() && decay >= 0.0) {
            return Err(Error::InvalidArgument(format!("decay must be >= 0, got {decay}")));
        }
        Ok(BaselinePolicy { kind: BaselineKind::StochasticCenter, budget: 0, decay })
    }

    pub fn constant(keep: bool) -> Self {
        let kind = if keep { BaselineKind::AllKeep } else { BaselineKind::AllDrop };
        BaselinePolicy { kind, budget: if keep { NUM_PATCHES } else { 0 }, decay: 0.0 }
    }
}

pub fn fixed_order(kind: BaselineKind) -> Result<[usize; 16]> {
    match kind {
        BaselineKind::FixedH => Ok(FIXED_H_ORDER),
        BaselineKind::FixedV => Ok(FIXED_V_ORDER),
        other => Err(Error::InvalidArgument(format!("{other:?} has no fixed order"))),
    }
}

/// Survival probability `exp(-lambda * d / d_max)` of every patch.
pub fn stochastic_keep_probs(decay: f64, grid: &PatchGrid) -> Result<Vec<f64>> {
    let d = (0..NUM_PATCHES)
        .map(|id| patch_center_distance(id, grid))
        .collect::<Result<Vec<_>>>()?;
    let d_max = d.iter().cloned().fold(0.0, f64::max);
    Ok(d.iter().map(|&di| (-decay * di / d_max).exp()).collect())
}

/// Decay rate whose expected number of kept patches equals `target`, by bisection.
pub fn calibrate_decay(target: f64, grid: &PatchGrid) -> Result<f64> {
    if !(target > 0.0 && target <= NUM_PATCHES as f64) {
        return Err(Error::InvalidArgument(format!("target mean S {target} outside (0, 16]")));
    }
    if target == NUM_PATCHES as f64 {
        return Ok(0.0);
    }
    let expected = |l: f64| -> Result<f64> { Ok(stochastic_keep_probs(l, grid)?.iter().sum()) };
    let (mut lo, mut hi) = (0.0, 1.0);
    while expected(hi)? > target {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::InvalidArgument(format!("cannot reach mean S {target}")));
        }
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if expected(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn baseline_mask(policy: &BaselinePolicy, grid: &PatchGrid, rng: &mut Rng) -> Result<PatchMask> {
    match policy.kind {
        BaselineKind::FixedH | BaselineKind::FixedV => {
            let order = fixed_order(policy.kind)?;
            PatchMask::from_ids(NUM_PATCHES, &order[..policy.budget.min(NUM_PATCHES)])
        }
        BaselineKind::StochasticCenter => {
            let probs = stochastic_keep_probs(policy.decay, grid)?;
            Ok(PatchMask::new(probs.iter().map(|&p| rng.random::<f64>() < p).collect()))
        }
        BaselineKind::AllDrop => Ok(PatchMask::all(NUM_PATCHES, false)),
        BaselineKind::AllKeep => Ok(PatchMask::all(NUM_PATCHES, true)),
    }
}

/// Where a patch mask comes from at evaluation time.
#[derive(Debug, Clone, Copy)]
pub enum MaskPolicy<'a> {
    /// Greedy action of a trained policy network.
    Learned(&'a Network),
    Baseline(BaselinePolicy),
}

impl MaskPolicy<'_> {
    /// One mask per row of the LR batch.
    pub fn masks(&self, lr: &Tensor, grid: &PatchGrid, rng: &mut Rng) -> Result<Vec<PatchMask>> {
        match self {
            MaskPolicy::Learned(net) => Ok(policy_forward_batch(net, lr)?.iter().map(greedy_action).collect()),
            MaskPolicy::Baseline(b) => (0..lr.rows()).map(|_| baseline_mask(b, grid, rng)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub policy: String,
    pub accuracy: f64,
    pub mean_s: f64,
}

pub fn table_csv(rows: &[TableRow]) -> String {
    let mut out = String::from("policy,accuracy,mean_S\n");
    for r in rows {
        writeln!(out, "{},{:.6},{:.6}", r.policy, r.accuracy, r.mean_s).expect("write to string");
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub param_value: f64,
    pub accuracy: f64,
    pub mean_s: f64,
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("param_value,accuracy,mean_S\n");
    for p in points {
        writeln!(out, "{},{:.6},{:.6}", p.param_value, p.accuracy, p.mean_s).expect("write to string");
    }
    out
}

/// Indices `i` where mean S drops from point `i` to point `i + 1`.
pub fn monotonicity_violations(points: &[CurvePoint]) -> Vec<usize> {
    points
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1].mean_s < w[0].mean_s)
        .map(|(i, _)| i)
        .collect()
}
