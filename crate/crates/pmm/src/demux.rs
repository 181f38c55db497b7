//! Single-flux-quantum demultiplexer that routes programming pulses to
//! DAC storage loops.
//!
//! Pulses enter the root of a binary tree of flux-activated switches and
//! descend one level per address flux line; six levels address 64 leaves,
//! which map pairwise onto 32 DACs (even leaf = COARSE stage, odd leaf =
//! FINE stage). The pulse and its bias line carry a polarity, and the
//! switch elements respond to the product of address sign and pulse
//! polarity, so delivering a negative quantum to the same leaf requires
//! flipping every address sign along with the pulse.
//!
//! Routing is modeled per gate: inside the hard bias margins each gate
//! fails with a probability that is flat (`p_gate`) in the interior and
//! rises exponentially toward the margin edges; a failed gate either
//! drops the pulse or sends it down the wrong branch. Driving the bias
//! at or above the broadcast threshold switches every gate regardless of
//! address and floods all leaves.
//!
//! The module also carries the two statistics used to qualify a tree:
//! a one-sided confidence bound on the per-pulse error rate after an
//! error-free soak run, and the per-pulse error budget implied by
//! demanding that a given number of full-processor programming cycles
//! all succeed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use statrs::distribution::{Beta, ContinuousCDF};
use statrs::function::gamma::ln_gamma;
use std::fmt;

use crate::flux_dac::Stage;

/// Static configuration of one address tree.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeConfig {
    pub depth: u32,
    pub nominal_bias_ua: f64,
    pub bias_margin_low_ua: f64,
    pub bias_margin_high_ua: f64,
    /// Bias at which every gate switches and the pulse floods all leaves.
    pub broadcast_threshold_ua: f64,
    pub nominal_address_mphi0: f64,
    pub address_window_low_mphi0: f64,
    pub address_window_high_mphi0: f64,
    /// Interior per-gate failure probability floor.
    pub p_gate: f64,
    /// Decay length of the failure walls near the bias margins; zero
    /// disables the walls.
    pub bias_wall_width_ua: f64,
    /// Decay length of the failure walls near the address window edges;
    /// zero disables the walls.
    pub address_wall_width_mphi0: f64,
    /// Probability that a gate failure swallows the pulse instead of
    /// steering it down the wrong branch.
    pub drop_fraction: f64,
}

impl Default for TreeConfig {
    fn default() -> TreeConfig {
        TreeConfig {
            depth: 6,
            nominal_bias_ua: 160.0,
            bias_margin_low_ua: 120.0,
            bias_margin_high_ua: 200.0,
            broadcast_threshold_ua: 240.0,
            nominal_address_mphi0: 500.0,
            address_window_low_mphi0: 250.0,
            address_window_high_mphi0: 750.0,
            p_gate: 1e-8,
            bias_wall_width_ua: 2.0,
            address_wall_width_mphi0: 10.0,
            drop_fraction: 0.5,
        }
    }
}

impl TreeConfig {
    fn validate(&self) -> Result<(), DemuxError> {
        if self.depth == 0 || self.depth > 24 {
            return Err(DemuxError::InvalidConfig("depth must be in 1..=24".into()));
        }
        if !(self.bias_margin_low_ua <= self.nominal_bias_ua
            && self.nominal_bias_ua <= self.bias_margin_high_ua)
        {
            return Err(DemuxError::InvalidConfig("nominal bias outside margins".into()));
        }
        if self.broadcast_threshold_ua < self.bias_margin_high_ua {
            return Err(DemuxError::InvalidConfig(
                "broadcast threshold below upper bias margin".into(),
            ));
        }
        if !(self.address_window_low_mphi0 <= self.nominal_address_mphi0
            && self.nominal_address_mphi0 <= self.address_window_high_mphi0)
        {
            return Err(DemuxError::InvalidConfig("nominal address outside window".into()));
        }
        if !(0.0..=1.0).contains(&self.p_gate) || !(0.0..=1.0).contains(&self.drop_fraction) {
            return Err(DemuxError::InvalidConfig("probabilities must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One switch element of the tree.
#[derive(Debug, Clone, PartialEq)]
pub struct DemuxGate {
    pub nominal_bias_ua: f64,
    pub bias_margin_low_ua: f64,
    pub bias_margin_high_ua: f64,
    pub address_window_low_mphi0: f64,
    pub address_window_high_mphi0: f64,
    pub error_probability: f64,
}

/// Exponential failure walls rising toward both edges of an operating
/// window. Zero wall width disables the walls.
fn wall(x: f64, low: f64, high: f64, width: f64) -> f64 {
    if width <= 0.0 {
        return 0.0;
    }
    (-(x - low) / width).exp() + (-(high - x) / width).exp()
}

/// A pulse to be routed: which tree it targets, the per-level address
/// signs, and the pulse polarity (+1 adds a quantum, -1 removes one).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PulseOp {
    pub tree: usize,
    pub address_signs: Vec<i8>,
    pub polarity: i8,
}

impl PulseOp {
    /// Builds the op that addresses `leaf` with the given pulse polarity.
    /// Address signs flip with polarity so the same leaf is reached.
    pub fn to_leaf(tree: usize, depth: u32, leaf: usize, polarity: i8) -> PulseOp {
        assert!(polarity == 1 || polarity == -1, "polarity must be +-1");
        assert!(leaf < (1usize << depth), "leaf {leaf} out of range for depth {depth}");
        let address_signs = (0..depth)
            .map(|i| {
                let bit = (leaf >> (depth - 1 - i)) & 1;
                if bit == 1 { polarity } else { -polarity }
            })
            .collect();
        PulseOp { tree, address_signs, polarity }
    }

    /// The leaf this op's signs select at its polarity.
    pub fn addressed_leaf(&self) -> usize {
        let mut leaf = 0usize;
        for &s in &self.address_signs {
            let bit = (s as i32 * self.polarity as i32) > 0;
            leaf = (leaf << 1) | bit as usize;
        }
        leaf
    }
}

/// Leaf index serving a DAC slot's stage.
pub fn leaf_for(slot: usize, stage: Stage) -> usize {
    slot * 2 + matches!(stage, Stage::Fine) as usize
}

/// DAC slot and stage served by a leaf.
pub fn slot_stage(leaf: usize) -> (usize, Stage) {
    (leaf / 2, if leaf % 2 == 0 { Stage::Coarse } else { Stage::Fine })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RoutingOutcome {
    /// Pulse arrived at the addressed leaf.
    Delivered { leaf: usize },
    /// Pulse arrived at the wrong leaf.
    Misrouted { leaf: usize },
    /// Pulse was lost inside the tree.
    Dropped,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RouteError {
    /// Bias outside a gate's hard margins; no reliable switching.
    OutOfMargin { gate: usize, bias_ua: f64 },
    /// Bias at or above the broadcast threshold; pulse floods every leaf.
    Broadcast { leaves: Vec<usize> },
}

impl fmt::Display for RouteError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RouteError::OutOfMargin { gate, bias_ua } => {
                write!(f, "bias {bias_ua} uA outside margins at gate {gate}")
            }
            RouteError::Broadcast { leaves } => {
                write!(f, "bias above broadcast threshold; delivered to all {} leaves", leaves.len())
            }
        }
    }
}

impl std::error::Error for RouteError {}

/// One pulse-routing tree with its operating point and noise stream.
#[derive(Debug, Clone)]
pub struct AddressTree {
    config: TreeConfig,
    gates: Vec<DemuxGate>,
    rng: ChaCha12Rng,
    bias_ua: f64,
    address_mphi0: f64,
}

impl AddressTree {
    pub fn new(config: TreeConfig, seed: u64) -> Result<AddressTree, DemuxError> {
        config.validate()?;
        let gate_count = (1usize << config.depth) - 1;
        let gate = DemuxGate {
            nominal_bias_ua: config.nominal_bias_ua,
            bias_margin_low_ua: config.bias_margin_low_ua,
            bias_margin_high_ua: config.bias_margin_high_ua,
            address_window_low_mphi0: config.address_window_low_mphi0,
            address_window_high_mphi0: config.address_window_high_mphi0,
            error_probability: config.p_gate,
        };
        Ok(AddressTree {
            bias_ua: config.nominal_bias_ua,
            address_mphi0: config.nominal_address_mphi0,
            config,
            gates: vec![gate; gate_count],
            rng: ChaCha12Rng::seed_from_u64(seed),
        })
    }

    pub fn config(&self) -> &TreeConfig {
        &self.config
    }

    pub fn leaf_count(&self) -> usize {
        1 << self.config.depth
    }

    pub fn gate(&self, index: usize) -> &DemuxGate {
        &self.gates[index]
    }

    pub fn gate_mut(&mut self, index: usize) -> &mut DemuxGate {
        &mut self.gates[index]
    }

    pub fn operating_point(&self) -> (f64, f64) {
        (self.bias_ua, self.address_mphi0)
    }

    pub fn set_operating_point(&mut self, bias_ua: f64, address_mphi0: f64) {
        self.bias_ua = bias_ua;
        self.address_mphi0 = address_mphi0;
    }

    fn all_leaves(&self) -> Vec<usize> {
        (0..self.leaf_count()).collect()
    }

    /// Routes one pulse through the tree at the current operating point.
    ///
    /// Panics if the op's sign count does not match the tree depth.
    pub fn route(&mut self, op: &PulseOp) -> Result<RoutingOutcome, RouteError> {
        assert_eq!(
            op.address_signs.len(),
            self.config.depth as usize,
            "op has {} signs for a depth-{} tree",
            op.address_signs.len(),
            self.config.depth
        );
        assert!(op.polarity == 1 || op.polarity == -1, "polarity must be +-1");
        if self.bias_ua >= self.config.broadcast_threshold_ua {
            return Err(RouteError::Broadcast { leaves: self.all_leaves() });
        }
        let intended = op.addressed_leaf();
        let mut prefix = 0usize;
        for (level, &sign) in op.address_signs.iter().enumerate() {
            let gate_index = ((1usize << level) - 1) + prefix;
            let gate = &self.gates[gate_index];
            if self.bias_ua < gate.bias_margin_low_ua || self.bias_ua > gate.bias_margin_high_ua {
                return Err(RouteError::OutOfMargin { gate: gate_index, bias_ua: self.bias_ua });
            }
            let p_fail = (gate.error_probability
                + wall(
                    self.bias_ua,
                    gate.bias_margin_low_ua,
                    gate.bias_margin_high_ua,
                    self.config.bias_wall_width_ua,
                )
                + wall(
                    self.address_mphi0,
                    gate.address_window_low_mphi0,
                    gate.address_window_high_mphi0,
                    self.config.address_wall_width_mphi0,
                ))
            .clamp(0.0, 1.0);
            let mut bit = (sign as i32 * op.polarity as i32) > 0;
            if p_fail > 0.0 && self.rng.gen::<f64>() < p_fail {
                if self.rng.gen::<f64>() < self.config.drop_fraction {
                    return Ok(RoutingOutcome::Dropped);
                }
                bit = !bit;
            }
            prefix = (prefix << 1) | bit as usize;
        }
        if prefix == intended {
            Ok(RoutingOutcome::Delivered { leaf: prefix })
        } else {
            Ok(RoutingOutcome::Misrouted { leaf: prefix })
        }
    }
}

/// One probed operating point of a margin scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginPoint {
    pub bias_ua: f64,
    pub address_mphi0: f64,
    /// Fraction of all probe pulses delivered to their addressed leaf.
    pub pass_fraction: f64,
    /// True when every leaf's failure fraction stayed below 0.1.
    pub pass: bool,
}

/// Maximum per-leaf failure fraction tolerated inside the operating
/// region.
pub const MARGIN_FAILURE_LIMIT: f64 = 0.1;

/// Probes every leaf at each grid point and reports which operating
/// points keep all leaves under the failure limit. Points are emitted
/// bias-major. The tree's operating point is restored afterwards.
pub fn margin_scan(
    tree: &mut AddressTree,
    bias_grid: &[f64],
    address_grid: &[f64],
    trials_per_leaf: u32,
) -> Vec<MarginPoint> {
    assert!(trials_per_leaf > 0, "trials_per_leaf must be positive");
    let saved = tree.operating_point();
    let leaves = tree.leaf_count();
    let mut points = Vec::with_capacity(bias_grid.len() * address_grid.len());
    for &bias in bias_grid {
        for &address in address_grid {
            tree.set_operating_point(bias, address);
            let mut pass = true;
            let mut delivered_total = 0u64;
            for leaf in 0..leaves {
                let op = PulseOp::to_leaf(0, tree.config.depth, leaf, 1);
                let mut delivered = 0u64;
                for _ in 0..trials_per_leaf {
                    if matches!(tree.route(&op), Ok(RoutingOutcome::Delivered { leaf: l }) if l == leaf)
                    {
                        delivered += 1;
                    }
                }
                delivered_total += delivered;
                let failure = 1.0 - delivered as f64 / trials_per_leaf as f64;
                if failure >= MARGIN_FAILURE_LIMIT {
                    pass = false;
                }
            }
            points.push(MarginPoint {
                bias_ua: bias,
                address_mphi0: address,
                pass_fraction: delivered_total as f64 / (leaves as u64 * trials_per_leaf as u64) as f64,
                pass,
            });
        }
    }
    tree.set_operating_point(saved.0, saved.1);
    points
}

/// One-sided upper confidence bound on a per-operation error rate after
/// observing `errors` errors in `operations` operations.
pub fn error_upper_bound(operations: u64, errors: u64, confidence: f64) -> Result<f64, DemuxError> {
    if operations == 0 {
        return Err(DemuxError::InvalidArgument("operations must be positive".into()));
    }
    if errors > operations {
        return Err(DemuxError::InvalidArgument("errors exceed operations".into()));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(DemuxError::InvalidArgument("confidence must be in (0, 1)".into()));
    }
    if errors == operations {
        return Ok(1.0);
    }
    if errors == 0 {
        // 1 - (1 - c)^(1/n), computed without cancellation.
        return Ok(-f64::exp_m1((1.0 - confidence).ln() / operations as f64));
    }
    let beta = Beta::new((errors + 1) as f64, (operations - errors) as f64)
        .map_err(|e| DemuxError::InvalidArgument(e.to_string()))?;
    // Invert the (accurate) regularized incomplete beta by bisection
    // rather than relying on the generic quantile search.
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if beta.cdf(mid) < confidence {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// P(X >= min_successes) for X ~ Binomial(programs, exp(ln_q)).
fn program_success_tail(ln_q: f64, programs: u64, min_successes: u64) -> f64 {
    if min_successes == 0 {
        return 1.0;
    }
    let one_minus_q = -f64::exp_m1(ln_q);
    if one_minus_q <= 0.0 {
        return 1.0;
    }
    let ln_1mq = one_minus_q.ln();
    let n = programs as f64;
    let mut total = 0.0;
    for i in min_successes..=programs {
        let x = i as f64;
        let ln_choose = ln_gamma(n + 1.0) - ln_gamma(x + 1.0) - ln_gamma(n - x + 1.0);
        total += (ln_choose + x * ln_q + (n - x) * ln_1mq).exp();
    }
    total.min(1.0)
}

/// Largest per-pulse error probability under which at least
/// `min_successes` of `programs` full programming cycles are error-free
/// with the given confidence. One cycle issues
/// `dac_count * mean_quanta_per_dac` pulses, each of which must route
/// and land correctly.
pub fn per_pulse_error_budget(
    dac_count: u64,
    mean_quanta_per_dac: f64,
    programs: u64,
    min_successes: u64,
    confidence: f64,
) -> Result<f64, DemuxError> {
    if dac_count == 0 || !(mean_quanta_per_dac > 0.0) {
        return Err(DemuxError::InvalidArgument("pulse count must be positive".into()));
    }
    if programs == 0 || min_successes == 0 || min_successes > programs {
        return Err(DemuxError::InvalidArgument(
            "need 1 <= min_successes <= programs".into(),
        ));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(DemuxError::InvalidArgument("confidence must be in (0, 1)".into()));
    }
    let pulses = (dac_count as f64 * mean_quanta_per_dac).round();
    let tail = |p: f64| program_success_tail(pulses * f64::ln_1p(-p), programs, min_successes);
    let mut hi = 1.0 - 1e-12;
    if tail(hi) >= confidence {
        return Ok(hi);
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if tail(mid) >= confidence {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

#[derive(Debug, Clone, PartialEq)]
pub enum DemuxError {
    InvalidConfig(String),
    InvalidArgument(String),
}

impl fmt::Display for DemuxError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DemuxError::InvalidConfig(msg) => write!(f, "tree configuration: {msg}"),
            DemuxError::InvalidArgument(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for DemuxError {}
