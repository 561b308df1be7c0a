//! Expert-selection policies.
//!
//! The router's gating weights say which experts a token *wants*; the
//! policies here decide which it actually *gets*, trading a little routing
//! fidelity for a lot of tail latency when some devices are slow. All
//! policies start from plain Top-K and only ever remove experts from that
//! support, and every token always keeps at least one expert.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latency::{self, TokenLatency};
use crate::num::Real;
use crate::trace::GatingTrace;

/// Which device hosts each expert. The default deployment is one expert per
/// device (`identity(n)`), but uneven placements are representable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertDeviceMap {
    device_of: Vec<usize>,
    num_devices: usize,
}

impl ExpertDeviceMap {
    /// Expert `e` lives on device `e`.
    pub fn identity(n: usize) -> Self {
        Self {
            device_of: (0..n).collect(),
            num_devices: n,
        }
    }

    pub fn new(device_of: Vec<usize>, num_devices: usize) -> Result<Self> {
        if device_of.is_empty() || num_devices == 0 {
            return Err(Error::Config(
                "expert-device map needs at least one expert and one device".into(),
            ));
        }
        if let Some(bad) = device_of.iter().find(|&&d| d >= num_devices) {
            return Err(Error::Config(format!(
                "expert mapped to device {bad}, but only {num_devices} devices exist"
            )));
        }
        Ok(Self {
            device_of,
            num_devices,
        })
    }

    pub fn device_of(&self, expert: usize) -> usize {
        self.device_of[expert]
    }

    pub fn num_experts(&self) -> usize {
        self.device_of.len()
    }

    pub fn num_devices(&self) -> usize {
        self.num_devices
    }

    pub fn is_identity(&self) -> bool {
        self.num_devices == self.device_of.len()
            && self.device_of.iter().enumerate().all(|(e, &d)| e == d)
    }
}

/// Which experts each token of one block is routed to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionMatrix {
    num_tokens: usize,
    num_experts: usize,
    bits: Vec<bool>,
}

impl SelectionMatrix {
    pub fn new_empty(num_tokens: usize, num_experts: usize) -> Self {
        Self {
            num_tokens,
            num_experts,
            bits: vec![false; num_tokens * num_experts],
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn select(&mut self, token: usize, expert: usize) {
        self.bits[token * self.num_experts + expert] = true;
    }

    pub fn deselect(&mut self, token: usize, expert: usize) {
        self.bits[token * self.num_experts + expert] = false;
    }

    pub fn is_selected(&self, token: usize, expert: usize) -> bool {
        self.bits[token * self.num_experts + expert]
    }

    pub fn selected_count(&self, token: usize) -> usize {
        self.row(token).iter().filter(|&&b| b).count()
    }

    pub fn selected_experts(&self, token: usize) -> impl Iterator<Item = usize> + '_ {
        self.row(token)
            .iter()
            .enumerate()
            .filter_map(|(e, &b)| b.then_some(e))
    }

    fn row(&self, token: usize) -> &[bool] {
        &self.bits[token * self.num_experts..(token + 1) * self.num_experts]
    }

    /// Total selected (token, expert) assignments.
    pub fn total_pairs(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Tokens with at least one selected expert on `device`.
    pub fn device_token_count(&self, map: &ExpertDeviceMap, device: usize) -> usize {
        (0..self.num_tokens)
            .filter(|&j| self.selected_experts(j).any(|e| map.device_of(e) == device))
            .count()
    }

    /// Selected (token, expert) assignments living on `device`.
    pub fn device_pair_count(&self, map: &ExpertDeviceMap, device: usize) -> usize {
        (0..self.num_tokens)
            .map(|j| {
                self.selected_experts(j)
                    .filter(|&e| map.device_of(e) == device)
                    .count()
            })
            .sum()
    }

    pub fn every_token_covered(&self) -> bool {
        (0..self.num_tokens).all(|j| self.selected_count(j) >= 1)
    }

    /// True when every assignment here is also present in `other`.
    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.bits
            .iter()
            .zip(other.bits.iter())
            .all(|(&a, &b)| !a || b)
    }
}

/// Per-block selection matrices for a whole forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    blocks: Vec<SelectionMatrix>,
}

impl Selection {
    pub fn new(blocks: Vec<SelectionMatrix>) -> Self {
        Self { blocks }
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, i: usize) -> &SelectionMatrix {
        &self.blocks[i]
    }

    pub fn block_mut(&mut self, i: usize) -> &mut SelectionMatrix {
        &mut self.blocks[i]
    }

    pub fn blocks(&self) -> &[SelectionMatrix] {
        &self.blocks
    }

    pub fn total_pairs(&self) -> usize {
        self.blocks.iter().map(SelectionMatrix::total_pairs).sum()
    }

    pub fn every_token_covered(&self) -> bool {
        self.blocks.iter().all(SelectionMatrix::every_token_covered)
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(other.blocks.iter())
                .all(|(a, b)| a.is_subset_of(b))
    }
}

/// Tuning knobs for [`wdmoe_select`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct SelectionPolicyConfig<T> {
    /// Experts initially routed per token.
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    /// Similarity threshold the drop loop starts from.
    #[serde(default = "default_theta_init")]
    pub theta_init: T,
    /// Threshold increment per escalation pass.
    #[serde(default = "default_theta_step")]
    pub theta_step: T,
    /// Stop escalating once the window WLR exceeds this multiple of its
    /// initial value. `None` disables the escalation loop entirely: the
    /// policy then runs a single drop pass at `theta_init`.
    #[serde(default = "default_wlr_growth")]
    pub wlr_growth: Option<T>,
    /// How many leading blocks the WLR stopping rule watches.
    /// `None` means all blocks.
    #[serde(default)]
    pub wlr_window_blocks: Option<usize>,
}

fn default_top_k() -> usize {
    2
}

fn default_theta_init<T: Real>() -> T {
    T::cast(0.5)
}

fn default_theta_step<T: Real>() -> T {
    T::cast(0.1)
}

fn default_wlr_growth<T: Real>() -> Option<T> {
    Some(T::cast(1.01))
}

impl<T: Real> Default for SelectionPolicyConfig<T> {
    fn default() -> Self {
        Self {
            top_k: default_top_k(),
            theta_init: default_theta_init(),
            theta_step: default_theta_step(),
            wlr_growth: default_wlr_growth(),
            wlr_window_blocks: None,
        }
    }
}

impl<T: Real> SelectionPolicyConfig<T> {
    pub fn validate(&self, num_experts: usize) -> Result<()> {
        if self.top_k == 0 || self.top_k > num_experts {
            return Err(Error::Config(format!(
                "top_k must be in 1..={num_experts}, got {}",
                self.top_k
            )));
        }
        let one = T::one();
        if !(self.theta_init >= -one && self.theta_init <= one) {
            return Err(Error::Config(format!(
                "theta_init must lie in [-1, 1], got {}",
                self.theta_init
            )));
        }
        if !(self.theta_step > T::zero()) {
            return Err(Error::Config(format!(
                "theta_step must be positive, got {}",
                self.theta_step
            )));
        }
        if let Some(g) = self.wlr_growth {
            if !(g > T::zero()) || !g.is_finite() {
                return Err(Error::Config(format!(
                    "wlr_growth must be positive and finite, got {g}"
                )));
            }
        }
        if let Some(w) = self.wlr_window_blocks {
            if w == 0 {
                return Err(Error::Config("wlr_window_blocks must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Cosine similarity of two equal-length vectors.
///
/// Errors on mismatched lengths or a zero-norm input; the angle is
/// undefined there.
pub fn cosine_similarity<T: Real>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Domain(format!(
            "cosine similarity needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut dot = T::zero();
    let mut na = T::zero();
    let mut nb = T::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot = dot + x * y;
        na = na + x * x;
        nb = nb + y * y;
    }
    if !(na > T::zero()) || !(nb > T::zero()) {
        return Err(Error::Domain(
            "cosine similarity is undefined for a zero vector".into(),
        ));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Routes every token to its `k` largest-weight experts. Ties break toward
/// the lower expert index.
pub fn top_k_select<T: Real>(trace: &GatingTrace<T>, k: usize) -> Result<Selection> {
    let n = trace.num_experts();
    if k == 0 || k > n {
        return Err(Error::Domain(format!("top-k must be in 1..={n}, got {k}")));
    }
    let mut blocks = Vec::with_capacity(trace.num_blocks());
    let mut order: Vec<usize> = (0..n).collect();
    for block in 0..trace.num_blocks() {
        let mut m = SelectionMatrix::new_empty(trace.num_tokens(), n);
        for token in 0..trace.num_tokens() {
            let row = trace.row(block, token);
            order.sort_by(|&a, &b| {
                row[b]
                    .partial_cmp(&row[a])
                    .expect("validated weights are comparable")
                    .then(a.cmp(&b))
            });
            for &e in order.iter().take(k) {
                m.select(token, e);
            }
            order.sort_unstable();
        }
        blocks.push(m);
    }
    Ok(Selection::new(blocks))
}

/// What the WLR-driven drop loop did, for diagnostics and invariant checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionStats<T> {
    /// Window WLR of the starting Top-K selection.
    pub initial_window_wlr: T,
    /// Window WLR observed when the growth bound tripped, if it did.
    pub window_wlr_at_stop: Option<T>,
    /// Window WLR of the returned selection.
    pub final_window_wlr: T,
    /// Escalation passes executed (the closing pass not included).
    pub drop_passes: usize,
}

impl<T> SelectionStats<T> {
    pub fn stopped_by_wlr_growth(&self) -> bool {
        self.window_wlr_at_stop.is_some()
    }
}

/// WLR-driven expert selection.
///
/// Starting from Top-K, the policy walks a similarity threshold upward from
/// `theta_init` in steps of `theta_step`. Each pass examines every token
/// still holding at least two experts and compares the token's selected
/// weights against the latencies of the devices serving them (cosine
/// similarity over the selected coordinates only). A token whose weights
/// align poorly with its latencies, `S <= theta`, sheds its lowest-weight
/// expert. Escalation ends when the summed WLR over the leading block
/// window has grown past `wlr_growth` times its initial value, or when a
/// pass finds nothing left to drop; one closing pass at the final threshold
/// applies any last drops.
///
/// Latencies are taken once, up front, from `per_device` and are not
/// re-derived between passes; the WLR bookkeeping is a stopping rule, not a
/// feedback loop.
pub fn wdmoe_select<T: Real>(
    trace: &GatingTrace<T>,
    per_device: &[TokenLatency<T>],
    map: &ExpertDeviceMap,
    cfg: &SelectionPolicyConfig<T>,
) -> Result<Selection> {
    Ok(wdmoe_select_with_stats(trace, per_device, map, cfg)?.0)
}

/// [`wdmoe_select`] plus the loop diagnostics.
pub fn wdmoe_select_with_stats<T: Real>(
    trace: &GatingTrace<T>,
    per_device: &[TokenLatency<T>],
    map: &ExpertDeviceMap,
    cfg: &SelectionPolicyConfig<T>,
) -> Result<(Selection, SelectionStats<T>)> {
    cfg.validate(trace.num_experts())?;
    check_topology(trace, per_device, map)?;
    for (k, t) in per_device.iter().enumerate() {
        if !t.total_s.is_finite() || !(t.total_s > T::zero()) {
            return Err(Error::Domain(format!(
                "selection requires finite positive device latencies, device {k} has {}",
                t.total_s
            )));
        }
    }
    let expert_latency: Vec<T> = (0..trace.num_experts())
        .map(|e| per_device[map.device_of(e)].total_s)
        .collect();

    let mut sel = top_k_select(trace, cfg.top_k)?;
    let window = cfg
        .wlr_window_blocks
        .unwrap_or(usize::MAX)
        .min(trace.num_blocks());
    let initial = window_wlr(&sel, trace, per_device, map, window);
    let mut stats = SelectionStats {
        initial_window_wlr: initial,
        window_wlr_at_stop: None,
        final_window_wlr: initial,
        drop_passes: 0,
    };

    let mut theta = cfg.theta_init;
    if let Some(growth) = cfg.wlr_growth {
        let bound = growth * initial;
        loop {
            let current = window_wlr(&sel, trace, per_device, map, window);
            if current > bound {
                stats.window_wlr_at_stop = Some(current);
                break;
            }
            let drops = drop_pass(&mut sel, trace, &expert_latency, theta);
            stats.drop_passes += 1;
            theta = theta + cfg.theta_step;
            if drops == 0 {
                // The threshold stopped discriminating; escalation is over.
                break;
            }
        }
    }
    drop_pass(&mut sel, trace, &expert_latency, theta);
    stats.final_window_wlr = window_wlr(&sel, trace, per_device, map, window);

    debug_assert!(sel.every_token_covered());
    Ok((sel, stats))
}

fn check_topology<T: Real>(
    trace: &GatingTrace<T>,
    per_device: &[TokenLatency<T>],
    map: &ExpertDeviceMap,
) -> Result<()> {
    if map.num_experts() != trace.num_experts() {
        return Err(Error::Config(format!(
            "map covers {} experts, trace has {}",
            map.num_experts(),
            trace.num_experts()
        )));
    }
    if per_device.len() != map.num_devices() {
        return Err(Error::Config(format!(
            "{} device latencies supplied, map expects {}",
            per_device.len(),
            map.num_devices()
        )));
    }
    Ok(())
}

/// Summed WLR over all devices and the first `window` blocks.
fn window_wlr<T: Real>(
    sel: &Selection,
    trace: &GatingTrace<T>,
    per_device: &[TokenLatency<T>],
    map: &ExpertDeviceMap,
    window: usize,
) -> T {
    let mut total = T::zero();
    for block in 0..window {
        for (device, t) in per_device.iter().enumerate() {
            total = total + latency::wlr(sel.block(block), trace, block, device, map, t);
        }
    }
    total
}

/// One similarity sweep: every token with two or more experts whose
/// selected weights align with their latencies no better than `theta`
/// sheds its lowest-weight expert. Returns the number of drops.
fn drop_pass<T: Real>(
    sel: &mut Selection,
    trace: &GatingTrace<T>,
    expert_latency: &[T],
    theta: T,
) -> usize {
    let mut drops = 0;
    for block in 0..sel.num_blocks() {
        let m = sel.block_mut(block);
        for token in 0..m.num_tokens() {
            if m.selected_count(token) < 2 {
                continue;
            }
            let row = trace.row(block, token);
            let mut w = Vec::with_capacity(4);
            let mut t = Vec::with_capacity(4);
            let mut victim: Option<(T, usize)> = None;
            for e in m.selected_experts(token) {
                w.push(row[e]);
                t.push(expert_latency[e]);
                let better = match victim {
                    None => true,
                    Some((bw, be)) => row[e] < bw || (row[e] == bw && e < be),
                };
                if better {
                    victim = Some((row[e], e));
                }
            }
            // Selected weights always include the row maximum, so the norm
            // cannot vanish; treat the impossible case as maximal alignment.
            let s = cosine_similarity(&w, &t).unwrap_or_else(|_| T::one());
            if s <= theta {
                let (_, e) = victim.expect("token has at least two experts");
                m.deselect(token, e);
                drops += 1;
            }
        }
    }
    drops
}

/// Running per-token latency estimate for each device, fed by observed
/// wall-clock measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyHistory<T> {
    observed_s: Vec<T>,
    tokens: Vec<u64>,
}

impl<T: Real> LatencyHistory<T> {
    pub fn new(num_devices: usize) -> Self {
        Self {
            observed_s: vec![T::zero(); num_devices],
            tokens: vec![0; num_devices],
        }
    }

    pub fn num_devices(&self) -> usize {
        self.tokens.len()
    }

    /// Folds one observation into the running mean: `observed_s` of wall
    /// clock spent serving `tokens_processed` tokens on `device`.
    pub fn record(&mut self, device: usize, observed_s: T, tokens_processed: u64) {
        assert!(tokens_processed >= 1, "an observation covers >= 1 token");
        assert!(
            observed_s >= T::zero() && observed_s.is_finite(),
            "observed latency must be finite and nonnegative"
        );
        self.observed_s[device] = self.observed_s[device] + observed_s;
        self.tokens[device] += tokens_processed;
    }

    /// Mean per-token latency of `device`, or `None` before any sample.
    pub fn mean_latency_s(&self, device: usize) -> Option<T> {
        (self.tokens[device] > 0)
            .then(|| self.observed_s[device] / T::cast(self.tokens[device] as f64))
    }
}

/// Quartile convention used by [`testbed_select`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuartileRule {
    /// Linear interpolation between order statistics at rank `(n-1) * p`.
    Interpolated,
    /// The order statistic at rank `ceil(n * p)`. Kept for the verification
    /// harness, which must detect a solver built on the wrong convention.
    NearestRank,
}

/// A quantile of `sorted` (ascending) at probability `p`.
fn quantile<T: Real>(sorted: &[T], p: f64, rule: QuartileRule) -> T {
    debug_assert!(!sorted.is_empty());
    match rule {
        QuartileRule::Interpolated => {
            let h = (sorted.len() - 1) as f64 * p;
            let lo = h.floor() as usize;
            let frac = T::cast(h - lo as f64);
            if lo + 1 < sorted.len() {
                sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
            } else {
                sorted[lo]
            }
        }
        QuartileRule::NearestRank => {
            let rank = (p * sorted.len() as f64).ceil() as usize;
            sorted[rank.saturating_sub(1).min(sorted.len() - 1)]
        }
    }
}

/// Measurement-driven selection for live deployments.
///
/// Where [`wdmoe_select`] needs channel-model latencies, this variant only
/// needs the running per-device means in `history`. Tokens start on their
/// top two experts; the predicted completion time of each device is its
/// mean per-token latency times its token count. If the slowest device
/// overshoots 1.5x the third quartile of those predictions, it sheds up to
/// `floor((t_max - q3) / mean)` tokens, choosing among tokens for which
/// this device holds the row's smallest selected weight and that weight is
/// under a fifth of the device's total selected mass; the smallest weights
/// go first. Everything else keeps its Top-2 routing.
pub fn testbed_select<T: Real>(
    trace: &GatingTrace<T>,
    block: usize,
    history: &LatencyHistory<T>,
    map: &ExpertDeviceMap,
) -> Result<SelectionMatrix> {
    testbed_select_with_quartile(trace, block, history, map, QuartileRule::Interpolated)
}

/// [`testbed_select`] with an explicit quartile convention.
pub fn testbed_select_with_quartile<T: Real>(
    trace: &GatingTrace<T>,
    block: usize,
    history: &LatencyHistory<T>,
    map: &ExpertDeviceMap,
    rule: QuartileRule,
) -> Result<SelectionMatrix> {
    if !map.is_identity() {
        return Err(Error::Config(
            "testbed selection assumes one expert per device (identity map)".into(),
        ));
    }
    if map.num_experts() != trace.num_experts() {
        return Err(Error::Config(format!(
            "map covers {} experts, trace has {}",
            map.num_experts(),
            trace.num_experts()
        )));
    }
    if block >= trace.num_blocks() {
        return Err(Error::Domain(format!(
            "block {block} out of range, trace has {}",
            trace.num_blocks()
        )));
    }
    let num_devices = map.num_devices();
    if history.num_devices() != num_devices {
        return Err(Error::Config(format!(
            "history tracks {} devices, map expects {num_devices}",
            history.num_devices()
        )));
    }
    let mut mean = Vec::with_capacity(num_devices);
    for k in 0..num_devices {
        mean.push(
            history
                .mean_latency_s(k)
                .ok_or_else(|| Error::Domain(format!("device {k} has no latency samples yet")))?,
        );
    }

    let sel = top_k_select(trace, 2.min(trace.num_experts()))?;
    let mut m = sel.block(block).clone();

    // Predicted completion time per device under the current assignment.
    let predicted: Vec<T> = (0..num_devices)
        .map(|k| mean[k] * T::cast(m.device_token_count(map, k) as f64))
        .collect();
    let bottleneck = predicted
        .iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.partial_cmp(b).unwrap().then(j.cmp(i)))
        .map(|(k, _)| k)
        .expect("at least one device");
    let mut sorted = predicted.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q3 = quantile(&sorted, 0.75, rule);

    if !(predicted[bottleneck] > T::cast(1.5) * q3) {
        return Ok(m);
    }

    let budget = ((predicted[bottleneck] - q3) / mean[bottleneck])
        .floor()
        .to_f64_lossy() as usize;
    if budget == 0 {
        return Ok(m);
    }

    // Total selected gating mass the bottleneck serves in this block.
    let mut device_mass = T::zero();
    for token in 0..m.num_tokens() {
        if m.is_selected(token, bottleneck) {
            device_mass = device_mass + trace.weight(block, token, bottleneck);
        }
    }
    let mass_cutoff = device_mass / T::cast(5.0);

    // A token is droppable when the bottleneck holds its smallest selected
    // weight and that weight is marginal relative to the device's load.
    let mut candidates: Vec<(T, usize)> = Vec::new();
    for token in 0..m.num_tokens() {
        if m.selected_count(token) < 2 || !m.is_selected(token, bottleneck) {
            continue;
        }
        let row = trace.row(block, token);
        let min_expert = m
            .selected_experts(token)
            .min_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap().then(a.cmp(&b)))
            .expect("token has selected experts");
        if min_expert == bottleneck && row[bottleneck] < mass_cutoff {
            candidates.push((row[bottleneck], token));
        }
    }
    candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    for &(_, token) in candidates.iter().take(budget) {
        m.deselect(token, bottleneck);
    }

    debug_assert!(m.every_token_covered());
    Ok(m)
}
