//! Monte Carlo simulation of distributed expert inference over a shared
//! radio cell.
//!
//! A [`Scenario`] fixes the radio, the device fleet, the model shape, and a
//! policy; [`run`] replays a gating trace against it for a number of
//! independently faded batches and aggregates latency statistics. Batches
//! draw their fading from per-batch RNG streams, so results do not depend
//! on how the batch loop is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocator::{allocate_with_options, BandwidthAllocation, SolverOptions};
use crate::channel::{nominal_channel, sample_channel, ChannelState, DeviceProfile, RadioConfig};
use crate::error::{Error, Result};
use crate::latency::{
    attention_waiting_latency, device_block_latency, token_latency, wlr, ModelDims, TokenLatency,
};
use crate::num::Real;
use crate::selection::{
    testbed_select, top_k_select, wdmoe_select, ExpertDeviceMap, LatencyHistory, Selection,
    SelectionPolicyConfig,
};
use crate::trace::GatingTrace;

/// Which expert-selection and bandwidth strategy a run uses.
///
/// The two `wdmoe_no_*` variants ablate one optimization each, keeping the
/// other, so the contribution of either can be read off a four-way run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Plain top-2 gating with an even bandwidth split.
    BaselineTop2Uniform,
    /// Latency-aware selection plus optimized bandwidth.
    WdmoeFull,
    /// Plain top-k gating, bandwidth still optimized.
    WdmoeNoSelection,
    /// Latency-aware selection, bandwidth split evenly.
    WdmoeNoBandwidth,
    /// The measurement-driven token-shedding heuristic; even split,
    /// one expert per device.
    Testbed,
}

impl Policy {
    /// Every policy, in ablation-grid order.
    pub fn all() -> [Policy; 5] {
        [
            Policy::BaselineTop2Uniform,
            Policy::WdmoeFull,
            Policy::WdmoeNoSelection,
            Policy::WdmoeNoBandwidth,
            Policy::Testbed,
        ]
    }

    /// The serialized name, stable across versions.
    pub fn name(self) -> &'static str {
        match self {
            Policy::BaselineTop2Uniform => "baseline_top2_uniform",
            Policy::WdmoeFull => "wdmoe_full",
            Policy::WdmoeNoSelection => "wdmoe_no_selection",
            Policy::WdmoeNoBandwidth => "wdmoe_no_bandwidth",
            Policy::Testbed => "testbed",
        }
    }
}

/// How channel gains evolve across batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FadingMode {
    /// Fresh Rayleigh draws per batch: the Monte Carlo setting.
    PerBatch,
    /// One Rayleigh draw reused by every batch.
    Frozen,
    /// No fading at all; gains pinned at the path-loss mean. Useful for
    /// symmetric fixtures and hand-checkable numbers.
    Nominal,
}

/// A complete simulation setup minus the gating trace.
#[derive(Debug, Clone)]
pub struct Scenario<T> {
    pub radio: RadioConfig<T>,
    pub devices: Vec<DeviceProfile<T>>,
    pub dims: ModelDims,
    pub map: ExpertDeviceMap,
    pub policy: Policy,
    pub seed: u64,
    pub batches: usize,
    pub fading: FadingMode,
    pub selection: SelectionPolicyConfig<T>,
}

impl<T: Real> Scenario<T> {
    /// Checks internal consistency and compatibility with `trace`.
    pub fn validate(&self, trace: &GatingTrace<T>) -> Result<()> {
        self.radio.validate()?;
        self.dims.validate()?;
        if self.devices.is_empty() {
            return Err(Error::Config("a scenario needs at least one device".into()));
        }
        for (k, d) in self.devices.iter().enumerate() {
            d.validate()?;
            if d.id != k {
                return Err(Error::Config(format!(
                    "device at position {k} has id {}; ids must equal positions",
                    d.id
                )));
            }
        }
        if self.devices.len() != self.map.num_devices() {
            return Err(Error::Config(format!(
                "{} devices but the expert map expects {}",
                self.devices.len(),
                self.map.num_devices()
            )));
        }
        if self.map.num_experts() != self.dims.num_experts {
            return Err(Error::Config(format!(
                "expert map covers {} experts, model has {}",
                self.map.num_experts(),
                self.dims.num_experts
            )));
        }
        if trace.num_experts() != self.dims.num_experts {
            return Err(Error::Config(format!(
                "trace has {} experts, model has {}",
                trace.num_experts(),
                self.dims.num_experts
            )));
        }
        if trace.num_blocks() != self.dims.num_blocks {
            return Err(Error::Config(format!(
                "trace has {} blocks, model has {}",
                trace.num_blocks(),
                self.dims.num_blocks
            )));
        }
        if self.batches == 0 {
            return Err(Error::Config("a run needs at least one batch".into()));
        }
        self.selection.validate(self.dims.num_experts)?;
        if self.policy == Policy::Testbed && !self.map.is_identity() {
            return Err(Error::Config(
                "the testbed policy assumes one expert per device (identity map)".into(),
            ));
        }
        Ok(())
    }
}

/// Aggregated outcome of one policy over all batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct LatencyReport<T> {
    pub policy: Policy,
    pub batches: usize,
    /// Mean attention-waiting latency per block, seconds.
    pub per_block_latency_s: Vec<T>,
    /// Mean total latency across batches, seconds.
    pub total_latency_s: T,
    /// Half-width of the 95% confidence interval on the total, zero for a
    /// single batch.
    pub total_latency_ci95_s: T,
    /// Mean over batches of the summed per-device WLR across blocks.
    pub wlr_total: T,
    /// Mean number of (token, expert) assignments across batches.
    pub active_pairs: f64,
    /// The bandwidth split actually used, one entry per batch.
    pub allocations: Vec<BandwidthAllocation<T>>,
}

/// Everything one batch produces before aggregation.
struct BatchOutcome<T> {
    per_block_s: Vec<T>,
    total_s: T,
    wlr_total: T,
    pairs: usize,
    allocation: BandwidthAllocation<T>,
}

/// Simulates `scenario` against `trace` and aggregates across batches.
pub fn run<T: Real>(scenario: &Scenario<T>, trace: &GatingTrace<T>) -> Result<LatencyReport<T>> {
    scenario.validate(trace)?;
    let outcomes: Result<Vec<BatchOutcome<T>>> = (0..scenario.batches)
        .into_par_iter()
        .map(|batch| run_batch(scenario, trace, batch as u64))
        .collect();
    let outcomes = outcomes?;

    let nb = T::cast(scenario.batches as f64);
    let num_blocks = trace.num_blocks();
    let mut per_block = vec![T::zero(); num_blocks];
    let mut total = T::zero();
    let mut wlr_total = T::zero();
    let mut pairs = 0.0f64;
    for o in &outcomes {
        for (acc, &v) in per_block.iter_mut().zip(o.per_block_s.iter()) {
            *acc = *acc + v;
        }
        total = total + o.total_s;
        wlr_total = wlr_total + o.wlr_total;
        pairs += o.pairs as f64;
    }
    for acc in per_block.iter_mut() {
        *acc = *acc / nb;
    }
    let mean_total = total / nb;

    let ci95 = if scenario.batches >= 2 {
        let mut var = T::zero();
        for o in &outcomes {
            let d = o.total_s - mean_total;
            var = var + d * d;
        }
        var = var / T::cast((scenario.batches - 1) as f64);
        T::cast(1.96) * var.sqrt() / nb.sqrt()
    } else {
        T::zero()
    };

    Ok(LatencyReport {
        policy: scenario.policy,
        batches: scenario.batches,
        per_block_latency_s: per_block,
        total_latency_s: mean_total,
        total_latency_ci95_s: ci95,
        wlr_total: wlr_total / nb,
        active_pairs: pairs / scenario.batches as f64,
        allocations: outcomes.into_iter().map(|o| o.allocation).collect(),
    })
}

/// Channel states for one batch under the scenario's fading mode.
///
/// Each batch derives its draws from stream `batch` of the scenario seed,
/// so the result is independent of scheduling order.
fn batch_channels<T: Real>(scenario: &Scenario<T>, batch: u64) -> Result<Vec<ChannelState<T>>> {
    match scenario.fading {
        FadingMode::Nominal => scenario
            .devices
            .iter()
            .map(|d| nominal_channel(d, &scenario.radio))
            .collect(),
        FadingMode::PerBatch | FadingMode::Frozen => {
            let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
            if scenario.fading == FadingMode::PerBatch {
                rng.set_stream(batch);
            }
            scenario
                .devices
                .iter()
                .map(|d| sample_channel(d, &scenario.radio, &mut rng))
                .collect()
        }
    }
}

fn run_batch<T: Real>(
    scenario: &Scenario<T>,
    trace: &GatingTrace<T>,
    batch: u64,
) -> Result<BatchOutcome<T>> {
    let num_devices = scenario.devices.len();
    let channels = batch_channels(scenario, batch)?;
    let uniform = BandwidthAllocation::uniform(scenario.radio.total_bandwidth_hz, num_devices);
    let latencies_at = |shares: &[T]| -> Vec<TokenLatency<T>> {
        (0..num_devices)
            .map(|k| {
                token_latency(
                    &scenario.dims,
                    shares[k],
                    &scenario.devices[k],
                    &channels[k],
                    &scenario.radio,
                )
            })
            .collect()
    };
    let uniform_latencies = latencies_at(&uniform.shares_hz);

    let selection = match scenario.policy {
        Policy::BaselineTop2Uniform => top_k_select(trace, 2)?,
        Policy::WdmoeNoSelection => top_k_select(trace, scenario.selection.top_k)?,
        Policy::WdmoeFull | Policy::WdmoeNoBandwidth => wdmoe_select(
            trace,
            &uniform_latencies,
            &scenario.map,
            &scenario.selection,
        )?,
        Policy::Testbed => testbed_selection(scenario, trace, &uniform_latencies)?,
    };

    let allocation = match scenario.policy {
        Policy::WdmoeFull | Policy::WdmoeNoSelection => {
            let (alloc, _) = allocate_with_options(
                &selection,
                &scenario.devices,
                &channels,
                &scenario.dims,
                &scenario.radio,
                &scenario.map,
                &SolverOptions::default(),
            )?;
            alloc
        }
        _ => uniform,
    };

    let per_token = latencies_at(&allocation.shares_hz);
    let mut per_block_s = Vec::with_capacity(trace.num_blocks());
    let mut wlr_total = T::zero();
    let mut device_latencies = vec![T::zero(); num_devices];
    for block in 0..trace.num_blocks() {
        let m = selection.block(block);
        for (k, slot) in device_latencies.iter_mut().enumerate() {
            *slot = device_block_latency(m, k, &scenario.map, &per_token[k]);
        }
        per_block_s.push(attention_waiting_latency(&device_latencies)?);
        for k in 0..num_devices {
            wlr_total = wlr_total + wlr(m, trace, block, k, &scenario.map, &per_token[k]);
        }
    }
    let total_s = per_block_s.iter().copied().sum();

    Ok(BatchOutcome {
        per_block_s,
        total_s,
        wlr_total,
        pairs: selection.total_pairs(),
        allocation,
    })
}

/// Runs the shedding heuristic block by block.
///
/// The latency history is warmed with one calibration sample per device
/// (its per-token latency under fading-free gains and an even split), then
/// updated with the latencies each block would observe under the live
/// channels. History is per batch: batches model independent trials.
fn testbed_selection<T: Real>(
    scenario: &Scenario<T>,
    trace: &GatingTrace<T>,
    live_latencies: &[TokenLatency<T>],
) -> Result<Selection> {
    let num_devices = scenario.devices.len();
    let uniform_share = scenario.radio.total_bandwidth_hz / T::cast(num_devices as f64);
    let mut history = LatencyHistory::new(num_devices);
    for k in 0..num_devices {
        let calm = nominal_channel(&scenario.devices[k], &scenario.radio)?;
        let t = token_latency(
            &scenario.dims,
            uniform_share,
            &scenario.devices[k],
            &calm,
            &scenario.radio,
        );
        history.record(k, t.total_s, 1);
    }
    let mut blocks = Vec::with_capacity(trace.num_blocks());
    for block in 0..trace.num_blocks() {
        let m = testbed_select(trace, block, &history, &scenario.map)?;
        for k in 0..num_devices {
            let tokens = m.device_token_count(&scenario.map, k);
            if tokens > 0 {
                let observed = device_block_latency(&m, k, &scenario.map, &live_latencies[k]);
                history.record(k, observed, tokens as u64);
            }
        }
        blocks.push(m);
    }
    Ok(Selection::new(blocks))
}

/// One point of a bandwidth sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct SweepPoint<T> {
    pub bandwidth_hz: T,
    pub report: LatencyReport<T>,
}

/// Reruns `scenario` at `points` evenly spaced total bandwidths from
/// `b_min_hz` to `b_max_hz` inclusive.
pub fn sweep_bandwidth<T: Real>(
    scenario: &Scenario<T>,
    trace: &GatingTrace<T>,
    b_min_hz: T,
    b_max_hz: T,
    points: usize,
) -> Result<Vec<SweepPoint<T>>> {
    if points < 2 {
        return Err(Error::Config(format!(
            "a sweep needs at least 2 points, got {points}"
        )));
    }
    if !(b_min_hz > T::zero()) || !(b_max_hz > b_min_hz) {
        return Err(Error::Config(
            "sweep bounds must satisfy 0 < b_min < b_max".into(),
        ));
    }
    let span = b_max_hz - b_min_hz;
    let denom = T::cast((points - 1) as f64);
    (0..points)
        .map(|i| {
            let bandwidth_hz = b_min_hz + span * T::cast(i as f64) / denom;
            let mut s = scenario.clone();
            s.radio.total_bandwidth_hz = bandwidth_hz;
            Ok(SweepPoint {
                bandwidth_hz,
                report: run(&s, trace)?,
            })
        })
        .collect()
}

/// Fraction of possible (token, expert) assignments a selection keeps.
pub fn expert_pair_ratio(selection: &Selection) -> f64 {
    let mut possible = 0usize;
    let mut pairs = 0usize;
    for m in selection.blocks() {
        possible += m.num_tokens() * m.num_experts();
        pairs += m.total_pairs();
    }
    if possible == 0 {
        0.0
    } else {
        pairs as f64 / possible as f64
    }
}

/// A heterogeneous reference setup: eight single-expert devices spread
/// from 10 m to 395 m with a fourfold compute spread, so both link quality
/// and compute speed vary across the fleet.
pub fn reference_scenario<T: Real>(policy: Policy) -> Scenario<T> {
    let num_devices = 8;
    let devices = (0..num_devices)
        .map(|k| DeviceProfile {
            id: k,
            distance_m: T::cast(10.0 + 55.0 * k as f64),
            p_down_w: T::cast(2.0),
            p_up_w: T::cast(0.1),
            compute_flops: T::cast(if k % 2 == 0 { 5.0e12 } else { 1.25e12 }),
        })
        .collect();
    Scenario {
        radio: RadioConfig::default(),
        devices,
        dims: ModelDims {
            embed_dim: 1024,
            hidden_dim: 4096,
            quant_bits: 16,
            act_flops_per_elem: 4,
            num_blocks: 8,
            num_experts: num_devices,
        },
        map: ExpertDeviceMap::identity(num_devices),
        policy,
        seed: 7,
        batches: 16,
        fading: FadingMode::PerBatch,
        selection: SelectionPolicyConfig::default(),
    }
}

/// A gating trace sized for [`reference_scenario`], with enough skew that
/// expert popularity differs strongly across devices.
pub fn reference_trace<T: Real>(seed: u64) -> GatingTrace<T> {
    crate::trace::synth_trace(seed, 8, 16, 8, 3.5).expect("reference dimensions are valid")
}
