//! Per-token latency model and the weight-to-latency ratio (WLR).
//!
//! A token routed to an expert on device `k` costs one downlink transfer of
//! its activation, one expert forward pass on the device, and one uplink
//! transfer back. Within a block a device processes its tokens serially, so
//! the device's block latency is its per-token latency times its token
//! count, and the block as a whole waits for the slowest device before
//! attention can resume.

use serde::{Deserialize, Serialize};

use crate::channel::{downlink_rate, uplink_rate, ChannelState, DeviceProfile, RadioConfig};
use crate::error::{Error, Result};
use crate::num::Real;
use crate::selection::{ExpertDeviceMap, SelectionMatrix};
use crate::trace::GatingTrace;

/// Transformer dimensions that determine transfer sizes and expert FLOPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Token embedding width `m`.
    pub embed_dim: usize,
    /// Expert hidden width `m_h`.
    pub hidden_dim: usize,
    /// Bits per transferred activation element (8, 16, or 32).
    pub quant_bits: u32,
    /// FLOPs the activation function spends per hidden element.
    pub act_flops_per_elem: u32,
    /// Number of MoE blocks in the model.
    pub num_blocks: usize,
    /// Experts per block.
    pub num_experts: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(
                "embedding and hidden dimensions must be positive".into(),
            ));
        }
        if !matches!(self.quant_bits, 8 | 16 | 32) {
            return Err(Error::Config(format!(
                "quant_bits must be 8, 16, or 32, got {}",
                self.quant_bits
            )));
        }
        if self.num_blocks == 0 || self.num_experts == 0 {
            return Err(Error::Config(
                "block and expert counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Bits moved per token in each direction: `quant_bits * embed_dim`.
pub fn token_comm_bits(dims: &ModelDims) -> u64 {
    u64::from(dims.quant_bits) * dims.embed_dim as u64
}

/// FLOPs of one expert forward pass on one token.
///
/// Two `m x m_h` projections cost `4 m m_h` multiply-adds, the down
/// projection back costs `2 m_h m`, the activation costs
/// `act_flops_per_elem * m_h`, and the gate multiply costs `m_h`:
///
/// ```text
/// 4 m m_h + 2 m_h m + act * m_h + m_h
/// ```
pub fn expert_flops(dims: &ModelDims) -> u64 {
    let m = dims.embed_dim as u64;
    let mh = dims.hidden_dim as u64;
    4 * m * mh + 2 * mh * m + u64::from(dims.act_flops_per_elem) * mh + mh
}

/// Latency components for routing one token to one device, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenLatency<T> {
    /// Downlink plus uplink transfer time.
    pub comm_s: T,
    /// Expert forward-pass time.
    pub comp_s: T,
    /// `comm_s + comp_s`.
    pub total_s: T,
}

/// Per-token latency of a device under a given bandwidth share.
///
/// A zero share makes the device unreachable; both transfer terms become
/// the infinite sentinel rather than an error, which lets optimizers probe
/// the boundary of the feasible region without special cases.
pub fn token_latency<T: Real>(
    dims: &ModelDims,
    bandwidth_hz: T,
    profile: &DeviceProfile<T>,
    channel: &ChannelState<T>,
    radio: &RadioConfig<T>,
) -> TokenLatency<T> {
    let bits = T::cast(token_comm_bits(dims) as f64);
    let flops = T::cast(expert_flops(dims) as f64);
    let comp_s = flops / profile.compute_flops;
    let down = downlink_rate(bandwidth_hz, profile, channel, radio);
    let up = uplink_rate(bandwidth_hz, profile, channel, radio);
    let comm_s = if down > T::zero() && up > T::zero() {
        bits / down + bits / up
    } else {
        T::infinity()
    };
    TokenLatency {
        comm_s,
        comp_s,
        total_s: comm_s + comp_s,
    }
}

/// Block latency of one device: transfer time for each distinct token it
/// serves plus compute time for each (token, expert) assignment it holds.
///
/// With a one-to-one expert-device map both counts coincide and this is
/// exactly (tokens on device) x (comm + comp). Idle devices cost 0 even
/// when their per-token latency is the infinite sentinel.
pub fn device_block_latency<T: Real>(
    selection: &SelectionMatrix,
    device: usize,
    map: &ExpertDeviceMap,
    per_token: &TokenLatency<T>,
) -> T {
    let distinct = selection.device_token_count(map, device);
    let pairs = selection.device_pair_count(map, device);
    if distinct == 0 {
        return T::zero();
    }
    T::cast(distinct as f64) * per_token.comm_s + T::cast(pairs as f64) * per_token.comp_s
}

/// Weight-to-latency ratio of one device within one block: the gating mass
/// it serves divided by the time it needs to serve it. Idle devices score 0.
pub fn wlr<T: Real>(
    selection: &SelectionMatrix,
    trace: &GatingTrace<T>,
    block: usize,
    device: usize,
    map: &ExpertDeviceMap,
    per_token: &TokenLatency<T>,
) -> T {
    let latency = device_block_latency(selection, device, map, per_token);
    if !(latency > T::zero()) {
        return T::zero();
    }
    let mut mass = T::zero();
    for token in 0..selection.num_tokens() {
        for expert in selection.selected_experts(token) {
            if map.device_of(expert) == device {
                mass = mass + trace.weight(block, token, expert);
            }
        }
    }
    mass / latency
}

/// Latency the attention layer waits for: the slowest device in the block.
///
/// Errors on an empty vector; a block with no devices has no latency.
pub fn attention_waiting_latency<T: Real>(per_device_s: &[T]) -> Result<T> {
    per_device_s
        .iter()
        .copied()
        .reduce(T::max)
        .ok_or_else(|| Error::Domain("attention latency over zero devices".into()))
}
