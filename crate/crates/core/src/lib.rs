//! Deterministic simulator and optimization library for wireless
//! distributed mixture-of-experts inference.
//!
//! A base station runs a transformer's attention layers and gating
//! networks; the experts of each MoE block live on mobile devices reached
//! over fading wireless links. Serving a batch then costs, per block, a
//! downlink broadcast of activations, expert forward passes on the
//! devices, and an uplink collection, all gated by the slowest device.
//! This crate models those latencies and optimizes the two levers the base
//! station controls:
//!
//! * **Expert selection** ([`selection`]): start from the router's Top-K
//!   choices and drop low-value (token, expert) assignments whose weights
//!   align poorly with device latencies, guided by each device's
//!   weight-to-latency ratio (WLR).
//! * **Bandwidth allocation** ([`allocator`]): split the shared spectrum
//!   across devices by minimizing the convex total-latency objective over
//!   the bandwidth simplex.
//!
//! [`channel`] holds the link physics, [`latency`] the cost model,
//! [`trace`] gating-weight traces and their binary format, [`oracle`]
//! brute-force baselines the optimizers are tested against, [`simulator`]
//! seeded end-to-end runs with policy ablations, and [`verify`] a
//! self-check suite wired for fault injection.
//!
//! All numeric code is generic over the scalar type through [`num::Real`];
//! `f64` is the precision the command-line tools use, with aliases like
//! [`Scenario64`] exported here for convenience.

// Guards are written `!(x > 0)` on purpose so NaN fails them along with the
// out-of-range values, and index loops over parallel arrays stay loops to
// mirror the formulas they implement.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod allocator;
pub mod channel;
pub mod error;
pub mod latency;
pub mod num;
pub mod oracle;
pub mod selection;
pub mod simulator;
pub mod trace;
pub mod verify;

pub use error::{Error, Result};
pub use num::Real;

/// `f64` instantiations of the main configuration and report types.
pub type RadioConfig64 = channel::RadioConfig<f64>;
pub type DeviceProfile64 = channel::DeviceProfile<f64>;
pub type ChannelState64 = channel::ChannelState<f64>;
pub type GatingTrace64 = trace::GatingTrace<f64>;
pub type TokenLatency64 = latency::TokenLatency<f64>;
pub type SelectionPolicyConfig64 = selection::SelectionPolicyConfig<f64>;
pub type BandwidthAllocation64 = allocator::BandwidthAllocation<f64>;
pub type SolverReport64 = allocator::SolverReport<f64>;
pub type Scenario64 = simulator::Scenario<f64>;
pub type LatencyReport64 = simulator::LatencyReport<f64>;
