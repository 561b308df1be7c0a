//! JSON run configuration: schema, loading, and scenario assembly.
//!
//! A config describes one fleet and model plus the list of policies to
//! run on them. All physical quantities carry SI unit suffixes (`_hz`,
//! `_w`, `_m`, `_s`). Minimal example:
//!
//! ```json
//! {
//!   "radio": { "carrier_ghz": 3.5, "noise_psd_dbm_hz": -174.0, "total_bandwidth_hz": 1.0e8 },
//!   "devices": [
//!     { "id": 0, "distance_m": 50.0, "p_down_w": 2.0, "p_up_w": 0.1, "compute_flops": 5.0e12 },
//!     { "id": 1, "distance_m": 120.0, "p_down_w": 2.0, "p_up_w": 0.1, "compute_flops": 1.25e12 }
//!   ],
//!   "dims": { "embed_dim": 1024, "hidden_dim": 4096, "quant_bits": 16,
//!             "act_flops_per_elem": 4, "num_blocks": 2, "num_experts": 2 },
//!   "policies": ["baseline_top2_uniform", "wdmoe_full"],
//!   "seed": 7,
//!   "batches": 16,
//!   "trace": { "synth": { "seed": 11, "blocks": 2, "tokens": 16, "experts": 2, "peakedness": 3.5 } }
//! }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use wdmoe_core::channel::{DeviceProfile, RadioConfig};
use wdmoe_core::latency::ModelDims;
use wdmoe_core::selection::{ExpertDeviceMap, SelectionPolicyConfig};
use wdmoe_core::simulator::{FadingMode, Policy, Scenario};
use wdmoe_core::trace::{load_trace, synth_trace, GatingTrace};

/// One simulation run as described by a config file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub radio: RadioConfig<f64>,
    pub devices: Vec<DeviceProfile<f64>>,
    pub dims: ModelDims,
    pub policies: Vec<Policy>,
    pub seed: u64,
    pub batches: usize,
    /// Channel evolution across batches; fresh fading per batch when omitted.
    #[serde(default = "default_fading")]
    pub fading: FadingMode,
    pub trace: TraceSource,
    /// Expert-to-device assignment; identity when omitted.
    #[serde(default)]
    pub expert_device_map: Option<Vec<usize>>,
    /// Drop-policy tuning; library defaults when omitted.
    #[serde(default)]
    pub selection: Option<SelectionPolicyConfig<f64>>,
    /// Output directory; the `--out-dir` flag wins over this.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_fading() -> FadingMode {
    FadingMode::PerBatch
}

/// Where the gating trace comes from. Exactly one field must be set.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSource {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synth: Option<SynthSpec>,
}

/// Parameters for a synthetic gating trace.
#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub blocks: usize,
    pub tokens: usize,
    pub experts: usize,
    pub peakedness: f64,
}

impl RunConfig {
    /// Reads and parses a config file. Parse errors carry the offending
    /// line and column.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("{}", path.display()))
    }

    /// Checks the schema-level invariants that serde cannot express.
    pub fn check(&self) -> Result<()> {
        if self.policies.is_empty() {
            bail!("config lists no policies");
        }
        match (&self.trace.path, &self.trace.synth) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            (Some(_), Some(_)) => bail!("trace names both a path and synth parameters"),
            (None, None) => bail!("trace names neither a path nor synth parameters"),
        }
    }

    /// Loads or synthesizes the gating trace this config names.
    pub fn build_trace(&self) -> Result<GatingTrace<f64>> {
        if let Some(path) = &self.trace.path {
            return load_trace(path)
                .with_context(|| format!("cannot load trace {}", path.display()));
        }
        let s = self.trace.synth.expect("check() enforces one source");
        Ok(synth_trace(
            s.seed,
            s.blocks,
            s.tokens,
            s.experts,
            s.peakedness,
        )?)
    }

    /// Assembles the scenario for one policy; everything but the policy is
    /// shared, so every policy sees identical channels and trace.
    pub fn scenario(&self, policy: Policy) -> Result<Scenario<f64>> {
        let map = match &self.expert_device_map {
            Some(v) => ExpertDeviceMap::new(v.clone(), self.devices.len())?,
            None => ExpertDeviceMap::identity(self.dims.num_experts),
        };
        Ok(Scenario {
            radio: self.radio,
            devices: self.devices.clone(),
            dims: self.dims,
            map,
            policy,
            seed: self.seed,
            batches: self.batches,
            fading: self.fading,
            selection: self.selection.unwrap_or_default(),
        })
    }

    /// Output directory with the CLI flag applied: flag, then config,
    /// then `./out`.
    pub fn resolve_out_dir(&self, flag: Option<PathBuf>) -> PathBuf {
        flag.or_else(|| self.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}
