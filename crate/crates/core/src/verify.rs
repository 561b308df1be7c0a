//! Self-checks comparing the optimizers against their brute-force
//! baselines, wired for fault injection.
//!
//! [`run_verification`] executes every check and reports pass/fail per
//! check. The [`Sabotage`] parameter deliberately breaks one documented
//! stage, which a healthy harness must then flag; a verification suite
//! that cannot detect a broken solver proves nothing when it passes. All
//! checks run in `f64` and are fully seeded.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocator::{convexity_probe, solve, AllocationProblem, SolverOptions};
use crate::channel::{sample_channel, ChannelState, DeviceProfile, RadioConfig};
use crate::error::Result;
use crate::latency::{wlr, ModelDims, TokenLatency};
use crate::oracle::{exhaustive_selection, grid_search_allocation};
use crate::selection::{
    testbed_select_with_quartile, top_k_select, wdmoe_select, ExpertDeviceMap, LatencyHistory,
    QuartileRule, Selection, SelectionMatrix, SelectionPolicyConfig,
};
use crate::trace::{load_trace, synth_trace, write_trace, GatingTrace};

/// A deliberately injected defect. Each variant breaks one stage the
/// checks must be able to catch; `None` is the production path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sabotage {
    None,
    /// Cut the subgradient phase to a few steps and skip refinement.
    TruncateSolver,
    /// Let solver iterates leave the bandwidth simplex.
    SkipProjection,
    /// Compute third quartiles by nearest rank instead of interpolation.
    WrongQuartile,
}

/// Outcome of one check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Human-readable measurement behind the verdict.
    pub detail: String,
}

/// All check outcomes of one verification run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub sabotage: Sabotage,
    pub checks: Vec<CheckResult>,
}

impl VerificationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Instance counts and the base seed for [`run_verification`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Random allocation problems compared against the grid oracle.
    pub solver_instances: usize,
    /// Random midpoint pairs probed for convexity.
    pub convexity_trials: usize,
    /// Toy instances compared against the exhaustive selection oracle.
    pub selection_instances: usize,
    /// Random histories replayed against the shedding reference.
    pub quartile_instances: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0x5eed,
            solver_instances: 12,
            convexity_trials: 10_000,
            selection_instances: 100,
            quartile_instances: 200,
        }
    }
}

/// Fraction of the exhaustive selection optimum the drop heuristic reached
/// on the worst of the pinned toy instances, measured before this constant
/// was frozen. The heuristic stops dropping once the WLR has grown by its
/// configured factor, so it does not chase the unconstrained optimum.
pub const SELECTION_WLR_FLOOR: f64 = 0.57;

/// Runs every check under the given sabotage and collects the outcomes.
pub fn run_verification(cfg: &VerifyConfig, sabotage: Sabotage) -> Result<VerificationReport> {
    let checks = vec![
        check_solver_vs_grid_oracle(cfg, sabotage)?,
        check_objective_convexity(cfg)?,
        check_selection_vs_exhaustive_oracle(cfg)?,
        check_testbed_quartile_consistency(cfg, sabotage)?,
        check_trace_round_trip(cfg)?,
    ];
    Ok(VerificationReport { sabotage, checks })
}

/// A random allocation problem: heterogeneous fleet, sampled fading, plain
/// top-2 selection of a synthetic trace.
struct SolverInstance {
    devices: Vec<DeviceProfile<f64>>,
    channels: Vec<ChannelState<f64>>,
    dims: ModelDims,
    radio: RadioConfig<f64>,
    map: ExpertDeviceMap,
    selection: Selection,
}

fn solver_instance(seed: u64) -> Result<SolverInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_devices = 2 + (seed % 2) as usize;
    let radio = RadioConfig::default();
    let dims = ModelDims {
        embed_dim: 1024,
        hidden_dim: 4096,
        quant_bits: 16,
        act_flops_per_elem: 4,
        num_blocks: 4,
        num_experts: num_devices,
    };
    let mut devices = Vec::with_capacity(num_devices);
    let mut channels = Vec::with_capacity(num_devices);
    for id in 0..num_devices {
        let profile = DeviceProfile {
            id,
            distance_m: 10.0 + 290.0 * rng.gen::<f64>(),
            p_down_w: 2.0,
            p_up_w: 0.1,
            compute_flops: 1.0e11 * 10.0f64.powf(rng.gen::<f64>()),
        };
        channels.push(sample_channel(&profile, &radio, &mut rng)?);
        devices.push(profile);
    }
    let trace = synth_trace::<f64>(seed ^ 0x7ace, 4, 16, num_devices, 2.0)?;
    let selection = top_k_select(&trace, 2.min(num_devices))?;
    Ok(SolverInstance {
        devices,
        channels,
        dims,
        radio,
        map: ExpertDeviceMap::identity(num_devices),
        selection,
    })
}

fn solver_options_under(sabotage: Sabotage) -> SolverOptions<f64> {
    let mut opts = SolverOptions::default();
    match sabotage {
        Sabotage::TruncateSolver => {
            opts.max_subgradient_iters = 3;
            opts.refine = false;
        }
        Sabotage::SkipProjection => opts.project = false,
        Sabotage::None | Sabotage::WrongQuartile => {}
    }
    opts
}

/// The solver must return feasible shares within 1e-4 of the grid oracle.
fn check_solver_vs_grid_oracle(cfg: &VerifyConfig, sabotage: Sabotage) -> Result<CheckResult> {
    let opts = solver_options_under(sabotage);
    let mut worst_ratio = 1.0f64;
    let mut infeasible = 0usize;
    for i in 0..cfg.solver_instances {
        let inst = solver_instance(cfg.seed.wrapping_add(i as u64))?;
        let problem = AllocationProblem::new(
            &inst.selection,
            &inst.devices,
            &inst.channels,
            &inst.dims,
            &inst.radio,
            &inst.map,
        )?;
        let (alloc, report) = solve(&problem, &opts);
        if alloc.validate(inst.radio.total_bandwidth_hz).is_err() {
            infeasible += 1;
            continue;
        }
        let oracle = grid_search_allocation(
            &inst.selection,
            &inst.devices,
            &inst.channels,
            &inst.dims,
            &inst.radio,
            &inst.map,
            150,
        )?;
        if oracle.best_value > 0.0 {
            worst_ratio = worst_ratio.max(report.objective_s / oracle.best_value);
        }
    }
    let passed = infeasible == 0 && worst_ratio <= 1.0 + 1.0e-4;
    Ok(CheckResult {
        name: "p3_solver_vs_grid_oracle".into(),
        passed,
        detail: format!(
            "{} instances, worst objective ratio {:.6}, {} infeasible allocations",
            cfg.solver_instances, worst_ratio, infeasible
        ),
    })
}

/// The allocation objective must be midpoint convex on random pairs.
fn check_objective_convexity(cfg: &VerifyConfig) -> Result<CheckResult> {
    let inst = solver_instance(cfg.seed.wrapping_add(1))?;
    let problem = AllocationProblem::new(
        &inst.selection,
        &inst.devices,
        &inst.channels,
        &inst.dims,
        &inst.radio,
        &inst.map,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xc0117e);
    let report = convexity_probe(&problem, &mut rng, cfg.convexity_trials)?;
    let bound = 1.0e-9 * report.scale;
    Ok(CheckResult {
        name: "objective_midpoint_convexity".into(),
        passed: report.worst_violation <= bound,
        detail: format!(
            "{} trials, worst violation {:.3e} against bound {:.3e}",
            report.trials, report.worst_violation, bound
        ),
    })
}

/// The pinned toy family behind [`SELECTION_WLR_FLOOR`]; also used by the
/// acceptance suite, so the floor stays tied to one instance distribution.
pub fn selection_toy_instance(
    seed: u64,
) -> (GatingTrace<f64>, ExpertDeviceMap, Vec<TokenLatency<f64>>) {
    let trace = synth_trace::<f64>(seed, 1, 4, 4, 2.0).expect("toy dimensions are valid");
    let map = ExpertDeviceMap::identity(4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
    let latencies = (0..4)
        .map(|_| {
            let total_s = (1.0 + 19.0 * rng.gen::<f64>()) * 1.0e-3;
            TokenLatency {
                comm_s: total_s * 0.6,
                comp_s: total_s * 0.4,
                total_s,
            }
        })
        .collect();
    (trace, map, latencies)
}

/// The drop heuristic must cover every token and stay above the recorded
/// fraction of the exhaustive WLR optimum.
fn check_selection_vs_exhaustive_oracle(cfg: &VerifyConfig) -> Result<CheckResult> {
    let mut worst_ratio = 1.0f64;
    let mut uncovered = 0usize;
    for seed in 0..cfg.selection_instances as u64 {
        let (trace, map, latencies) = selection_toy_instance(seed);
        let oracle = exhaustive_selection(&trace, 0, &latencies, &map, 2)?;
        let sel = wdmoe_select(&trace, &latencies, &map, &SelectionPolicyConfig::default())?;
        if !sel.every_token_covered() {
            uncovered += 1;
            continue;
        }
        let mut value = 0.0;
        for device in 0..map.num_devices() {
            value += wlr(sel.block(0), &trace, 0, device, &map, &latencies[device]);
        }
        if oracle.best_value > 0.0 {
            worst_ratio = worst_ratio.min(value / oracle.best_value);
        }
    }
    let passed = uncovered == 0 && worst_ratio >= SELECTION_WLR_FLOOR;
    Ok(CheckResult {
        name: "selection_vs_exhaustive_oracle".into(),
        passed,
        detail: format!(
            "{} instances, worst WLR fraction {:.4} against floor {}, {} uncovered",
            cfg.selection_instances, worst_ratio, SELECTION_WLR_FLOOR, uncovered
        ),
    })
}

/// One random shedding instance: a trace plus a warmed history.
fn quartile_instance(seed: u64, index: usize) -> Result<(GatingTrace<f64>, LatencyHistory<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_devices = 4 + index % 5;
    let num_tokens = 6 + index % 8;
    let trace = synth_trace::<f64>(seed ^ 0x51ed, 1, num_tokens, num_devices, 2.5)?;
    let mut history = LatencyHistory::new(num_devices);
    for device in 0..num_devices {
        let mean_s = (0.5 + 9.5 * rng.gen::<f64>()) * 1.0e-3;
        let samples = 1 + (rng.gen::<u64>() % 4);
        history.record(device, mean_s * samples as f64, samples);
    }
    Ok((trace, history))
}

/// The shedding policy must agree, decision for decision, with a separate
/// straight-line reimplementation that uses interpolated quartiles.
fn check_testbed_quartile_consistency(
    cfg: &VerifyConfig,
    sabotage: Sabotage,
) -> Result<CheckResult> {
    let rule = if sabotage == Sabotage::WrongQuartile {
        QuartileRule::NearestRank
    } else {
        QuartileRule::Interpolated
    };
    let mut mismatches = 0usize;
    let mut triggered = 0usize;
    for i in 0..cfg.quartile_instances {
        let (trace, history) = quartile_instance(cfg.seed.wrapping_add(2000 + i as u64), i)?;
        let map = ExpertDeviceMap::identity(trace.num_experts());
        let got = testbed_select_with_quartile(&trace, 0, &history, &map, rule)?;
        let expected = shedding_reference(&trace, &history)?;
        if expected.shed_any {
            triggered += 1;
        }
        if got != expected.matrix {
            mismatches += 1;
        }
    }
    // A family that never triggers shedding could not expose a broken
    // quartile, so exercising both branches is part of the check.
    let exercised = triggered > 0 && triggered < cfg.quartile_instances;
    Ok(CheckResult {
        name: "testbed_quartile_consistency".into(),
        passed: mismatches == 0 && exercised,
        detail: format!(
            "{} instances, {} shed, {} decision mismatches",
            cfg.quartile_instances, triggered, mismatches
        ),
    })
}

struct SheddingReference {
    matrix: SelectionMatrix,
    shed_any: bool,
}

/// Plain-loop reference for the shedding decision, kept deliberately free
/// of the selection module's helpers.
fn shedding_reference(
    trace: &GatingTrace<f64>,
    history: &LatencyHistory<f64>,
) -> Result<SheddingReference> {
    let num_tokens = trace.num_tokens();
    let num_experts = trace.num_experts();

    // Top-2 per token, weight descending, index ascending on ties.
    let mut matrix = SelectionMatrix::new_empty(num_tokens, num_experts);
    let mut top2 = vec![[0usize; 2]; num_tokens];
    for token in 0..num_tokens {
        let row = trace.row(0, token);
        let mut best = 0usize;
        for e in 1..num_experts {
            if row[e] > row[best] {
                best = e;
            }
        }
        let mut second = usize::MAX;
        for e in 0..num_experts {
            if e == best {
                continue;
            }
            if second == usize::MAX || row[e] > row[second] {
                second = e;
            }
        }
        matrix.select(token, best);
        matrix.select(token, second);
        top2[token] = [best, second];
    }

    // Predicted completion per device: mean per-token latency times served
    // tokens. One expert per device, so expert index is device index.
    let mut tokens_served = vec![0usize; num_experts];
    for t in &top2 {
        tokens_served[t[0]] += 1;
        tokens_served[t[1]] += 1;
    }
    let mut predicted = vec![0.0f64; num_experts];
    let mut bottleneck = 0usize;
    for device in 0..num_experts {
        let mean = history
            .mean_latency_s(device)
            .expect("history warmed for every device");
        predicted[device] = mean * tokens_served[device] as f64;
        if predicted[device] > predicted[bottleneck] {
            bottleneck = device;
        }
    }
    let mut sorted = predicted.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let h = (sorted.len() - 1) as f64 * 0.75;
    let lo = h.floor() as usize;
    let q3 = if lo + 1 < sorted.len() {
        sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
    } else {
        sorted[lo]
    };

    if !(predicted[bottleneck] > 1.5 * q3) {
        return Ok(SheddingReference {
            matrix,
            shed_any: false,
        });
    }
    let mean_bottleneck = history.mean_latency_s(bottleneck).unwrap();
    let budget = ((predicted[bottleneck] - q3) / mean_bottleneck).floor() as usize;
    if budget == 0 {
        return Ok(SheddingReference {
            matrix,
            shed_any: false,
        });
    }

    let mut device_mass = 0.0f64;
    for token in 0..num_tokens {
        if top2[token][0] == bottleneck || top2[token][1] == bottleneck {
            device_mass += trace.weight(0, token, bottleneck);
        }
    }
    let cutoff = device_mass / 5.0;

    let mut candidates: Vec<(f64, usize)> = Vec::new();
    for token in 0..num_tokens {
        let [a, b] = top2[token];
        if a != bottleneck && b != bottleneck {
            continue;
        }
        let row = trace.row(0, token);
        // The dropped expert must be the row's weakest selected one; on
        // equal weights the lower index counts as weaker.
        let weakest = if row[a] < row[b] || (row[a] == row[b] && a < b) {
            a
        } else {
            b
        };
        if weakest == bottleneck && row[bottleneck] < cutoff {
            candidates.push((row[bottleneck], token));
        }
    }
    candidates.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
    let shed_any = !candidates.is_empty();
    for &(_, token) in candidates.iter().take(budget) {
        matrix.deselect(token, bottleneck);
    }
    Ok(SheddingReference { matrix, shed_any })
}

/// Traces must survive a write/load cycle bit for bit.
fn check_trace_round_trip(cfg: &VerifyConfig) -> Result<CheckResult> {
    let trace = synth_trace::<f64>(cfg.seed ^ 0x707, 2, 8, 4, 1.5)?;
    let path = round_trip_path();
    let outcome = (|| -> Result<bool> {
        write_trace(&trace, &path)?;
        let back = load_trace::<f64>(&path)?;
        Ok(back == trace)
    })();
    let _ = std::fs::remove_file(&path);
    let identical = outcome?;
    Ok(CheckResult {
        name: "trace_round_trip".into(),
        passed: identical,
        detail: if identical {
            "write/load cycle reproduced the trace exactly".into()
        } else {
            "write/load cycle altered the trace".into()
        },
    })
}

fn round_trip_path() -> PathBuf {
    std::env::temp_dir().join(format!("wdmoe-verify-{}.wdmt", std::process::id()))
}
