//! Bandwidth allocation across devices.
//!
//! Given a fixed expert selection, the total latency
//!
//! ```text
//! f(B) = sum_i max_k [ tokens_ik * comm_k(B_k) + pairs_ik * comp_k ]
//! ```
//!
//! is minimized over the simplex `{ B_k >= 0, sum B_k = B_total }`. Each
//! communication term is `L / R(B_k)` with `R` a Shannon rate: `R` is
//! concave, positive, and increasing in the share, so `L / R` is convex and
//! decreasing, a max of sums of convex functions is convex, and the whole
//! objective is convex on the simplex. The solver runs a projected
//! subgradient phase for a coarse fix, then polishes with pairwise
//! bandwidth transfers, which span the simplex tangent space and therefore
//! cannot stall at a non-optimum of a convex objective.
//!
//! Shares of devices with no assigned tokens are forced to zero; their
//! bandwidth is better spent on devices that actually serve traffic.

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelState, DeviceProfile, RadioConfig};
use crate::error::{Error, Result};
use crate::latency::{expert_flops, token_comm_bits, ModelDims};
use crate::num::Real;
use crate::selection::{ExpertDeviceMap, Selection};

/// A bandwidth split across devices, in Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthAllocation<T> {
    pub shares_hz: Vec<T>,
}

impl<T: Real> BandwidthAllocation<T> {
    /// Every device gets `total / n`.
    pub fn uniform(total_hz: T, num_devices: usize) -> Self {
        let share = total_hz / T::cast(num_devices as f64);
        Self {
            shares_hz: vec![share; num_devices],
        }
    }

    pub fn num_devices(&self) -> usize {
        self.shares_hz.len()
    }

    /// Checks nonnegativity and that the shares sum to `total_hz` within a
    /// 1e-6 relative budget.
    pub fn validate(&self, total_hz: T) -> Result<()> {
        let mut sum = T::zero();
        for (k, &s) in self.shares_hz.iter().enumerate() {
            if !(s >= T::zero()) || !s.is_finite() {
                return Err(Error::Validation(format!(
                    "share {k} is {s}, must be finite and nonnegative"
                )));
            }
            sum = sum + s;
        }
        let drift = ((sum - total_hz) / total_hz).abs();
        if drift > T::cast(1.0e-6) {
            return Err(Error::Validation(format!(
                "shares sum to {sum} Hz, expected {total_hz} Hz"
            )));
        }
        Ok(())
    }
}

/// Euclidean projection of `x` onto the simplex `{ y >= 0, sum y = total }`.
///
/// Sort-based algorithm: find the largest prefix of the descending values
/// whose shifted mean keeps them positive, subtract that mean, clamp the
/// rest to zero.
pub fn project_onto_simplex<T: Real>(x: &mut [T], total: T) {
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("projection input is ordered"));
    let mut prefix = T::zero();
    let mut shift = T::zero();
    for (i, &u) in sorted.iter().enumerate() {
        prefix = prefix + u;
        let candidate = (prefix - total) / T::cast((i + 1) as f64);
        if u - candidate > T::zero() {
            shift = candidate;
        }
    }
    for v in x.iter_mut() {
        *v = (*v - shift).max(T::zero());
    }
}

/// Per-device token load inside one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct DeviceLoad {
    /// Distinct tokens transferred to the device.
    tokens: u32,
    /// (token, expert) assignments computed on the device.
    pairs: u32,
}

/// A frozen allocation instance: the selection's per-device loads plus the
/// link physics, reduced to what the objective needs.
#[derive(Debug, Clone)]
pub struct AllocationProblem<T> {
    total_bandwidth_hz: T,
    comm_bits: T,
    /// `P * g / N0` per device, downlink.
    snr_scale_down: Vec<T>,
    /// `P * g / N0` per device, uplink.
    snr_scale_up: Vec<T>,
    /// Seconds per (token, expert) pair on each device.
    comp_pair_s: Vec<T>,
    /// `[block][device]` loads.
    loads: Vec<Vec<DeviceLoad>>,
}

impl<T: Real> AllocationProblem<T> {
    pub fn new(
        selection: &Selection,
        devices: &[DeviceProfile<T>],
        channels: &[ChannelState<T>],
        dims: &ModelDims,
        radio: &RadioConfig<T>,
        map: &ExpertDeviceMap,
    ) -> Result<Self> {
        radio.validate()?;
        dims.validate()?;
        if devices.is_empty() {
            return Err(Error::Config("allocation needs at least one device".into()));
        }
        if devices.len() != channels.len() || devices.len() != map.num_devices() {
            return Err(Error::Config(format!(
                "{} devices, {} channel states, map expects {}",
                devices.len(),
                channels.len(),
                map.num_devices()
            )));
        }
        if map.num_experts() != dims.num_experts {
            return Err(Error::Config(format!(
                "map covers {} experts, model has {}",
                map.num_experts(),
                dims.num_experts
            )));
        }
        for d in devices {
            d.validate()?;
        }
        for (k, c) in channels.iter().enumerate() {
            if !(c.g_down > T::zero()) || !(c.g_up > T::zero()) {
                return Err(Error::Config(format!(
                    "device {k} has a nonpositive channel gain"
                )));
            }
        }
        let n0 = radio.noise_psd_w_hz();
        let flops = T::cast(expert_flops(dims) as f64);
        let loads = selection
            .blocks()
            .iter()
            .map(|m| {
                (0..devices.len())
                    .map(|k| DeviceLoad {
                        tokens: m.device_token_count(map, k) as u32,
                        pairs: m.device_pair_count(map, k) as u32,
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            total_bandwidth_hz: radio.total_bandwidth_hz,
            comm_bits: T::cast(token_comm_bits(dims) as f64),
            snr_scale_down: devices
                .iter()
                .zip(channels.iter())
                .map(|(d, c)| d.p_down_w * c.g_down / n0)
                .collect(),
            snr_scale_up: devices
                .iter()
                .zip(channels.iter())
                .map(|(d, c)| d.p_up_w * c.g_up / n0)
                .collect(),
            comp_pair_s: devices.iter().map(|d| flops / d.compute_flops).collect(),
            loads,
        })
    }

    pub fn num_devices(&self) -> usize {
        self.snr_scale_down.len()
    }

    pub fn total_bandwidth_hz(&self) -> T {
        self.total_bandwidth_hz
    }

    /// True when any block routes at least one token to `device`.
    pub fn device_is_loaded(&self, device: usize) -> bool {
        self.loads.iter().any(|block| block[device].tokens > 0)
    }

    /// Shannon rate for a share `b` against a cached SNR scale `s`.
    fn rate(&self, b: T, s: T) -> T {
        if !(b > T::zero()) {
            return T::zero();
        }
        b * (T::one() + s / b).log2()
    }

    /// d rate / d share.
    fn rate_derivative(&self, b: T, s: T) -> T {
        let ln2 = T::cast(std::f64::consts::LN_2);
        ((T::one() + s / b).ln() - s / (b + s)) / ln2
    }

    /// Round-trip transfer seconds per token on `device` under share `b`.
    fn comm_time(&self, device: usize, b: T) -> T {
        let down = self.rate(b, self.snr_scale_down[device]);
        let up = self.rate(b, self.snr_scale_up[device]);
        if down > T::zero() && up > T::zero() {
            self.comm_bits / down + self.comm_bits / up
        } else {
            T::infinity()
        }
    }

    /// Block latency of `device` under share `b`, given its load.
    fn device_latency(&self, device: usize, load: DeviceLoad, b: T) -> T {
        if load.tokens == 0 {
            return T::zero();
        }
        T::cast(load.tokens as f64) * self.comm_time(device, b)
            + T::cast(load.pairs as f64) * self.comp_pair_s[device]
    }

    /// Total latency over all blocks for one allocation. Infinite when a
    /// loaded device has a zero share.
    pub fn objective(&self, shares: &[T]) -> T {
        debug_assert_eq!(shares.len(), self.num_devices());
        let mut total = T::zero();
        for block in &self.loads {
            let mut worst = T::zero();
            for (device, &load) in block.iter().enumerate() {
                let t = self.device_latency(device, load, shares[device]);
                if t > worst {
                    worst = t;
                }
            }
            total = total + worst;
        }
        total
    }

    /// A subgradient of the objective: per block, only the slowest device
    /// (ties toward the lowest index) receives the derivative of its
    /// communication time.
    fn subgradient(&self, shares: &[T], grad: &mut [T]) {
        for g in grad.iter_mut() {
            *g = T::zero();
        }
        for block in &self.loads {
            let mut worst = T::neg_infinity();
            let mut argmax = None;
            for (device, &load) in block.iter().enumerate() {
                let t = self.device_latency(device, load, shares[device]);
                if t > worst {
                    worst = t;
                    argmax = Some((device, load));
                }
            }
            if let Some((device, load)) = argmax {
                if load.tokens == 0 {
                    continue;
                }
                let b = shares[device];
                let sd = self.snr_scale_down[device];
                let su = self.snr_scale_up[device];
                let rd = self.rate(b, sd);
                let ru = self.rate(b, su);
                if !(rd > T::zero()) || !(ru > T::zero()) {
                    continue;
                }
                let d_comm = -self.comm_bits * self.rate_derivative(b, sd) / (rd * rd)
                    - self.comm_bits * self.rate_derivative(b, su) / (ru * ru);
                grad[device] = grad[device] + T::cast(load.tokens as f64) * d_comm;
            }
        }
    }
}

/// Knobs for [`solve`]. The `project` and `refine` switches exist so the
/// verification harness can prove it detects a solver with those stages
/// broken; production callers should leave them on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions<T> {
    /// Subgradient iterations before refinement.
    pub max_subgradient_iters: usize,
    /// Run the transfer pattern search after the subgradient phase.
    pub refine: bool,
    /// Keep iterates on the feasible simplex.
    pub project: bool,
    /// Relative improvement below which the KKT probe declares convergence.
    pub tolerance: T,
}

impl<T: Real> Default for SolverOptions<T> {
    fn default() -> Self {
        Self {
            max_subgradient_iters: 300,
            refine: true,
            project: true,
            tolerance: T::cast(1.0e-6),
        }
    }
}

/// What the solver did and how good the result is.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverReport<T> {
    /// Objective of the returned allocation, in seconds.
    pub objective_s: T,
    /// Objective evaluations spent across both phases.
    pub iterations: usize,
    /// Whether the KKT probe found no improvement above `tolerance`.
    pub converged: bool,
    /// Largest relative objective decrease a small bandwidth transfer along
    /// any probe direction could still achieve at the returned point.
    pub kkt_residual: T,
    /// True when no device had any load; the allocation is then uniform by
    /// convention and the objective is zero.
    pub degenerate: bool,
}

/// Minimizes total latency over the bandwidth simplex for a fixed
/// selection. See [`AllocationProblem`] for the objective.
pub fn allocate<T: Real>(
    selection: &Selection,
    devices: &[DeviceProfile<T>],
    channels: &[ChannelState<T>],
    dims: &ModelDims,
    radio: &RadioConfig<T>,
    map: &ExpertDeviceMap,
    tolerance: T,
) -> Result<(BandwidthAllocation<T>, SolverReport<T>)> {
    let problem = AllocationProblem::new(selection, devices, channels, dims, radio, map)?;
    Ok(solve(
        &problem,
        &SolverOptions {
            tolerance,
            ..SolverOptions::default()
        },
    ))
}

/// [`allocate`] with explicit solver options.
pub fn allocate_with_options<T: Real>(
    selection: &Selection,
    devices: &[DeviceProfile<T>],
    channels: &[ChannelState<T>],
    dims: &ModelDims,
    radio: &RadioConfig<T>,
    map: &ExpertDeviceMap,
    opts: &SolverOptions<T>,
) -> Result<(BandwidthAllocation<T>, SolverReport<T>)> {
    let problem = AllocationProblem::new(selection, devices, channels, dims, radio, map)?;
    Ok(solve(&problem, opts))
}

/// Core solver on a prebuilt problem.
pub fn solve<T: Real>(
    problem: &AllocationProblem<T>,
    opts: &SolverOptions<T>,
) -> (BandwidthAllocation<T>, SolverReport<T>) {
    let n = problem.num_devices();
    let total = problem.total_bandwidth_hz();
    let active: Vec<usize> = (0..n).filter(|&k| problem.device_is_loaded(k)).collect();

    if active.is_empty() {
        let shares = BandwidthAllocation::uniform(total, n);
        let report = SolverReport {
            objective_s: T::zero(),
            iterations: 0,
            converged: true,
            kkt_residual: T::zero(),
            degenerate: true,
        };
        return (shares, report);
    }

    let mut evals = 0usize;
    let eval = |shares: &[T], evals: &mut usize| {
        *evals += 1;
        problem.objective(shares)
    };

    // Candidates are tracked in returnable form; the winner is the best
    // objective, the earliest candidate winning ties. Seeding with the
    // uniform splits guarantees the result never loses to either of them,
    // and tie-keeping the seed means an unimprovable even split is returned
    // bit for bit, so callers comparing against uniform baselines see exact
    // equality instead of rounding noise.
    let mut best_shares = vec![total / T::cast(n as f64); n];
    let mut best_f = eval(&best_shares, &mut evals);

    let consider = |shares: &[T], f: T, best_shares: &mut Vec<T>, best_f: &mut T| {
        if f < *best_f {
            best_shares.clear();
            best_shares.extend_from_slice(shares);
            *best_f = f;
        }
    };

    let active_share = total / T::cast(active.len() as f64);
    let mut x = vec![T::zero(); n];
    for &k in &active {
        x[k] = active_share;
    }
    let f = eval(&x, &mut evals);
    consider(&x, f, &mut best_shares, &mut best_f);

    if active.len() == 1 {
        let mut shares = vec![T::zero(); n];
        shares[active[0]] = total;
        let f = eval(&shares, &mut evals);
        consider(&shares, f, &mut best_shares, &mut best_f);
    }

    // Keep active shares strictly positive during the search: the objective
    // is infinite at the boundary, so the optimum is interior and the floor
    // only trims useless territory.
    let floor = total * T::cast(1.0e-9);

    // Phase one: projected subgradient with a diminishing normalized step.
    let mut grad = vec![T::zero(); n];
    for iter in 0..opts.max_subgradient_iters {
        problem.subgradient(&x, &mut grad);
        let mut norm = T::zero();
        for &k in &active {
            norm = norm + grad[k] * grad[k];
        }
        let norm = norm.sqrt();
        if !(norm > T::zero()) || !norm.is_finite() {
            break;
        }
        let step = T::cast(0.25) * total / T::cast(((iter + 1) as f64).sqrt());
        for &k in &active {
            x[k] = x[k] - step * grad[k] / norm;
        }
        if opts.project {
            project_active_with_floor(&mut x, &active, total, floor);
        }
        let f = eval(&x, &mut evals);
        consider(&x, f, &mut best_shares, &mut best_f);
    }

    // Phase two: pattern search over bandwidth transfers with a shrinking
    // step. The direction set holds every pairwise transfer plus, per
    // device, an even spread to and gather from all the others; the
    // composite directions keep ties in the per-block max from stalling the
    // descent, which pairwise moves alone cannot guarantee on a max-type
    // objective.
    let directions = transfer_directions::<T>(n, &active);
    if opts.refine {
        let mut y = best_shares.clone();
        let mut f_y = best_f;
        let mut trial = vec![T::zero(); n];
        let mut delta = total / T::cast(8.0);
        let delta_min = total * T::cast(1.0e-13);
        while delta > delta_min {
            let mut improved = false;
            for dir in &directions {
                let Some(f) =
                    try_transfer(&y, dir, delta, floor, &mut trial, |s| eval(s, &mut evals))
                else {
                    continue;
                };
                if f < f_y {
                    f_y = f;
                    y.copy_from_slice(&trial);
                    improved = true;
                }
            }
            if !improved {
                delta = delta / T::cast(2.0);
            }
        }
        if opts.project {
            rescale_to_total(&mut y, &active, total);
        }
        let f = eval(&y, &mut evals);
        consider(&y, f, &mut best_shares, &mut best_f);
    }

    // KKT probe: can a small transfer along any direction still improve the
    // returned point?
    let probe = total * T::cast(1.0e-7);
    let mut kkt = T::zero();
    if best_f.is_finite() && best_f > T::zero() {
        let mut trial = vec![T::zero(); n];
        for dir in &directions {
            let Some(f) = try_transfer(&best_shares, dir, probe, T::zero(), &mut trial, |s| {
                eval(s, &mut evals)
            }) else {
                continue;
            };
            let gain = (best_f - f) / best_f;
            if gain > kkt {
                kkt = gain;
            }
        }
    }

    let report = SolverReport {
        objective_s: best_f,
        iterations: evals,
        converged: kkt <= opts.tolerance,
        kkt_residual: kkt,
        degenerate: false,
    };
    (
        BandwidthAllocation {
            shares_hz: best_shares,
        },
        report,
    )
}

/// Projects the active coordinates onto `{ y >= floor, sum = total }`,
/// leaving inactive coordinates untouched (they stay zero).
fn project_active_with_floor<T: Real>(x: &mut [T], active: &[usize], total: T, floor: T) {
    let shifted_total = total - floor * T::cast(active.len() as f64);
    let mut packed: Vec<T> = active.iter().map(|&k| x[k] - floor).collect();
    project_onto_simplex(&mut packed, shifted_total);
    for (i, &k) in active.iter().enumerate() {
        x[k] = packed[i] + floor;
    }
}

/// Scales the active coordinates so they sum to exactly `total` up to one
/// rounding step, repairing drift the search accumulated.
fn rescale_to_total<T: Real>(x: &mut [T], active: &[usize], total: T) {
    let mut sum = T::zero();
    for &k in active {
        sum = sum + x[k];
    }
    if sum > T::zero() && sum.is_finite() {
        let scale = total / sum;
        for &k in active {
            x[k] = x[k] * scale;
        }
    }
}

/// Zero-sum transfer directions over the active devices: every ordered pair
/// plus an even spread from and gather to each device once three or more
/// are active (with two, those collapse into the pairwise set).
fn transfer_directions<T: Real>(n: usize, active: &[usize]) -> Vec<Vec<T>> {
    let mut directions = Vec::new();
    for &from in active {
        for &to in active {
            if from == to {
                continue;
            }
            let mut v = vec![T::zero(); n];
            v[from] = -T::one();
            v[to] = T::one();
            directions.push(v);
        }
    }
    let m = active.len();
    if m >= 3 {
        let share = T::one() / T::cast((m - 1) as f64);
        for &center in active {
            let mut scatter = vec![T::zero(); n];
            let mut gather = vec![T::zero(); n];
            scatter[center] = -T::one();
            gather[center] = T::one();
            for &other in active {
                if other != center {
                    scatter[other] = share;
                    gather[other] = -share;
                }
            }
            directions.push(scatter);
            directions.push(gather);
        }
    }
    directions
}

/// Steps from `y` along `dir`, scaled so no donor coordinate drops below
/// `min_share`, and evaluates the result into `trial`. Returns the
/// objective, or `None` when no positive step fits.
fn try_transfer<T: Real>(
    y: &[T],
    dir: &[T],
    delta: T,
    min_share: T,
    trial: &mut [T],
    mut eval: impl FnMut(&[T]) -> T,
) -> Option<T> {
    let mut amount = delta;
    for (k, &d) in dir.iter().enumerate() {
        if d < T::zero() {
            amount = amount.min((y[k] - min_share) / -d);
        }
    }
    if !(amount > T::zero()) {
        return None;
    }
    for (k, &d) in dir.iter().enumerate() {
        trial[k] = y[k] + amount * d;
    }
    Some(eval(trial))
}

/// Outcome of random midpoint-convexity trials on an allocation objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvexityReport<T> {
    /// Largest `f(mid) - (f(a) + f(b)) / 2` observed; convexity means this
    /// never rises meaningfully above zero.
    pub worst_violation: T,
    /// Largest finite objective magnitude seen, for scaling the tolerance.
    pub scale: T,
    pub trials: usize,
}

/// Samples random feasible pairs and checks midpoint convexity of the
/// objective. Draws happen in `f64` off the caller's RNG, so trials are
/// reproducible per seed.
pub fn convexity_probe<T: Real, R: rand::Rng + ?Sized>(
    problem: &AllocationProblem<T>,
    rng: &mut R,
    trials: usize,
) -> Result<ConvexityReport<T>> {
    if trials == 0 {
        return Err(Error::Domain(
            "convexity probe needs at least one trial".into(),
        ));
    }
    let n = problem.num_devices();
    let total = problem.total_bandwidth_hz();
    let mut report = ConvexityReport {
        worst_violation: T::zero(),
        scale: T::zero(),
        trials,
    };
    let draw_point = |rng: &mut R| -> Vec<T> {
        // Exponential spacings normalize to a uniform simplex sample.
        let mut raw = vec![0.0f64; n];
        let mut sum = 0.0;
        for v in raw.iter_mut() {
            let u: f64 = rng.gen();
            *v = -(1.0 - u).ln().max(f64::MIN_POSITIVE.ln());
            *v = v.max(1.0e-12);
            sum += *v;
        }
        raw.iter().map(|&v| total * T::cast(v / sum)).collect()
    };
    let half = T::cast(0.5);
    for _ in 0..trials {
        let a = draw_point(rng);
        let b = draw_point(rng);
        let mid: Vec<T> = a
            .iter()
            .zip(b.iter())
            .map(|(&x, &y)| half * (x + y))
            .collect();
        let fa = problem.objective(&a);
        let fb = problem.objective(&b);
        let fm = problem.objective(&mid);
        if !fa.is_finite() || !fb.is_finite() || !fm.is_finite() {
            continue;
        }
        for f in [fa, fb, fm] {
            if f.abs() > report.scale {
                report.scale = f.abs();
            }
        }
        let violation = fm - half * (fa + fb);
        if violation > report.worst_violation {
            report.worst_violation = violation;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{nominal_channel, sample_channel};
    use crate::selection::top_k_select;
    use crate::trace::synth_trace;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(num_blocks: usize, num_experts: usize) -> ModelDims {
        ModelDims {
            embed_dim: 1024,
            hidden_dim: 4096,
            quant_bits: 16,
            act_flops_per_elem: 4,
            num_blocks,
            num_experts,
        }
    }

    struct Instance {
        devices: Vec<DeviceProfile<f64>>,
        channels: Vec<ChannelState<f64>>,
        dims: ModelDims,
        radio: RadioConfig<f64>,
        map: ExpertDeviceMap,
        selection: Selection,
    }

    fn random_instance(seed: u64, num_devices: usize) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let radio = RadioConfig::<f64>::default();
        let d = dims(3, num_devices);
        let mut devices = Vec::new();
        let mut channels = Vec::new();
        for id in 0..num_devices {
            let profile = DeviceProfile {
                id,
                distance_m: 30.0 + 170.0 * rand::Rng::gen::<f64>(&mut rng),
                p_down_w: 10.0,
                p_up_w: 0.2,
                compute_flops: 1.0e11 * (1.0 + 9.0 * rand::Rng::gen::<f64>(&mut rng)),
            };
            channels.push(sample_channel(&profile, &radio, &mut rng).unwrap());
            devices.push(profile);
        }
        let trace = synth_trace::<f64>(seed ^ 0x5eed, 3, 16, num_devices, 2.0).unwrap();
        let selection = top_k_select(&trace, 2.min(num_devices)).unwrap();
        Instance {
            devices,
            channels,
            dims: d,
            radio,
            map: ExpertDeviceMap::identity(num_devices),
            selection,
        }
    }

    fn problem(inst: &Instance) -> AllocationProblem<f64> {
        AllocationProblem::new(
            &inst.selection,
            &inst.devices,
            &inst.channels,
            &inst.dims,
            &inst.radio,
            &inst.map,
        )
        .unwrap()
    }

    #[test]
    fn objective_matches_a_direct_latency_recomputation() {
        for seed in 0..20 {
            let inst = random_instance(seed, 3);
            let p = problem(&inst);
            let alloc = BandwidthAllocation::uniform(inst.radio.total_bandwidth_hz, 3);
            let fast = p.objective(&alloc.shares_hz);
            // Independent recomputation through the latency primitives.
            let mut slow = 0.0;
            for block in 0..3 {
                let mut per_device = Vec::new();
                for k in 0..3 {
                    let t = crate::latency::token_latency(
                        &inst.dims,
                        alloc.shares_hz[k],
                        &inst.devices[k],
                        &inst.channels[k],
                        &inst.radio,
                    );
                    per_device.push(crate::latency::device_block_latency(
                        inst.selection.block(block),
                        k,
                        &inst.map,
                        &t,
                    ));
                }
                slow += crate::latency::attention_waiting_latency(&per_device).unwrap();
            }
            assert_relative_eq!(fast, slow, max_relative = 1e-12);
        }
    }

    #[test]
    fn single_device_serial_latency() {
        let radio = RadioConfig::<f64>::default();
        let d = dims(2, 1);
        let device = DeviceProfile {
            id: 0,
            distance_m: 100.0,
            p_down_w: 10.0,
            p_up_w: 0.2,
            compute_flops: 1.0e12,
        };
        let channel = nominal_channel(&device, &radio).unwrap();
        let trace = synth_trace::<f64>(1, 2, 4, 1, 0.0).unwrap();
        let selection = top_k_select(&trace, 1).unwrap();
        let map = ExpertDeviceMap::identity(1);
        let p =
            AllocationProblem::new(&selection, &[device], &[channel], &d, &radio, &map).unwrap();
        let t =
            crate::latency::token_latency(&d, radio.total_bandwidth_hz, &device, &channel, &radio);
        // Two blocks, four tokens each, all on the one device, serially.
        assert_relative_eq!(
            p.objective(&[radio.total_bandwidth_hz]),
            2.0 * 4.0 * t.total_s,
            max_relative = 1e-12
        );
    }

    #[test]
    fn identical_devices_make_uniform_optimal() {
        let radio = RadioConfig::<f64>::default();
        let num = 4;
        let d = dims(2, num);
        let device = |id| DeviceProfile {
            id,
            distance_m: 100.0,
            p_down_w: 10.0,
            p_up_w: 0.2,
            compute_flops: 1.0e12,
        };
        let devices: Vec<_> = (0..num).map(device).collect();
        let channels: Vec<_> = devices
            .iter()
            .map(|dev| nominal_channel(dev, &radio).unwrap())
            .collect();
        // A rotating trace: token j leans on experts j % 4 and (j + 1) % 4,
        // so every device carries exactly the same load.
        let mut weights = Vec::new();
        for token in 0..8 {
            let mut row = vec![0.125; num];
            row[token % num] = 0.4;
            row[(token + 1) % num] = 0.35;
            weights.extend(row);
        }
        let mut both_blocks = weights.clone();
        both_blocks.extend(weights);
        let trace = crate::trace::GatingTrace::new(2, 8, num, both_blocks).unwrap();
        let selection = top_k_select(&trace, 2).unwrap();
        let map = ExpertDeviceMap::identity(num);
        let (alloc, report) =
            allocate(&selection, &devices, &channels, &d, &radio, &map, 1e-6).unwrap();
        let p = AllocationProblem::new(&selection, &devices, &channels, &d, &radio, &map).unwrap();
        let uniform = BandwidthAllocation::uniform(radio.total_bandwidth_hz, num);
        assert!(report.objective_s <= p.objective(&uniform.shares_hz));
        assert!(report.converged, "kkt residual {}", report.kkt_residual);
        for &s in &alloc.shares_hz {
            assert_relative_eq!(s, 25.0e6, max_relative = 1e-3);
        }
    }

    #[test]
    fn unloaded_device_gets_zero_share() {
        let inst = random_instance(5, 3);
        // Rebuild the selection so device 2 never appears.
        let trace = synth_trace::<f64>(5, 3, 16, 2, 2.0).unwrap();
        let narrow = top_k_select(&trace, 2).unwrap();
        let mut widened = Vec::new();
        for block in 0..narrow.num_blocks() {
            let mut m = crate::selection::SelectionMatrix::new_empty(16, 3);
            for token in 0..16 {
                for e in narrow.block(block).selected_experts(token) {
                    m.select(token, e);
                }
            }
            widened.push(m);
        }
        let selection = Selection::new(widened);
        let (alloc, report) = allocate(
            &selection,
            &inst.devices,
            &inst.channels,
            &inst.dims,
            &inst.radio,
            &inst.map,
            1e-6,
        )
        .unwrap();
        assert_eq!(alloc.shares_hz[2], 0.0);
        assert!(!report.degenerate);
        alloc.validate(inst.radio.total_bandwidth_hz).unwrap();
    }

    #[test]
    fn empty_selection_degenerates_to_uniform() {
        let inst = random_instance(6, 3);
        let empty = Selection::new(vec![crate::selection::SelectionMatrix::new_empty(4, 3); 3]);
        let (alloc, report) = allocate(
            &empty,
            &inst.devices,
            &inst.channels,
            &inst.dims,
            &inst.radio,
            &inst.map,
            1e-6,
        )
        .unwrap();
        assert!(report.degenerate);
        assert_eq!(report.objective_s, 0.0);
        for &s in &alloc.shares_hz {
            assert_relative_eq!(s, inst.radio.total_bandwidth_hz / 3.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn solver_is_deterministic() {
        let inst = random_instance(9, 3);
        let run = || {
            allocate(
                &inst.selection,
                &inst.devices,
                &inst.channels,
                &inst.dims,
                &inst.radio,
                &inst.map,
                1e-6,
            )
            .unwrap()
        };
        let (a1, r1) = run();
        let (a2, r2) = run();
        assert_eq!(a1, a2);
        assert_eq!(r1.objective_s, r2.objective_s);
        assert_eq!(r1.iterations, r2.iterations);
    }

    #[test]
    fn solution_beats_uniform_and_stays_feasible() {
        for seed in 0..15 {
            let inst = random_instance(seed + 100, 3);
            let p = problem(&inst);
            let (alloc, report) = allocate(
                &inst.selection,
                &inst.devices,
                &inst.channels,
                &inst.dims,
                &inst.radio,
                &inst.map,
                1e-6,
            )
            .unwrap();
            alloc.validate(inst.radio.total_bandwidth_hz).unwrap();
            let uniform = BandwidthAllocation::uniform(inst.radio.total_bandwidth_hz, 3);
            assert!(report.objective_s <= p.objective(&uniform.shares_hz));
            assert_relative_eq!(
                report.objective_s,
                p.objective(&alloc.shares_hz),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn more_total_bandwidth_never_hurts() {
        for seed in 0..8 {
            let mut inst = random_instance(seed + 40, 3);
            let (_, narrow) = allocate(
                &inst.selection,
                &inst.devices,
                &inst.channels,
                &inst.dims,
                &inst.radio,
                &inst.map,
                1e-6,
            )
            .unwrap();
            inst.radio.total_bandwidth_hz *= 2.0;
            let (_, wide) = allocate(
                &inst.selection,
                &inst.devices,
                &inst.channels,
                &inst.dims,
                &inst.radio,
                &inst.map,
                1e-6,
            )
            .unwrap();
            assert!(
                wide.objective_s <= narrow.objective_s * (1.0 + 1e-9),
                "doubling bandwidth worsened {} -> {}",
                narrow.objective_s,
                wide.objective_s
            );
        }
    }

    #[test]
    fn convexity_probe_stays_within_float_noise() {
        let inst = random_instance(17, 4);
        let p = problem(&inst);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let report = convexity_probe(&p, &mut rng, 2000).unwrap();
        assert!(
            report.worst_violation <= 1e-9 * report.scale,
            "violation {} vs scale {}",
            report.worst_violation,
            report.scale
        );
    }

    #[test]
    fn convexity_probe_rejects_zero_trials() {
        let inst = random_instance(18, 3);
        let p = problem(&inst);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(convexity_probe(&p, &mut rng, 0).is_err());
    }

    #[test]
    fn projection_lands_on_the_simplex() {
        let mut x = vec![5.0, -2.0, 9.0, 0.5];
        project_onto_simplex(&mut x, 1.0);
        let sum: f64 = x.iter().sum();
        assert_relative_eq!(sum, 1.0, max_relative = 1e-12);
        assert!(x.iter().all(|&v| v >= 0.0));
        // Projecting an already-feasible point is the identity.
        let mut y = x.clone();
        project_onto_simplex(&mut y, 1.0);
        for (a, b) in x.iter().zip(y.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn projection_is_feasible_for_random_inputs(
            xs in proptest::collection::vec(-10.0f64..10.0, 1..8),
            total in 0.1f64..100.0,
        ) {
            let mut x = xs;
            project_onto_simplex(&mut x, total);
            let sum: f64 = x.iter().sum();
            prop_assert!((sum - total).abs() <= 1e-9 * total);
            prop_assert!(x.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn allocation_shares_always_sum_to_the_budget(seed in 0u64..40) {
            let inst = random_instance(seed + 1000, 3);
            let (alloc, _) = allocate(
                &inst.selection,
                &inst.devices,
                &inst.channels,
                &inst.dims,
                &inst.radio,
                &inst.map,
                1e-6,
            )
            .unwrap();
            prop_assert!(alloc.validate(inst.radio.total_bandwidth_hz).is_ok());
        }
    }
}
