//! Wireless channel model: free-space path loss, Rayleigh small-scale
//! fading, and Shannon-capacity link rates.
//!
//! The base station talks to each device over a dedicated slice of the
//! shared bandwidth. A device's link is summarized by two power gains
//! (downlink and uplink); achievable rate is the Shannon capacity of the
//! allocated slice at that gain:
//!
//! ```text
//! R = B_k * log2(1 + P * g / (N0 * B_k))
//! ```
//!
//! where `B_k` is the bandwidth share in Hz, `P` the transmit power in W,
//! `g` the channel power gain, and `N0` the noise power spectral density in
//! W/Hz. As `B_k -> 0` the rate tends to 0, so a zero share is defined as
//! zero rate by continuity.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Real;

/// Radio parameters shared by every link in a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadioConfig<T> {
    /// Carrier frequency in GHz.
    pub carrier_ghz: T,
    /// Noise power spectral density in dBm/Hz (thermal floor is -174).
    pub noise_psd_dbm_hz: T,
    /// Total bandwidth in Hz shared by all devices.
    pub total_bandwidth_hz: T,
}

impl<T: Real> Default for RadioConfig<T> {
    fn default() -> Self {
        Self {
            carrier_ghz: T::cast(3.5),
            noise_psd_dbm_hz: T::cast(-174.0),
            total_bandwidth_hz: T::cast(100.0e6),
        }
    }
}

impl<T: Real> RadioConfig<T> {
    /// Noise power spectral density in linear W/Hz.
    pub fn noise_psd_w_hz(&self) -> T {
        let ten = T::cast(10.0);
        // dBm -> dBW -> W
        ten.powf((self.noise_psd_dbm_hz - T::cast(30.0)) / ten)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.carrier_ghz > T::zero()) || !self.carrier_ghz.is_finite() {
            return Err(Error::Config(format!(
                "carrier frequency must be positive and finite, got {} GHz",
                self.carrier_ghz
            )));
        }
        if !self.noise_psd_dbm_hz.is_finite() {
            return Err(Error::Config(
                "noise power spectral density must be finite".into(),
            ));
        }
        if !(self.total_bandwidth_hz > T::zero()) || !self.total_bandwidth_hz.is_finite() {
            return Err(Error::Config(format!(
                "total bandwidth must be positive and finite, got {} Hz",
                self.total_bandwidth_hz
            )));
        }
        Ok(())
    }
}

/// One mobile device hosting expert weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile<T> {
    /// Device index; must match the device's position in the scenario list.
    pub id: usize,
    /// Distance to the base station in meters.
    pub distance_m: T,
    /// Base-station transmit power toward this device, in W.
    pub p_down_w: T,
    /// Device transmit power, in W.
    pub p_up_w: T,
    /// Device compute throughput in FLOP/s.
    pub compute_flops: T,
}

impl<T: Real> DeviceProfile<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.distance_m > T::zero()) || !self.distance_m.is_finite() {
            return Err(Error::Config(format!(
                "device {}: distance must be positive and finite",
                self.id
            )));
        }
        if !(self.p_down_w > T::zero()) || !self.p_down_w.is_finite() {
            return Err(Error::Config(format!(
                "device {}: downlink power must be positive and finite",
                self.id
            )));
        }
        if !(self.p_up_w > T::zero()) || !self.p_up_w.is_finite() {
            return Err(Error::Config(format!(
                "device {}: uplink power must be positive and finite",
                self.id
            )));
        }
        // Infinite compute is allowed: it models the computation-free limit.
        if !(self.compute_flops > T::zero()) {
            return Err(Error::Config(format!(
                "device {}: compute throughput must be positive",
                self.id
            )));
        }
        Ok(())
    }
}

/// Instantaneous channel power gains for one device.
///
/// Gains are dimensionless power ratios (`|h|^2`), strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelState<T> {
    /// Base station -> device power gain.
    pub g_down: T,
    /// Device -> base station power gain.
    pub g_up: T,
}

/// Free-space path loss in dB at distance `distance_m` and carrier
/// `carrier_ghz`:
///
/// ```text
/// PL(d) = 32.4 + 20 log10(f_GHz) + 20 log10(d_m)
/// ```
///
/// Errors on nonpositive distance or frequency; the log blows up there and
/// the geometry is meaningless anyway.
pub fn path_loss_db<T: Real>(distance_m: T, carrier_ghz: T) -> Result<T> {
    if !(distance_m > T::zero()) {
        return Err(Error::Domain(format!(
            "path loss requires a positive distance, got {distance_m} m"
        )));
    }
    if !(carrier_ghz > T::zero()) {
        return Err(Error::Domain(format!(
            "path loss requires a positive carrier frequency, got {carrier_ghz} GHz"
        )));
    }
    let twenty = T::cast(20.0);
    Ok(T::cast(32.4) + twenty * carrier_ghz.log10() + twenty * distance_m.log10())
}

/// Mean fading amplitude for a device: `10^(-PL/20)`.
///
/// The Rayleigh amplitude distribution is anchored so its mean equals this
/// value; squaring a sampled amplitude yields the power gain used in rates.
pub fn mean_amplitude<T: Real>(profile: &DeviceProfile<T>, radio: &RadioConfig<T>) -> Result<T> {
    let pl = path_loss_db(profile.distance_m, radio.carrier_ghz)?;
    let twenty = T::cast(20.0);
    Ok(T::cast(10.0).powf(-pl / twenty))
}

/// Draws one fading realization for a device.
///
/// Downlink and uplink amplitudes are independent Rayleigh draws with mean
/// `10^(-PL/20)`; the returned state carries their squares (power gains).
/// Draws happen in `f64` regardless of `T` so that seeded runs consume the
/// same RNG stream at every precision. The downlink amplitude is always
/// drawn first.
pub fn sample_channel<T: Real, R: Rng + ?Sized>(
    profile: &DeviceProfile<T>,
    radio: &RadioConfig<T>,
    rng: &mut R,
) -> Result<ChannelState<T>> {
    let mean = mean_amplitude(profile, radio)?.to_f64_lossy();
    // Rayleigh mean is sigma * sqrt(pi/2); invert to hit the target mean.
    let sigma = mean * (2.0 / std::f64::consts::PI).sqrt();
    let draw = |rng: &mut R| -> T {
        // Inverse-CDF sampling: one uniform per amplitude. The uniform is
        // nudged off 0 because a zero amplitude (probability 2^-53) would
        // break the strict-positivity contract on gains.
        let u: f64 = rng.gen::<f64>().max(1.0e-18);
        let h = sigma * (-2.0 * (1.0 - u).ln()).sqrt();
        T::cast(h * h)
    };
    let g_down = draw(rng);
    let g_up = draw(rng);
    Ok(ChannelState { g_down, g_up })
}

/// Fading-free channel: both amplitudes pinned at the mean `10^(-PL/20)`.
///
/// Used for deterministic scenarios and for unit comparisons where the
/// random fading term would obscure the quantity under test.
pub fn nominal_channel<T: Real>(
    profile: &DeviceProfile<T>,
    radio: &RadioConfig<T>,
) -> Result<ChannelState<T>> {
    let h = mean_amplitude(profile, radio)?;
    Ok(ChannelState {
        g_down: h * h,
        g_up: h * h,
    })
}

/// Shannon rate of a single link in bit/s.
///
/// Zero (or negative) bandwidth yields zero rate, matching the
/// `B log2(1 + s/B) -> 0` limit.
fn shannon_rate<T: Real>(bandwidth_hz: T, power_w: T, gain: T, noise_psd_w_hz: T) -> T {
    if !(bandwidth_hz > T::zero()) {
        return T::zero();
    }
    let snr = power_w * gain / (noise_psd_w_hz * bandwidth_hz);
    bandwidth_hz * (T::one() + snr).log2()
}

/// Downlink (base station -> device) rate in bit/s for a bandwidth share.
pub fn downlink_rate<T: Real>(
    bandwidth_hz: T,
    profile: &DeviceProfile<T>,
    channel: &ChannelState<T>,
    radio: &RadioConfig<T>,
) -> T {
    shannon_rate(
        bandwidth_hz,
        profile.p_down_w,
        channel.g_down,
        radio.noise_psd_w_hz(),
    )
}

/// Uplink (device -> base station) rate in bit/s for a bandwidth share.
pub fn uplink_rate<T: Real>(
    bandwidth_hz: T,
    profile: &DeviceProfile<T>,
    channel: &ChannelState<T>,
    radio: &RadioConfig<T>,
) -> T {
    shannon_rate(
        bandwidth_hz,
        profile.p_up_w,
        channel.g_up,
        radio.noise_psd_w_hz(),
    )
}

#[cfg(test)]
// Reference values keep every digit of the independent computation that
// produced them, even past f64 resolution.
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn device(distance_m: f64) -> DeviceProfile<f64> {
        DeviceProfile {
            id: 0,
            distance_m,
            p_down_w: 10.0,
            p_up_w: 0.2,
            compute_flops: 1.0e12,
        }
    }

    #[test]
    fn path_loss_at_one_meter_one_ghz_is_the_constant_term() {
        assert_relative_eq!(path_loss_db(1.0, 1.0).unwrap(), 32.4, max_relative = 1e-12);
    }

    #[test]
    fn path_loss_matches_closed_form() {
        // 32.4 + 20 log10(3.5) + 20 log10(100) evaluated at high precision.
        assert_relative_eq!(
            path_loss_db(100.0, 3.5).unwrap(),
            83.28136088700551,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            path_loss_db(10.0, 3.5).unwrap(),
            63.28136088700551,
            max_relative = 1e-12
        );
    }

    #[test]
    fn path_loss_rejects_nonpositive_inputs() {
        assert!(path_loss_db(0.0, 3.5).is_err());
        assert!(path_loss_db(-5.0, 3.5).is_err());
        assert!(path_loss_db(100.0, 0.0).is_err());
        assert!(path_loss_db(100.0, -1.0).is_err());
    }

    #[test]
    fn noise_floor_converts_to_watts() {
        let radio = RadioConfig::<f64>::default();
        assert_relative_eq!(
            radio.noise_psd_w_hz(),
            3.9810717055349725e-21,
            max_relative = 1e-12
        );
    }

    #[test]
    fn nominal_channel_squares_the_mean_amplitude() {
        let radio = RadioConfig::<f64>::default();
        let dev = device(100.0);
        let mean = mean_amplitude(&dev, &radio).unwrap();
        assert_relative_eq!(mean, 6.853808340055687e-5, max_relative = 1e-12);
        let ch = nominal_channel(&dev, &radio).unwrap();
        assert_relative_eq!(ch.g_down, mean * mean, max_relative = 1e-15);
        assert_eq!(ch.g_down, ch.g_up);
    }

    #[test]
    fn sampled_amplitude_mean_tracks_path_loss_anchor() {
        let radio = RadioConfig::<f64>::default();
        let dev = device(100.0);
        let target = mean_amplitude(&dev, &radio).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let ch = sample_channel(&dev, &radio, &mut rng).unwrap();
            acc += ch.g_down.sqrt();
        }
        let empirical = acc / n as f64;
        assert_relative_eq!(empirical, target, max_relative = 1e-2);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let radio = RadioConfig::<f64>::default();
        let dev = device(50.0);
        let mut a = ChaCha8Rng::seed_from_u64(42);
        let mut b = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..32 {
            let x = sample_channel(&dev, &radio, &mut a).unwrap();
            let y = sample_channel(&dev, &radio, &mut b).unwrap();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn f32_run_consumes_the_same_rng_stream_as_f64() {
        let radio64 = RadioConfig::<f64>::default();
        let radio32 = RadioConfig::<f32>::default();
        let dev64 = device(80.0);
        let dev32 = DeviceProfile::<f32> {
            id: 0,
            distance_m: 80.0,
            p_down_w: 10.0,
            p_up_w: 0.2,
            compute_flops: 1.0e12,
        };
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..16 {
            let x = sample_channel(&dev64, &radio64, &mut a).unwrap();
            let y = sample_channel(&dev32, &radio32, &mut b).unwrap();
            // Same draws, converted late: the f32 gain is the rounded f64 gain.
            assert_relative_eq!(x.g_down as f32, y.g_down, max_relative = 2e-6);
            assert_relative_eq!(x.g_up as f32, y.g_up, max_relative = 2e-6);
        }
    }

    #[test]
    fn downlink_rate_matches_hand_computed_value() {
        // B = 12.5 MHz, P = 10 W, g = 1e-9, N0 at the thermal floor.
        let radio = RadioConfig::<f64>::default();
        let dev = device(100.0);
        let ch = ChannelState {
            g_down: 1.0e-9,
            g_up: 1.0e-9,
        };
        let r = downlink_rate(12.5e6, &dev, &ch, &radio);
        assert_relative_eq!(r, 220206134.9603380, max_relative = 1e-12);
    }

    #[test]
    fn uplink_rate_matches_hand_computed_value() {
        let radio = RadioConfig::<f64>::default();
        let dev = device(100.0);
        let ch = ChannelState {
            g_down: 1.0e-9,
            g_up: 1.0e-9,
        };
        let r = uplink_rate(12.5e6, &dev, &ch, &radio);
        assert_relative_eq!(r, 149662329.3762996, max_relative = 1e-12);
    }

    #[test]
    fn uplink_equals_downlink_when_powers_and_gains_match() {
        let radio = RadioConfig::<f64>::default();
        let mut dev = device(100.0);
        dev.p_up_w = dev.p_down_w;
        let ch = ChannelState {
            g_down: 3.0e-9,
            g_up: 3.0e-9,
        };
        assert_eq!(
            downlink_rate(20.0e6, &dev, &ch, &radio),
            uplink_rate(20.0e6, &dev, &ch, &radio)
        );
    }

    #[test]
    fn zero_bandwidth_means_zero_rate() {
        let radio = RadioConfig::<f64>::default();
        let dev = device(100.0);
        let ch = nominal_channel(&dev, &radio).unwrap();
        assert_eq!(downlink_rate(0.0, &dev, &ch, &radio), 0.0);
        assert_eq!(uplink_rate(0.0, &dev, &ch, &radio), 0.0);
    }

    proptest! {
        #[test]
        fn path_loss_increases_with_distance_and_frequency(
            d1 in 1.0f64..1.0e4,
            scale in 1.01f64..10.0,
            f in 0.5f64..30.0,
        ) {
            let near = path_loss_db(d1, f).unwrap();
            let far = path_loss_db(d1 * scale, f).unwrap();
            prop_assert!(far > near);
            let higher = path_loss_db(d1, f * scale).unwrap();
            prop_assert!(higher > near);
        }

        #[test]
        fn rates_are_nonnegative_and_monotone_in_gain(
            b in 1.0e3f64..1.0e8,
            g in 1.0e-12f64..1.0e-6,
        ) {
            let radio = RadioConfig::<f64>::default();
            let dev = device(100.0);
            let low = ChannelState { g_down: g, g_up: g };
            let high = ChannelState { g_down: g * 2.0, g_up: g * 2.0 };
            let r_low = downlink_rate(b, &dev, &low, &radio);
            let r_high = downlink_rate(b, &dev, &high, &radio);
            prop_assert!(r_low > 0.0);
            prop_assert!(r_high > r_low);
        }

        #[test]
        fn rate_is_concave_in_bandwidth(
            b1 in 1.0e3f64..1.0e8,
            b2 in 1.0e3f64..1.0e8,
            g in 1.0e-12f64..1.0e-6,
        ) {
            let radio = RadioConfig::<f64>::default();
            let dev = device(100.0);
            let ch = ChannelState { g_down: g, g_up: g };
            let mid = 0.5 * (b1 + b2);
            let lhs = downlink_rate(mid, &dev, &ch, &radio);
            let rhs = 0.5 * (downlink_rate(b1, &dev, &ch, &radio)
                + downlink_rate(b2, &dev, &ch, &radio));
            // Concavity up to a small relative slack for float error.
            prop_assert!(lhs >= rhs - 1e-9 * lhs.abs().max(rhs.abs()));
        }
    }
}
