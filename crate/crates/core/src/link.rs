//! Downlink budget for an overhead LEO pass and the matching AWGN source.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const BOLTZMANN: f64 = 1.380_649e-23;
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
/// Reference temperature for noise figure conversion, kelvin.
pub const T0_KELVIN: f64 = 290.0;

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Satellite-to-ground distance at elevation `elevation_deg` for a circular
/// orbit of height `orbit_height_m`.
pub fn slant_range(orbit_height_m: f64, elevation_deg: f64) -> Result<f64> {
    if !(orbit_height_m.is_finite() && orbit_height_m > 0.0) {
        return Err(domain(format!("orbit height must be positive, got {orbit_height_m}")));
    }
    if !(0.0..=90.0).contains(&elevation_deg) {
        return Err(domain(format!("elevation must lie in [0, 90] degrees, got {elevation_deg}")));
    }
    if elevation_deg == 90.0 {
        // the general form loses the last ulp or so to cancellation
        return Ok(orbit_height_m);
    }
    let eps = elevation_deg.to_radians();
    let ratio = (orbit_height_m + EARTH_RADIUS_M) / EARTH_RADIUS_M;
    let cos = eps.cos();
    Ok(EARTH_RADIUS_M * ((ratio * ratio - cos * cos).sqrt() - eps.sin()))
}

/// Free-space path loss in dB, antenna gains excluded.
pub fn free_space_path_loss_db(distance_m: f64, carrier_freq_hz: f64) -> Result<f64> {
    if !(distance_m > 0.0 && carrier_freq_hz > 0.0) || !distance_m.is_finite() || !carrier_freq_hz.is_finite() {
        return Err(domain(format!(
            "distance and frequency must be positive, got d={distance_m} f={carrier_freq_hz}"
        )));
    }
    Ok(20.0 * (4.0 * std::f64::consts::PI * distance_m * carrier_freq_hz / SPEED_OF_LIGHT).log10())
}

/// Receiver noise power in dBW for a system temperature of `T0·(F − 1)`.
pub fn thermal_noise_dbw(bandwidth_hz: f64, noise_figure_db: f64) -> Result<f64> {
    if !(bandwidth_hz > 0.0 && bandwidth_hz.is_finite()) {
        return Err(domain(format!("bandwidth must be positive, got {bandwidth_hz}")));
    }
    if !(noise_figure_db > 0.0 && noise_figure_db.is_finite()) {
        return Err(domain(format!(
            "noise figure must be positive (0 dB implies zero noise power), got {noise_figure_db}"
        )));
    }
    let t_sys = T0_KELVIN * (db_to_linear(noise_figure_db) - 1.0);
    Ok(linear_to_db(BOLTZMANN * t_sys * bandwidth_hz))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkParameters {
    pub orbit_height_m: f64,
    pub carrier_freq_hz: f64,
    pub tx_power_w: f64,
    pub tx_gain_dbi: f64,
    pub rx_gain_dbi: f64,
    pub bandwidth_hz: f64,
    pub noise_figure_db: f64,
    /// When set, replaces the computed budget at every elevation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snr_db_override: Option<f64>,
}

impl LinkParameters {
    /// Orbit and radio parameters of the reference LEO downlink.
    pub fn reference() -> Self {
        Self {
            orbit_height_m: 750e3,
            carrier_freq_hz: 2150e6,
            tx_power_w: 1.0,
            tx_gain_dbi: 6.0,
            rx_gain_dbi: 35.0,
            bandwidth_hz: 750e3,
            noise_figure_db: 2.0,
            snr_db_override: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("orbit_height_m", self.orbit_height_m),
            ("carrier_freq_hz", self.carrier_freq_hz),
            ("tx_power_w", self.tx_power_w),
            ("bandwidth_hz", self.bandwidth_hz),
            ("noise_figure_db", self.noise_figure_db),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(config(format!("link.{name} must be positive and finite, got {v}")));
            }
        }
        for (name, v) in [("tx_gain_dbi", self.tx_gain_dbi), ("rx_gain_dbi", self.rx_gain_dbi)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config(format!("link.{name} must be non-negative, got {v}")));
            }
        }
        if let Some(s) = self.snr_db_override {
            if !s.is_finite() {
                return Err(config(format!("link.snr_db_override must be finite, got {s}")));
            }
        }
        Ok(())
    }
}

/// Intermediate quantities of the budget at one elevation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetBreakdown {
    pub elevation_deg: f64,
    pub slant_range_m: f64,
    pub tx_power_dbw: f64,
    pub path_loss_db: f64,
    pub noise_dbw: f64,
    pub snr_db: f64,
}

pub fn budget(link: &LinkParameters, elevation_deg: f64) -> Result<BudgetBreakdown> {
    link.validate()?;
    let slant_range_m = slant_range(link.orbit_height_m, elevation_deg)?;
    let path_loss_db = free_space_path_loss_db(slant_range_m, link.carrier_freq_hz)?;
    let noise_dbw = thermal_noise_dbw(link.bandwidth_hz, link.noise_figure_db)?;
    let tx_power_dbw = linear_to_db(link.tx_power_w);
    let snr_db = tx_power_dbw + link.tx_gain_dbi + link.rx_gain_dbi - path_loss_db - noise_dbw;
    Ok(BudgetBreakdown { elevation_deg, slant_range_m, tx_power_dbw, path_loss_db, noise_dbw, snr_db })
}

/// Budget SNR at `elevation_deg`, ignoring any override.
pub fn expected_snr_db(link: &LinkParameters, elevation_deg: f64) -> Result<f64> {
    budget(link, elevation_deg).map(|b| b.snr_db)
}

/// The SNR experiments run at: the override if configured, else the budget.
pub fn operating_snr_db(link: &LinkParameters, elevation_deg: f64) -> Result<f64> {
    match link.snr_db_override {
        Some(s) => {
            link.validate()?;
            Ok(s)
        }
        None => expected_snr_db(link, elevation_deg),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub snr_db: f64,
    /// Standard deviation of each of the real and imaginary components.
    pub sigma: f64,
    pub signal_power: f64,
}

pub fn noise_sigma(snr_db: f64, signal_power: f64) -> Result<NoiseSpec> {
    if !(signal_power > 0.0 && signal_power.is_finite()) {
        return Err(domain(format!("signal power must be positive, got {signal_power}")));
    }
    if snr_db.is_nan() {
        return Err(domain("SNR is NaN"));
    }
    let sigma = (signal_power / (2.0 * db_to_linear(snr_db))).sqrt();
    Ok(NoiseSpec { snr_db, sigma, signal_power })
}

pub fn sample_awgn<R: Rng + ?Sized>(spec: &NoiseSpec, count: usize, rng: &mut R) -> Result<Vec<Complex64>> {
    if count == 0 {
        return Err(domain("sample count must be at least 1"));
    }
    Ok((0..count)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(spec.sigma * re, spec.sigma * im)
        })
        .collect())
}
