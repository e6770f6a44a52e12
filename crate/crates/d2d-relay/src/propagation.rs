//! Path loss, fading and the per-RB rate formulas.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of one LTE resource block.
pub const RB_BANDWIDTH_HZ: f64 = 180e3;
/// Thermal noise density.
pub const N0_DBM_PER_HZ: f64 = -174.0;

/// Shadowing (dB) and Rayleigh power gain (linear, unit mean) for one link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FadingDraw {
    pub shadow_db: f64,
    pub rayleigh_gain: f64,
}

impl FadingDraw {
    pub const NONE: FadingDraw = FadingDraw {
        shadow_db: 0.0,
        rayleigh_gain: 1.0,
    };

    pub fn new(shadow_db: f64, rayleigh_gain: f64) -> Result<Self> {
        if !(rayleigh_gain >= 0.0) || !shadow_db.is_finite() {
            return Err(Error::InvalidInput(format!(
                "fading draw ({shadow_db} dB, {rayleigh_gain})"
            )));
        }
        Ok(FadingDraw {
            shadow_db,
            rayleigh_gain,
        })
    }

    fn loss_db(&self) -> f64 {
        self.shadow_db + 10.0 * self.rayleigh_gain.log10()
    }
}

impl Default for FadingDraw {
    fn default() -> Self {
        FadingDraw::NONE
    }
}

/// Linear power gain of a link, strictly positive and finite.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct LinkGain(f64);

impl LinkGain {
    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value.is_finite() {
            Ok(LinkGain(value))
        } else {
            Err(Error::InvalidInput(format!("link gain {value}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub n0_dbm_per_hz: f64,
    pub rb_bandwidth_hz: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            n0_dbm_per_hz: N0_DBM_PER_HZ,
            rb_bandwidth_hz: RB_BANDWIDTH_HZ,
        }
    }
}

impl NoiseModel {
    /// Noise power per RB in watts.
    pub fn sigma_squared(&self) -> f64 {
        dbm_to_watts(self.n0_dbm_per_hz + 10.0 * self.rb_bandwidth_hz.log10())
    }
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

fn check_distance(distance_km: f64) -> Result<()> {
    if distance_km > 0.0 && distance_km.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("distance {distance_km} km")))
    }
}

/// UE-relay, relay-UE and UE-UE links.
pub fn path_loss_access_db(distance_km: f64, fading: FadingDraw) -> Result<f64> {
    check_distance(distance_km)?;
    Ok(103.8 + 20.9 * distance_km.log10() + fading.loss_db())
}

/// Relay-eNB links.
pub fn path_loss_backhaul_db(distance_km: f64, fading: FadingDraw) -> Result<f64> {
    check_distance(distance_km)?;
    Ok(100.7 + 23.5 * distance_km.log10() + fading.loss_db())
}

pub fn gain_from_pathloss(pl_db: f64) -> f64 {
    10f64.powf(-pl_db / 10.0)
}

/// SINR per watt of transmit power.
pub fn unit_sinr(h: f64, interference_w: f64, sigma2: f64) -> Result<f64> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidInput(format!("gain {h}")));
    }
    if !(interference_w >= 0.0) || !(sigma2 > 0.0) {
        return Err(Error::InvalidInput(format!(
            "interference {interference_w} W, noise {sigma2} W"
        )));
    }
    Ok(h / (interference_w + sigma2))
}

/// Two-hop decode-and-forward rate over a half-duplex relay.
pub fn end_to_end_rate(r1: f64, r2: f64) -> f64 {
    0.5 * r1.min(r2)
}

/// Rate on one RB when both hops are balanced.
pub fn rate_on_rb(power_w: f64, unit_sinr: f64, rb_bandwidth_hz: f64) -> f64 {
    0.5 * rb_bandwidth_hz * (power_w * unit_sinr).ln_1p() / std::f64::consts::LN_2
}

/// Relay power that equalises the two hop SINRs.
pub fn second_hop_power(p1_w: f64, gamma1: f64, gamma2: f64) -> Result<f64> {
    if !(gamma2 > 0.0) || !gamma2.is_finite() {
        return Err(Error::DegenerateLink(format!("second-hop SINR {gamma2}")));
    }
    Ok(p1_w * gamma1 / gamma2)
}
