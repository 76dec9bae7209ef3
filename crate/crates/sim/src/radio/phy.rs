//! Link budget, dual-slope path loss and the SINR decode rule.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use super::RadioError;
use crate::mobility::LosClass;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PhyConfig {
    pub bandwidth_hz: f64,
    pub tx_power_dbm: f64,
    pub antenna_gain_tx_db: f64,
    pub antenna_gain_rx_db: f64,
    pub noise_figure_db: f64,
    pub carrier_hz: f64,
    pub antenna_height_m: f64,
    /// Exponent beyond the breakpoint; free-space (2) below it.
    pub exponent_far: f64,
    pub nlos_penalty_db: f64,
    pub shadowing_los_db: f64,
    pub shadowing_nlos_db: f64,
    pub shadowing: bool,
    pub sinr_threshold_db: f64,
    pub rx_sensitivity_dbm: f64,
}

impl Default for PhyConfig {
    fn default() -> Self {
        PhyConfig {
            bandwidth_hz: 10e6,
            tx_power_dbm: 23.0,
            antenna_gain_tx_db: 3.0,
            antenna_gain_rx_db: 3.0,
            noise_figure_db: 9.0,
            carrier_hz: 5.9e9,
            antenna_height_m: 1.5,
            exponent_far: 4.0,
            nlos_penalty_db: 10.0,
            shadowing_los_db: 3.0,
            shadowing_nlos_db: 4.0,
            shadowing: true,
            sinr_threshold_db: 8.0,
            rx_sensitivity_dbm: -90.0,
        }
    }
}

impl PhyConfig {
    pub fn validate(&self) -> Result<(), RadioError> {
        let fields = [
            self.bandwidth_hz,
            self.tx_power_dbm,
            self.antenna_gain_tx_db,
            self.antenna_gain_rx_db,
            self.noise_figure_db,
            self.carrier_hz,
            self.antenna_height_m,
            self.exponent_far,
            self.nlos_penalty_db,
            self.shadowing_los_db,
            self.shadowing_nlos_db,
            self.sinr_threshold_db,
            self.rx_sensitivity_dbm,
        ];
        if fields.iter().any(|v| !v.is_finite()) || self.bandwidth_hz <= 0.0 || self.carrier_hz <= 0.0 || self.antenna_height_m <= 0.0 {
            return Err(RadioError::InvalidConfig("PHY parameters must be finite and positive where physical".into()));
        }
        Ok(())
    }

    /// Free-space loss at 1 m.
    pub fn pl0_db(&self) -> f64 {
        20.0 * (4.0 * std::f64::consts::PI * self.carrier_hz / SPEED_OF_LIGHT).log10()
    }

    pub fn breakpoint_m(&self) -> f64 {
        4.0 * self.antenna_height_m * self.antenna_height_m * self.carrier_hz / SPEED_OF_LIGHT
    }

    pub fn eirp_plus_rx_gain_dbm(&self) -> f64 {
        self.tx_power_dbm + self.antenna_gain_tx_db + self.antenna_gain_rx_db
    }

    pub fn shadowing_sd_db(&self, los: LosClass) -> f64 {
        match los {
            LosClass::Los => self.shadowing_los_db,
            LosClass::Nlos => self.shadowing_nlos_db,
        }
    }
}

pub fn noise_floor_dbm(phy: &PhyConfig) -> f64 {
    -174.0 + 10.0 * phy.bandwidth_hz.log10() + phy.noise_figure_db
}

/// Deterministic part of the loss: dual slope plus the NLOS penalty.
pub fn mean_path_loss(d: f64, los: LosClass, phy: &PhyConfig) -> Result<f64, RadioError> {
    if !(d > 0.0) {
        return Err(RadioError::InvalidDistance(d));
    }
    let bp = phy.breakpoint_m();
    let pl = if d <= bp {
        phy.pl0_db() + 20.0 * d.log10()
    } else {
        phy.pl0_db() + 20.0 * bp.log10() + 10.0 * phy.exponent_far * (d / bp).log10()
    };
    Ok(match los {
        LosClass::Los => pl,
        LosClass::Nlos => pl + phy.nlos_penalty_db,
    })
}

/// Standard-normal shadowing draw for one ordered link.
pub fn link_shadow_z(link_seed: u64) -> f64 {
    StandardNormal.sample(&mut ChaCha20Rng::seed_from_u64(link_seed))
}

/// Seed of the ordered link `tx → rx` within a run.
pub fn link_seed(run_seed: u64, tx: u32, rx: u32) -> u64 {
    // splitmix64 finaliser over the packed triple
    let mut z = run_seed ^ ((tx as u64) << 32 | rx as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Path loss including the static shadowing draw of the link when enabled.
pub fn path_loss(d: f64, los: LosClass, phy: &PhyConfig, link_seed: u64) -> Result<f64, RadioError> {
    let mean = mean_path_loss(d, los, phy)?;
    Ok(if phy.shadowing { mean + phy.shadowing_sd_db(los) * link_shadow_z(link_seed) } else { mean })
}

pub fn rx_power_dbm(d: f64, los: LosClass, phy: &PhyConfig, link_seed: u64) -> Result<f64, RadioError> {
    Ok(phy.eirp_plus_rx_gain_dbm() - path_loss(d, los, phy, link_seed)?)
}

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FailReason {
    HalfDuplex,
    BelowSense,
    LowSinr,
    Collision,
}

impl FailReason {
    pub fn name(self) -> &'static str {
        match self {
            FailReason::HalfDuplex => "half-duplex",
            FailReason::BelowSense => "below-sense",
            FailReason::LowSinr => "low-sinr",
            FailReason::Collision => "collision",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decode {
    pub sinr_db: f64,
    pub decoded: bool,
    pub fail_reason: Option<FailReason>,
}

/// Decode decision for one reception. A failure is attributed to the first
/// of: receiver busy transmitting, signal below sensitivity, signal too weak
/// against noise alone, and finally interference.
pub fn decode(rx_power_dbm: f64, interference_mw: f64, half_duplex: bool, phy: &PhyConfig) -> Decode {
    let noise_mw = dbm_to_mw(noise_floor_dbm(phy));
    let sinr_db = rx_power_dbm - mw_to_dbm(noise_mw + interference_mw);
    let fail_reason = if half_duplex {
        Some(FailReason::HalfDuplex)
    } else if rx_power_dbm < phy.rx_sensitivity_dbm {
        Some(FailReason::BelowSense)
    } else if sinr_db >= phy.sinr_threshold_db {
        None
    } else if rx_power_dbm - mw_to_dbm(noise_mw) < phy.sinr_threshold_db {
        Some(FailReason::LowSinr)
    } else {
        Some(FailReason::Collision)
    };
    Decode { sinr_db, decoded: fail_reason.is_none(), fail_reason }
}
