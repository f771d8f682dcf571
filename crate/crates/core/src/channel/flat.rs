//! Flat Rician fading with distance path loss and AWGN.
//!
//! `y = sqrt(p0 / d^n) * h * x + w`, with `h` normalized to unit average
//! power: a line-of-sight term of power `K / (K + 1)` with uniform random
//! phase plus a diffuse `CN(0, 1 / (K + 1))` term.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{complex_gaussian, mean_power, noise_variance, C64};
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum CsiMode {
    Perfect,
    Perturbed { variance: f64 },
}

/// Which received power the SNR refers to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum NoiseReference {
    /// Noise is calibrated against the realized faded signal, `|gain h|^2 P_x`.
    RealizedLink,
    /// Noise is calibrated as if the amplitude gain were fixed at this value
    /// (the unit-distance gain `sqrt(p0)` for path-loss sweeps); the realized
    /// gain then attenuates the signal against a fixed noise floor.
    ReferenceGain(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatChannelConfig {
    /// path-loss reference power
    pub p0: f64,
    /// transmitter-receiver distance in meters
    pub distance: f64,
    pub path_loss_exponent: f64,
    /// linear K-factor
    pub rician_k: f64,
    pub snr_db: f64,
    pub csi: CsiMode,
    pub noise_reference: NoiseReference,
}

impl FlatChannelConfig {
    /// Unit distance, perfect CSI, noise calibrated on the realized link.
    pub fn rician(rician_k: f64, snr_db: f64) -> Self {
        FlatChannelConfig {
            p0: 1.0,
            distance: 1.0,
            path_loss_exponent: 2.0,
            rician_k,
            snr_db,
            csi: CsiMode::Perfect,
            noise_reference: NoiseReference::RealizedLink,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(m.to_string()));
        if !(self.distance > 0.0) {
            return bad("distance must be positive");
        }
        if !(self.p0 > 0.0) {
            return bad("p0 must be positive");
        }
        if !(self.path_loss_exponent >= 0.0) {
            return bad("path-loss exponent must be nonnegative");
        }
        if !(self.rician_k >= 0.0) {
            return bad("Rician K must be nonnegative");
        }
        if self.snr_db.is_nan() {
            return bad("SNR must be a number");
        }
        if let CsiMode::Perturbed { variance } = self.csi {
            if !(variance >= 0.0) {
                return bad("CSI perturbation variance must be nonnegative");
            }
        }
        if let NoiseReference::ReferenceGain(g) = self.noise_reference {
            if !(g > 0.0) {
                return bad("reference gain must be positive");
            }
        }
        Ok(())
    }

    /// Amplitude path-loss gain `sqrt(p0 / d^n)`.
    pub fn path_gain(&self) -> f64 {
        (self.p0 / self.distance.powf(self.path_loss_exponent)).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlatRealization {
    /// unit-average-power fading coefficient
    pub h: C64,
    /// amplitude path-loss gain
    pub gain: f64,
}

pub fn draw_flat_channel<R: Rng + ?Sized>(cfg: &FlatChannelConfig, rng: &mut R) -> FlatRealization {
    let k = cfg.rician_k;
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let los = if k.is_infinite() {
        1.0
    } else {
        (k / (k + 1.0)).sqrt()
    };
    let diffuse_var = if k.is_infinite() { 0.0 } else { 1.0 / (k + 1.0) };
    let h = C64::from_polar(los, phase) + complex_gaussian(rng, diffuse_var);
    FlatRealization {
        h,
        gain: cfg.path_gain(),
    }
}

/// Received frame and the noise variance that was applied.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatReception {
    pub y: Vec<C64>,
    pub noise_var: f64,
}

pub fn apply_flat<R: Rng + ?Sized>(
    x: &[C64],
    ch: &FlatRealization,
    snr_db: f64,
    reference: NoiseReference,
    rng: &mut R,
) -> Result<FlatReception> {
    if x.is_empty() {
        return Err(CoreError::EmptyFrame);
    }
    let px = mean_power(x);
    let ref_amp2 = match reference {
        NoiseReference::RealizedLink => ch.gain * ch.gain * ch.h.norm_sqr(),
        NoiseReference::ReferenceGain(g) => g * g * ch.h.norm_sqr(),
    };
    let noise_var = noise_variance(ref_amp2 * px, snr_db);
    let a = ch.h * ch.gain;
    let y = x
        .iter()
        .map(|&s| {
            let clean = a * s;
            if noise_var > 0.0 {
                clean + complex_gaussian(rng, noise_var)
            } else {
                clean
            }
        })
        .collect();
    Ok(FlatReception { y, noise_var })
}
