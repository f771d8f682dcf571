//! Complex-baseband channel simulation.
//!
//! Two link models are provided: a flat Rician channel with distance path
//! loss ([`flat`]) and a tap-delay-line multi-path channel carried over OFDM
//! with comb pilots and least-squares estimation ([`multipath`], [`ofdm`]).
//! Recovery is zero-forcing in both cases ([`zf_detect`]).

pub mod flat;
pub mod multipath;
pub mod ofdm;
pub mod trace;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

pub use flat::{apply_flat, draw_flat_channel, CsiMode, FlatChannelConfig, FlatRealization, NoiseReference};
pub use multipath::{draw_multipath_channel, MultipathChannelConfig, MultipathRealization, Tap};
pub use ofdm::{ls_estimate, ofdm_transmit, OfdmReception};

pub type C64 = Complex64;

/// Magnitude floor applied to channel estimates before inversion.
pub const CSI_FLOOR: f64 = 1e-6;

/// One draw of a channel.
#[derive(Clone, Debug, PartialEq)]
pub enum ChannelRealization {
    Flat(FlatRealization),
    Multipath(MultipathRealization),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum CsiProvenance {
    Perfect,
    Perturbed { variance: f64 },
    LsEstimated { pilot_count: usize },
}

/// Receiver-side channel knowledge: one coefficient for a flat link, or one
/// per subcarrier.
#[derive(Clone, Debug, PartialEq)]
pub struct CsiEstimate {
    pub values: Vec<C64>,
    pub provenance: CsiProvenance,
}

impl CsiEstimate {
    pub fn perfect(values: Vec<C64>) -> Self {
        CsiEstimate {
            values,
            provenance: CsiProvenance::Perfect,
        }
    }
}

/// Circularly-symmetric complex Gaussian sample with total variance `var`.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> C64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(re * s, im * s)
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Noise variance for a target SNR given the received signal power.
/// An infinite SNR disables noise.
pub fn noise_variance(signal_power: f64, snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        signal_power / db_to_linear(snr_db)
    }
}

pub fn mean_power(x: &[C64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v.norm_sqr()).sum::<f64>() / x.len() as f64
}

/// Adds `e ~ CN(0, variance)` to every entry of `truth`.
pub fn perturb_csi<R: Rng + ?Sized>(truth: &[C64], variance: f64, rng: &mut R) -> CsiEstimate {
    let values = if variance > 0.0 {
        truth.iter().map(|h| h + complex_gaussian(rng, variance)).collect()
    } else {
        truth.to_vec()
    };
    CsiEstimate {
        values,
        provenance: CsiProvenance::Perturbed { variance },
    }
}

/// Zero-forcing output plus the number of estimates that hit [`CSI_FLOOR`].
#[derive(Clone, Debug, PartialEq)]
pub struct ZfOutput {
    pub symbols: Vec<C64>,
    pub floored: usize,
}

fn floor_csi(h: C64, floored: &mut usize) -> C64 {
    let mag = h.norm();
    if mag >= CSI_FLOOR {
        return h;
    }
    *floored += 1;
    if mag == 0.0 {
        C64::new(CSI_FLOOR, 0.0)
    } else {
        h * (CSI_FLOOR / mag)
    }
}

/// `x = y / (gain * h)`. A single-entry estimate applies to every sample
/// (flat link); an `N`-entry estimate applies per subcarrier to consecutive
/// `N`-sample symbols.
pub fn zf_detect(y: &[C64], csi: &CsiEstimate, gain: f64) -> Result<ZfOutput> {
    let n = csi.values.len();
    if n == 0 || (n > 1 && y.len() % n != 0) {
        return Err(CoreError::FrameSize(format!(
            "{} received samples cannot be split over {} channel estimates",
            y.len(),
            n
        )));
    }
    let mut floored = 0;
    let inv: Vec<C64> = csi
        .values
        .iter()
        .map(|&h| (floor_csi(h, &mut floored) * gain).inv())
        .collect();
    let symbols = y
        .iter()
        .enumerate()
        .map(|(i, &v)| v * inv[i % n])
        .collect();
    Ok(ZfOutput { symbols, floored })
}
