//! Tap-delay-line multi-path channel.
//!
//! Each draw places `num_paths` complex Gaussian taps at integer delays drawn
//! uniformly from `0..=max_delay`, with an exponential power-delay profile
//! normalized so the realized tap powers sum to one. Taps sharing a delay
//! simply add.

use rand::Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{complex_gaussian, C64};
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultipathChannelConfig {
    pub num_subcarriers: usize,
    pub num_paths: usize,
    /// largest tap delay in samples
    pub max_delay: usize,
    pub cyclic_prefix: usize,
    pub pilot_count: usize,
    /// data OFDM symbols following each pilot symbol
    pub data_symbols_per_frame: usize,
    /// power-delay-profile decay constant in samples
    pub delay_decay: f64,
    pub snr_db: f64,
    /// recorded only; no Doppler is simulated
    pub carrier_frequency_hz: f64,
    /// Lets tests run a prefix shorter than the delay spread.
    #[serde(default)]
    pub allow_short_prefix: bool,
    /// equalize with the true response instead of the pilot estimate
    #[serde(default)]
    pub perfect_csi: bool,
}

impl Default for MultipathChannelConfig {
    fn default() -> Self {
        MultipathChannelConfig {
            num_subcarriers: 64,
            num_paths: 24,
            max_delay: 16,
            cyclic_prefix: 16,
            pilot_count: 16,
            data_symbols_per_frame: 4,
            delay_decay: 4.0,
            snr_db: 30.0,
            carrier_frequency_hz: 2.6e9,
            allow_short_prefix: false,
            perfect_csi: false,
        }
    }
}

impl MultipathChannelConfig {
    pub fn with_pilots(pilot_count: usize, snr_db: f64) -> Self {
        MultipathChannelConfig {
            pilot_count,
            snr_db,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        let n = self.num_subcarriers;
        if n == 0 {
            return bad("num_subcarriers must be positive".into());
        }
        if self.num_paths == 0 {
            return bad("num_paths must be positive".into());
        }
        if self.max_delay >= n {
            return bad(format!("max_delay {} must be below num_subcarriers {n}", self.max_delay));
        }
        if self.cyclic_prefix < self.max_delay && !self.allow_short_prefix {
            return bad(format!(
                "cyclic_prefix {} is shorter than max_delay {}",
                self.cyclic_prefix, self.max_delay
            ));
        }
        if self.pilot_count == 0 || n % self.pilot_count != 0 {
            return bad(format!("pilot_count {} must divide num_subcarriers {n}", self.pilot_count));
        }
        if self.data_symbols_per_frame == 0 {
            return bad("data_symbols_per_frame must be positive".into());
        }
        if !(self.delay_decay > 0.0) {
            return bad("delay_decay must be positive".into());
        }
        if self.snr_db.is_nan() {
            return bad("SNR must be a number".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap {
    pub delay: usize,
    pub gain: C64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultipathRealization {
    pub taps: Vec<Tap>,
    /// per-subcarrier frequency response
    pub response: Vec<C64>,
}

impl MultipathRealization {
    pub fn from_taps(taps: Vec<Tap>, num_subcarriers: usize) -> Self {
        let response = frequency_response(&impulse_response(&taps, num_subcarriers), num_subcarriers);
        MultipathRealization { taps, response }
    }

    pub fn identity(num_subcarriers: usize) -> Self {
        Self::from_taps(vec![Tap { delay: 0, gain: C64::new(1.0, 0.0) }], num_subcarriers)
    }

    pub fn total_power(&self) -> f64 {
        self.taps.iter().map(|t| t.gain.norm_sqr()).sum()
    }

    pub fn max_delay(&self) -> usize {
        self.taps.iter().map(|t| t.delay).max().unwrap_or(0)
    }
}

/// Zero-padded impulse response of length `len`; taps sharing a delay add.
pub fn impulse_response(taps: &[Tap], len: usize) -> Vec<C64> {
    let mut h = vec![C64::new(0.0, 0.0); len];
    for t in taps {
        h[t.delay] += t.gain;
    }
    h
}

/// `H[i] = sum_t h[t] exp(-j 2 pi i t / N)`.
pub fn frequency_response(impulse: &[C64], num_subcarriers: usize) -> Vec<C64> {
    let mut buf = impulse.to_vec();
    buf.resize(num_subcarriers, C64::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(num_subcarriers).process(&mut buf);
    buf
}

pub fn draw_multipath_channel<R: Rng + ?Sized>(
    cfg: &MultipathChannelConfig,
    rng: &mut R,
) -> MultipathRealization {
    let mut taps: Vec<Tap> = (0..cfg.num_paths)
        .map(|_| {
            let delay = rng.gen_range(0..=cfg.max_delay);
            let profile = (-(delay as f64) / cfg.delay_decay).exp();
            Tap { delay, gain: complex_gaussian(rng, profile) }
        })
        .collect();
    let total: f64 = taps.iter().map(|t| t.gain.norm_sqr()).sum();
    if total > 0.0 {
        let s = total.sqrt().recip();
        for t in &mut taps {
            t.gain *= s;
        }
    }
    MultipathRealization::from_taps(taps, cfg.num_subcarriers)
}
