//! OFDM framing over a multi-path channel.
//!
//! A frame is one pilot OFDM symbol followed by up to
//! `data_symbols_per_frame` data symbols. The pilot symbol carries
//! `pilot_count` unit-magnitude QPSK values on evenly spaced subcarriers
//! (comb) and nulls elsewhere; data symbols load every subcarrier. Each frame
//! is equalized with its own least-squares estimate.

use std::sync::Arc;

use rand::Rng;
use rustfft::{Fft, FftPlanner};

use super::multipath::{impulse_response, MultipathChannelConfig, MultipathRealization};
use super::{complex_gaussian, mean_power, noise_variance, zf_detect, CsiEstimate, CsiProvenance, C64};
use crate::error::{CoreError, Result};

/// Evenly spaced pilot subcarriers starting at 0.
pub fn pilot_positions(num_subcarriers: usize, pilot_count: usize) -> Vec<usize> {
    let step = num_subcarriers / pilot_count;
    (0..pilot_count).map(|k| k * step).collect()
}

/// Known QPSK pilot values, cycling through the four constellation points.
pub fn pilot_symbols(pilot_count: usize) -> Vec<C64> {
    (0..pilot_count)
        .map(|k| C64::from_polar(1.0, std::f64::consts::FRAC_PI_4 * (2 * (k % 4) + 1) as f64))
        .collect()
}

/// Frequency-domain observations of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct OfdmFrame {
    /// received values at the pilot subcarriers
    pub rx_pilots: Vec<C64>,
    /// received data symbols, `num_subcarriers` per OFDM symbol
    pub rx_data: Vec<C64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfdmReception {
    pub frames: Vec<OfdmFrame>,
    pub pilot_positions: Vec<usize>,
    pub tx_pilots: Vec<C64>,
    pub num_subcarriers: usize,
    pub noise_var: f64,
}

/// Equalized data plus the per-frame channel estimates used.
#[derive(Clone, Debug, PartialEq)]
pub struct Equalized {
    pub symbols: Vec<C64>,
    pub estimates: Vec<CsiEstimate>,
    pub floored: usize,
}

impl OfdmReception {
    /// Least-squares estimation and zero-forcing per frame.
    pub fn equalize(&self) -> Result<Equalized> {
        let mut symbols = Vec::new();
        let mut estimates = Vec::with_capacity(self.frames.len());
        let mut floored = 0;
        for f in &self.frames {
            let est = ls_estimate(&f.rx_pilots, &self.tx_pilots, &self.pilot_positions, self.num_subcarriers)?;
            let out = zf_detect(&f.rx_data, &est, 1.0)?;
            symbols.extend(out.symbols);
            floored += out.floored;
            estimates.push(est);
        }
        Ok(Equalized { symbols, estimates, floored })
    }

    /// Zero-forcing with a known frequency response.
    pub fn equalize_known(&self, response: &[C64]) -> Result<Equalized> {
        let csi = CsiEstimate::perfect(response.to_vec());
        let mut symbols = Vec::new();
        let mut floored = 0;
        for f in &self.frames {
            let out = zf_detect(&f.rx_data, &csi, 1.0)?;
            symbols.extend(out.symbols);
            floored += out.floored;
        }
        Ok(Equalized {
            symbols,
            estimates: vec![csi; self.frames.len()],
            floored,
        })
    }
}

struct Modem {
    n: usize,
    cp: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Modem {
    fn new(n: usize, cp: usize) -> Self {
        let mut planner = FftPlanner::new();
        Modem {
            n,
            cp,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    /// Unitary inverse transform with the cyclic prefix prepended.
    fn modulate(&self, freq: &[C64], out: &mut Vec<C64>) {
        let mut buf = freq.to_vec();
        self.inv.process(&mut buf);
        let s = (self.n as f64).sqrt().recip();
        for v in &mut buf {
            *v *= s;
        }
        out.extend_from_slice(&buf[self.n - self.cp..]);
        out.extend_from_slice(&buf);
    }

    /// Strips the prefix of the symbol at `start` and applies the unitary transform.
    fn demodulate(&self, stream: &[C64], start: usize) -> Vec<C64> {
        let mut buf = stream[start + self.cp..start + self.cp + self.n].to_vec();
        self.fwd.process(&mut buf);
        let s = (self.n as f64).sqrt().recip();
        for v in &mut buf {
            *v *= s;
        }
        buf
    }
}

/// Sends `symbols` (a multiple of `num_subcarriers`) through the channel.
///
/// The time-domain stream of all frames is convolved linearly with the taps,
/// so a tail longer than the prefix leaks into the next OFDM symbol. Noise
/// variance per sample is `mean|H|^2 * mean|X|^2 / snr`, with `X` the data
/// symbols.
pub fn ofdm_transmit<R: Rng + ?Sized>(
    symbols: &[C64],
    channel: &MultipathRealization,
    cfg: &MultipathChannelConfig,
    rng: &mut R,
) -> Result<OfdmReception> {
    cfg.validate()?;
    let n = cfg.num_subcarriers;
    if symbols.is_empty() {
        return Err(CoreError::EmptyFrame);
    }
    if symbols.len() % n != 0 {
        return Err(CoreError::FrameSize(format!(
            "{} symbols is not a multiple of {n} subcarriers",
            symbols.len()
        )));
    }
    if channel.response.len() != n || channel.max_delay() >= n {
        return Err(CoreError::FrameSize(format!(
            "channel response has {} subcarriers, link has {n}",
            channel.response.len()
        )));
    }
    let positions = pilot_positions(n, cfg.pilot_count);
    let tx_pilots = pilot_symbols(cfg.pilot_count);
    let mut pilot_freq = vec![C64::new(0.0, 0.0); n];
    for (&p, &v) in positions.iter().zip(&tx_pilots) {
        pilot_freq[p] = v;
    }

    let modem = Modem::new(n, cfg.cyclic_prefix);
    let sym_len = n + cfg.cyclic_prefix;
    let data_syms: Vec<&[C64]> = symbols.chunks(n).collect();
    let frames_layout: Vec<&[&[C64]]> = data_syms.chunks(cfg.data_symbols_per_frame).collect();

    let mut tx = Vec::new();
    for frame in &frames_layout {
        modem.modulate(&pilot_freq, &mut tx);
        for d in frame.iter() {
            modem.modulate(d, &mut tx);
        }
    }

    let h = impulse_response(&channel.taps, n);
    let h_power: f64 = h.iter().map(|v| v.norm_sqr()).sum();
    let noise_var = noise_variance(h_power * mean_power(symbols), cfg.snr_db);
    let mut rx = vec![C64::new(0.0, 0.0); tx.len()];
    for (t, out) in rx.iter_mut().enumerate() {
        let mut acc = C64::new(0.0, 0.0);
        for (d, &hv) in h.iter().enumerate().take(t + 1) {
            if hv != C64::new(0.0, 0.0) {
                acc += hv * tx[t - d];
            }
        }
        *out = if noise_var > 0.0 { acc + complex_gaussian(rng, noise_var) } else { acc };
    }

    let mut frames = Vec::with_capacity(frames_layout.len());
    let mut cursor = 0;
    for frame in &frames_layout {
        let pilot_rx = modem.demodulate(&rx, cursor);
        cursor += sym_len;
        let mut rx_data = Vec::with_capacity(frame.len() * n);
        for _ in 0..frame.len() {
            rx_data.extend(modem.demodulate(&rx, cursor));
            cursor += sym_len;
        }
        frames.push(OfdmFrame {
            rx_pilots: positions.iter().map(|&p| pilot_rx[p]).collect(),
            rx_data,
        });
    }
    Ok(OfdmReception {
        frames,
        pilot_positions: positions,
        tx_pilots,
        num_subcarriers: n,
        noise_var,
    })
}

/// `H[p] = Y[p] / X[p]` at the pilots, linear interpolation of real and
/// imaginary parts between them, nearest-pilot values beyond the outermost
/// pilots.
pub fn ls_estimate(
    rx_pilots: &[C64],
    tx_pilots: &[C64],
    positions: &[usize],
    num_subcarriers: usize,
) -> Result<CsiEstimate> {
    if rx_pilots.len() != tx_pilots.len() || positions.len() != tx_pilots.len() {
        return Err(CoreError::Length {
            expected: positions.len(),
            got: rx_pilots.len().min(tx_pilots.len()),
        });
    }
    if positions.is_empty() {
        return Err(CoreError::FrameSize("no pilots".into()));
    }
    if positions.windows(2).any(|w| w[0] >= w[1]) || positions[positions.len() - 1] >= num_subcarriers {
        return Err(CoreError::FrameSize(format!(
            "pilot positions must increase and stay below {num_subcarriers}"
        )));
    }
    let mut at_pilots = Vec::with_capacity(positions.len());
    for (i, (&y, &x)) in rx_pilots.iter().zip(tx_pilots).enumerate() {
        if x == C64::new(0.0, 0.0) {
            return Err(CoreError::ZeroPilot(i));
        }
        at_pilots.push(y / x);
    }
    let last = positions.len() - 1;
    let mut values = Vec::with_capacity(num_subcarriers);
    let mut seg = 0;
    for i in 0..num_subcarriers {
        let v = if i <= positions[0] {
            at_pilots[0]
        } else if i >= positions[last] {
            at_pilots[last]
        } else {
            while positions[seg + 1] < i {
                seg += 1;
            }
            let (p0, p1) = (positions[seg], positions[seg + 1]);
            let t = (i - p0) as f64 / (p1 - p0) as f64;
            at_pilots[seg] * (1.0 - t) + at_pilots[seg + 1] * t
        };
        values.push(v);
    }
    Ok(CsiEstimate {
        values,
        provenance: CsiProvenance::LsEstimated { pilot_count: positions.len() },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::draw_multipath_channel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn qpsk_data(count: usize, rng: &mut ChaCha8Rng) -> Vec<C64> {
        (0..count)
            .map(|_| C64::from_polar(1.0, std::f64::consts::FRAC_PI_4 * (2 * rng.gen_range(0..4) + 1) as f64))
            .collect()
    }

    fn noiseless(pilots: usize) -> MultipathChannelConfig {
        MultipathChannelConfig::with_pilots(pilots, f64::INFINITY)
    }

    #[test]
    fn noiseless_link_is_per_subcarrier_multiplication() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = noiseless(16);
        let ch = draw_multipath_channel(&cfg, &mut rng);
        let x = qpsk_data(64 * 6, &mut rng);
        let rx = ofdm_transmit(&x, &ch, &cfg, &mut rng).unwrap();
        assert_eq!(rx.frames.len(), 2);
        let y: Vec<C64> = rx.frames.iter().flat_map(|f| f.rx_data.clone()).collect();
        for (k, (yv, xv)) in y.iter().zip(&x).enumerate() {
            let hv = ch.response[k % 64];
            assert!((yv - hv * xv).norm() < 1e-6);
            assert!((yv / xv - hv).norm() < 1e-6);
        }
    }

    #[test]
    fn identity_channel_returns_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = noiseless(16);
        let x = qpsk_data(64 * 3, &mut rng);
        let rx = ofdm_transmit(&x, &MultipathRealization::identity(64), &cfg, &mut rng).unwrap();
        let eq = rx.equalize().unwrap();
        for (a, b) in eq.symbols.iter().zip(&x) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn frame_size_is_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = noiseless(16);
        let x = qpsk_data(65, &mut rng);
        assert!(matches!(
            ofdm_transmit(&x, &MultipathRealization::identity(64), &cfg, &mut rng),
            Err(CoreError::FrameSize(_))
        ));
    }

    fn recovery_mse(cfg: &MultipathChannelConfig, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut err = 0.0;
        let mut count = 0;
        for _ in 0..50 {
            let ch = draw_multipath_channel(cfg, &mut rng);
            let x = qpsk_data(64 * 4, &mut rng);
            let rx = ofdm_transmit(&x, &ch, cfg, &mut rng).unwrap();
            let y: Vec<C64> = rx.frames.iter().flat_map(|f| f.rx_data.clone()).collect();
            for (k, (yv, xv)) in y.iter().zip(&x).enumerate() {
                err += (yv / ch.response[k % 64] - xv).norm_sqr().min(1e6);
                count += 1;
            }
        }
        err / count as f64
    }

    #[test]
    fn short_prefix_causes_interference() {
        let good = noiseless(16);
        let short = MultipathChannelConfig {
            cyclic_prefix: 4,
            allow_short_prefix: true,
            ..good
        };
        let base = recovery_mse(&good, 9);
        let isi = recovery_mse(&short, 9);
        assert!(base < 1e-12, "{base}");
        assert!(isi > 1e-3, "{isi}");
    }

    #[test]
    fn ls_with_every_subcarrier_a_pilot_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = noiseless(64);
        let ch = draw_multipath_channel(&cfg, &mut rng);
        let rx = ofdm_transmit(&qpsk_data(64, &mut rng), &ch, &cfg, &mut rng).unwrap();
        let est = rx.equalize().unwrap().estimates.remove(0);
        for (a, b) in est.values.iter().zip(&ch.response) {
            assert!((a - b).norm() < 1e-9);
        }
        assert_eq!(est.provenance, CsiProvenance::LsEstimated { pilot_count: 64 });
    }

    #[test]
    fn sparse_pilots_interpolate_within_slope_bound() {
        // a smooth two-tap channel
        let taps = vec![
            crate::channel::Tap { delay: 0, gain: C64::new(0.9, 0.0) },
            crate::channel::Tap { delay: 1, gain: C64::new(0.3, 0.2) },
        ];
        let ch = MultipathRealization::from_taps(taps, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = noiseless(16);
        let rx = ofdm_transmit(&qpsk_data(64, &mut rng), &ch, &cfg, &mut rng).unwrap();
        let est = rx.equalize().unwrap().estimates.remove(0);
        let max_err = est
            .values
            .iter()
            .zip(&ch.response)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        let max_slope = ch
            .response
            .windows(2)
            .map(|w| (w[1] - w[0]).norm())
            .fold(0.0, f64::max);
        assert!(max_err > 0.0);
        assert!(max_err < max_slope * 4.0, "{max_err} vs {}", max_slope * 4.0);
    }

    #[test]
    fn zero_pilot_is_rejected() {
        let pos = [0, 32];
        let res = ls_estimate(
            &[C64::new(1.0, 0.0); 2],
            &[C64::new(1.0, 0.0), C64::new(0.0, 0.0)],
            &pos,
            64,
        );
        assert!(matches!(res, Err(CoreError::ZeroPilot(1))));
    }

    #[test]
    fn interpolation_and_edges() {
        let est = ls_estimate(
            &[C64::new(1.0, 0.0), C64::new(3.0, -2.0)],
            &[C64::new(1.0, 0.0); 2],
            &[2, 6],
            8,
        )
        .unwrap();
        assert_eq!(est.values[0], C64::new(1.0, 0.0));
        assert_eq!(est.values[4], C64::new(2.0, -1.0));
        assert_eq!(est.values[7], C64::new(3.0, -2.0));
    }
}
