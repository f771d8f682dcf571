//! Feature maps over the air: pack real values into unit-power complex
//! symbols, run them through a link, equalize and unpack.
//!
//! Shape and normalization scale travel on an error-free side channel; only
//! the payload sees the channel. One channel realization is drawn per packet.

use rand::Rng;
use serde::{Deserialize, Serialize};
use v2v_nn::Tensor;

use crate::channel::{
    apply_flat, draw_flat_channel, draw_multipath_channel, mean_power, ofdm_transmit, perturb_csi, zf_detect,
    CsiEstimate, CsiMode, FlatChannelConfig, MultipathChannelConfig, C64,
};
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePacket {
    pub source: usize,
    pub shape: Vec<usize>,
    /// `sqrt` of the mean symbol power before normalization
    pub scale: f64,
    pub payload: Vec<C64>,
}

/// Pairs consecutive values into `(I, Q)`, zero-pads an odd tail and scales
/// the payload to unit average power. An all-zero map keeps scale 1.
pub fn pack(source: usize, f: &Tensor) -> FeaturePacket {
    let data = f.data();
    let mut payload: Vec<C64> = data
        .chunks(2)
        .map(|c| C64::new(c[0], c.get(1).copied().unwrap_or(0.0)))
        .collect();
    let p = mean_power(&payload);
    let scale = if p > 0.0 { p.sqrt() } else { 1.0 };
    for s in &mut payload {
        *s /= scale;
    }
    FeaturePacket {
        source,
        shape: f.shape().to_vec(),
        scale,
        payload,
    }
}

/// Inverse of [`pack`] applied to recovered symbols.
pub fn unpack(packet: &FeaturePacket, recovered: &[C64]) -> Result<Tensor> {
    if recovered.len() != packet.payload.len() {
        return Err(CoreError::Length {
            expected: packet.payload.len(),
            got: recovered.len(),
        });
    }
    let numel: usize = packet.shape.iter().product();
    let mut data = Vec::with_capacity(2 * recovered.len());
    for s in recovered {
        data.push(s.re * packet.scale);
        data.push(s.im * packet.scale);
    }
    data.truncate(numel);
    Ok(Tensor::new(&packet.shape, data)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Link {
    Ideal,
    Flat(FlatChannelConfig),
    Multipath(MultipathChannelConfig),
}

impl Link {
    pub fn validate(&self) -> Result<()> {
        match self {
            Link::Ideal => Ok(()),
            Link::Flat(c) => c.validate(),
            Link::Multipath(c) => c.validate(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LinkDiagnostics {
    pub noise_var: f64,
    /// channel estimates that hit the inversion floor
    pub floored: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transmission {
    pub feature: Tensor,
    pub diagnostics: LinkDiagnostics,
}

/// Symbols received and equalized over `link`.
pub fn transmit_symbols<R: Rng + ?Sized>(
    payload: &[C64],
    link: &Link,
    rng: &mut R,
) -> Result<(Vec<C64>, LinkDiagnostics)> {
    match link {
        Link::Ideal => Ok((payload.to_vec(), LinkDiagnostics::default())),
        Link::Flat(cfg) => {
            cfg.validate()?;
            let ch = draw_flat_channel(cfg, rng);
            let rx = apply_flat(payload, &ch, cfg.snr_db, cfg.noise_reference, rng)?;
            let csi = match cfg.csi {
                CsiMode::Perfect => CsiEstimate::perfect(vec![ch.h]),
                CsiMode::Perturbed { variance } => perturb_csi(&[ch.h], variance, rng),
            };
            let out = zf_detect(&rx.y, &csi, ch.gain)?;
            Ok((
                out.symbols,
                LinkDiagnostics {
                    noise_var: rx.noise_var,
                    floored: out.floored,
                },
            ))
        }
        Link::Multipath(cfg) => {
            cfg.validate()?;
            let n = cfg.num_subcarriers;
            let mut padded = payload.to_vec();
            padded.resize(payload.len().div_ceil(n) * n, C64::new(0.0, 0.0));
            let ch = draw_multipath_channel(cfg, rng);
            let rx = ofdm_transmit(&padded, &ch, cfg, rng)?;
            let eq = if cfg.perfect_csi {
                rx.equalize_known(&ch.response)?
            } else {
                rx.equalize()?
            };
            let mut symbols = eq.symbols;
            symbols.truncate(payload.len());
            Ok((
                symbols,
                LinkDiagnostics {
                    noise_var: rx.noise_var,
                    floored: eq.floored,
                },
            ))
        }
    }
}

/// `pack -> channel -> equalize -> unpack`, returning the recovered map.
/// The ideal link hands the map over unchanged.
pub fn transmit<R: Rng + ?Sized>(source: usize, f: &Tensor, link: &Link, rng: &mut R) -> Result<Transmission> {
    if *link == Link::Ideal {
        return Ok(Transmission {
            feature: f.clone(),
            diagnostics: LinkDiagnostics::default(),
        });
    }
    let packet = pack(source, f);
    let (symbols, diagnostics) = transmit_symbols(&packet.payload, link, rng)?;
    Ok(Transmission {
        feature: unpack(&packet, &symbols)?,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_ones_pack_to_two_unit_symbols() {
        let f = Tensor::new(&[4], vec![1.0; 4]).unwrap();
        let p = pack(0, &f);
        assert_eq!(p.payload.len(), 2);
        let want = C64::new(1.0, 1.0) / 2f64.sqrt();
        for s in &p.payload {
            assert!((s - want).norm() < 1e-15);
        }
        assert!((p.scale - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_map_keeps_unit_scale() {
        let f = Tensor::zeros(&[2, 3]);
        let p = pack(1, &f);
        assert_eq!(p.scale, 1.0);
        assert!(p.payload.iter().all(|s| s.norm() == 0.0));
        let back = unpack(&p, &vec![C64::new(0.0, 0.0); 3]).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let f = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let p = pack(0, &f);
        assert!(matches!(unpack(&p, &[C64::new(0.0, 0.0)]), Err(CoreError::Length { expected: 2, got: 1 })));
    }
}
