//! Sweeps over SNR, path-loss exponent and pilot count.

use std::str::FromStr;

use v2v_core::perception::{Anchor, PerceptionModel};
use v2v_core::weighting::WeightingNet;

use crate::config::EvaluationConfig;
use crate::error::{HarnessError, Result};
use crate::evaluate::{prepare_scenes, ChannelPoint, EvalScene, Evaluator};
use crate::metrics::{FusionMode, MetricsRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Snr,
    PathLoss,
    Pilots,
}

impl FromStr for Axis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snr" => Ok(Axis::Snr),
            "pathloss" | "path-loss" => Ok(Axis::PathLoss),
            "pilots" => Ok(Axis::Pilots),
            _ => Err(HarnessError::Config(format!("unknown sweep axis {s:?}"))),
        }
    }
}

impl Axis {
    /// SNR -10..30 dB in 5 dB steps, n 1..3 in steps of 0.25, pilots 16 and 64.
    pub fn points(self, eval: &EvaluationConfig) -> Vec<ChannelPoint> {
        match self {
            Axis::Snr => (0..=8)
                .map(|i| ChannelPoint::FlatSnr {
                    snr_db: -10.0 + 5.0 * i as f64,
                })
                .collect(),
            Axis::PathLoss => (0..=8)
                .map(|i| ChannelPoint::PathLoss {
                    n: 1.0 + 0.25 * i as f64,
                    snr_db: eval.pathloss_snr_db,
                })
                .collect(),
            Axis::Pilots => [16, 64]
                .into_iter()
                .map(|pilots| ChannelPoint::Ofdm {
                    pilots,
                    snr_db: eval.pilots_snr_db,
                })
                .collect(),
        }
    }
}

/// Parses a comma-separated mode list such as `ego-only,weighted`.
pub fn parse_modes(list: &str) -> Result<Vec<FusionMode>> {
    let mut modes = Vec::new();
    for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let m = FusionMode::parse(part).ok_or_else(|| HarnessError::Config(format!("unknown fusion mode {part:?}")))?;
        if !modes.contains(&m) {
            modes.push(m);
        }
    }
    if modes.is_empty() {
        return Err(HarnessError::Config("no fusion modes given".into()));
    }
    Ok(modes)
}

/// Trained artifacts available to an evaluation.
#[derive(Default)]
pub struct Models<'a> {
    pub scheme1: Option<&'a PerceptionModel>,
    pub scheme2: Option<&'a PerceptionModel>,
    pub weighting: Option<&'a WeightingNet>,
}

/// One backbone with its test features computed once.
struct Prepared<'a> {
    scheme: u8,
    model: &'a PerceptionModel,
    scenes: Vec<EvalScene>,
}

/// Evaluates every requested mode at every point. Ego-only and unweighted
/// rows are produced for each available backbone (tagged scheme 1 or 2);
/// weighted rows use the scheme-2 backbone with the weighting network and
/// are tagged scheme 3.
pub fn evaluate_points(
    models: &Models,
    points: &[ChannelPoint],
    modes: &[FusionMode],
    test: &[v2v_core::perception::Scene],
    anchors: &[Anchor],
    eval: &EvaluationConfig,
    seed: u64,
) -> Result<Vec<MetricsRecord>> {
    let wants_plain = modes.iter().any(|m| *m != FusionMode::Weighted);
    if wants_plain && models.scheme1.is_none() && models.scheme2.is_none() {
        return Err(HarnessError::MissingArtifact("no trained backbone for ego-only/unweighted modes".into()));
    }
    if modes.contains(&FusionMode::Weighted) && (models.scheme2.is_none() || models.weighting.is_none()) {
        return Err(HarnessError::MissingArtifact(
            "weighted mode needs the scheme-2 backbone and the weighting network".into(),
        ));
    }
    let mut prepared = Vec::new();
    for (scheme, model) in [(1u8, models.scheme1), (2u8, models.scheme2)] {
        if let Some(model) = model {
            prepared.push(Prepared {
                scheme,
                model,
                scenes: prepare_scenes(model, test)?,
            });
        }
    }
    let mut records = Vec::new();
    for point in points {
        for &mode in modes {
            for p in &prepared {
                let scheme = match mode {
                    FusionMode::Weighted if p.scheme == 2 => 3,
                    FusionMode::Weighted => continue,
                    _ => p.scheme,
                };
                let ev = Evaluator {
                    model: p.model,
                    weighting: models.weighting,
                    anchors,
                    config: eval,
                    seed,
                };
                let o = ev.evaluate(&p.scenes, point, mode)?;
                records.push(MetricsRecord {
                    scheme,
                    snr_db: point.snr_db(),
                    path_loss_n: point.path_loss_n(),
                    pilot_count: point.pilot_count(),
                    mode,
                    ap_03: o.ap_03,
                    ap_07: o.ap_07,
                    feature_mse: o.feature_mse,
                    mean_weight: o.mean_weight,
                });
            }
        }
    }
    Ok(records)
}

/// Looks up the record for a scheme, mode and point.
pub fn find<'r>(
    records: &'r [MetricsRecord],
    scheme: u8,
    mode: FusionMode,
    point: &ChannelPoint,
) -> Option<&'r MetricsRecord> {
    records.iter().find(|r| {
        r.scheme == scheme
            && r.mode == mode
            && r.snr_db == point.snr_db()
            && r.path_loss_n == point.path_loss_n()
            && r.pilot_count == point.pilot_count()
    })
}
