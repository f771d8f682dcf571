//! Metrics rows and their CSV encoding.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// How received features are combined with the ego feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// no collaborator features are used
    EgoOnly,
    /// received features are fused as they arrive
    Unweighted,
    /// received features are scaled by the weighting network first
    Weighted,
}

impl FusionMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ego-only" => Some(FusionMode::EgoOnly),
            "unweighted" => Some(FusionMode::Unweighted),
            "weighted" => Some(FusionMode::Weighted),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::EgoOnly => "ego-only",
            FusionMode::Unweighted => "unweighted",
            FusionMode::Weighted => "weighted",
        }
    }
}

/// One evaluated (channel point, fusion mode) pair. Column order is fixed
/// by field order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scheme: u8,
    pub snr_db: f64,
    pub path_loss_n: Option<f64>,
    pub pilot_count: Option<usize>,
    pub mode: FusionMode,
    pub ap_03: f64,
    pub ap_07: f64,
    /// mean squared error of received vs. transmitted features
    pub feature_mse: Option<f64>,
    pub mean_weight: Option<f64>,
}

pub const METRICS_HEADER: &str =
    "scheme,snr_db,path_loss_n,pilot_count,mode,ap_03,ap_07,feature_mse,mean_weight";

pub fn write_metrics<W: Write>(out: W, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    if records.is_empty() {
        w.write_record(METRICS_HEADER.split(','))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics<R: Read>(input: R) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}
