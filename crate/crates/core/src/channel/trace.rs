//! Debug dump of channel responses next to their estimates.

use std::io::Write;

use super::C64;
use crate::error::{CoreError, Result};

pub const TRACE_HEADER: &str = "frame,subcarrier,H_real,H_imag,Hhat_real,Hhat_imag";

/// Writes one row per (frame, subcarrier). `truth` and `estimates` are
/// indexed by frame.
pub fn write_trace<W: Write>(out: &mut W, truth: &[Vec<C64>], estimates: &[Vec<C64>]) -> Result<()> {
    if truth.len() != estimates.len() {
        return Err(CoreError::Length { expected: truth.len(), got: estimates.len() });
    }
    writeln!(out, "{TRACE_HEADER}")?;
    for (frame, (h, hh)) in truth.iter().zip(estimates).enumerate() {
        if h.len() != hh.len() {
            return Err(CoreError::Length { expected: h.len(), got: hh.len() });
        }
        for (i, (a, b)) in h.iter().zip(hh).enumerate() {
            writeln!(out, "{frame},{i},{},{},{},{}", a.re, a.im, b.re, b.im)?;
        }
    }
    Ok(())
}
