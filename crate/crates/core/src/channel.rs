//! Channel capacity → transmit dimension budgets.
//!
//! A source emitting `l` floats every `T` seconds, each float carried by `η`
//! channel symbols at the Gaussian rate `½·log2(σ²/D)` bits per symbol, needs
//! `l·η·log2(σ²/D) / (2T)` bits/s. Inverting that against a measured capacity
//! `C_t` gives the total number of floats all sources may send.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    /// Channel symbols per transmitted float.
    pub eta: f64,
    /// Seconds between encoder outputs.
    pub period_t: f64,
    /// Source variance σ².
    pub source_var: f64,
    /// Tolerated quantization distortion D.
    pub quant_dist: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        Self { eta: 1.0, period_t: 1.0, source_var: 4.0, quant_dist: 1.0 }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eta", self.eta), ("period_t", self.period_t), ("source_var", self.source_var), ("quant_dist", self.quant_dist)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("channel {name} must be positive and finite, got {v}")));
            }
        }
        rate_lower_bound(self.source_var, self.quant_dist).map(|_| ())
    }

    /// `log2(σ²/D)`, twice the per-symbol rate.
    fn log_ratio(&self) -> Result<f64> {
        Ok(2.0 * rate_lower_bound(self.source_var, self.quant_dist)?)
    }
}

/// Gaussian rate-distortion bound `½·log2(σ²/D)` in bits per symbol.
pub fn rate_lower_bound(source_var: f64, quant_dist: f64) -> Result<f64> {
    if !(quant_dist > 0.0 && quant_dist < source_var && source_var.is_finite()) {
        return Err(Error::RateBoundNonPositive { source_var, quant_dist });
    }
    Ok(0.5 * (source_var / quant_dist).log2())
}

/// Bits per second needed to send `dim` floats every period.
pub fn source_bitrate(dim: usize, p: &ChannelParams) -> Result<f64> {
    p.validate()?;
    Ok(dim as f64 * p.eta * p.log_ratio()? / (2.0 * p.period_t))
}

/// Largest total float count whose bitrate fits in `capacity_bps`.
pub fn dimension_budget(capacity_bps: f64, p: &ChannelParams) -> Result<usize> {
    p.validate()?;
    if !(capacity_bps >= 0.0 && capacity_bps.is_finite()) {
        return Err(Error::Value(format!("capacity must be finite and ≥ 0, got {capacity_bps}")));
    }
    let exact = 2.0 * capacity_bps * p.period_t / (p.eta * p.log_ratio()?);
    Ok(exact.floor() as usize)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapacitySample {
    pub time_s: f64,
    pub capacity_bps: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChannelTrace {
    pub samples: Vec<CapacitySample>,
}

impl ChannelTrace {
    pub fn new(samples: Vec<CapacitySample>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if !(s.capacity_bps >= 0.0 && s.capacity_bps.is_finite()) {
                return Err(Error::Value(format!("trace row {i}: capacity {} must be ≥ 0", s.capacity_bps)));
            }
            if i > 0 && s.time_s <= samples[i - 1].time_s {
                return Err(Error::Value(format!("trace row {i}: times must be strictly increasing")));
            }
        }
        Ok(Self { samples })
    }

    /// Reads a `time_s,capacity_bps` CSV.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["time_s", "capacity_bps"] {
            return Err(Error::Value(format!("{}: expected header time_s,capacity_bps", path.display())));
        }
        let samples = rdr.deserialize().collect::<std::result::Result<Vec<CapacitySample>, _>>()?;
        Self::new(samples)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for s in &self.samples {
            w.serialize(s)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Per-sample dimension budgets for a capacity trace, re-evaluated at every sample.
pub fn budget_trace(trace: &ChannelTrace, p: &ChannelParams) -> Result<Vec<usize>> {
    trace.samples.iter().map(|s| dimension_budget(s.capacity_bps, p)).collect()
}
