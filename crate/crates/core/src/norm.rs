//! Windows of observations and per-window instance normalisation.

use alloc::vec::Vec;

use crate::error::shape_err;
use crate::{Error, Result};

/// A `C x L` block of observations, row-major by channel.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeWindow {
    channels: usize,
    len: usize,
    values: Vec<f64>,
    /// Offset of the first column in the source series.
    pub origin: usize,
}

impl TimeWindow {
    pub fn new(channels: usize, len: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != channels * len {
            return Err(shape_err(&[channels, len], &[values.len()]));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(alloc::format!(
                "window entry ({}, {})",
                i / len.max(1),
                i % len.max(1)
            )));
        }
        Ok(Self { channels, len, values, origin: 0 })
    }

    pub(crate) fn from_parts(channels: usize, len: usize, values: Vec<f64>, origin: usize) -> Self {
        debug_assert_eq!(values.len(), channels * len);
        Self { channels, len, values, origin }
    }

    /// Columns `[start, start + len)` of a `C x T` series.
    pub fn slice(series: &[f64], channels: usize, total: usize, start: usize, len: usize) -> Result<Self> {
        if start + len > total {
            return Err(Error::OutOfBounds { needed: start + len, available: total });
        }
        let mut values = Vec::with_capacity(channels * len);
        for c in 0..channels {
            values.extend_from_slice(&series[c * total + start..c * total + start + len]);
        }
        Ok(Self { channels, len, values, origin: start })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.values[c * self.len..(c + 1) * self.len]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// Per-channel mean and (clamped) population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn channel_stats(values: &[f64], channels: usize, len: usize, eps: f64) -> InstanceStats {
    let mut mean = Vec::with_capacity(channels);
    let mut std = Vec::with_capacity(channels);
    for c in 0..channels {
        let row = &values[c * len..(c + 1) * len];
        let m = row.iter().sum::<f64>() / len as f64;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / len as f64;
        mean.push(m);
        std.push(libm::sqrt(var).max(eps));
    }
    InstanceStats { mean, std }
}

/// Zero mean, unit population std per channel. Constant channels become zeros
/// and report `std = eps`.
pub fn instance_normalize(w: &TimeWindow, eps: f64) -> (TimeWindow, InstanceStats) {
    let stats = channel_stats(&w.values, w.channels, w.len, eps);
    let mut values = w.values.clone();
    for c in 0..w.channels {
        let (m, s) = (stats.mean[c], stats.std[c]);
        for v in &mut values[c * w.len..(c + 1) * w.len] {
            *v = (*v - m) / s;
        }
    }
    (TimeWindow::from_parts(w.channels, w.len, values, w.origin), stats)
}

pub fn instance_denormalize(w: &TimeWindow, stats: &InstanceStats) -> Result<TimeWindow> {
    if stats.mean.len() != w.channels || stats.std.len() != w.channels {
        return Err(shape_err(&[w.channels], &[stats.mean.len()]));
    }
    let mut values = w.values.clone();
    for c in 0..w.channels {
        for v in &mut values[c * w.len..(c + 1) * w.len] {
            *v = *v * stats.std[c] + stats.mean[c];
        }
    }
    Ok(TimeWindow::from_parts(w.channels, w.len, values, w.origin))
}
