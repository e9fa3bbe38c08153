//! Min-max channel scaling shared by every learned component.
//!
//! Values map to [-1, 1] via 2(v - min)/(max - min) - 1. A channel whose
//! span collapses below `TINY_SPAN` normalizes to 0 so constant boundary
//! columns stay harmless.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TINY_SPAN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ChannelStats {
    pub fn from_rows<'a, I>(rows: I, width: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut min = vec![f64::INFINITY; width];
        let mut max = vec![f64::NEG_INFINITY; width];
        let mut any = false;
        for row in rows {
            if row.len() != width {
                return Err(Error::contract("row width does not match channel count"));
            }
            any = true;
            for (c, &v) in row.iter().enumerate() {
                min[c] = min[c].min(v);
                max[c] = max[c].max(v);
            }
        }
        if !any {
            return Err(Error::contract("cannot fit channel stats to an empty set"));
        }
        Ok(ChannelStats { min, max })
    }

    pub fn width(&self) -> usize {
        self.min.len()
    }

    pub fn span(&self, c: usize) -> f64 {
        self.max[c] - self.min[c]
    }

    pub fn normalize_value(&self, c: usize, v: f64) -> f64 {
        let span = self.span(c);
        if span.abs() < TINY_SPAN {
            0.0
        } else {
            2.0 * (v - self.min[c]) / span - 1.0
        }
    }

    pub fn denormalize_value(&self, c: usize, v: f64) -> f64 {
        let span = self.span(c);
        if span.abs() < TINY_SPAN {
            self.min[c]
        } else {
            self.min[c] + 0.5 * (v + 1.0) * span
        }
    }

    pub fn normalize_row(&self, row: &[f64], out: &mut [f64]) {
        for c in 0..self.width() {
            out[c] = self.normalize_value(c, row[c]);
        }
    }

    pub fn denormalize_row(&self, row: &[f64], out: &mut [f64]) {
        for c in 0..self.width() {
            out[c] = self.denormalize_value(c, row[c]);
        }
    }

    /// Factor converting a physical per-second rate of channel `c` into the
    /// per-second rate of its normalized image. Zero for collapsed spans.
    pub fn rate_scale(&self, c: usize) -> f64 {
        let span = self.span(c);
        if span.abs() < TINY_SPAN {
            0.0
        } else {
            2.0 / span
        }
    }
}
