//! Inter-arrival gap normalisation: `log(1 + seconds)` then min-max scaling
//! with statistics fitted on training gaps.

use serde::{Deserialize, Serialize};

use super::split::SplitSpec;
use crate::error::{Result, TipsError};

/// Normalised gaps above 1 are allowed up to this much, for test-time gaps
/// beyond the training range.
pub const GAP_SLACK: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapNormalizer {
    pub log_min: f64,
    pub log_max: f64,
}

impl GapNormalizer {
    pub fn fit(gaps_seconds: impl IntoIterator<Item = i64>) -> Self {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for g in gaps_seconds {
            let x = (g.max(0) as f64).ln_1p();
            lo = lo.min(x);
            hi = hi.max(x);
        }
        if !lo.is_finite() {
            lo = 0.0;
            hi = 1.0;
        }
        GapNormalizer {
            log_min: lo,
            log_max: hi,
        }
    }

    /// Fits on every training gap of every user, counting sequence starts as
    /// a zero gap.
    pub fn fit_splits(splits: &SplitSpec) -> Self {
        let mut gaps = Vec::new();
        for u in &splits.users {
            let mut prev = u.prev_timestamp;
            for t in &u.train {
                gaps.push(prev.map_or(0, |p| t.timestamp - p));
                prev = Some(t.timestamp);
            }
        }
        GapNormalizer::fit(gaps)
    }

    pub fn normalize(&self, gap_seconds: i64) -> Result<f64> {
        if gap_seconds < 0 {
            return Err(TipsError::DataCorruption(format!("negative time gap {gap_seconds}")));
        }
        let x = (gap_seconds as f64).ln_1p();
        let range = self.log_max - self.log_min;
        let z = if range > 0.0 {
            (x - self.log_min) / range
        } else {
            0.0
        };
        Ok(z.clamp(0.0, 1.0 + GAP_SLACK))
    }

    /// Normalised gap between `t` and the preceding timestamp; zero at a
    /// sequence start.
    pub fn gap(&self, prev: Option<i64>, t: i64) -> Result<f64> {
        match prev {
            None => Ok(0.0),
            Some(p) => self.normalize(t - p),
        }
    }
}

/// Normalised gaps of an ascending timestamp sequence (first entry 0).
pub fn normalize_gaps(timestamps: &[i64], norm: &GapNormalizer) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(timestamps.len());
    let mut prev = None;
    for &t in timestamps {
        out.push(norm.gap(prev, t)?);
        prev = Some(t);
    }
    Ok(out)
}
