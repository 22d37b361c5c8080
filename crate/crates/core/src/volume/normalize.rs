use serde::{Deserialize, Serialize};

use super::Volume;
use crate::error::{Error, Result};

/// Joint intensity range used for min-max scaling; stored as a sidecar so it
/// can be reapplied.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRange {
    pub min: f64,
    pub max: f64,
}

impl NormalizationRange {
    pub fn scale(&self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }
}

/// Min-max normalize all volumes with one range taken over every voxel of
/// every volume (the mask is ignored).
pub fn joint_minmax_normalize(vols: &[Volume]) -> Result<(Vec<Volume>, NormalizationRange)> {
    if vols.is_empty() {
        return Err(Error::invalid("joint normalization needs at least one volume"));
    }
    let (min, max) = vols.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        let (a, b) = v.min_max();
        (lo.min(a), hi.max(b))
    });
    if !min.is_finite() || !max.is_finite() {
        return Err(Error::invalid("non-finite intensities in normalization input"));
    }
    if max <= min {
        return Err(Error::DegenerateRange(min));
    }
    let range = NormalizationRange { min, max };
    let out = vols.iter().map(|v| apply_normalization(v, &range)).collect();
    Ok((out, range))
}

pub fn apply_normalization(vol: &Volume, range: &NormalizationRange) -> Volume {
    vol.map(|v| range.scale(v))
}
