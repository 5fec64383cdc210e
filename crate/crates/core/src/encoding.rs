//! Supervision targets built from point annotations (extended Gaussian
//! encoding and its pixel weights) and from instance masks (foreground plus
//! hover maps).

use serde::{Deserialize, Serialize};

use crate::error::{DawnError, Result};
use crate::raster::{
    distance_to_points, instance_distance_maps, BinaryMask, DistanceField, InstanceMap, PointSet, RealRaster,
};

/// Weight given to pixels closer than `r1` to an annotation.
pub const FOREGROUND_WEIGHT: f64 = 10.0;
/// Weight of the background ring `r1 <= D <= r2`.
pub const RING_WEIGHT: f64 = 1.0;
/// Encoding value of pixels that take no part in training.
pub const EXCLUDED: f64 = -1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingParams {
    /// Nucleus radius in pixels.
    pub r1: f64,
    /// Outer radius of the background ring in pixels.
    pub r2: f64,
    /// Gaussian spread in pixels.
    pub sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
}

impl EncodingParams {
    pub fn new(r1: f64, r2: f64, sigma: f64) -> Result<Self> {
        let p = EncodingParams { r1, r2, sigma, dataset: None };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r1 > 0.0 && self.r1 < self.r2 && self.r2.is_finite()) {
            return Err(DawnError::InvalidParams(format!(
                "encoding radii must satisfy 0 < r1 < r2, got r1={} r2={}",
                self.r1, self.r2
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(DawnError::InvalidParams(format!("sigma must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    /// Encoding value at distance `d` from the nearest annotation.
    pub fn encode_distance(&self, d: f64) -> f64 {
        if d <= self.r1 {
            (-(d * d) / (2.0 * self.sigma * self.sigma)).exp()
        } else if d <= self.r2 {
            0.0
        } else {
            EXCLUDED
        }
    }

    /// Training weight at distance `d` from the nearest annotation.
    pub fn weight_at_distance(&self, d: f64) -> f64 {
        if d < self.r1 {
            FOREGROUND_WEIGHT
        } else if d <= self.r2 {
            RING_WEIGHT
        } else {
            0.0
        }
    }
}

/// Extended Gaussian encoding; `-1` marks pixels excluded from training.
pub type GaussianEncoding = RealRaster;
/// Per-pixel training weights; 0 marks excluded pixels.
pub type WeightMap = RealRaster;

pub fn gaussian_encode_from_distance(dist: &DistanceField, params: &EncodingParams) -> GaussianEncoding {
    dist.map(|&d| params.encode_distance(d))
}

pub fn weight_map_from_distance(dist: &DistanceField, params: &EncodingParams) -> WeightMap {
    dist.map(|&d| params.weight_at_distance(d))
}

pub fn gaussian_encode(points: &PointSet, params: &EncodingParams) -> Result<GaussianEncoding> {
    params.validate()?;
    Ok(gaussian_encode_from_distance(&distance_to_points(points)?, params))
}

pub fn weight_map(points: &PointSet, params: &EncodingParams) -> Result<WeightMap> {
    params.validate()?;
    Ok(weight_map_from_distance(&distance_to_points(points)?, params))
}

/// Foreground mask and horizontal/vertical hover targets of an instance map.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationTargets {
    pub foreground: BinaryMask,
    pub hx: RealRaster,
    pub hy: RealRaster,
}

pub fn segmentation_targets(inst: &InstanceMap) -> SegmentationTargets {
    let (hx, hy) = instance_distance_maps(inst);
    SegmentationTargets { foreground: inst.foreground(), hx, hy }
}
