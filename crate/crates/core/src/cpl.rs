//! Combined pseudo-label refinement: threshold the detection map, fuse it
//! with the binarised segmentation, and keep only pixels near an annotation.

use serde::{Deserialize, Serialize};

use crate::error::{DawnError, Result};
use crate::raster::{distance_to_points, label_components, BinaryMask, PointSet, Raster, RealRaster};

/// Default binarisation threshold for the segmentation probability.
pub const DEFAULT_TAU: f64 = 0.5;

/// How the distance filter treats the fused mask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterMode {
    /// Keep each pixel closer than `d` to an annotation.
    #[default]
    Pixel,
    /// Keep whole 8-connected components that have at least one pixel closer than `d`.
    Component,
}

impl std::str::FromStr for FilterMode {
    type Err = DawnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(FilterMode::Pixel),
            "component" => Ok(FilterMode::Component),
            other => Err(DawnError::InvalidParams(format!("unknown filter mode {other:?}"))),
        }
    }
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CplParams {
    /// Detection threshold; a pixel enters the detection mask iff `q > theta`.
    pub theta: f64,
    /// Distance-filter radius in pixels; strict `D < d` keeps a pixel.
    pub d: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub filter_mode: FilterMode,
}

impl CplParams {
    pub fn new(theta: f64, d: f64) -> Result<Self> {
        let p = CplParams { theta, d, tau: DEFAULT_TAU, filter_mode: FilterMode::Pixel };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(DawnError::InvalidParams(format!("theta must lie in (0, 1), got {}", self.theta)));
        }
        if !(self.d > 0.0 && self.d.is_finite()) {
            return Err(DawnError::InvalidParams(format!("d must be positive, got {}", self.d)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(DawnError::InvalidParams(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        Ok(())
    }
}

/// Where a pseudo-label came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub round: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    pub d: f64,
    pub filter_mode: FilterMode,
}

/// Binary pseudo-label plus the parameters that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub mask: BinaryMask,
    pub provenance: Provenance,
}

impl PseudoLabel {
    pub fn with_round(mut self, round: u32) -> Self {
        self.provenance.round = round;
        self
    }
}

/// Detection mask `q > theta`.
pub fn threshold_filter(q_hat: &RealRaster, theta: f64) -> BinaryMask {
    q_hat.map(|&q| q > theta)
}

/// Segmentation mask `p > tau`.
pub fn binarize_segmentation(p_hat: &RealRaster, tau: f64) -> BinaryMask {
    p_hat.map(|&p| p > tau)
}

/// Pixelwise union.
pub fn mask_fusion(m_ini: &BinaryMask, m_det: &BinaryMask) -> Result<BinaryMask> {
    m_ini.check_shape(m_det)?;
    Raster::from_vec(
        m_ini.width(),
        m_ini.height(),
        m_ini.data().iter().zip(m_det.data()).map(|(&a, &b)| a || b).collect(),
    )
}

pub fn distance_filter(m_uni: &BinaryMask, points: &PointSet, d: f64, mode: FilterMode) -> Result<PseudoLabel> {
    points.check_bounds(m_uni)?;
    let dist = distance_to_points(points)?;
    let near = |i: usize| dist.data()[i] < d;
    let mask = match mode {
        FilterMode::Pixel => Raster::from_vec(
            m_uni.width(),
            m_uni.height(),
            m_uni.data().iter().enumerate().map(|(i, &v)| v && near(i)).collect(),
        )?,
        FilterMode::Component => {
            let labels = label_components(m_uni);
            let mut keep = vec![false; labels.max_id() as usize + 1];
            for (i, &id) in labels.data().iter().enumerate() {
                if id > 0 && near(i) {
                    keep[id as usize] = true;
                }
            }
            labels.map(|&id| id > 0 && keep[id as usize])
        }
    };
    Ok(PseudoLabel { mask, provenance: Provenance { round: 0, theta: None, tau: None, d, filter_mode: mode } })
}

/// Every intermediate mask of one refinement pass.
#[derive(Clone, Debug)]
pub struct CplStages {
    pub m_ini: BinaryMask,
    pub m_det: BinaryMask,
    pub m_uni: BinaryMask,
    pub pseudo: PseudoLabel,
}

pub fn cpl_stages(p_hat: &RealRaster, q_hat: &RealRaster, points: &PointSet, params: &CplParams) -> Result<CplStages> {
    params.validate()?;
    p_hat.check_shape(q_hat)?;
    let m_ini = binarize_segmentation(p_hat, params.tau);
    let m_det = threshold_filter(q_hat, params.theta);
    let m_uni = mask_fusion(&m_ini, &m_det)?;
    let mut pseudo = distance_filter(&m_uni, points, params.d, params.filter_mode)?;
    pseudo.provenance.theta = Some(params.theta);
    pseudo.provenance.tau = Some(params.tau);
    Ok(CplStages { m_ini, m_det, m_uni, pseudo })
}

pub fn cpl(p_hat: &RealRaster, q_hat: &RealRaster, points: &PointSet, params: &CplParams) -> Result<PseudoLabel> {
    Ok(cpl_stages(p_hat, q_hat, points, params)?.pseudo)
}

/// Fraction of annotation points that fall on foreground of `mask` (1.0 for no points).
pub fn point_coverage(mask: &BinaryMask, points: &PointSet) -> f64 {
    if points.is_empty() {
        return 1.0;
    }
    let hit = points.points().iter().filter(|p| *mask.get(p.x as usize, p.y as usize)).count();
    hit as f64 / points.len() as f64
}
