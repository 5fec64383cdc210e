//! JSON request format for `dawn loss`.

use std::path::{Path, PathBuf};

use dawn_core::encoding::segmentation_targets;
use dawn_core::io;
use dawn_core::losses::{self, HoverPrediction, HoverTargets};
use dawn_core::{Axis, DawnError, FeatureEmbedding, LossWeights, RealRaster, Result};
use serde::{Deserialize, Serialize};

/// Inputs of one loss. Paths are relative to the spec file's directory.
#[derive(Debug, Deserialize)]
#[serde(tag = "loss", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossOp {
    /// `target` and `valid` are mask PNGs.
    Ce {
        pred: PathBuf,
        target: PathBuf,
        valid: Option<PathBuf>,
    },
    Dice {
        pred: PathBuf,
        target: PathBuf,
        valid: Option<PathBuf>,
    },
    Mse {
        pred: PathBuf,
        target: PathBuf,
        weights: Option<PathBuf>,
    },
    /// `target` and `weights` as produced by `dawn encode`.
    Detection {
        pred: PathBuf,
        target: PathBuf,
        weights: PathBuf,
    },
    GradientMse {
        pred: PathBuf,
        target: PathBuf,
        axis: Axis,
    },
    Cfc {
        seg: PathBuf,
        det: PathBuf,
    },
    Dyn {
        prob: PathBuf,
        det: PathBuf,
        pseudo_label: PathBuf,
    },
    Total {
        det: f64,
        fea: f64,
        #[serde(rename = "dyn")]
        dyn_: f64,
        weights: Option<LossWeights>,
    },
    /// Six-term hover loss against targets derived from an instance PNG.
    Pretrain {
        prob: PathBuf,
        hx: PathBuf,
        hy: PathBuf,
        instances: PathBuf,
    },
}

#[derive(Debug, Deserialize)]
pub struct LossRequest {
    #[serde(flatten)]
    pub op: LossOp,
    /// One output path per differentiable input, in the order listed above.
    #[serde(default)]
    pub gradient_out: Vec<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct LossOutput {
    pub loss: &'static str,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub terms: Option<[f64; 6]>,
}

enum Gradient {
    Raster(RealRaster),
    Vector(Vec<f64>),
}

fn check_finite(value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(DawnError::NonFinite("loss value".into()))
    }
}

pub fn evaluate(req: &LossRequest, base: &Path) -> Result<LossOutput> {
    let p = |rel: &PathBuf| base.join(rel);
    let real = |rel: &PathBuf| io::read_real_raster(&p(rel));
    let mask = |rel: &PathBuf| io::read_mask_png(&p(rel));
    let opt_mask = |rel: &Option<PathBuf>| rel.as_ref().map(mask).transpose();

    let (name, value, terms, grads): (&'static str, f64, Option<[f64; 6]>, Vec<Gradient>) = match &req.op {
        LossOp::Ce { pred, target, valid } => {
            let v = losses::ce_loss(&real(pred)?, &mask(target)?, opt_mask(valid)?.as_ref())?;
            ("ce", v.value, None, vec![Gradient::Raster(v.gradient)])
        }
        LossOp::Dice { pred, target, valid } => {
            let v = losses::dice_loss(&real(pred)?, &mask(target)?, opt_mask(valid)?.as_ref())?;
            ("dice", v.value, None, vec![Gradient::Raster(v.gradient)])
        }
        LossOp::Mse { pred, target, weights } => {
            let w = weights.as_ref().map(real).transpose()?;
            let v = losses::mse_loss(&real(pred)?, &real(target)?, w.as_ref())?;
            ("mse", v.value, None, vec![Gradient::Raster(v.gradient)])
        }
        LossOp::Detection { pred, target, weights } => {
            let v = losses::detection_loss(&real(pred)?, &real(target)?, &real(weights)?)?;
            ("detection", v.value, None, vec![Gradient::Raster(v.gradient)])
        }
        LossOp::GradientMse { pred, target, axis } => {
            let v = losses::gradient_mse_loss(&real(pred)?, &real(target)?, *axis)?;
            ("gradient_mse", v.value, None, vec![Gradient::Raster(v.gradient)])
        }
        LossOp::Cfc { seg, det } => {
            let a = FeatureEmbedding::new(io::read_embedding(&p(seg))?)?;
            let b = FeatureEmbedding::new(io::read_embedding(&p(det))?)?;
            let v = losses::cfc_loss(&a, &b)?;
            ("cfc", v.value, None, vec![Gradient::Vector(v.gradient.0), Gradient::Vector(v.gradient.1)])
        }
        LossOp::Dyn { prob, det, pseudo_label } => {
            let v = losses::dyn_loss(&real(prob)?, &real(det)?, &mask(pseudo_label)?)?;
            ("dyn", v.value, None, vec![Gradient::Raster(v.gradient.0), Gradient::Raster(v.gradient.1)])
        }
        LossOp::Total { det, fea, dyn_, weights } => {
            let w = weights.unwrap_or_default();
            w.validate()?;
            ("total", losses::total_loss(*det, *fea, *dyn_, &w), None, Vec::new())
        }
        LossOp::Pretrain { prob, hx, hy, instances } => {
            let pred = HoverPrediction { prob: real(prob)?, hx: real(hx)?, hy: real(hy)? };
            let targets = HoverTargets::from(segmentation_targets(&io::read_instance_png(&p(instances))?));
            let v = losses::pretrain_loss(&pred, &targets)?;
            let grads = vec![Gradient::Raster(v.grad_prob), Gradient::Raster(v.grad_hx), Gradient::Raster(v.grad_hy)];
            ("pretrain", v.value, Some(v.terms), grads)
        }
    };

    if req.gradient_out.len() > grads.len() {
        return Err(DawnError::InvalidParams(format!(
            "{name} has {} gradient output(s), {} paths given",
            grads.len(),
            req.gradient_out.len()
        )));
    }
    for (path, g) in req.gradient_out.iter().zip(&grads) {
        match g {
            Gradient::Raster(r) => io::write_real_raster(&p(path), r)?,
            Gradient::Vector(v) => io::write_embedding(&p(path), v)?,
        }
    }
    Ok(LossOutput { loss: name, value: check_finite(value)?, terms })
}
