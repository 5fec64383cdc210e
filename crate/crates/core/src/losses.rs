//! Loss terms with closed-form gradients.
//!
//! Every function returns the scalar value together with the gradient with
//! respect to its prediction argument(s), laid out like that argument.

use serde::{Deserialize, Serialize};

use crate::encoding::{GaussianEncoding, WeightMap, EXCLUDED};
use crate::error::{DawnError, Result};
use crate::raster::{sobel_axis, sobel_axis_adjoint, Axis, BinaryMask, Raster, RealRaster};

/// Probability clamp for cross-entropy.
pub const CE_EPS: f64 = 1e-7;
/// Additive smoothing of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the feature-consistency term.
    pub alpha: f64,
    /// Weight of the pseudo-label supervision term.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.1, beta: 0.15 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite() {
            Ok(())
        } else {
            Err(DawnError::InvalidParams(format!(
                "loss weights must be non-negative, got alpha={} beta={}",
                self.alpha, self.beta
            )))
        }
    }
}

/// Loss value and its gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue<G = RealRaster> {
    pub value: f64,
    pub gradient: G,
}

/// Post-projection feature embedding of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureEmbedding(Vec<f64>);

impl FeatureEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(DawnError::InvalidParams("embedding must have dim > 0".into()));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(DawnError::NonFinite("embedding".into()));
        }
        Ok(FeatureEmbedding(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

fn valid_at(valid: Option<&BinaryMask>, i: usize) -> bool {
    valid.is_none_or(|m| m.data()[i])
}

fn check_valid(pred: &RealRaster, valid: Option<&BinaryMask>) -> Result<()> {
    match valid {
        Some(m) => pred.check_shape(m),
        None => Ok(()),
    }
}

/// Mean binary cross-entropy over valid pixels, predictions clamped to `[eps, 1-eps]`.
pub fn ce_loss(pred: &RealRaster, target: &BinaryMask, valid: Option<&BinaryMask>) -> Result<LossValue> {
    pred.check_shape(target)?;
    check_valid(pred, valid)?;
    let n = (0..pred.len()).filter(|&i| valid_at(valid, i)).count();
    let mut grad = Raster::filled(pred.width(), pred.height(), 0.0);
    if n == 0 {
        return Ok(LossValue { value: 0.0, gradient: grad });
    }
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    for i in 0..pred.len() {
        if !valid_at(valid, i) {
            continue;
        }
        let raw = pred.data()[i];
        let p = raw.clamp(CE_EPS, 1.0 - CE_EPS);
        let inside = raw > CE_EPS && raw < 1.0 - CE_EPS;
        if target.data()[i] {
            total -= p.ln();
            if inside {
                grad.data_mut()[i] = -inv / p;
            }
        } else {
            total -= (1.0 - p).ln();
            if inside {
                grad.data_mut()[i] = inv / (1.0 - p);
            }
        }
    }
    Ok(LossValue { value: total * inv, gradient: grad })
}

/// Soft Dice loss `1 - (2 sum(p t) + s) / (sum(p) + sum(t) + s)` over valid pixels.
pub fn dice_loss(pred: &RealRaster, target: &BinaryMask, valid: Option<&BinaryMask>) -> Result<LossValue> {
    pred.check_shape(target)?;
    check_valid(pred, valid)?;
    let (mut inter, mut union) = (0.0, 0.0);
    for i in 0..pred.len() {
        if !valid_at(valid, i) {
            continue;
        }
        let t = if target.data()[i] { 1.0 } else { 0.0 };
        inter += pred.data()[i] * t;
        union += pred.data()[i] + t;
    }
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = union + DICE_SMOOTH;
    let grad = Raster::from_fn(pred.width(), pred.height(), |x, y| {
        let i = pred.index(x, y);
        if !valid_at(valid, i) {
            return 0.0;
        }
        let t = if target.data()[i] { 1.0 } else { 0.0 };
        -(2.0 * t * den - num) / (den * den)
    });
    Ok(LossValue { value: 1.0 - num / den, gradient: grad })
}

/// Weighted mean squared error, normalised by the number of pixels with
/// positive weight (all pixels when unweighted).
pub fn mse_loss(pred: &RealRaster, target: &RealRaster, weights: Option<&RealRaster>) -> Result<LossValue> {
    pred.check_shape(target)?;
    if let Some(w) = weights {
        pred.check_shape(w)?;
    }
    let weight = |i: usize| weights.map_or(1.0, |w| w.data()[i]);
    let n = (0..pred.len()).filter(|&i| weight(i) > 0.0).count();
    let mut grad = Raster::filled(pred.width(), pred.height(), 0.0);
    if n == 0 {
        return Ok(LossValue { value: 0.0, gradient: grad });
    }
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    for i in 0..pred.len() {
        let w = weight(i);
        if w <= 0.0 {
            continue;
        }
        let diff = pred.data()[i] - target.data()[i];
        total += w * diff * diff;
        grad.data_mut()[i] = 2.0 * w * diff * inv;
    }
    Ok(LossValue { value: total * inv, gradient: grad })
}

/// Weighted detection loss against the extended Gaussian encoding, averaged
/// over the training set (pixels with positive weight).
pub fn detection_loss(q_hat: &RealRaster, enc: &GaussianEncoding, w: &WeightMap) -> Result<LossValue> {
    q_hat.check_shape(enc)?;
    q_hat.check_shape(w)?;
    let omega: Vec<usize> = (0..q_hat.len()).filter(|&i| w.data()[i] > 0.0 && enc.data()[i] != EXCLUDED).collect();
    if omega.is_empty() {
        return Err(DawnError::EmptyOmega);
    }
    let inv = 1.0 / omega.len() as f64;
    let mut grad = Raster::filled(q_hat.width(), q_hat.height(), 0.0);
    let mut total = 0.0;
    for &i in &omega {
        let diff = q_hat.data()[i] - enc.data()[i];
        total += w.data()[i] * diff * diff;
        grad.data_mut()[i] = 2.0 * w.data()[i] * diff * inv;
    }
    Ok(LossValue { value: total * inv, gradient: grad })
}

/// Mean squared difference between the Sobel responses of prediction and target along `axis`.
pub fn gradient_mse_loss(pred_h: &RealRaster, target_h: &RealRaster, axis: Axis) -> Result<LossValue> {
    pred_h.check_shape(target_h)?;
    let gp = sobel_axis(pred_h, axis)?;
    let gt = sobel_axis(target_h, axis)?;
    let inv = 1.0 / pred_h.len() as f64;
    let residual =
        Raster::from_vec(gp.width(), gp.height(), gp.data().iter().zip(gt.data()).map(|(a, b)| a - b).collect())?;
    let value = residual.data().iter().map(|r| r * r).sum::<f64>() * inv;
    let scaled = residual.map(|r| 2.0 * r * inv);
    Ok(LossValue { value, gradient: sobel_axis_adjoint(&scaled, axis)? })
}

/// Feature-consistency loss `|a - b|^2 / dim`, with gradients for `a` and `b`.
pub fn cfc_loss(a: &FeatureEmbedding, b: &FeatureEmbedding) -> Result<LossValue<(Vec<f64>, Vec<f64>)>> {
    if a.dim() != b.dim() {
        return Err(DawnError::DimMismatch(a.dim(), b.dim()));
    }
    let inv = 1.0 / a.dim() as f64;
    let diff: Vec<f64> = a.values().iter().zip(b.values()).map(|(x, y)| x - y).collect();
    let value = diff.iter().map(|d| d * d).sum::<f64>() * inv;
    let ga: Vec<f64> = diff.iter().map(|d| 2.0 * d * inv).collect();
    let gb = ga.iter().map(|g| -g).collect();
    Ok(LossValue { value, gradient: (ga, gb) })
}

/// Pseudo-label supervision: CE on the segmentation probability plus MSE on
/// the detection map. Gradients are `(d/dp_hat, d/dq_hat)`.
pub fn dyn_loss(
    p_hat: &RealRaster,
    q_hat: &RealRaster,
    m_pse: &BinaryMask,
) -> Result<LossValue<(RealRaster, RealRaster)>> {
    p_hat.check_shape(q_hat)?;
    let ce = ce_loss(p_hat, m_pse, None)?;
    let target = m_pse.map(|&v| if v { 1.0 } else { 0.0 });
    let mse = mse_loss(q_hat, &target, None)?;
    Ok(LossValue { value: ce.value + mse.value, gradient: (ce.gradient, mse.gradient) })
}

/// `det + alpha * fea + beta * dyn`.
pub fn total_loss(det: f64, fea: f64, dyn_: f64, w: &LossWeights) -> f64 {
    det + w.alpha * fea + w.beta * dyn_
}

/// Segmentation-network outputs supervised during source pretraining.
#[derive(Clone, Debug)]
pub struct HoverPrediction {
    pub prob: RealRaster,
    pub hx: RealRaster,
    pub hy: RealRaster,
}

/// Targets matching [`HoverPrediction`].
#[derive(Clone, Debug)]
pub struct HoverTargets {
    pub foreground: BinaryMask,
    pub hx: RealRaster,
    pub hy: RealRaster,
}

impl From<crate::encoding::SegmentationTargets> for HoverTargets {
    fn from(t: crate::encoding::SegmentationTargets) -> Self {
        HoverTargets { foreground: t.foreground, hx: t.hx, hy: t.hy }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainLoss {
    pub value: f64,
    /// `[ce, dice, mse_x, mse_y, grad_mse_x, grad_mse_y]`
    pub terms: [f64; 6],
    pub grad_prob: RealRaster,
    pub grad_hx: RealRaster,
    pub grad_hy: RealRaster,
}

fn add(a: &RealRaster, b: &RealRaster) -> RealRaster {
    Raster::from_vec(a.width(), a.height(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect())
        .expect("shapes checked by caller")
}

/// Unit-weighted sum of CE, Dice, the two hover MSEs and the two hover gradient MSEs.
pub fn pretrain_loss(pred: &HoverPrediction, target: &HoverTargets) -> Result<PretrainLoss> {
    for r in [&pred.hx, &pred.hy, &target.hx, &target.hy] {
        pred.prob.check_shape(r)?;
    }
    pred.prob.check_shape(&target.foreground)?;
    let ce = ce_loss(&pred.prob, &target.foreground, None)?;
    let dice = dice_loss(&pred.prob, &target.foreground, None)?;
    let mx = mse_loss(&pred.hx, &target.hx, None)?;
    let my = mse_loss(&pred.hy, &target.hy, None)?;
    let gx = gradient_mse_loss(&pred.hx, &target.hx, Axis::X)?;
    let gy = gradient_mse_loss(&pred.hy, &target.hy, Axis::Y)?;
    let terms = [ce.value, dice.value, mx.value, my.value, gx.value, gy.value];
    Ok(PretrainLoss {
        value: terms.iter().sum(),
        terms,
        grad_prob: add(&ce.gradient, &dice.gradient),
        grad_hx: add(&mx.gradient, &gx.gradient),
        grad_hy: add(&my.gradient, &gy.gradient),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_raster(rng: &mut ChaCha8Rng, w: u32, h: u32) -> RealRaster {
        Raster::from_fn(w, h, |_, _| rng.random_range(0.1..0.9))
    }

    fn rand_mask(rng: &mut ChaCha8Rng, w: u32, h: u32) -> BinaryMask {
        Raster::from_fn(w, h, |_, _| rng.random_bool(0.5))
    }

    #[test]
    fn ce_perfect_and_uninformative() {
        let t = Raster::from_vec(2, 2, vec![true, false, false, true]).unwrap();
        let p = t.map(|&v| if v { 1.0 } else { 0.0 });
        assert!(ce_loss(&p, &t, None).unwrap().value < 1e-6);
        let half = Raster::filled(2, 2, 0.5);
        assert!((ce_loss(&half, &t, None).unwrap().value - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ce_respects_valid_mask() {
        let t = Raster::from_vec(2, 1, vec![true, false]).unwrap();
        let p = Raster::from_vec(2, 1, vec![0.5, 0.99]).unwrap();
        let valid = Raster::from_vec(2, 1, vec![true, false]).unwrap();
        let l = ce_loss(&p, &t, Some(&valid)).unwrap();
        assert!((l.value - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(l.gradient.data()[1], 0.0);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = Raster::filled(3, 3, 0.5);
        let t = Raster::filled(3, 2, true);
        assert!(matches!(ce_loss(&p, &t, None), Err(DawnError::ShapeMismatch { .. })));
        assert!(matches!(dice_loss(&p, &t, None), Err(DawnError::ShapeMismatch { .. })));
    }

    #[test]
    fn dice_extremes() {
        let t = Raster::from_vec(2, 2, vec![true, true, false, false]).unwrap();
        let p = t.map(|&v| if v { 1.0 } else { 0.0 });
        assert!(dice_loss(&p, &t, None).unwrap().value < 1e-3);
        let q = t.map(|&v| if v { 0.0 } else { 1.0 });
        assert!((dice_loss(&q, &t, None).unwrap().value - 1.0).abs() < 1e-3);
    }

    #[test]
    fn mse_scalar_and_weighted() {
        let p = Raster::filled(1, 1, 0.3);
        let t = Raster::filled(1, 1, 0.5);
        assert!((mse_loss(&p, &t, None).unwrap().value - 0.04).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = rand_raster(&mut rng, 5, 4);
        let t = rand_raster(&mut rng, 5, 4);
        let w = Raster::from_fn(5, 4, |x, _| [0.0, 1.0, 10.0][x % 3]);
        let got = mse_loss(&p, &t, Some(&w)).unwrap().value;
        let mut num = 0.0;
        let mut cnt = 0usize;
        for i in 0..20 {
            num += w.data()[i] * (p.data()[i] - t.data()[i]).powi(2);
            cnt += usize::from(w.data()[i] > 0.0);
        }
        assert!((got - num / cnt as f64).abs() < 1e-12);
    }

    #[test]
    fn detection_loss_single_term_and_exclusion() {
        let enc = Raster::from_vec(3, 1, vec![0.5, -1.0, 0.0]).unwrap();
        let w = Raster::from_vec(3, 1, vec![10.0, 0.0, 0.0]).unwrap();
        let q = Raster::from_vec(3, 1, vec![0.6, 0.7, 0.9]).unwrap();
        let l = detection_loss(&q, &enc, &w).unwrap();
        assert!((l.value - 0.1).abs() < 1e-12);

        let q2 = Raster::from_vec(3, 1, vec![0.6, 0.0, 0.9]).unwrap();
        assert_eq!(detection_loss(&q2, &enc, &w).unwrap().value, l.value);

        let none = Raster::filled(3, 1, 0.0);
        assert!(matches!(detection_loss(&q, &enc, &none), Err(DawnError::EmptyOmega)));
    }

    #[test]
    fn gradient_mse_kills_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = rand_raster(&mut rng, 6, 6);
        let p = t.map(|v| v + 0.25);
        assert!(gradient_mse_loss(&p, &t, Axis::X).unwrap().value < 1e-20);
        assert!(gradient_mse_loss(&t, &t, Axis::Y).unwrap().value == 0.0);
        let small = Raster::filled(2, 2, 0.0);
        assert!(matches!(gradient_mse_loss(&small, &small, Axis::X), Err(DawnError::RasterTooSmall { .. })));
    }

    #[test]
    fn cfc_values_and_symmetry() {
        let a = FeatureEmbedding::new(vec![1.0, 0.0]).unwrap();
        let b = FeatureEmbedding::new(vec![0.0, 1.0]).unwrap();
        assert!((cfc_loss(&a, &b).unwrap().value - 1.0).abs() < 1e-15);
        assert_eq!(cfc_loss(&a, &b).unwrap().value, cfc_loss(&b, &a).unwrap().value);
        assert_eq!(cfc_loss(&a, &a).unwrap().value, 0.0);
        let c = FeatureEmbedding::new(vec![1.0]).unwrap();
        assert!(matches!(cfc_loss(&a, &c), Err(DawnError::DimMismatch(2, 1))));

        let sa = FeatureEmbedding::new(vec![3.0, 0.0]).unwrap();
        let sb = FeatureEmbedding::new(vec![0.0, 3.0]).unwrap();
        assert!((cfc_loss(&sa, &sb).unwrap().value - 9.0).abs() < 1e-12);
    }

    #[test]
    fn dyn_is_ce_plus_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = rand_raster(&mut rng, 4, 4);
        let q = rand_raster(&mut rng, 4, 4);
        let m = rand_mask(&mut rng, 4, 4);
        let d = dyn_loss(&p, &q, &m).unwrap();
        let ce = ce_loss(&p, &m, None).unwrap().value;
        let mse = mse_loss(&q, &m.map(|&v| f64::from(u8::from(v))), None).unwrap().value;
        assert!((d.value - (ce + mse)).abs() < 1e-12);

        let perfect = m.map(|&v| if v { 1.0 } else { 0.0 });
        assert!(dyn_loss(&perfect, &perfect, &m).unwrap().value < 1e-6);
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights::default();
        assert!((total_loss(1.0, 2.0, 3.0, &w) - 1.65).abs() < 1e-12);
        let zero = LossWeights { alpha: 0.0, beta: 0.0 };
        assert_eq!(total_loss(0.7, 5.0, 9.0, &zero), 0.7);
    }

    #[test]
    fn pretrain_perfect_prediction() {
        let mut inst = Raster::filled(8, 8, 0u32);
        for y in 2..6 {
            for x in 1..7 {
                inst.set(x, y, 1);
            }
        }
        let t: HoverTargets = crate::encoding::segmentation_targets(&inst).into();
        let pred = HoverPrediction {
            prob: t.foreground.map(|&v| if v { 1.0 } else { 0.0 }),
            hx: t.hx.clone(),
            hy: t.hy.clone(),
        };
        let l = pretrain_loss(&pred, &t).unwrap();
        assert!(l.value < 1e-3);
        assert!((l.value - l.terms.iter().sum::<f64>()).abs() < 1e-15);
    }
}
