//! Central finite-difference checks for every loss with an analytic gradient.

use dawn_core::encoding::{gaussian_encode, segmentation_targets, weight_map};
use dawn_core::losses::{
    ce_loss, cfc_loss, detection_loss, dice_loss, dyn_loss, gradient_mse_loss, mse_loss, pretrain_loss, total_loss,
    HoverPrediction, HoverTargets,
};
use dawn_core::synthgen::{generate_scene, SceneSpec};
use dawn_core::{Axis, BinaryMask, EncodingParams, FeatureEmbedding, LossWeights, Point, PointSet, Raster, RealRaster};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FIXTURES: u64 = 100;
const H: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0xF1D1_0000 + seed)
}

fn dims(r: &mut ChaCha8Rng) -> (u32, u32) {
    (r.random_range(4..=9), r.random_range(4..=9))
}

fn real(r: &mut ChaCha8Rng, w: u32, h: u32, lo: f64, hi: f64) -> RealRaster {
    Raster::from_fn(w, h, |_, _| r.random_range(lo..hi))
}

fn mask(r: &mut ChaCha8Rng, w: u32, h: u32) -> BinaryMask {
    Raster::from_fn(w, h, |_, _| r.random_bool(0.5))
}

fn points(r: &mut ChaCha8Rng, w: u32, h: u32) -> PointSet {
    let n = r.random_range(1..=3);
    let mut pts: Vec<Point> = (0..n).map(|_| Point::new(r.random_range(0..w), r.random_range(0..h))).collect();
    pts.sort();
    pts.dedup();
    PointSet::new(w, h, pts).unwrap()
}

/// `||a - n|| / max(||a||, ||n||)`, with an absolute floor for all-zero gradients.
fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / scale(analytic).max(scale(numeric)).max(1e-8)
}

fn numeric_gradient(x: &RealRaster, f: impl Fn(&RealRaster) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += H;
            let mut minus = x.clone();
            minus.data_mut()[i] -= H;
            (f(&plus) - f(&minus)) / (2.0 * H)
        })
        .collect()
}

fn numeric_vec_gradient(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut plus = x.to_vec();
            plus[i] += H;
            let mut minus = x.to_vec();
            minus[i] -= H;
            (f(&plus) - f(&minus)) / (2.0 * H)
        })
        .collect()
}

fn check(name: &str, seed: u64, analytic: &[f64], numeric: &[f64]) {
    let err = relative_error(analytic, numeric);
    assert!(err < TOL, "{name} fixture {seed}: relative error {err:e}");
}

#[test]
fn ce_gradient() {
    for s in 0..FIXTURES {
        let mut r = rng(s);
        let (w, h) = dims(&mut r);
        let p = real(&mut r, w, h, 0.1, 0.9);
        let t = mask(&mut r, w, h);
        let valid = (s % 2 == 1).then(|| mask(&mut r, w, h));
        let g = ce_loss(&p, &t, valid.as_ref()).unwrap().gradient;
        let n = numeric_gradient(&p, |x| ce_loss(x, &t, valid.as_ref()).unwrap().value);
        check("ce", s, g.data(), &n);
    }
}

#[test]
fn dice_gradient() {
    for s in 0..FIXTURES {
        let mut r = rng(s);
        let (w, h) = dims(&mut r);
        let p = real(&mut r, w, h, 0.1, 0.9);
        let t = mask(&mut r, w, h);
        let valid = (s % 2 == 1).then(|| mask(&mut r, w, h));
        let g = dice_loss(&p, &t, valid.as_ref()).unwrap().gradient;
        let n = numeric_gradient(&p, |x| dice_loss(x, &t, valid.as_ref()).unwrap().value);
        check("dice", s, g.data(), &n);
    }
}

#[test]
fn weighted_mse_gradient() {
    for s in 0..FIXTURES {
        let mut r = rng(s);
        let (w, h) = dims(&mut r);
        let p = real(&mut r, w, h, 0.1, 0.9);
        let t = real(&mut r, w, h, -1.0, 1.0);
        let weights = (s % 2 == 1).then(|| Raster::from_fn(w, h, |_, _| [0.0, 1.0, 10.0][r.random_range(0..3)]));
        let g = mse_loss(&p, &t, weights.as_ref()).unwrap().gradient;
        let n = numeric_gradient(&p, |x| mse_loss(x, &t, weights.as_ref()).unwrap().value);
        check("mse", s, g.data(), &n);
    }
}

#[test]
fn detection_gradient() {
    for s in 0..FIXTURES {
        let mut r = rng(s);
        let (w, h) = dims(&mut r);
        let params =
            EncodingParams::new(r.random_range(1.0..3.0), r.random_range(3.0..6.0), r.random_range(0.5..2.0)).unwrap();
        let pts = points(&mut r, w, h);
        let enc = gaussian_encode(&pts, &params).unwrap();
        let wm = weight_map(&pts, &params).unwrap();
        let q = real(&mut r, w, h, 0.1, 0.9);
        let g = detection_loss(&q, &enc, &wm).unwrap().gradient;
        let n = numeric_gradient(&q, |x| detection_loss(x, &enc, &wm).unwrap().value);
        check("detection", s, g.data(), &n);
    }
}

#[test]
fn gradient_mse_gradient() {
    for s in 0..FIXTURES {
        let mut r = rng(s);
        let (w, h) = dims(&mut r);
        let p = real(&mut r, w, h, 0.1, 0.9);
        let t = real(&mut r, w, h, -1.0, 1.0);
        let axis = if s % 2 == 0 { Axis::X } else { Axis::Y };
        let g = gradient_mse_loss(&p, &t, axis).unwrap().gradient;
        let n = numeric_gradient(&p, |x| gradient_mse_loss(x, &t, axis).unwrap().value);
        check("gradient_mse", s, g.data(), &n);
    }
}

#[test]
fn cfc_gradient() {
    for s in 0..FIXTURES {
        let mut r = rng(s);
        let dim = r.random_range(1..=64);
        let a: Vec<f64> = (0..dim).map(|_| r.random_range(0.1..0.9)).collect();
        let b: Vec<f64> = (0..dim).map(|_| r.random_range(0.1..0.9)).collect();
        let emb = |v: &[f64]| FeatureEmbedding::new(v.to_vec()).unwrap();
        let (ga, gb) = cfc_loss(&emb(&a), &emb(&b)).unwrap().gradient;
        let na = numeric_vec_gradient(&a, |x| cfc_loss(&emb(x), &emb(&b)).unwrap().value);
        let nb = numeric_vec_gradient(&b, |x| cfc_loss(&emb(&a), &emb(x)).unwrap().value);
        check("cfc/a", s, &ga, &na);
        check("cfc/b", s, &gb, &nb);
    }
}

#[test]
fn dyn_gradient() {
    for s in 0..FIXTURES {
        let mut r = rng(s);
        let (w, h) = dims(&mut r);
        let p = real(&mut r, w, h, 0.1, 0.9);
        let q = real(&mut r, w, h, 0.1, 0.9);
        let m = mask(&mut r, w, h);
        let (gp, gq) = dyn_loss(&p, &q, &m).unwrap().gradient;
        check("dyn/p", s, gp.data(), &numeric_gradient(&p, |x| dyn_loss(x, &q, &m).unwrap().value));
        check("dyn/q", s, gq.data(), &numeric_gradient(&q, |x| dyn_loss(&p, x, &m).unwrap().value));
    }
}

#[test]
fn total_loss_partials() {
    for s in 0..FIXTURES {
        let mut r = rng(s);
        let w = LossWeights { alpha: r.random_range(0.0..1.0), beta: r.random_range(0.0..1.0) };
        let x: Vec<f64> = (0..3).map(|_| r.random_range(0.1..0.9)).collect();
        let n = numeric_vec_gradient(&x, |v| total_loss(v[0], v[1], v[2], &w));
        check("total", s, &[1.0, w.alpha, w.beta], &n);
    }
}

#[test]
fn pretrain_gradient() {
    for s in 0..FIXTURES {
        let mut r = rng(s);
        let spec = SceneSpec {
            width: r.random_range(8..=12),
            height: r.random_range(8..=12),
            count: r.random_range(0..=2),
            radius_min: 2.0,
            radius_max: 3.0,
            ellipticity_min: 0.6,
            ellipticity_max: 1.0,
            min_spacing: 0.0,
            allow_overlap: true,
            seed: s,
        };
        let scene = generate_scene(&spec).unwrap();
        let t = HoverTargets::from(segmentation_targets(&scene.instances));
        let (w, h) = scene.instances.dims();
        let pred = HoverPrediction {
            prob: real(&mut r, w, h, 0.1, 0.9),
            hx: real(&mut r, w, h, 0.1, 0.9),
            hy: real(&mut r, w, h, 0.1, 0.9),
        };
        let loss = pretrain_loss(&pred, &t).unwrap();
        let np = numeric_gradient(&pred.prob, |x| {
            pretrain_loss(&HoverPrediction { prob: x.clone(), ..pred.clone() }, &t).unwrap().value
        });
        let nx = numeric_gradient(&pred.hx, |x| {
            pretrain_loss(&HoverPrediction { hx: x.clone(), ..pred.clone() }, &t).unwrap().value
        });
        let ny = numeric_gradient(&pred.hy, |x| {
            pretrain_loss(&HoverPrediction { hy: x.clone(), ..pred.clone() }, &t).unwrap().value
        });
        check("pretrain/prob", s, loss.grad_prob.data(), &np);
        check("pretrain/hx", s, loss.grad_hx.data(), &nx);
        check("pretrain/hy", s, loss.grad_hy.data(), &ny);
        assert!((loss.terms.iter().sum::<f64>() - loss.value).abs() < 1e-12);
    }
}
