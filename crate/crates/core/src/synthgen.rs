//! Deterministic synthetic nuclei scenes: elliptical instances placed by
//! dart throwing, with the instance centroids as point annotations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DawnError, Result};
use crate::raster::{relabel, InstanceMap, Point, PointSet, Raster, RealRaster};

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub count: usize,
    /// Semi-major axis range in pixels.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Minor/major axis ratio range; 1 gives discs.
    #[serde(default = "one")]
    pub ellipticity_min: f64,
    #[serde(default = "one")]
    pub ellipticity_max: f64,
    /// Extra gap between the bounding circles of two nuclei, in pixels.
    #[serde(default)]
    pub min_spacing: f64,
    #[serde(default)]
    pub allow_overlap: bool,
    #[serde(default)]
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DawnError::InvalidParams(m));
        if self.width == 0 || self.height == 0 {
            return bad(format!("scene size must be positive, got {}x{}", self.width, self.height));
        }
        if !(self.radius_min > 0.0 && self.radius_min <= self.radius_max) {
            return bad(format!("need 0 < radius_min <= radius_max, got {}..{}", self.radius_min, self.radius_max));
        }
        if !(self.ellipticity_min > 0.0 && self.ellipticity_min <= self.ellipticity_max && self.ellipticity_max <= 1.0)
        {
            return bad(format!(
                "need 0 < ellipticity_min <= ellipticity_max <= 1, got {}..{}",
                self.ellipticity_min, self.ellipticity_max
            ));
        }
        if self.min_spacing < 0.0 {
            return bad(format!("min_spacing must be >= 0, got {}", self.min_spacing));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: i64,
    cy: i64,
    a: f64,
    b: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, x: i64, y: i64) -> bool {
        let (dx, dy) = ((x - self.cx) as f64, (y - self.cy) as f64);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Generated ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub instances: InstanceMap,
    pub points: PointSet,
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut placed: Vec<Ellipse> = Vec::with_capacity(spec.count);
    let budget = 10 * spec.count;
    let (w, h) = (spec.width as i64, spec.height as i64);
    let mut attempts = 0;
    while placed.len() < spec.count {
        if attempts >= budget {
            return Err(DawnError::PlacementInfeasible { requested: spec.count, placed: placed.len() });
        }
        attempts += 1;
        let a = rng.random_range(spec.radius_min..=spec.radius_max);
        let ratio = rng.random_range(spec.ellipticity_min..=spec.ellipticity_max);
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let margin = a.ceil() as i64;
        if w - 1 - margin < margin || h - 1 - margin < margin {
            continue;
        }
        let cx = rng.random_range(margin..=w - 1 - margin);
        let cy = rng.random_range(margin..=h - 1 - margin);
        let fits = placed.iter().all(|e| {
            let dist = (((cx - e.cx).pow(2) + (cy - e.cy).pow(2)) as f64).sqrt();
            if spec.allow_overlap {
                dist >= spec.min_spacing
            } else {
                dist >= a + e.a + spec.min_spacing
            }
        });
        if fits {
            placed.push(Ellipse { cx, cy, a, b: a * ratio, angle });
        }
    }

    let mut inst = Raster::filled(spec.width, spec.height, 0u32);
    for (k, e) in placed.iter().enumerate() {
        let r = e.a.ceil() as i64;
        for y in (e.cy - r).max(0)..=(e.cy + r).min(h - 1) {
            for x in (e.cx - r).max(0)..=(e.cx + r).min(w - 1) {
                if e.contains(x, y) {
                    inst.set(x as usize, y as usize, k as u32 + 1);
                }
            }
        }
    }
    // overlapping placements can erase earlier nuclei entirely
    let instances = relabel(&inst);
    let points = annotation_points(&instances);
    Ok(Scene { instances, points })
}

/// One interior point per instance: the rounded centroid when it falls on the
/// instance, otherwise the instance pixel nearest to it.
pub fn annotation_points(inst: &InstanceMap) -> PointSet {
    let k = inst.max_id() as usize;
    let w = inst.width() as usize;
    let mut sums = vec![(0.0f64, 0.0f64, 0.0f64); k + 1];
    for (i, &id) in inst.data().iter().enumerate() {
        if id > 0 {
            let s = &mut sums[id as usize];
            s.0 += (i % w) as f64;
            s.1 += (i / w) as f64;
            s.2 += 1.0;
        }
    }
    let mut points = Vec::with_capacity(k);
    for (id, &(sx, sy, n)) in sums.iter().enumerate().skip(1) {
        if n == 0.0 {
            continue;
        }
        let (mx, my) = (sx / n, sy / n);
        let (rx, ry) = ((mx + 0.5).floor() as usize, (my + 0.5).floor() as usize);
        let p = if *inst.get(rx, ry) == id as u32 {
            Point::new(rx as u32, ry as u32)
        } else {
            let mut best = (f64::INFINITY, Point::new(0, 0));
            for (i, &v) in inst.data().iter().enumerate() {
                if v == id as u32 {
                    let (x, y) = ((i % w) as f64, (i / w) as f64);
                    let d = (x - mx).powi(2) + (y - my).powi(2);
                    if d < best.0 {
                        best = (d, Point::new(x as u32, y as u32));
                    }
                }
            }
            best.1
        };
        points.push(p);
    }
    PointSet::new(inst.width(), inst.height(), points).expect("one in-bounds pixel per distinct instance")
}

/// Hematoxylin-like intensity image for overlays: dark nuclei with mottled
/// texture on a pale background. Values in [0, 1].
pub fn stain_texture(inst: &InstanceMap, seed: u64) -> RealRaster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005E_ED0F_57A1);
    let mut tone = vec![0.0; inst.max_id() as usize + 1];
    for t in tone.iter_mut().skip(1) {
        *t = rng.random_range(0.25..0.45);
    }
    inst.map(|&id| {
        let grain: f64 = rng.random_range(-0.05..0.05);
        let base = if id == 0 { 0.88 } else { tone[id as usize] };
        (base + grain).clamp(0.0, 1.0)
    })
}
