//! File-based contract between the orchestrator and whatever produces network
//! predictions.
//!
//! Each round the orchestrator writes `round_<t>/manifest.json` and invokes a
//! predictor with the manifest path as its only argument. The predictor must
//! write, for every listed image,
//!
//! ```text
//! round_<t>/<image_id>/prob.dwnr     foreground probability, values in [0, 1]
//! round_<t>/<image_id>/det.dwnr      detection map, values in [0, 1]
//! round_<t>/<image_id>/hx.dwnr       horizontal hover map
//! round_<t>/<image_id>/hy.dwnr       vertical hover map
//! round_<t>/<image_id>/seg_emb.dwnr  1 x dim x 1 segmentation embedding
//! round_<t>/<image_id>/det_emb.dwnr  1 x dim x 1 detection embedding
//! ```
//!
//! and exit with status 0. From round 2 on, `pseudo_label_dir` points at the
//! previous round, whose `<image_id>/mpse.png` holds the pseudo-label to
//! train against.

use std::path::{Path, PathBuf};
use std::process::Command;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::SCHEMA_VERSION;
use crate::cpl::CplParams;
use crate::encoding::{gaussian_encode, segmentation_targets, EncodingParams};
use crate::error::{DawnError, Result};
use crate::io;
use crate::losses::{FeatureEmbedding, LossWeights};
use crate::raster::{InstanceMap, PointSet, Raster, RealRaster};

pub const PROB_FILE: &str = "prob.dwnr";
pub const DET_FILE: &str = "det.dwnr";
pub const HX_FILE: &str = "hx.dwnr";
pub const HY_FILE: &str = "hy.dwnr";
pub const SEG_EMB_FILE: &str = "seg_emb.dwnr";
pub const DET_EMB_FILE: &str = "det_emb.dwnr";
pub const PSEUDO_LABEL_FILE: &str = "mpse.png";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Environment variable naming the external predictor executable.
pub const PREDICTOR_ENV: &str = "DAWN_PREDICTOR";

/// Length of the synthetic predictor's histogram embeddings.
pub const SYNTHETIC_EMBEDDING_DIM: usize = 64;

/// Network outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorBundle {
    pub prob: RealRaster,
    pub det: RealRaster,
    pub hx: RealRaster,
    pub hy: RealRaster,
    pub seg_embedding: FeatureEmbedding,
    pub det_embedding: FeatureEmbedding,
}

fn check_unit_range(r: &RealRaster, what: &str) -> Result<()> {
    r.check_finite(what)?;
    if let Some(&v) = r.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(DawnError::RangeViolation { what: what.to_string(), value: v, lo: 0.0, hi: 1.0 });
    }
    Ok(())
}

impl PredictorBundle {
    pub fn validate(&self) -> Result<()> {
        for r in [&self.det, &self.hx, &self.hy] {
            self.prob.check_shape(r)?;
        }
        check_unit_range(&self.prob, "prob")?;
        check_unit_range(&self.det, "det")?;
        self.hx.check_finite("hx")?;
        self.hy.check_finite("hy")?;
        if self.seg_embedding.dim() != self.det_embedding.dim() {
            return Err(DawnError::DimMismatch(self.seg_embedding.dim(), self.det_embedding.dim()));
        }
        Ok(())
    }

    /// Writes the six bundle files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        io::write_real_raster(&dir.join(PROB_FILE), &self.prob)?;
        io::write_real_raster(&dir.join(DET_FILE), &self.det)?;
        io::write_real_raster(&dir.join(HX_FILE), &self.hx)?;
        io::write_real_raster(&dir.join(HY_FILE), &self.hy)?;
        io::write_embedding(&dir.join(SEG_EMB_FILE), self.seg_embedding.values())?;
        io::write_embedding(&dir.join(DET_EMB_FILE), self.det_embedding.values())
    }
}

/// Loads and validates `round_dir/<image_id>/`.
pub fn read_bundle(round_dir: &Path, image_id: &str) -> Result<PredictorBundle> {
    let dir = round_dir.join(image_id);
    let need = |name: &str| {
        let p = dir.join(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(DawnError::MissingArtifact(p))
        }
    };
    let embedding = |name: &str| -> Result<FeatureEmbedding> {
        let p = need(name)?;
        FeatureEmbedding::new(io::read_embedding(&p)?).map_err(|e| match e {
            DawnError::NonFinite(_) => DawnError::NonFinite(p.display().to_string()),
            other => other,
        })
    };
    let bundle = PredictorBundle {
        prob: io::read_real_raster(&need(PROB_FILE)?)?,
        det: io::read_real_raster(&need(DET_FILE)?)?,
        hx: io::read_real_raster(&need(HX_FILE)?)?,
        hy: io::read_real_raster(&need(HY_FILE)?)?,
        seg_embedding: embedding(SEG_EMB_FILE)?,
        det_embedding: embedding(DET_EMB_FILE)?,
    };
    bundle.validate()?;
    Ok(bundle)
}

fn default_decay() -> f64 {
    1.0
}

fn default_true() -> bool {
    true
}

/// Test double for the segmentation and detection networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPredictorConfig {
    /// Fraction of nuclei missing from the segmentation output in round 1.
    pub drop_fraction: f64,
    /// Gaussian blur sigma applied to the segmentation indicator, in pixels.
    #[serde(default)]
    pub blur_radius: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    /// Drop fraction in round t is `drop_fraction * drop_decay^(t-1)`.
    #[serde(default = "default_decay")]
    pub drop_decay: f64,
    /// Only drop nuclei that the previous pseudo-label missed entirely.
    #[serde(default = "default_true")]
    pub honor_supervision: bool,
}

impl Default for SyntheticPredictorConfig {
    fn default() -> Self {
        SyntheticPredictorConfig {
            drop_fraction: 0.0,
            blur_radius: 0.0,
            noise_sigma: 0.0,
            seed: 0,
            drop_decay: 1.0,
            honor_supervision: true,
        }
    }
}

impl SyntheticPredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.drop_fraction) {
            return Err(DawnError::InvalidParams(format!(
                "drop_fraction must lie in [0, 1), got {}",
                self.drop_fraction
            )));
        }
        if !(self.blur_radius >= 0.0 && self.noise_sigma >= 0.0) {
            return Err(DawnError::InvalidParams("blur_radius and noise_sigma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.drop_decay) {
            return Err(DawnError::InvalidParams(format!("drop_decay must lie in [0, 1], got {}", self.drop_decay)));
        }
        Ok(())
    }
}

/// Instance ids (ascending) left out of the segmentation output.
pub fn synthetic_drop_set(
    gt: &InstanceMap,
    cfg: &SyntheticPredictorConfig,
    round: u32,
    prior_pseudo: Option<&crate::raster::BinaryMask>,
) -> Vec<u32> {
    let mut ids = gt.ids();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    ids.shuffle(&mut rng);
    let fraction = cfg.drop_fraction * cfg.drop_decay.powi(round.saturating_sub(1) as i32);
    let n = (fraction * ids.len() as f64 + 1e-9).floor() as usize;
    let mut drop: Vec<u32> = ids[..n.min(ids.len())].to_vec();
    if let (true, Some(prior)) = (cfg.honor_supervision, prior_pseudo) {
        let mut seen = vec![false; gt.max_id() as usize + 1];
        for (&id, &m) in gt.data().iter().zip(prior.data()) {
            if m && id > 0 {
                seen[id as usize] = true;
            }
        }
        drop.retain(|&id| !seen[id as usize]);
    }
    drop.sort_unstable();
    drop
}

fn gaussian_blur(r: &RealRaster, sigma: f64) -> RealRaster {
    if sigma <= 0.0 {
        return r.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let (w, h) = (r.width() as isize, r.height() as isize);
    let pass = |src: &RealRaster, horizontal: bool| {
        Raster::from_fn(src.width(), src.height(), |x, y| {
            let mut acc = 0.0;
            for (k, &kw) in kernel.iter().enumerate() {
                let off = k as isize - radius;
                let (sx, sy) = if horizontal {
                    ((x as isize + off).clamp(0, w - 1), y as isize)
                } else {
                    (x as isize, (y as isize + off).clamp(0, h - 1))
                };
                acc += kw * *src.get(sx as usize, sy as usize);
            }
            acc / norm
        })
    };
    pass(&pass(r, true), false)
}

/// Normalised 64-bin histogram of values in [0, 1].
fn histogram_embedding(r: &RealRaster) -> FeatureEmbedding {
    let mut bins = vec![0.0; SYNTHETIC_EMBEDDING_DIM];
    for &v in r.data() {
        let b = ((v.clamp(0.0, 1.0) * SYNTHETIC_EMBEDDING_DIM as f64) as usize).min(SYNTHETIC_EMBEDDING_DIM - 1);
        bins[b] += 1.0;
    }
    let n = r.len() as f64;
    bins.iter_mut().for_each(|b| *b /= n);
    FeatureEmbedding::new(bins).expect("non-empty finite histogram")
}

/// Round-1 synthetic prediction with no prior pseudo-label.
pub fn synthetic_predict(
    gt: &InstanceMap,
    points: &PointSet,
    cfg: &SyntheticPredictorConfig,
    enc: &EncodingParams,
) -> Result<PredictorBundle> {
    synthetic_predict_round(gt, points, cfg, enc, 1, None)
}

/// Segmentation output: blurred, noisy indicator of the retained GT nuclei.
/// Detection output: the Gaussian encoding of every point with the excluded
/// band mapped to 0. Hover maps follow the retained nuclei.
pub fn synthetic_predict_round(
    gt: &InstanceMap,
    points: &PointSet,
    cfg: &SyntheticPredictorConfig,
    enc: &EncodingParams,
    round: u32,
    prior_pseudo: Option<&crate::raster::BinaryMask>,
) -> Result<PredictorBundle> {
    cfg.validate()?;
    enc.validate()?;
    points.check_bounds(gt)?;
    if let Some(p) = prior_pseudo {
        gt.check_shape(p)?;
    }
    let dropped = synthetic_drop_set(gt, cfg, round, prior_pseudo);
    let retained = gt.map(|&id| if dropped.binary_search(&id).is_ok() { 0 } else { id });

    let indicator = retained.map(|&id| if id > 0 { 1.0 } else { 0.0 });
    let mut prob = gaussian_blur(&indicator, cfg.blur_radius);
    if cfg.noise_sigma > 0.0 {
        // a predictor that honours supervision keeps one noise field, so its
        // output only grows as the retained set grows
        let noise_round = if cfg.honor_supervision { 1 } else { round };
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(noise_round as u64));
        let normal = Normal::new(0.0, cfg.noise_sigma).map_err(|e| DawnError::InvalidParams(e.to_string()))?;
        prob.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    prob.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    let det = if points.is_empty() {
        Raster::filled(gt.width(), gt.height(), 0.0)
    } else {
        gaussian_encode(points, enc)?.map(|&v| v.max(0.0))
    };
    let targets = segmentation_targets(&retained);
    Ok(PredictorBundle {
        seg_embedding: histogram_embedding(&prob),
        det_embedding: histogram_embedding(&det),
        prob,
        det,
        hx: targets.hx,
        hy: targets.hy,
    })
}

/// Per-round instructions for a predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundManifest {
    pub schema_version: u32,
    pub round: u32,
    pub dataset: String,
    pub images: Vec<String>,
    /// Dataset root holding `points/<id>.csv` and optionally `gt/<id>.png`, `images/<id>.png`.
    pub data_dir: PathBuf,
    /// Where bundles go. Relative paths resolve against the manifest's directory.
    pub output_dir: PathBuf,
    /// Previous round's directory, absent in round 1.
    pub pseudo_label_dir: Option<PathBuf>,
    pub encoding: EncodingParams,
    pub cpl: CplParams,
    pub loss_weights: LossWeights,
    /// Training epochs for this round; recorded, not enforced.
    pub epochs: u32,
    /// Built-in predictor settings when the synthetic predictor is in use.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticPredictorConfig>,
}

impl RoundManifest {
    pub fn resolve(&self, manifest_path: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest_path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }

    pub fn validate(&self, manifest_path: &Path) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(DawnError::InvalidParams(format!("unsupported manifest schema {}", self.schema_version)));
        }
        if self.round < 1 {
            return Err(DawnError::InvalidParams("round must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(DawnError::InvalidParams("epochs must be >= 1".into()));
        }
        self.encoding.validate()?;
        self.cpl.validate()?;
        self.loss_weights.validate()?;
        if let Some(s) = &self.synthetic {
            s.validate()?;
        }
        let mut paths = vec![&self.data_dir];
        if let Some(p) = &self.pseudo_label_dir {
            paths.push(p);
        }
        for p in paths {
            let resolved = self.resolve(manifest_path, p);
            if !resolved.is_dir() {
                return Err(DawnError::MissingArtifact(resolved));
            }
        }
        Ok(())
    }
}

/// Validates and writes canonical JSON.
pub fn write_manifest(m: &RoundManifest, path: &Path) -> Result<()> {
    m.validate(path)?;
    io::write_json(path, m)
}

pub fn read_manifest(path: &Path) -> Result<RoundManifest> {
    let m: RoundManifest = io::read_json(path)?;
    m.validate(path)?;
    Ok(m)
}

/// The in-tree implementation of the predictor contract: reads a manifest and
/// writes synthetic bundles for every image. Requires ground truth under
/// `data_dir/gt/`.
pub fn run_synthetic_predictor(manifest_path: &Path) -> Result<()> {
    let m = read_manifest(manifest_path)?;
    let cfg = m.synthetic.clone().unwrap_or_default();
    let data = m.resolve(manifest_path, &m.data_dir);
    let out = m.resolve(manifest_path, &m.output_dir);
    let prior_dir = m.pseudo_label_dir.as_ref().map(|p| m.resolve(manifest_path, p));
    for id in &m.images {
        let gt = io::read_instance_png(&data.join("gt").join(format!("{id}.png")))?;
        let points = io::read_points_csv(&data.join("points").join(format!("{id}.csv")), gt.width(), gt.height())?;
        let prior = match &prior_dir {
            Some(dir) => Some(io::read_mask_png(&dir.join(id).join(PSEUDO_LABEL_FILE))?),
            None => None,
        };
        let image_cfg = SyntheticPredictorConfig { seed: image_seed(cfg.seed, id), ..cfg.clone() };
        let bundle = synthetic_predict_round(&gt, &points, &image_cfg, &m.encoding, m.round, prior.as_ref())?;
        bundle.write(&out.join(id))?;
    }
    Ok(())
}

/// Mixes an image id into a base seed (FNV-1a), so images get independent draws.
pub fn image_seed(base: u64, image_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ base;
    for b in image_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Runs `command[0] command[1..] <manifest>` and requires exit status 0.
pub fn run_external_predictor(command: &[String], manifest_path: &Path, round: u32) -> Result<()> {
    let (program, args) =
        command.split_first().ok_or_else(|| DawnError::InvalidParams("external predictor command is empty".into()))?;
    let output = Command::new(program).args(args).arg(manifest_path).output().map_err(|e| {
        DawnError::PredictorFailed { round, status: "spawn failed".into(), diagnostics: format!("{program}: {e}") }
    })?;
    if !output.status.success() {
        let mut diagnostics = String::from_utf8_lossy(&output.stderr).trim().to_string();
        let stdout = String::from_utf8_lossy(&output.stdout);
        if !stdout.trim().is_empty() {
            diagnostics.push_str("\nstdout: ");
            diagnostics.push_str(stdout.trim());
        }
        return Err(DawnError::PredictorFailed { round, status: output.status.to_string(), diagnostics });
    }
    Ok(())
}

/// Reads the predictor command from `DAWN_PREDICTOR` (whitespace separated).
pub fn predictor_from_env() -> Result<Vec<String>> {
    let raw = std::env::var(PREDICTOR_ENV).map_err(|_| {
        DawnError::InvalidParams(format!("{PREDICTOR_ENV} is not set and no predictor command was given"))
    })?;
    let cmd: Vec<String> = raw.split_whitespace().map(str::to_string).collect();
    if cmd.is_empty() {
        return Err(DawnError::InvalidParams(format!("{PREDICTOR_ENV} is empty")));
    }
    Ok(cmd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cpl::binarize_segmentation;
    use crate::synthgen::{generate_scene, SceneSpec};

    fn scene(seed: u64, count: usize) -> crate::synthgen::Scene {
        generate_scene(&SceneSpec {
            width: 96,
            height: 96,
            count,
            radius_min: 5.0,
            radius_max: 7.0,
            ellipticity_min: 1.0,
            ellipticity_max: 1.0,
            min_spacing: 3.0,
            allow_overlap: false,
            seed,
        })
        .unwrap()
    }

    fn tnbc() -> EncodingParams {
        EncodingParams::new(11.0, 22.0, 2.75).unwrap()
    }

    #[test]
    fn identity_setting_recovers_foreground() {
        let s = scene(1, 8);
        let b = synthetic_predict(&s.instances, &s.points, &SyntheticPredictorConfig::default(), &tnbc()).unwrap();
        assert_eq!(binarize_segmentation(&b.prob, 0.5), s.instances.foreground());
        b.validate().unwrap();
        assert_eq!(b.seg_embedding.dim(), 64);
    }

    #[test]
    fn drop_fraction_removes_floor_of_k() {
        let s = scene(2, 10);
        let cfg = SyntheticPredictorConfig { drop_fraction: 0.3, seed: 4, ..Default::default() };
        let b = synthetic_predict(&s.instances, &s.points, &cfg, &tnbc()).unwrap();
        let fg = binarize_segmentation(&b.prob, 0.5);

        // oracle: replay the seeded shuffle and count instances absent from the output
        let mut ids: Vec<u32> = (1..=10).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(4));
        let mut expected: Vec<u32> = ids[..3].to_vec();
        expected.sort_unstable();
        let absent: Vec<u32> =
            (1..=10).filter(|&id| !s.instances.data().iter().zip(fg.data()).any(|(&g, &f)| g == id && f)).collect();
        assert_eq!(absent, expected);
    }

    #[test]
    fn same_seed_same_bundle() {
        let s = scene(3, 6);
        let cfg = SyntheticPredictorConfig {
            drop_fraction: 0.3,
            blur_radius: 1.0,
            noise_sigma: 0.05,
            seed: 9,
            ..Default::default()
        };
        let a = synthetic_predict(&s.instances, &s.points, &cfg, &tnbc()).unwrap();
        let b = synthetic_predict(&s.instances, &s.points, &cfg, &tnbc()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn supervision_shrinks_drop_set() {
        let s = scene(5, 10);
        let cfg = SyntheticPredictorConfig { drop_fraction: 0.3, seed: 1, ..Default::default() };
        let first = synthetic_drop_set(&s.instances, &cfg, 1, None);
        assert_eq!(first.len(), 3);
        let everything = s.instances.foreground();
        assert!(synthetic_drop_set(&s.instances, &cfg, 2, Some(&everything)).is_empty());
        let nothing = Raster::filled(96, 96, false);
        assert_eq!(synthetic_drop_set(&s.instances, &cfg, 2, Some(&nothing)), first);
    }

    #[test]
    fn honoring_predictor_output_never_shrinks() {
        let s = scene(7, 10);
        let cfg = SyntheticPredictorConfig {
            drop_fraction: 0.5,
            blur_radius: 1.0,
            noise_sigma: 0.05,
            seed: 3,
            drop_decay: 0.5,
            honor_supervision: true,
        };
        let mut prior: Option<crate::raster::BinaryMask> = None;
        let mut last: Option<RealRaster> = None;
        for round in 1..=4 {
            let b = synthetic_predict_round(&s.instances, &s.points, &cfg, &tnbc(), round, prior.as_ref()).unwrap();
            if let Some(prev) = &last {
                assert!(b.prob.data().iter().zip(prev.data()).all(|(a, p)| a >= p), "round {round}");
            }
            prior = Some(binarize_segmentation(&b.prob, 0.5));
            last = Some(b.prob);
        }
    }

    #[test]
    fn bundle_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let s = scene(6, 4);
        let b = synthetic_predict(&s.instances, &s.points, &SyntheticPredictorConfig::default(), &tnbc()).unwrap();
        b.write(&dir.path().join("img")).unwrap();
        let back = read_bundle(dir.path(), "img").unwrap();
        assert_eq!(back.prob, b.prob);

        std::fs::remove_file(dir.path().join("img").join(DET_FILE)).unwrap();
        match read_bundle(dir.path(), "img") {
            Err(DawnError::MissingArtifact(p)) => assert!(p.ends_with(DET_FILE)),
            other => panic!("unexpected {other:?}"),
        }

        let mut bad = b.clone();
        bad.prob.data_mut()[0] = 1.5;
        bad.write(&dir.path().join("bad")).unwrap();
        assert!(matches!(read_bundle(dir.path(), "bad"), Err(DawnError::RangeViolation { .. })));
    }
}
