//! The interactive supervision loop: for each round, ask the predictor for
//! fresh outputs, refine them into a pseudo-label, extract instances, score
//! everything against ground truth when available, and persist it all under
//! `out/round_<t>/`.
//!
//! Ordering within round t: the predictor's round-t outputs feed CPL, and the
//! resulting `mpse.png` is the supervision of round t+1. Both the pre-CPL mask
//! (`m_ini.png`) and the post-CPL pseudo-label are kept. Instances come from
//! the same round-t outputs.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetConfig, DatasetRef, SCHEMA_VERSION};
use crate::cpl::{cpl_stages, point_coverage};
use crate::encoding::{gaussian_encode_from_distance, weight_map_from_distance};
use crate::error::{DawnError, Result};
use crate::io;
use crate::losses::{cfc_loss, detection_loss, dyn_loss, total_loss, LossWeights};
use crate::metrics::{aggregate, image_counts, Aggregate, MetricCounts, MetricReport};
use crate::overlay::emit_mask_overlay;
use crate::postprocess::{extract_instances, PostprocParams};
use crate::predictor::{
    read_bundle, run_external_predictor, run_synthetic_predictor, write_manifest, RoundManifest,
    SyntheticPredictorConfig, MANIFEST_FILE, PSEUDO_LABEL_FILE,
};
use crate::raster::{distance_to_points, label_components, BinaryMask, InstanceMap, PointSet};

/// Which predictor serves the rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PredictorChoice {
    Synthetic(SyntheticPredictorConfig),
    /// Subprocess `command... <manifest>`; falls back to `DAWN_PREDICTOR` when `command` is absent.
    External {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        command: Option<Vec<String>>,
    },
}

fn default_rounds() -> u32 {
    4
}

fn default_epochs() -> u32 {
    20
}

fn schema() -> u32 {
    SCHEMA_VERSION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    #[serde(default = "schema")]
    pub schema_version: u32,
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    #[serde(default = "default_epochs")]
    pub epochs_per_round: u32,
    pub dataset: DatasetRef,
    /// Overrides the dataset's loss weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_weights: Option<LossWeights>,
    #[serde(default)]
    pub postprocess: PostprocParams,
    pub predictor: PredictorChoice,
}

impl LoopConfig {
    pub fn validate(&self) -> Result<DatasetConfig> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(DawnError::InvalidParams(format!("unsupported config schema {}", self.schema_version)));
        }
        if self.rounds < 1 || self.epochs_per_round < 1 {
            return Err(DawnError::InvalidParams("rounds and epochs_per_round must be >= 1".into()));
        }
        self.postprocess.validate()?;
        if let PredictorChoice::Synthetic(s) = &self.predictor {
            s.validate()?;
        }
        let mut ds = self.dataset.resolve()?;
        if let Some(w) = self.loss_weights {
            w.validate()?;
            ds.loss_weights = w;
        }
        Ok(ds)
    }
}

/// One image of a dataset directory.
#[derive(Clone, Debug)]
pub struct DatasetImage {
    pub id: String,
    pub points: PointSet,
    pub gt: Option<InstanceMap>,
}

/// Loads `data/points/*.csv`; image size comes from `gt/<id>.png` or `images/<id>.png`.
pub fn load_dataset(data_dir: &Path) -> Result<Vec<DatasetImage>> {
    let points_dir = data_dir.join("points");
    let entries = fs::read_dir(&points_dir).map_err(|e| DawnError::io(&points_dir, e))?;
    let mut ids: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(DawnError::IdMismatch(format!("no point files in {}", points_dir.display())));
    }
    ids.into_iter()
        .map(|id| {
            let gt_path = data_dir.join("gt").join(format!("{id}.png"));
            let gt = if gt_path.exists() { Some(io::read_instance_png(&gt_path)?) } else { None };
            let (w, h) = match &gt {
                Some(g) => g.dims(),
                None => {
                    let img_path = data_dir.join("images").join(format!("{id}.png"));
                    if !img_path.exists() {
                        return Err(DawnError::MissingArtifact(img_path));
                    }
                    image::image_dimensions(&img_path).map_err(|e| DawnError::format("PNG", &img_path, e))?
                }
            };
            let points = io::read_points_csv(&points_dir.join(format!("{id}.csv")), w, h)?;
            Ok(DatasetImage { id, points, gt })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    /// Absent when the image has no annotation points.
    pub det: Option<f64>,
    pub fea: f64,
    #[serde(rename = "dyn")]
    pub dyn_: f64,
    pub total: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub losses: LossSummary,
    /// Fraction of annotation points on the pseudo-label.
    pub pseudo_point_coverage: f64,
    /// Fraction of annotation points on the binarised segmentation alone.
    pub initial_point_coverage: f64,
    pub instance_count: usize,
    /// Post-processed instances against ground truth.
    pub instance_metrics: Option<MetricReport>,
    /// Connected components of the pseudo-label against ground truth.
    pub pseudo_metrics: Option<MetricReport>,
    /// Paths relative to the run root.
    pub artifacts: Vec<String>,
    #[serde(skip)]
    instance_counts: Option<MetricCounts>,
    #[serde(skip)]
    pseudo_counts: Option<MetricCounts>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub images: Vec<ImageRecord>,
    pub mean_pseudo_point_coverage: f64,
    pub mean_initial_point_coverage: f64,
    pub mean_total_loss: Option<f64>,
    pub instance_aggregate: Option<Aggregate>,
    pub pseudo_aggregate: Option<Aggregate>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    pub rounds: Vec<RoundRecord>,
    /// Round with the highest mean instance PQ, when ground truth is available.
    pub best_round: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub ordering: &'static str,
}

const ORDERING: &str = "round t: predict -> CPL (m_ini.png pre-CPL, mpse.png post-CPL) -> post-process; mpse.png of round t supervises round t+1";

pub fn round_dir(out: &Path, round: u32) -> PathBuf {
    out.join(format!("round_{round}"))
}

/// Runs rounds `1..=cfg.rounds` and writes `out/report.json`.
/// On failure the report still lists every completed round.
pub fn run_loop(cfg: &LoopConfig, data_dir: &Path, out: &Path) -> Result<Vec<RoundRecord>> {
    let dataset = cfg.validate()?;
    let images = load_dataset(data_dir)?;
    fs::create_dir_all(out).map_err(|e| DawnError::io(out, e))?;
    let mut records = Vec::new();
    let mut failure = None;
    for t in 1..=cfg.rounds {
        match run_round(cfg, &dataset, data_dir, &images, out, t) {
            Ok(r) => records.push(r),
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    let best_round = records
        .iter()
        .filter_map(|r| r.instance_aggregate.map(|a| (r.round, a.mean.pq)))
        .fold(None, |best: Option<(u32, f64)>, (round, pq)| match best {
            Some((_, b)) if b >= pq => best,
            _ => Some((round, pq)),
        })
        .map(|(r, _)| r);
    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        dataset,
        rounds: records.clone(),
        best_round,
        failure: failure.as_ref().map(ToString::to_string),
        ordering: ORDERING,
    };
    io::write_json(&out.join("report.json"), &report)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(records),
    }
}

fn data_dir_for_manifest(data_dir: &Path) -> Result<PathBuf> {
    fs::canonicalize(data_dir).map_err(|e| DawnError::io(data_dir, e))
}

/// Executes round `t`, reading only the dataset and `round_<t-1>`.
pub fn run_round(
    cfg: &LoopConfig,
    dataset: &DatasetConfig,
    data_dir: &Path,
    images: &[DatasetImage],
    out: &Path,
    t: u32,
) -> Result<RoundRecord> {
    let dir = round_dir(out, t);
    fs::create_dir_all(&dir).map_err(|e| DawnError::io(&dir, e))?;
    let manifest = RoundManifest {
        schema_version: SCHEMA_VERSION,
        round: t,
        dataset: dataset.name.clone(),
        images: images.iter().map(|i| i.id.clone()).collect(),
        data_dir: data_dir_for_manifest(data_dir)?,
        output_dir: PathBuf::from("."),
        pseudo_label_dir: (t > 1).then(|| PathBuf::from(format!("../round_{}", t - 1))),
        encoding: dataset.encoding.clone(),
        cpl: dataset.cpl.clone(),
        loss_weights: dataset.loss_weights,
        epochs: cfg.epochs_per_round,
        synthetic: match &cfg.predictor {
            PredictorChoice::Synthetic(s) => Some(s.clone()),
            PredictorChoice::External { .. } => None,
        },
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    write_manifest(&manifest, &manifest_path)?;

    match &cfg.predictor {
        PredictorChoice::Synthetic(_) => run_synthetic_predictor(&manifest_path).map_err(|e| match e {
            e @ DawnError::PredictorFailed { .. } => e,
            other => DawnError::PredictorFailed {
                round: t,
                status: "built-in predictor".into(),
                diagnostics: other.to_string(),
            },
        })?,
        PredictorChoice::External { command } => {
            let cmd = match command {
                Some(c) => c.clone(),
                None => crate::predictor::predictor_from_env()?,
            };
            run_external_predictor(&cmd, &manifest_path, t)?
        }
    }

    let prev = (t > 1).then(|| round_dir(out, t - 1));
    let results: Vec<Result<ImageRecord>> =
        images.par_iter().map(|img| process_image(dataset, &cfg.postprocess, &dir, prev.as_deref(), img, t)).collect();
    let images_out = results.into_iter().collect::<Result<Vec<_>>>()?;

    let n = images_out.len().max(1) as f64;
    let totals: Option<Vec<f64>> = images_out.iter().map(|r| r.losses.total).collect();
    let collect = |f: fn(&ImageRecord) -> Option<MetricCounts>| -> Option<Aggregate> {
        let counts: Option<Vec<MetricCounts>> = images_out.iter().map(f).collect();
        counts.map(|c| aggregate(&c))
    };
    let record = RoundRecord {
        round: t,
        mean_pseudo_point_coverage: images_out.iter().map(|r| r.pseudo_point_coverage).sum::<f64>() / n,
        mean_initial_point_coverage: images_out.iter().map(|r| r.initial_point_coverage).sum::<f64>() / n,
        mean_total_loss: totals.map(|v| v.iter().sum::<f64>() / n),
        instance_aggregate: collect(|r| r.instance_counts),
        pseudo_aggregate: collect(|r| r.pseudo_counts),
        images: images_out,
    };
    io::write_json(&dir.join("record.json"), &record)?;
    Ok(record)
}

fn process_image(
    dataset: &DatasetConfig,
    post: &PostprocParams,
    dir: &Path,
    prev: Option<&Path>,
    img: &DatasetImage,
    t: u32,
) -> Result<ImageRecord> {
    let validation =
        |e: DawnError| DawnError::ValidationFailed { round: t, image: img.id.clone(), source: Box::new(e) };
    let bundle = read_bundle(dir, &img.id).map_err(validation)?;
    img.points.check_bounds(&bundle.prob).map_err(validation)?;

    let image_dir = dir.join(&img.id);
    let rel = |name: &str| format!("round_{t}/{}/{name}", img.id);
    let mut artifacts = Vec::new();

    let (stages, losses_det) = if img.points.is_empty() {
        // nothing to anchor the distance filter: the pseudo-label is empty
        let m_ini = crate::cpl::binarize_segmentation(&bundle.prob, dataset.cpl.tau);
        let empty = bundle.prob.map(|_| false);
        (
            (
                m_ini,
                empty.clone(),
                crate::cpl::Provenance {
                    round: t,
                    theta: Some(dataset.cpl.theta),
                    tau: Some(dataset.cpl.tau),
                    d: dataset.cpl.d,
                    filter_mode: dataset.cpl.filter_mode,
                },
            ),
            None,
        )
    } else {
        let s = cpl_stages(&bundle.prob, &bundle.det, &img.points, &dataset.cpl)?;
        let dist = distance_to_points(&img.points)?;
        let enc = gaussian_encode_from_distance(&dist, &dataset.encoding);
        let weights = weight_map_from_distance(&dist, &dataset.encoding);
        let det = detection_loss(&bundle.det, &enc, &weights)?.value;
        let mut prov = s.pseudo.provenance;
        prov.round = t;
        ((s.m_ini, s.pseudo.mask, prov), Some(det))
    };
    let (m_ini, m_pse, provenance) = stages;

    io::write_mask_png(&image_dir.join("m_ini.png"), &m_ini)?;
    artifacts.push(rel("m_ini.png"));
    io::write_mask_png(&image_dir.join(PSEUDO_LABEL_FILE), &m_pse)?;
    artifacts.push(rel(PSEUDO_LABEL_FILE));
    io::write_json(&image_dir.join("mpse.json"), &provenance)?;
    artifacts.push(rel("mpse.json"));

    let instances = extract_instances(&bundle.prob, &bundle.hx, &bundle.hy, post)?;
    io::write_instance_png(&image_dir.join("inst.png"), &instances)?;
    artifacts.push(rel("inst.png"));
    // flat copy so `dawn eval --pred round_<t>/instances` works directly
    io::write_instance_png(&dir.join("instances").join(format!("{}.png", img.id)), &instances)?;
    artifacts.push(format!("round_{t}/instances/{}.png", img.id));

    emit_mask_overlay(None, &m_pse, &img.points, &image_dir.join("overlay.png"))?;
    artifacts.push(rel("overlay.png"));

    let supervision: BinaryMask = match prev {
        Some(p) => io::read_mask_png(&p.join(&img.id).join(PSEUDO_LABEL_FILE))?,
        None => m_ini.clone(),
    };
    let fea = cfc_loss(&bundle.seg_embedding, &bundle.det_embedding)?.value;
    let dyn_ = dyn_loss(&bundle.prob, &bundle.det, &supervision)?.value;
    let losses = LossSummary {
        det: losses_det,
        fea,
        dyn_,
        total: losses_det.map(|d| total_loss(d, fea, dyn_, &dataset.loss_weights)),
    };

    let (instance_counts, pseudo_counts) = match &img.gt {
        Some(gt) => (
            Some(image_counts(&instances, gt, &img.points, dataset.match_radius)?),
            Some(image_counts(&label_components(&m_pse), gt, &img.points, dataset.match_radius)?),
        ),
        None => (None, None),
    };

    Ok(ImageRecord {
        id: img.id.clone(),
        losses,
        pseudo_point_coverage: point_coverage(&m_pse, &img.points),
        initial_point_coverage: point_coverage(&m_ini, &img.points),
        instance_count: instances.max_id() as usize,
        instance_metrics: instance_counts.map(|c| c.report()),
        pseudo_metrics: pseudo_counts.map(|c| c.report()),
        artifacts,
        instance_counts,
        pseudo_counts,
    })
}

/// Per-image rows plus image-mean and pooled summaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub match_radius: f64,
    pub images: Vec<EvalRow>,
    pub mean: MetricReport,
    pub pooled: MetricReport,
    pub conventions: Vec<String>,
}

/// Scoring conventions for degenerate images, copied into every evaluation report.
pub const EMPTY_CASE_CONVENTIONS: [&str; 3] = [
    "DICE is 1 when prediction and ground truth are both empty",
    "AJI, DQ, SQ and PQ are 1 when both maps have no instances",
    "Recall (Precision) is 1 when there are no ground-truth (predicted) points",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    #[serde(flatten)]
    pub metrics: MetricReport,
}

fn stems(dir: &Path, ext: &str) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| DawnError::io(dir, e))?;
    let mut v: Vec<String> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    v.sort();
    Ok(v)
}

/// Scores `pred_dir/<id>.png` against `gt_dir/<id>.png` and `points_dir/<id>.csv`.
pub fn evaluate_round(pred_dir: &Path, gt_dir: &Path, points_dir: &Path, radius: f64) -> Result<EvalReport> {
    let pred_ids = stems(pred_dir, "png")?;
    let gt_ids = stems(gt_dir, "png")?;
    let pt_ids = stems(points_dir, "csv")?;
    if pred_ids != gt_ids || gt_ids != pt_ids {
        let missing: std::collections::BTreeSet<&String> = gt_ids
            .iter()
            .chain(&pred_ids)
            .chain(&pt_ids)
            .filter(|id| !(pred_ids.contains(id) && gt_ids.contains(id) && pt_ids.contains(id)))
            .collect();
        return Err(DawnError::IdMismatch(format!("ids not present in all three directories: {missing:?}")));
    }
    let rows: Vec<Result<(String, MetricCounts)>> = gt_ids
        .par_iter()
        .map(|id| {
            let gt = io::read_instance_png(&gt_dir.join(format!("{id}.png")))?;
            let pred = io::read_instance_png(&pred_dir.join(format!("{id}.png")))?;
            let pts = io::read_points_csv(&points_dir.join(format!("{id}.csv")), gt.width(), gt.height())?;
            Ok((id.clone(), image_counts(&pred, &gt, &pts, radius)?))
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let counts: Vec<MetricCounts> = rows.iter().map(|r| r.1).collect();
    let agg = aggregate(&counts);
    Ok(EvalReport {
        schema_version: SCHEMA_VERSION,
        match_radius: radius,
        images: rows.into_iter().map(|(id, c)| EvalRow { id, metrics: c.report() }).collect(),
        mean: agg.mean,
        pooled: agg.pooled,
        conventions: EMPTY_CASE_CONVENTIONS.iter().map(|s| s.to_string()).collect(),
    })
}
