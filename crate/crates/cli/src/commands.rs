use std::path::Path;

use dawn_core::encoding::{gaussian_encode_from_distance, weight_map_from_distance};
use dawn_core::orchestrator::{evaluate_round, run_loop, LoopConfig, PredictorChoice};
use dawn_core::predictor::{run_synthetic_predictor, SyntheticPredictorConfig};
use dawn_core::raster::distance_to_points;
use dawn_core::synthgen::{generate_scene, stain_texture, SceneSpec};
use dawn_core::{io, CplParams, DatasetConfig, DawnError, EncodingParams, PostprocParams, Result};
use serde::Deserialize;

use crate::loss_spec::{self, LossRequest};
use crate::{Command, CplArgs, EncodeArgs, EvalArgs, PostprocArgs, PredictorArg, RunLoopArgs, SynthArgs};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Encode(a) => encode(a),
        Command::Loss(a) => {
            let req: LossRequest = io::read_json(&a.spec)?;
            let base = a.spec.parent().unwrap_or(Path::new("."));
            let out = loss_spec::evaluate(&req, base)?;
            println!("{}", io::to_canonical_json(&out).expect("loss output serialises"));
            Ok(())
        }
        Command::Cpl(a) => cpl(a),
        Command::Postproc(a) => postproc(a),
        Command::Eval(a) => eval(a),
        Command::RunLoop(a) => run_loop_cmd(a),
        Command::Synth(a) => synth(a),
        Command::Predict(a) => run_synthetic_predictor(&a.manifest),
    }
}

fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if jobs == 0 {
        return Err(DawnError::InvalidParams("--jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| DawnError::InvalidParams(format!("thread pool: {e}")))?;
    pool.install(f)
}

fn encode(a: EncodeArgs) -> Result<()> {
    let params: EncodingParams = match (&a.params, &a.dataset) {
        (Some(p), _) => io::read_json(p)?,
        (None, Some(name)) => DatasetConfig::preset(name)?.encoding,
        (None, None) => unreachable!("clap requires --params or --dataset"),
    };
    params.validate()?;
    let (w, h) = a.size;
    let points = io::read_points_csv(&a.points, w, h)?;
    let dist = distance_to_points(&points)?;
    io::write_real_raster(&a.out, &gaussian_encode_from_distance(&dist, &params))?;
    if let Some(wpath) = &a.weights {
        io::write_real_raster(wpath, &weight_map_from_distance(&dist, &params))?;
    }
    Ok(())
}

fn cpl(a: CplArgs) -> Result<()> {
    let prob = io::read_real_raster(&a.prob)?;
    let det = io::read_real_raster(&a.det)?;
    let points = io::read_points_csv(&a.points, prob.width(), prob.height())?;
    let params = CplParams { theta: a.theta, d: a.d, tau: a.tau, filter_mode: a.filter_mode.into() };
    let label = dawn_core::cpl(&prob, &det, &points, &params)?.with_round(a.round);
    io::write_mask_png(&a.out, &label.mask)?;
    if let Some(p) = &a.provenance {
        io::write_json(p, &label.provenance)?;
    }
    Ok(())
}

fn postproc(a: PostprocArgs) -> Result<()> {
    let params =
        PostprocParams { fg_threshold: a.fg, marker_gradient_threshold: a.marker, min_instance_area: a.min_area };
    let prob = io::read_real_raster(&a.prob)?;
    let hx = io::read_real_raster(&a.hx)?;
    let hy = io::read_real_raster(&a.hy)?;
    let inst = dawn_core::extract_instances(&prob, &hx, &hy, &params)?;
    io::write_instance_png(&a.out, &inst)
}

fn eval(a: EvalArgs) -> Result<()> {
    let radius = match a.radius {
        Some(r) if r > 0.0 => r,
        Some(r) => return Err(DawnError::InvalidParams(format!("--radius must be positive, got {r}"))),
        None => DatasetConfig::preset(&a.dataset)?.match_radius,
    };
    let report = with_jobs(a.jobs, || evaluate_round(&a.pred, &a.gt, &a.points, radius))?;
    io::write_json(&a.report, &report)?;
    let m = report.mean;
    println!(
        "images={} DICE={:.4} AJI={:.4} DQ={:.4} SQ={:.4} PQ={:.4} Recall={:.4} Precision={:.4} F1={:.4}",
        report.images.len(),
        m.dice,
        m.aji,
        m.dq,
        m.sq,
        m.pq,
        m.det_recall,
        m.det_precision,
        m.det_f1
    );
    Ok(())
}

fn run_loop_cmd(a: RunLoopArgs) -> Result<()> {
    let mut cfg: LoopConfig = io::read_json(&a.config)?;
    match (a.predictor, &cfg.predictor) {
        (Some(PredictorArg::External), _) => cfg.predictor = PredictorChoice::External { command: None },
        (Some(PredictorArg::Synthetic), PredictorChoice::External { .. }) => {
            cfg.predictor = PredictorChoice::Synthetic(SyntheticPredictorConfig::default())
        }
        _ => {}
    }
    let records = with_jobs(a.jobs, || run_loop(&cfg, &a.data, &a.out))?;
    for r in &records {
        let pq = r.instance_aggregate.map(|g| format!(" PQ={:.4}", g.mean.pq)).unwrap_or_default();
        println!(
            "round {}: pseudo-label point coverage {:.4} (initial {:.4}){pq}",
            r.round, r.mean_pseudo_point_coverage, r.mean_initial_point_coverage
        );
    }
    Ok(())
}

fn one() -> usize {
    1
}

fn default_prefix() -> String {
    "img".into()
}

#[derive(Debug, Deserialize)]
struct SynthSpec {
    #[serde(flatten)]
    scene: SceneSpec,
    /// Number of scenes; scene `i` uses seed `seed + i`.
    #[serde(default = "one")]
    images: usize,
    #[serde(default = "default_prefix")]
    prefix: String,
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec: SynthSpec = io::read_json(&a.spec)?;
    let width = spec.images.saturating_sub(1).to_string().len().max(3);
    for i in 0..spec.images {
        let scene_spec = SceneSpec { seed: spec.scene.seed.wrapping_add(i as u64), ..spec.scene.clone() };
        let scene = generate_scene(&scene_spec)?;
        let id = format!("{}_{:0width$}", spec.prefix, i);
        io::write_instance_png(&a.out.join("gt").join(format!("{id}.png")), &scene.instances)?;
        io::write_points_csv(&a.out.join("points").join(format!("{id}.csv")), &scene.points)?;
        io::write_gray_png(
            &a.out.join("images").join(format!("{id}.png")),
            &stain_texture(&scene.instances, scene_spec.seed),
        )?;
    }
    Ok(())
}
