mod commands;
mod loss_spec;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use dawn_core::FilterMode;

/// Point-supervised nuclei segmentation toolkit.
#[derive(Parser, Debug)]
#[command(name = "dawn", version, about, propagate_version = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Extended Gaussian encoding (and optional weight map) of a point set.
    Encode(EncodeArgs),
    /// Evaluate a loss described by a JSON spec; prints the value, optionally writes gradients.
    Loss(LossArgs),
    /// Combined pseudo-label from segmentation and detection outputs.
    Cpl(CplArgs),
    /// Instance map from foreground probability and hover maps.
    Postproc(PostprocArgs),
    /// Score instance maps against ground truth.
    Eval(EvalArgs),
    /// Run the multi-round supervision loop.
    RunLoop(RunLoopArgs),
    /// Generate synthetic scenes (instance maps, points, textures).
    Synth(SynthArgs),
    /// Built-in synthetic predictor speaking the manifest protocol.
    Predict(PredictArgs),
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("encoding").required(true).args(["params", "dataset"])))]
pub struct EncodeArgs {
    /// Annotation points, CSV with an `x,y` header.
    #[arg(long)]
    pub points: PathBuf,
    /// Encoding parameters as JSON (`r1`, `r2`, `sigma`).
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Use a dataset preset's encoding instead of `--params`.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Raster size as WxH.
    #[arg(long, value_parser = parse_size)]
    pub size: (u32, u32),
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the per-pixel loss weights here.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct LossArgs {
    /// JSON spec naming the loss (`"loss": "ce" | "dice" | "mse" | "detection" | "gradient_mse" | "cfc" | "dyn" | "total" | "pretrain"`) and its inputs.
    #[arg(long)]
    pub spec: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FilterModeArg {
    Pixel,
    Component,
}

impl From<FilterModeArg> for FilterMode {
    fn from(m: FilterModeArg) -> Self {
        match m {
            FilterModeArg::Pixel => FilterMode::Pixel,
            FilterModeArg::Component => FilterMode::Component,
        }
    }
}

#[derive(Args, Debug)]
pub struct CplArgs {
    /// Segmentation probability (DWNR).
    #[arg(long)]
    pub prob: PathBuf,
    /// Detection map (DWNR).
    #[arg(long)]
    pub det: PathBuf,
    #[arg(long)]
    pub points: PathBuf,
    #[arg(long)]
    pub theta: f64,
    #[arg(long)]
    pub d: f64,
    #[arg(long, default_value_t = dawn_core::cpl::DEFAULT_TAU)]
    pub tau: f64,
    #[arg(long, value_enum, default_value_t = FilterModeArg::Pixel)]
    pub filter_mode: FilterModeArg,
    /// Output pseudo-label PNG.
    #[arg(long)]
    pub out: PathBuf,
    /// Write the parameters used next to the mask, as JSON.
    #[arg(long)]
    pub provenance: Option<PathBuf>,
    /// Round index recorded in the provenance.
    #[arg(long, default_value_t = 0)]
    pub round: u32,
}

#[derive(Args, Debug)]
pub struct PostprocArgs {
    #[arg(long)]
    pub prob: PathBuf,
    #[arg(long)]
    pub hx: PathBuf,
    #[arg(long)]
    pub hy: PathBuf,
    /// Output instance map (16-bit PNG).
    #[arg(long)]
    pub out: PathBuf,
    /// Foreground threshold on the probability.
    #[arg(long, default_value_t = 0.5)]
    pub fg: f64,
    /// Marker threshold on the boundary energy.
    #[arg(long, default_value_t = 0.4)]
    pub marker: f64,
    /// Minimum instance area in pixels.
    #[arg(long, default_value_t = 10)]
    pub min_area: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of predicted instance PNGs.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth instance PNGs.
    #[arg(long)]
    pub gt: PathBuf,
    /// Directory of ground-truth point CSVs.
    #[arg(long)]
    pub points: PathBuf,
    /// Detection match radius; defaults to the dataset's r1.
    #[arg(long)]
    pub radius: Option<f64>,
    /// Dataset preset supplying the default radius.
    #[arg(long, default_value = "TNBC")]
    pub dataset: String,
    #[arg(long)]
    pub report: PathBuf,
    /// Worker threads for per-image evaluation.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PredictorArg {
    Synthetic,
    External,
}

#[derive(Args, Debug)]
pub struct RunLoopArgs {
    /// Loop configuration JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Dataset directory with `points/`, and `gt/` or `images/`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Override the predictor; `external` runs the command in DAWN_PREDICTOR.
    #[arg(long, value_enum)]
    pub predictor: Option<PredictorArg>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Scene spec JSON; an optional `images` field generates several scenes with consecutive seeds.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Round manifest written by `run-loop`.
    pub manifest: PathBuf,
}

fn parse_size(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("bad size component `{v}`: {e}"));
    let (w, h) = (parse(w)?, parse(h)?);
    if w == 0 || h == 0 {
        return Err("size must be positive".into());
    }
    Ok((w, h))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(2)
        }
    }
}
