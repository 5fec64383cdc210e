//! Weakly supervised nuclei segmentation from point annotations.
//!
//! The crate covers target encodings, training losses with analytic
//! gradients, pseudo-label refinement, instance extraction, evaluation
//! metrics and the round-based supervision loop that ties them together.

pub mod config;
pub mod cpl;
pub mod encoding;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod orchestrator;
pub mod overlay;
pub mod postprocess;
pub mod predictor;
pub mod raster;
pub mod synthgen;

pub use config::{DatasetConfig, DatasetRef, SCHEMA_VERSION};
pub use cpl::{cpl, CplParams, FilterMode, PseudoLabel};
pub use encoding::{gaussian_encode, weight_map, EncodingParams};
pub use error::{DawnError, Result};
pub use losses::{FeatureEmbedding, LossValue, LossWeights};
pub use metrics::{MetricCounts, MetricReport};
pub use orchestrator::{evaluate_round, run_loop, LoopConfig, PredictorChoice};
pub use postprocess::{extract_instances, PostprocParams};
pub use raster::{Axis, BinaryMask, DistanceField, InstanceMap, Point, PointSet, Raster, RealRaster};
