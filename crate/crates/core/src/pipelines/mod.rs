//! End-to-end experiments: load a manifest, train on label budgets over
//! several folds and repeats, evaluate on the test split and write result
//! tables and predictions.
//!
//! The train split is fixed, so a fold is a fresh sampling draw: fold `f`
//! reseeds the label sampler, repeat `r` reseeds the classifier. Cells run
//! in parallel on a pool of `workers` threads and results are reported in
//! cell order, so outputs do not depend on scheduling.

mod eval;
mod object;
mod pixel;
pub mod synth;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{pixel_filter_bank, FilterBankConfig};
use crate::forest::RFConfig;
use crate::metrics::{aggregate_runs, write_aggregates_csv, write_records_csv, RunRecord};
use crate::probes::TrainConfig;
use crate::sampling::ObjectBudget;
use crate::store::{read_feature_volume, read_image, FeatureVolume, Record, ResizeMode};

pub use eval::{evaluate_predictions, PredictionScores};
pub use object::{object_feature_vectors, run_object_obap, run_object_rf, Aggregator, ObjectFeatureSpec, OBJECT_OBAP, OBJECT_RF};
pub use pixel::{run_pixel_deap, run_pixel_rf, PIXEL_DEAP, PIXEL_RF};
pub use synth::{synth_generate, SynthConfig, SynthKind, SYNTH_MODEL};

/// Environment variable holding the default worker count.
pub const WORKERS_ENV: &str = "FMCLASS_WORKERS";

pub const FILTERBANK: &str = "filterbank";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureSource {
    /// Precomputed volumes stored under this key in the manifest.
    Model(String),
    /// Classical filter bank computed from the image.
    FilterBank,
}

impl FeatureSource {
    pub fn parse(s: &str) -> Self {
        if s == FILTERBANK {
            FeatureSource::FilterBank
        } else {
            FeatureSource::Model(s.to_string())
        }
    }

    pub fn name(&self) -> &str {
        match self {
            FeatureSource::Model(m) => m,
            FeatureSource::FilterBank => FILTERBANK,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionOutput {
    None,
    /// Only fold 0, repeat 0 of every budget.
    First,
    All,
}

impl std::str::FromStr for PredictionOutput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PredictionOutput::None),
            "first" => Ok(PredictionOutput::First),
            "all" => Ok(PredictionOutput::All),
            _ => Err(Error::invalid(format!("prediction output must be none, first or all, got {s:?}"))),
        }
    }
}

/// Architecture of the attentive probes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeShape {
    pub input_size: usize,
    pub heads: usize,
    pub width: usize,
    pub ffn_hidden: usize,
    pub decoder_channels: usize,
    pub max_objects: usize,
    pub mlp_hidden: usize,
    pub sigma_init: f64,
}

impl Default for ProbeShape {
    fn default() -> Self {
        Self {
            input_size: 1024,
            heads: 4,
            width: 256,
            ffn_hidden: 512,
            decoder_channels: 64,
            max_objects: 256,
            mlp_hidden: 256,
            sigma_init: 8.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub source: FeatureSource,
    pub budgets: Vec<ObjectBudget>,
    pub folds: usize,
    pub repeats: usize,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub predictions: PredictionOutput,
    /// When false every time column is written as 0 so that reruns give
    /// byte-identical tables.
    pub record_timings: bool,
    pub workers: usize,
    /// Side of the square grid the random-forest paths resize features to.
    pub rf_side: usize,
    pub resize_mode: ResizeMode,
    pub rf: RFConfig,
    pub train: TrainConfig,
    pub probe: ProbeShape,
    pub filter_bank: FilterBankConfig,
}

impl ExperimentSpec {
    pub fn new(source: FeatureSource, budgets: Vec<ObjectBudget>) -> Self {
        Self {
            source,
            budgets,
            folds: 5,
            repeats: 5,
            seed: 0,
            out_dir: None,
            predictions: PredictionOutput::First,
            record_timings: true,
            workers: 1,
            rf_side: 256,
            resize_mode: ResizeMode::Bilinear,
            rf: RFConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeShape::default(),
            filter_bank: FilterBankConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budgets.is_empty() {
            return Err(Error::invalid("at least one budget is required"));
        }
        if self.budgets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("budgets must be strictly ascending"));
        }
        if self.folds == 0 || self.repeats == 0 || self.workers == 0 || self.rf_side == 0 {
            return Err(Error::invalid("folds, repeats, workers and the resize side must be positive"));
        }
        if let FeatureSource::Model(m) = &self.source {
            if m.is_empty() {
                return Err(Error::invalid("model key is empty"));
            }
        }
        self.filter_bank.validate()?;
        self.train.validate()
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| Error::invalid(format!("cannot start {} workers: {e}", self.workers)))
    }

    fn writes_predictions(&self, fold: usize, repeat: usize) -> bool {
        let wanted = match self.predictions {
            PredictionOutput::None => false,
            PredictionOutput::First => fold == 0 && repeat == 0,
            PredictionOutput::All => true,
        };
        wanted && self.out_dir.is_some()
    }
}

/// Sampling draw, classifier seed or training seed of one cell.
fn cell_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

const SAMPLE_STREAM: u64 = 1;
const MODEL_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug)]
struct Cell {
    budget: ObjectBudget,
    fold: usize,
    repeat: usize,
}

fn cells(spec: &ExperimentSpec, repeats: usize) -> Vec<Cell> {
    let mut out = Vec::new();
    for &budget in &spec.budgets {
        for fold in 0..spec.folds {
            for repeat in 0..repeats {
                out.push(Cell { budget, fold, repeat });
            }
        }
    }
    out
}

fn run_cells<F>(spec: &ExperimentSpec, cells: &[Cell], f: F) -> Result<Vec<RunRecord>>
where
    F: Fn(&Cell) -> Result<RunRecord> + Sync,
{
    let pool = spec.pool()?;
    pool.install(|| cells.par_iter().map(&f).collect())
}

fn cell_dir(spec: &ExperimentSpec, method: &str, cell: &Cell) -> Option<PathBuf> {
    if !spec.writes_predictions(cell.fold, cell.repeat) {
        return None;
    }
    let dir = spec.out_dir.as_ref()?.join("predictions").join(format!(
        "{method}_{}_b{}_f{}_r{}",
        spec.source.name(),
        cell.budget,
        cell.fold,
        cell.repeat
    ));
    Some(dir)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

struct Stopwatch {
    enabled: bool,
    start: Instant,
}

impl Stopwatch {
    fn start(enabled: bool) -> Self {
        Self { enabled, start: Instant::now() }
    }

    fn seconds(&self) -> f64 {
        if self.enabled {
            self.start.elapsed().as_secs_f64()
        } else {
            0.0
        }
    }
}

fn record(spec: &ExperimentSpec, method: &str, cell: &Cell, f1: f64, train_s: f64, infer_s: f64) -> RunRecord {
    RunRecord {
        method: method.to_string(),
        model: spec.source.name().to_string(),
        budget: cell.budget.to_string(),
        fold: cell.fold,
        repeat: cell.repeat,
        f1,
        train_s,
        infer_s_per_image: infer_s,
    }
}

/// Writes `results.csv` and `summary.csv` into the output directory.
pub fn write_outputs(spec: &ExperimentSpec, records: &[RunRecord]) -> Result<()> {
    if let Some(dir) = &spec.out_dir {
        ensure_dir(dir)?;
        write_records_csv(records, dir.join("results.csv"))?;
        write_aggregates_csv(&aggregate_runs(records), dir.join("summary.csv"))?;
    }
    Ok(())
}

fn load_features(record: &Record, spec: &ExperimentSpec) -> Result<FeatureVolume> {
    match &spec.source {
        FeatureSource::Model(key) => read_feature_volume(record.feature_path(key)?),
        FeatureSource::FilterBank => pixel_filter_bank(&read_image(&record.image)?, &spec.filter_bank),
    }
}
