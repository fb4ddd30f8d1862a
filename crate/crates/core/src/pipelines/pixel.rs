//! Pixel classification experiments.

use crate::error::{Error, Result};
use crate::forest::RandomForest;
use crate::metrics::{evaluate_pixels, macro_f1, ConfusionMatrix, RunRecord};
use crate::pipelines::{
    cell_dir, cell_seed, cells, ensure_dir, load_features, record, run_cells, ExperimentSpec, FeatureSource, Stopwatch, MODEL_STREAM,
    SAMPLE_STREAM,
};
use crate::probes::{save_probe, train_deap, DeapConfig, DenseExample, Probe};
use crate::sampling::{sample_pixels_rf, ObjectBudget};
use crate::store::{project_labels, record_labels, resize_features, write_labels, DatasetManifest, FeatureVolume, LabelImage, Split};

pub const PIXEL_RF: &str = "pixel-rf";
pub const PIXEL_DEAP: &str = "pixel-deap";

struct TestImage {
    name: String,
    features: FeatureVolume,
    truth: LabelImage,
}

fn pixel_budget(budget: ObjectBudget, labeled: usize) -> usize {
    match budget {
        ObjectBudget::Count(n) => n,
        ObjectBudget::All => labeled,
    }
}

fn load_tests(manifest: &DatasetManifest, spec: &ExperimentSpec, prepare: impl Fn(FeatureVolume) -> FeatureVolume) -> Result<Vec<TestImage>> {
    let tests = manifest
        .split(Split::Test)
        .map(|r| {
            Ok(TestImage {
                name: r.name(),
                truth: record_labels(r)?,
                features: prepare(load_features(r, spec)?),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if tests.is_empty() {
        return Err(Error::invalid("the test split is empty"));
    }
    Ok(tests)
}

fn save_prediction(dir: Option<&std::path::Path>, name: &str, pred: &LabelImage) -> Result<()> {
    if let Some(dir) = dir {
        ensure_dir(dir)?;
        write_labels(pred, dir.join(format!("{name}.png")))?;
    }
    Ok(())
}

/// Random forest on features resized to `rf_side × rf_side`, with labels
/// projected onto the same grid. Test predictions are made on that grid and
/// nearest-upsampled to the label image size for scoring.
pub fn run_pixel_rf(manifest: &DatasetManifest, spec: &ExperimentSpec) -> Result<Vec<RunRecord>> {
    spec.validate()?;
    let k = manifest.num_classes();
    let side = spec.rf_side;
    let resize = |v: FeatureVolume| resize_features(&v, side, side, spec.resize_mode);
    let mut pool_x: Vec<f32> = Vec::new();
    let mut pool_y: Vec<u16> = Vec::new();
    let mut channels = None;
    for r in manifest.split(Split::Train) {
        let labels = project_labels(&record_labels(r)?, side, side);
        let vol = resize(load_features(r, spec)?);
        if *channels.get_or_insert(vol.channels()) != vol.channels() {
            return Err(Error::Dimension(format!("{}: channel count differs from other records", r.name())));
        }
        for (i, &l) in labels.labels.iter().enumerate() {
            if l != 0 {
                pool_x.extend_from_slice(vol.pixel(i / side, i % side));
                pool_y.push(l);
            }
        }
    }
    if pool_y.is_empty() {
        return Err(Error::invalid("the training split has no labeled pixels"));
    }
    let c = channels.expect("pool is not empty");
    let tests = load_tests(manifest, spec, resize)?;
    log::info!("{PIXEL_RF}: {} labeled training pixels, {} test images", pool_y.len(), tests.len());

    let all = cells(spec, spec.repeats);
    let records = run_cells(spec, &all, |cell| {
        let n = pixel_budget(cell.budget, pool_y.len());
        let watch = Stopwatch::start(spec.record_timings);
        let picked = sample_pixels_rf(&pool_y, n, cell_seed(&[spec.seed, SAMPLE_STREAM, cell.fold as u64]));
        let mut x = Vec::with_capacity(picked.len() * c);
        let mut y = Vec::with_capacity(picked.len());
        for &i in &picked {
            x.extend_from_slice(&pool_x[i * c..(i + 1) * c]);
            y.push(pool_y[i] - 1);
        }
        let mut rf_cfg = spec.rf.clone();
        rf_cfg.seed = cell_seed(&[spec.seed, MODEL_STREAM, cell.fold as u64, cell.repeat as u64]);
        let forest = RandomForest::fit(&x, c, &y, k, &rf_cfg)?;
        let train_s = watch.seconds();

        let dir = cell_dir(spec, PIXEL_RF, cell);
        let mut cm = ConfusionMatrix::new(k);
        let mut infer_s = 0.0;
        for t in &tests {
            let watch = Stopwatch::start(spec.record_timings);
            let classes = forest.predict(t.features.values())?;
            let grid = LabelImage::new(side, side, classes.into_iter().map(|v| v + 1).collect())?;
            let pred = project_labels(&grid, t.truth.height, t.truth.width);
            infer_s += watch.seconds();
            cm.merge(&evaluate_pixels(&pred, &t.truth, k)?);
            save_prediction(dir.as_deref(), &t.name, &pred)?;
        }
        let f1 = macro_f1(&cm)?;
        log::info!("{PIXEL_RF} budget {} fold {} repeat {}: macro F1 {f1:.4}", cell.budget, cell.fold, cell.repeat);
        Ok(record(spec, PIXEL_RF, cell, f1, train_s, infer_s / tests.len() as f64))
    })?;
    Ok(records)
}

/// Features for a probe: stored volumes at native resolution, filter-bank
/// volumes reduced to a quarter of the probe input side.
fn probe_volume(v: FeatureVolume, spec: &ExperimentSpec) -> FeatureVolume {
    match spec.source {
        FeatureSource::Model(_) => v,
        FeatureSource::FilterBank => {
            let s = (spec.probe.input_size / 4).max(1);
            resize_features(&v, s, s, spec.resize_mode)
        }
    }
}

fn dense_examples(manifest: &DatasetManifest, spec: &ExperimentSpec, split: Split) -> Result<Vec<DenseExample>> {
    let s = spec.probe.input_size;
    manifest
        .split(split)
        .filter(|r| r.labels.is_some() || split == Split::Train)
        .map(|r| {
            Ok(DenseExample {
                labels: project_labels(&record_labels(r)?, s, s),
                features: probe_volume(load_features(r, spec)?, spec),
            })
        })
        .collect()
}

/// Dense attentive probe, trained once per fold and budget.
pub fn run_pixel_deap(manifest: &DatasetManifest, spec: &ExperimentSpec) -> Result<Vec<RunRecord>> {
    spec.validate()?;
    let k = manifest.num_classes();
    let s = spec.probe.input_size;
    let train = dense_examples(manifest, spec, Split::Train)?;
    let val = dense_examples(manifest, spec, Split::Val)?;
    let tests = load_tests(manifest, spec, |v| probe_volume(v, spec))?;
    let channels = tests[0].features.channels();
    let labeled: usize = train.iter().map(|e| e.labels.labeled_count()).sum();
    let p = &spec.probe;
    let config = DeapConfig {
        num_classes: k,
        feature_channels: channels,
        input_size: s,
        heads: p.heads,
        width: p.width,
        ffn_hidden: p.ffn_hidden,
        decoder_channels: p.decoder_channels,
        sigma_init: p.sigma_init,
    };
    config.validate()?;
    log::info!("{PIXEL_DEAP}: {} training images, {labeled} labeled pixels at {s}x{s}", train.len());

    let all = cells(spec, 1);
    run_cells(spec, &all, |cell| {
        let mut cfg = spec.train.clone();
        cfg.seed = cell_seed(&[spec.seed, SAMPLE_STREAM, cell.fold as u64]);
        let watch = Stopwatch::start(spec.record_timings);
        let (probe, report) = train_deap(config.clone(), &train, &val, pixel_budget(cell.budget, labeled), &cfg)?;
        let train_s = watch.seconds();
        log::debug!("{PIXEL_DEAP} budget {} fold {}: kept iteration {}", cell.budget, cell.fold, report.best_iteration);

        let dir = cell_dir(spec, PIXEL_DEAP, cell);
        if let Some(d) = &dir {
            ensure_dir(d)?;
            save_probe(&Probe::Deap(probe.clone()), d.join("probe.prbe"))?;
        }
        let mut cm = ConfusionMatrix::new(k);
        let mut infer_s = 0.0;
        for t in &tests {
            let watch = Stopwatch::start(spec.record_timings);
            let grid = probe.predict(&t.features)?;
            let pred = project_labels(&grid, t.truth.height, t.truth.width);
            infer_s += watch.seconds();
            cm.merge(&evaluate_pixels(&pred, &t.truth, k)?);
            save_prediction(dir.as_deref(), &t.name, &pred)?;
        }
        let f1 = macro_f1(&cm)?;
        log::info!("{PIXEL_DEAP} budget {} fold {}: macro F1 {f1:.4}", cell.budget, cell.fold);
        Ok(record(spec, PIXEL_DEAP, cell, f1, train_s, infer_s / tests.len() as f64))
    })
}
