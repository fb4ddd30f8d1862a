//! Object classification experiments.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::RandomForest;
use crate::metrics::{evaluate_objects, macro_f1, ConfusionMatrix, RunRecord};
use crate::pipelines::{
    cell_dir, cell_seed, cells, ensure_dir, load_features, record, run_cells, ExperimentSpec, FeatureSource, Stopwatch, MODEL_STREAM,
    SAMPLE_STREAM,
};
use crate::probes::{object_centroids, save_probe, train_obap, Centroid, ObapConfig, ObjectExample, Probe};
use crate::sampling::sample_objects;
use crate::store::{
    project_instances, read_instances, read_object_labels, record_labels, resize_features, write_object_labels, DatasetManifest,
    FeatureVolume, InstanceMask, Record, Split,
};

pub const OBJECT_RF: &str = "object-rf";
pub const OBJECT_OBAP: &str = "object-obap";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Mean,
    Std,
    Area,
}

impl std::str::FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mean" => Ok(Aggregator::Mean),
            "std" => Ok(Aggregator::Std),
            "area" => Ok(Aggregator::Area),
            other => Err(Error::invalid(format!("unknown aggregator {other:?}; use mean, std or area"))),
        }
    }
}

/// Per-object feature layout: channel means, then channel standard
/// deviations, then the pixel area, each block present when selected.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectFeatureSpec {
    pub aggregators: Vec<Aggregator>,
}

impl Default for ObjectFeatureSpec {
    fn default() -> Self {
        Self { aggregators: vec![Aggregator::Mean, Aggregator::Area] }
    }
}

impl std::str::FromStr for ObjectFeatureSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::new(s.split(',').map(str::parse).collect::<Result<Vec<_>>>()?)
    }
}

impl ObjectFeatureSpec {
    pub fn new(mut aggregators: Vec<Aggregator>) -> Result<Self> {
        aggregators.sort_unstable();
        aggregators.dedup();
        if aggregators.is_empty() {
            return Err(Error::invalid("at least one aggregator is required"));
        }
        Ok(Self { aggregators })
    }

    fn has(&self, a: Aggregator) -> bool {
        self.aggregators.contains(&a)
    }

    pub fn dim(&self, channels: usize) -> usize {
        self.aggregators
            .iter()
            .map(|a| if *a == Aggregator::Area { 1 } else { channels })
            .sum()
    }
}

/// Aggregates `features` over each object of `mask`. The mask is projected
/// onto the feature grid; an object too small to keep any cell falls back
/// to the cell containing its centroid. Area is counted in image pixels.
pub fn object_feature_vectors(features: &FeatureVolume, mask: &InstanceMask, spec: &ObjectFeatureSpec) -> Result<BTreeMap<u32, Vec<f32>>> {
    let (fh, fw, c) = (features.height(), features.width(), features.channels());
    let projected = project_instances(mask, fh, fw);
    let cells = projected.pixels_by_id();
    let mut out = BTreeMap::new();
    for centroid in object_centroids(mask) {
        let id = centroid.id;
        let area = mask.ids.iter().filter(|&&v| v == id).count();
        let fallback;
        let members: &[usize] = match cells.get(&id) {
            Some(v) if !v.is_empty() => v,
            _ => {
                let r = (((centroid.row + 0.5) * fh as f64 / mask.height as f64) as usize).min(fh - 1);
                let col = (((centroid.col + 0.5) * fw as f64 / mask.width as f64) as usize).min(fw - 1);
                fallback = [r * fw + col];
                &fallback
            }
        };
        let n = members.len() as f64;
        let mut mean = vec![0f64; c];
        for &i in members {
            for (m, &v) in mean.iter_mut().zip(features.pixel(i / fw, i % fw)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut v = Vec::with_capacity(spec.dim(c));
        if spec.has(Aggregator::Mean) {
            v.extend(mean.iter().map(|&m| m as f32));
        }
        if spec.has(Aggregator::Std) {
            let mut var = vec![0f64; c];
            for &i in members {
                for ((s, &x), m) in var.iter_mut().zip(features.pixel(i / fw, i % fw)).zip(&mean) {
                    *s += (x as f64 - m).powi(2);
                }
            }
            v.extend(var.iter().map(|&s| (s / n).sqrt() as f32));
        }
        if spec.has(Aggregator::Area) {
            v.push(area as f32);
        }
        out.insert(id, v);
    }
    Ok(out)
}

/// Object classes of a record: the object-label table when present,
/// otherwise the majority pixel label inside each mask (ties to the lower
/// class, 0 when no pixel is labeled).
pub(crate) fn object_classes_for(record: &Record, mask: &InstanceMask, k: usize) -> Result<BTreeMap<u32, u16>> {
    if let Some(p) = &record.object_labels {
        let table = read_object_labels(p, k)?;
        return Ok(mask.pixels_by_id().into_keys().map(|id| (id, table.get(&id).copied().unwrap_or(0))).collect());
    }
    let labels = record_labels(record)?;
    if (labels.height, labels.width) != (mask.height, mask.width) {
        return Err(Error::Dimension(format!("{}: labels and instances differ in size", record.name())));
    }
    Ok(mask
        .pixels_by_id()
        .into_iter()
        .map(|(id, px)| {
            let mut votes = vec![0usize; k + 1];
            for i in px {
                votes[labels.labels[i] as usize] += 1;
            }
            let best = (1..=k)
                .filter(|&c| votes[c] > 0)
                .max_by(|&a, &b| votes[a].cmp(&votes[b]).then(b.cmp(&a)))
                .unwrap_or(0);
            (id, best as u16)
        })
        .collect())
}

struct ObjectRecord {
    name: String,
    features: FeatureVolume,
    mask: InstanceMask,
    classes: BTreeMap<u32, u16>,
}

fn load_objects(manifest: &DatasetManifest, spec: &ExperimentSpec, split: Split) -> Result<Vec<ObjectRecord>> {
    let k = manifest.num_classes();
    manifest
        .split(split)
        .map(|r| {
            let path = r.instances.as_ref().ok_or_else(|| Error::Manifest(format!("record {} has no instance mask", r.name())))?;
            let mask = read_instances(path)?;
            Ok(ObjectRecord {
                name: r.name(),
                classes: object_classes_for(r, &mask, k)?,
                features: load_features(r, spec)?,
                mask,
            })
        })
        .collect()
}

fn labeled_truth(classes: &BTreeMap<u32, u16>) -> BTreeMap<u32, u16> {
    classes.iter().filter(|(_, &c)| c != 0).map(|(&i, &c)| (i, c)).collect()
}

fn save_objects(dir: Option<&std::path::Path>, name: &str, pred: &BTreeMap<u32, u16>) -> Result<()> {
    if let Some(dir) = dir {
        ensure_dir(dir)?;
        write_object_labels(pred, dir.join(format!("{name}_objects.csv")))?;
    }
    Ok(())
}

/// Random forest on aggregated per-object features.
pub fn run_object_rf(manifest: &DatasetManifest, spec: &ExperimentSpec, features: &ObjectFeatureSpec) -> Result<Vec<RunRecord>> {
    spec.validate()?;
    let k = manifest.num_classes();
    let side = spec.rf_side;
    let vectors = |o: &ObjectRecord| {
        let vol = resize_features(&o.features, side, side, spec.resize_mode);
        object_feature_vectors(&vol, &o.mask, features)
    };
    let mut pool_x = Vec::new();
    let mut pool_y = Vec::new();
    let mut dim = None;
    for o in load_objects(manifest, spec, Split::Train)? {
        for (id, v) in vectors(&o)? {
            let class = o.classes[&id];
            if class != 0 {
                if *dim.get_or_insert(v.len()) != v.len() {
                    return Err(Error::Dimension(format!("{}: channel count differs from other records", o.name)));
                }
                pool_x.extend(v);
                pool_y.push(class);
            }
        }
    }
    let d = dim.ok_or_else(|| Error::invalid("the training split has no labeled objects"))?;
    let tests: Vec<(ObjectRecord, BTreeMap<u32, Vec<f32>>)> = load_objects(manifest, spec, Split::Test)?
        .into_iter()
        .map(|o| vectors(&o).map(|v| (o, v)))
        .collect::<Result<_>>()?;
    if tests.is_empty() {
        return Err(Error::invalid("the test split is empty"));
    }
    log::info!("{OBJECT_RF}: {} labeled training objects with {d} features", pool_y.len());

    let all = cells(spec, spec.repeats);
    run_cells(spec, &all, |cell| {
        let watch = Stopwatch::start(spec.record_timings);
        let picked = sample_objects(&pool_y, cell.budget, cell_seed(&[spec.seed, SAMPLE_STREAM, cell.fold as u64]));
        let mut x = Vec::with_capacity(picked.len() * d);
        let mut y = Vec::with_capacity(picked.len());
        for &i in &picked {
            x.extend_from_slice(&pool_x[i * d..(i + 1) * d]);
            y.push(pool_y[i] - 1);
        }
        let mut rf_cfg = spec.rf.clone();
        rf_cfg.seed = cell_seed(&[spec.seed, MODEL_STREAM, cell.fold as u64, cell.repeat as u64]);
        let forest = RandomForest::fit(&x, d, &y, k, &rf_cfg)?;
        let train_s = watch.seconds();

        let dir = cell_dir(spec, OBJECT_RF, cell);
        let mut cm = ConfusionMatrix::new(k);
        let mut infer_s = 0.0;
        for (o, vecs) in &tests {
            let watch = Stopwatch::start(spec.record_timings);
            let ids: Vec<u32> = vecs.keys().copied().collect();
            let flat: Vec<f32> = vecs.values().flatten().copied().collect();
            let classes = if ids.is_empty() { Vec::new() } else { forest.predict(&flat)? };
            let pred: BTreeMap<u32, u16> = ids.into_iter().zip(classes).map(|(id, c)| (id, c + 1)).collect();
            infer_s += watch.seconds();
            let truth = labeled_truth(&o.classes);
            let scored: BTreeMap<u32, u16> = pred.iter().filter(|(id, _)| truth.contains_key(id)).map(|(&i, &c)| (i, c)).collect();
            cm.merge(&evaluate_objects(&scored, &truth, k)?);
            save_objects(dir.as_deref(), &o.name, &pred)?;
        }
        let f1 = macro_f1(&cm)?;
        log::info!("{OBJECT_RF} budget {} fold {} repeat {}: macro F1 {f1:.4}", cell.budget, cell.fold, cell.repeat);
        Ok(record(spec, OBJECT_RF, cell, f1, train_s, infer_s / tests.len() as f64))
    })
}

fn object_example(o: &ObjectRecord, spec: &ExperimentSpec) -> ObjectExample {
    let features = match spec.source {
        FeatureSource::Model(_) => o.features.clone(),
        FeatureSource::FilterBank => {
            let (h, w) = ((o.mask.height / 4).max(1), (o.mask.width / 4).max(1));
            resize_features(&o.features, h, w, spec.resize_mode)
        }
    };
    let objects: Vec<Centroid> = object_centroids(&o.mask);
    let classes = objects.iter().map(|c| o.classes.get(&c.id).copied().unwrap_or(0)).collect();
    ObjectExample { features, image_size: (o.mask.height, o.mask.width), objects, classes }
}

/// Object-guided attentive probe, trained once per fold and budget.
pub fn run_object_obap(manifest: &DatasetManifest, spec: &ExperimentSpec) -> Result<Vec<RunRecord>> {
    spec.validate()?;
    let k = manifest.num_classes();
    let train: Vec<ObjectExample> = load_objects(manifest, spec, Split::Train)?.iter().map(|o| object_example(o, spec)).collect();
    let val: Vec<ObjectExample> = load_objects(manifest, spec, Split::Val)?.iter().map(|o| object_example(o, spec)).collect();
    let tests: Vec<(ObjectRecord, ObjectExample)> = load_objects(manifest, spec, Split::Test)?
        .into_iter()
        .map(|o| {
            let e = object_example(&o, spec);
            (o, e)
        })
        .collect();
    if tests.is_empty() {
        return Err(Error::invalid("the test split is empty"));
    }
    let p = &spec.probe;
    let config = ObapConfig {
        num_classes: k,
        feature_channels: tests[0].1.features.channels(),
        max_objects: p.max_objects,
        heads: p.heads,
        width: p.width,
        mlp_hidden: p.mlp_hidden,
        sigma_init: p.sigma_init,
    };
    config.validate()?;

    let all = cells(spec, 1);
    run_cells(spec, &all, |cell| {
        let mut cfg = spec.train.clone();
        cfg.seed = cell_seed(&[spec.seed, SAMPLE_STREAM, cell.fold as u64]);
        let watch = Stopwatch::start(spec.record_timings);
        let (probe, report) = train_obap(config.clone(), &train, &val, cell.budget, &cfg)?;
        let train_s = watch.seconds();
        log::debug!("{OBJECT_OBAP} budget {} fold {}: kept iteration {}", cell.budget, cell.fold, report.best_iteration);

        let dir = cell_dir(spec, OBJECT_OBAP, cell);
        if let Some(d) = &dir {
            ensure_dir(d)?;
            save_probe(&Probe::Obap(probe.clone()), d.join("probe.prbe"))?;
        }
        let mut cm = ConfusionMatrix::new(k);
        let mut infer_s = 0.0;
        for (o, e) in &tests {
            let watch = Stopwatch::start(spec.record_timings);
            let classes = probe.predict(&e.features, e.image_size, &e.objects)?;
            let pred: BTreeMap<u32, u16> = e.objects.iter().map(|c| c.id).zip(classes).collect();
            infer_s += watch.seconds();
            let truth = labeled_truth(&o.classes);
            let scored: BTreeMap<u32, u16> = pred.iter().filter(|(id, _)| truth.contains_key(id)).map(|(&i, &c)| (i, c)).collect();
            cm.merge(&evaluate_objects(&scored, &truth, k)?);
            save_objects(dir.as_deref(), &o.name, &pred)?;
        }
        let f1 = macro_f1(&cm)?;
        log::info!("{OBJECT_OBAP} budget {} fold {}: macro F1 {f1:.4}", cell.budget, cell.fold);
        Ok(record(spec, OBJECT_OBAP, cell, f1, train_s, infer_s / tests.len() as f64))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn volume() -> FeatureVolume {
        // 2x2 grid, 2 channels; channel 0 = cell index, channel 1 = 10 * cell index
        FeatureVolume::new(2, 2, 2, (0..4).flat_map(|i| [i as f32, 10.0 * i as f32]).collect()).unwrap()
    }

    fn mask() -> InstanceMask {
        // 4x4 image; object 5 covers the left half, object 9 is one pixel
        let mut ids = vec![0u32; 16];
        for r in 0..4 {
            ids[r * 4] = 5;
            ids[r * 4 + 1] = 5;
        }
        ids[3 * 4 + 3] = 9;
        InstanceMask::new(4, 4, ids).unwrap()
    }

    #[test]
    fn dims_follow_aggregators() {
        let c = 2;
        for (agg, dim) in [("mean", c), ("mean,area", c + 1), ("mean,std,area", 2 * c + 1), ("area,mean", c + 1)] {
            let spec: ObjectFeatureSpec = agg.parse().unwrap();
            assert_eq!(spec.dim(c), dim);
            for v in object_feature_vectors(&volume(), &mask(), &spec).unwrap().values() {
                assert_eq!(v.len(), dim, "{agg}");
            }
        }
        assert!("mean,median".parse::<ObjectFeatureSpec>().is_err());
    }

    #[test]
    fn mean_std_area_values() {
        let spec: ObjectFeatureSpec = "mean,std,area".parse().unwrap();
        let v = object_feature_vectors(&volume(), &mask(), &spec).unwrap();
        // object 5 covers cells 0 and 2
        assert_eq!(v[&5], vec![1.0, 10.0, 1.0, 10.0, 8.0]);
    }

    #[test]
    fn small_object_falls_back_to_centroid_cell() {
        let mut ids = vec![0u32; 64];
        ids[5 * 8 + 6] = 3;
        let mask = InstanceMask::new(8, 8, ids).unwrap();
        let spec: ObjectFeatureSpec = "mean,area".parse().unwrap();
        let v = object_feature_vectors(&volume(), &mask, &spec).unwrap();
        // pixel (5, 6) lies in cell (1, 1) = index 3
        assert_eq!(v[&3], vec![3.0, 30.0, 1.0]);
    }
}
