//! Scores a directory of saved predictions against a manifest split.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{evaluate_objects, evaluate_pixels, f1_score, ConfusionMatrix, F1Average};
use crate::pipelines::object::object_classes_for;
use crate::store::{read_instances, read_labels, read_object_labels, record_labels, DatasetManifest, Split};

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PredictionScores {
    /// Images with a `<name>.png` label raster.
    pub pixel_images: usize,
    pub pixel_f1: Option<f64>,
    /// Images with a `<name>_objects.csv` table.
    pub object_images: usize,
    pub object_f1: Option<f64>,
}

/// Looks for `<name>.png` and `<name>_objects.csv` for every record of
/// `split` and scores whatever is present.
pub fn evaluate_predictions(manifest: &DatasetManifest, dir: &Path, split: Split, average: F1Average) -> Result<PredictionScores> {
    let k = manifest.num_classes();
    let mut pixels = ConfusionMatrix::new(k);
    let mut objects = ConfusionMatrix::new(k);
    let mut scores = PredictionScores::default();
    for r in manifest.split(split) {
        let name = r.name();
        let raster = dir.join(format!("{name}.png"));
        if raster.exists() {
            let pred = read_labels(&raster)?;
            pixels.merge(&evaluate_pixels(&pred, &record_labels(r)?, k)?);
            scores.pixel_images += 1;
        }
        let table = dir.join(format!("{name}_objects.csv"));
        if table.exists() {
            let pred = read_object_labels(&table, k)?;
            let path = r.instances.as_ref().ok_or_else(|| Error::Manifest(format!("record {name} has no instance mask")))?;
            let truth: BTreeMap<u32, u16> = object_classes_for(r, &read_instances(path)?, k)?
                .into_iter()
                .filter(|&(_, c)| c != 0)
                .collect();
            let scored: BTreeMap<u32, u16> = pred.into_iter().filter(|(id, _)| truth.contains_key(id)).collect();
            objects.merge(&evaluate_objects(&scored, &truth, k)?);
            scores.object_images += 1;
        }
    }
    if scores.pixel_images + scores.object_images == 0 {
        return Err(Error::invalid(format!("no predictions for the {split} split in {}", dir.display())));
    }
    if scores.pixel_images > 0 {
        scores.pixel_f1 = Some(f1_score(&pixels, average)?);
    }
    if scores.object_images > 0 {
        scores.object_f1 = Some(f1_score(&objects, average)?);
    }
    Ok(scores)
}
