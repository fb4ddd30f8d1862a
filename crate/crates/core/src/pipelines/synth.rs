//! Synthetic datasets with known structure, for checking the pipelines
//! end to end without real encoder features.
//!
//! Pixel kind: each image is a Voronoi partition into class regions, taken
//! over the centres of `cell_size` square pixel blocks so that every block
//! holds a single class. Each block is one feature cell; the first `K`
//! channels of a cell hold the fraction of its pixels in each class plus
//! Gaussian noise, and the remaining channels are pure noise. Without noise
//! the classes are therefore separable from the features alone.
//!
//! Object kind: non-overlapping discs whose radius, intensity and in-mask
//! feature prototype depend on the class, on a background prototype. A
//! feature cell holds the mean prototype of its pixel block plus noise, so
//! even discs smaller than a cell leave a trace.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::rng_for;
use crate::store::{
    write_feature_volume, write_image_png, write_instances, write_labels, write_object_labels, DatasetManifest, FeatureVolume, GrayImage,
    InstanceMask, LabelImage, Record, Split,
};

pub const SYNTH_MODEL: &str = "synth";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Pixel,
    Object,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(SynthKind::Pixel),
            "object" => Ok(SynthKind::Object),
            _ => Err(Error::invalid(format!("unknown synthetic dataset kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub kind: SynthKind,
    pub num_classes: usize,
    pub num_images: usize,
    pub image_size: usize,
    /// Side of the square pixel block behind each feature cell.
    pub cell_size: usize,
    /// Feature channels beyond the class-indicative ones.
    pub distractors: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(kind: SynthKind, num_classes: usize, num_images: usize) -> Self {
        Self { kind, num_classes, num_images, image_size: 64, cell_size: 4, distractors: 4, noise: 0.5, seed: 0 }
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("synthetic data needs at least two classes"));
        }
        if self.num_images < 3 {
            return Err(Error::invalid("synthetic data needs at least three images for the three splits"));
        }
        if self.cell_size == 0 || self.image_size % self.cell_size != 0 || self.image_size < 2 * self.cell_size {
            return Err(Error::invalid(format!(
                "image size {} must be a multiple of the cell size {} and span at least two cells",
                self.image_size, self.cell_size
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid(format!("noise must be non-negative, got {}", self.noise)));
        }
        Ok(())
    }

    pub fn feature_size(&self) -> usize {
        self.image_size / self.cell_size
    }
}

/// 60/20/20 split by position; every split gets at least one image.
fn split_of(i: usize, n: usize) -> Split {
    let n_test = (n / 5).max(1);
    let n_val = (n / 5).max(1);
    if i >= n - n_test {
        Split::Test
    } else if i >= n - n_test - n_val {
        Split::Val
    } else {
        Split::Train
    }
}

fn gauss(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std == 0.0 {
        0.0
    } else {
        Normal::new(0.0, std).expect("finite std").sample(rng)
    }
}

struct Sample {
    image: GrayImage,
    labels: LabelImage,
    features: FeatureVolume,
    instances: Option<(InstanceMask, BTreeMap<u32, u16>)>,
}

fn pixel_sample(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let (s, k) = (cfg.image_size, cfg.num_classes);
    let cs = cfg.cell_size;
    let area = 1.0 / (cs * cs) as f64;
    let n_seeds = k + 1;
    let seeds: Vec<(f64, f64, u16)> = (0..n_seeds)
        .map(|i| {
            let class = if i < k { i } else { rng.random_range(0..k) };
            (rng.random_range(0.0..s as f64), rng.random_range(0.0..s as f64), class as u16 + 1)
        })
        .collect();
    let mut labels = vec![0u16; s * s];
    for r in 0..s {
        for c in 0..s {
            let (y, x) = ((r / cs * cs + cs / 2) as f64, (c / cs * cs + cs / 2) as f64);
            let nearest = seeds
                .iter()
                .min_by(|a, b| ((a.0 - y).powi(2) + (a.1 - x).powi(2)).total_cmp(&((b.0 - y).powi(2) + (b.1 - x).powi(2))))
                .expect("at least one seed");
            labels[r * s + c] = nearest.2;
        }
    }
    let pixels: Vec<f32> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let class = (l - 1) as f64;
            let base = 0.2 + 0.6 * class / (k - 1) as f64;
            let texture = 0.08 * ((i % s) as f64 * (0.4 + 0.5 * class)).sin();
            (base + texture + gauss(rng, 0.03)).clamp(0.0, 1.0) as f32
        })
        .collect();
    let fs = cfg.feature_size();
    let channels = k + cfg.distractors;
    let mut values = Vec::with_capacity(fs * fs * channels);
    for fr in 0..fs {
        for fc in 0..fs {
            let mut frac = vec![0.0; k];
            for r in cs * fr..cs * (fr + 1) {
                for c in cs * fc..cs * (fc + 1) {
                    frac[labels[r * s + c] as usize - 1] += area;
                }
            }
            for f in frac {
                values.push((f + gauss(rng, cfg.noise)) as f32);
            }
            for _ in 0..cfg.distractors {
                values.push(gauss(rng, cfg.noise.max(0.1)) as f32);
            }
        }
    }
    Ok(Sample {
        image: GrayImage::new(s, s, pixels)?,
        labels: LabelImage::new(s, s, labels)?,
        features: FeatureVolume::new(fs, fs, channels, values)?,
        instances: None,
    })
}

fn object_sample(cfg: &SynthConfig, prototypes: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Result<Sample> {
    let (s, k) = (cfg.image_size, cfg.num_classes);
    let cs = cfg.cell_size;
    let area = 1.0 / (cs * cs) as f64;
    let mut ids = vec![0u32; s * s];
    let mut labels = vec![0u16; s * s];
    let mut classes = BTreeMap::new();
    let target = rng.random_range(6..=10);
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    for _ in 0..200 {
        if placed.len() == target {
            break;
        }
        let class = rng.random_range(0..k);
        let radius = 2.0 + 1.5 * class as f64 + rng.random_range(0.0..1.0);
        let (y, x) = (rng.random_range(radius..s as f64 - radius), rng.random_range(radius..s as f64 - radius));
        if placed.iter().any(|&(py, px, pr)| ((py - y).powi(2) + (px - x).powi(2)).sqrt() < pr + radius + 2.0) {
            continue;
        }
        placed.push((y, x, radius));
        let id = placed.len() as u32;
        classes.insert(id, class as u16 + 1);
        for r in 0..s {
            for c in 0..s {
                if ((r as f64 + 0.5 - y).powi(2) + (c as f64 + 0.5 - x).powi(2)).sqrt() <= radius {
                    ids[r * s + c] = id;
                    labels[r * s + c] = class as u16 + 1;
                }
            }
        }
    }
    let pixels: Vec<f32> = labels
        .iter()
        .map(|&l| {
            let v = if l == 0 { 0.1 } else { 0.3 + 0.6 * (l - 1) as f64 / (k - 1) as f64 };
            (v + gauss(rng, 0.03)).clamp(0.0, 1.0) as f32
        })
        .collect();
    let fs = cfg.feature_size();
    let channels = prototypes[0].len();
    let mut values = Vec::with_capacity(fs * fs * channels);
    for fr in 0..fs {
        for fc in 0..fs {
            let mut mix = vec![0.0; channels];
            for r in cs * fr..cs * (fr + 1) {
                for c in cs * fc..cs * (fc + 1) {
                    for (m, p) in mix.iter_mut().zip(&prototypes[labels[r * s + c] as usize]) {
                        *m += p * area;
                    }
                }
            }
            for m in mix {
                values.push((m + gauss(rng, cfg.noise)) as f32);
            }
        }
    }
    Ok(Sample {
        image: GrayImage::new(s, s, pixels)?,
        labels: LabelImage::new(s, s, labels)?,
        features: FeatureVolume::new(fs, fs, channels, values)?,
        instances: Some((InstanceMask::new(s, s, ids)?, classes)),
    })
}

/// Writes the dataset and its `manifest.json` below `out`, returning the
/// manifest path. Output bytes depend only on `cfg`.
pub fn synth_generate(cfg: &SynthConfig, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut rng = rng_for(cfg.seed);
    let channels = cfg.num_classes + cfg.distractors;
    // Background prototype first, then one per class.
    let prototypes: Vec<Vec<f64>> = (0..=cfg.num_classes)
        .map(|_| (0..channels).map(|_| gauss(&mut rng, 1.0)).collect())
        .collect();
    let mut records = Vec::with_capacity(cfg.num_images);
    for i in 0..cfg.num_images {
        let sample = match cfg.kind {
            SynthKind::Pixel => pixel_sample(cfg, &mut rng)?,
            SynthKind::Object => object_sample(cfg, &prototypes, &mut rng)?,
        };
        let stem = format!("img{i:03}");
        let rel = |ext: &str| PathBuf::from(format!("{stem}{ext}"));
        write_image_png(&sample.image, out.join(rel(".png")))?;
        write_labels(&sample.labels, out.join(rel("_labels.png")))?;
        let provenance = serde_json::json!({ "model": SYNTH_MODEL, "seed": cfg.seed });
        write_feature_volume(&sample.features.with_provenance(&provenance), out.join(rel(".fvol")))?;
        let mut record = Record {
            image: rel(".png"),
            features: BTreeMap::from([(SYNTH_MODEL.to_string(), rel(".fvol"))]),
            labels: Some(rel("_labels.png")),
            instances: None,
            object_labels: None,
            split: split_of(i, cfg.num_images),
        };
        if let Some((mask, classes)) = &sample.instances {
            write_instances(mask, out.join(rel(".ins")))?;
            write_object_labels(classes, out.join(rel("_objects.csv")))?;
            record.instances = Some(rel(".ins"));
            record.object_labels = Some(rel("_objects.csv"));
        }
        records.push(record);
    }
    let manifest = DatasetManifest { classes: (1..=cfg.num_classes).map(|c| format!("class{c}")).collect(), records };
    let path = out.join("manifest.json");
    std::fs::write(&path, manifest.to_json()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
