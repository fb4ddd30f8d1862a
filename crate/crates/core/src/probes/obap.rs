//! Object-guided attentive probe.
//!
//! One query per object sits at the object's centroid and is encoded with a
//! fixed sinusoidal function. Queries live in a tensor of `max_objects`
//! slots; unused slots are zeroed before cross-attention and never reach
//! the loss. Every query attends to the native-resolution feature grid
//! independently, so the padded slots cannot influence valid ones.

use std::collections::BTreeMap;

use fmclass_autodiff::{ParamStore, Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{macro_f1, ConfusionMatrix};
use crate::probes::encoding::sinusoidal_encoding;
use crate::probes::layers::{choose_batch, row_argmax, GaussianCrossAttention, Linear, LossAccumulator};
use crate::probes::mask::{grid_centers, pixel_to_grid, squared_distances, Position};
use crate::probes::train::{optimise, TrainConfig, TrainReport};
use crate::sampling::{rng_for, sample_objects, ObjectBudget};
use crate::store::{FeatureVolume, InstanceMask};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Centroid {
    pub id: u32,
    pub row: f64,
    pub col: f64,
}

/// Coordinate mean of every instance, by ascending id. The centroid of a
/// non-convex object can fall outside its mask.
pub fn object_centroids(mask: &InstanceMask) -> Vec<Centroid> {
    mask.pixels_by_id()
        .into_iter()
        .filter(|(_, px)| !px.is_empty())
        .map(|(id, px)| {
            let n = px.len() as f64;
            let (sr, sc) = px.iter().fold((0.0, 0.0), |(r, c), &i| (r + (i / mask.width) as f64, c + (i % mask.width) as f64));
            Centroid { id, row: sr / n, col: sc / n }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObapConfig {
    pub num_classes: usize,
    pub feature_channels: usize,
    pub max_objects: usize,
    pub heads: usize,
    /// Model width, also the sinusoidal encoding dimension.
    pub width: usize,
    pub mlp_hidden: usize,
    pub sigma_init: f64,
}

impl ObapConfig {
    pub fn new(num_classes: usize, feature_channels: usize) -> Self {
        Self {
            num_classes,
            feature_channels,
            max_objects: 256,
            heads: 4,
            width: 256,
            mlp_hidden: 256,
            sigma_init: 8.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("a probe needs at least two classes"));
        }
        if self.width % 4 != 0 {
            return Err(Error::invalid(format!("width {} must be a multiple of 4", self.width)));
        }
        if [self.feature_channels, self.max_objects, self.mlp_hidden].contains(&0) {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ObapLayout {
    attn: GaussianCrossAttention,
    mlp1: Linear,
    mlp2: Linear,
}

#[derive(Clone, Debug)]
pub struct ObapProbe {
    pub config: ObapConfig,
    pub params: ParamStore<f32>,
    layout: ObapLayout,
}

/// Padded query tensor for one image.
#[derive(Clone, Debug)]
pub struct ObapInput<T> {
    features: Tensor<T>,
    encodings: Tensor<T>,
    d2: Tensor<T>,
    valid: Vec<bool>,
}

impl<T> ObapInput<T> {
    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn num_objects(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Logits of every slot with the validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ObapOutput {
    /// Row-major `[max_objects, K]`.
    pub logits: Vec<f32>,
    pub valid: Vec<bool>,
}

/// Query variable and logits `[max_objects, K]` of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ObapForward {
    pub queries: Var,
    pub logits: Var,
}

/// Image with its objects. `classes` is aligned with `objects`, 1-based,
/// with 0 marking an unlabeled object.
#[derive(Clone, Debug)]
pub struct ObjectExample {
    pub features: FeatureVolume,
    pub image_size: (usize, usize),
    pub objects: Vec<Centroid>,
    pub classes: Vec<u16>,
}

impl ObapProbe {
    pub fn new(config: ObapConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed);
        let mut params = ParamStore::new();
        let w = config.width;
        let attn = GaussianCrossAttention::new(&mut params, &mut rng, w, config.feature_channels, w, config.heads, config.sigma_init)?;
        let mlp1 = Linear::new(&mut params, "mlp1", &mut rng, w, config.mlp_hidden, (2.0 / w as f64).sqrt());
        let mlp2 = Linear::new(&mut params, "mlp2", &mut rng, config.mlp_hidden, config.num_classes, (1.0 / config.mlp_hidden as f64).sqrt());
        Ok(Self { config, params, layout: ObapLayout { attn, mlp1, mlp2 } })
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.layout.attn.sigmas(&self.params)
    }

    /// Builds the padded query tensor. Fails when the image has more objects
    /// than query slots.
    pub fn prepare<T: Scalar>(&self, volume: &FeatureVolume, image_size: (usize, usize), objects: &[Centroid]) -> Result<ObapInput<T>> {
        let cfg = &self.config;
        if volume.channels() != cfg.feature_channels {
            return Err(Error::Dimension(format!(
                "feature volume has {} channels, probe expects {}",
                volume.channels(),
                cfg.feature_channels
            )));
        }
        if objects.len() > cfg.max_objects {
            return Err(Error::invalid(format!(
                "image has {} objects but the probe holds {}; raise max_objects or tile the image",
                objects.len(),
                cfg.max_objects
            )));
        }
        if image_size.0 == 0 || image_size.1 == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        let grid = (volume.height(), volume.width());
        let mut positions: Vec<Position> = objects.iter().map(|o| pixel_to_grid(o.row, o.col, image_size, grid)).collect();
        positions.resize(cfg.max_objects, [0.0, 0.0]);
        let mut enc = sinusoidal_encoding(&positions, cfg.width)?;
        enc[objects.len() * cfg.width..].fill(0.0);
        let cells = grid_centers(grid.0, grid.1, [1.0, 1.0]);
        let d2 = squared_distances(&positions, &cells);
        let nf = cells.len();
        Ok(ObapInput {
            features: Tensor::new(vec![nf, cfg.feature_channels], volume.values().iter().map(|&v| T::of(v as f64)).collect())?,
            encodings: Tensor::new(vec![cfg.max_objects, cfg.width], enc.into_iter().map(T::of).collect())?,
            d2: Tensor::new(vec![1, cfg.max_objects, nf], d2.into_iter().map(T::of).collect())?,
            valid: (0..cfg.max_objects).map(|i| i < objects.len()).collect(),
        })
    }

    /// Records one forward pass; the query encodings enter as a
    /// differentiable input so their gradients can be inspected.
    pub fn forward_tape<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, input: &ObapInput<T>) -> Result<ObapForward> {
        let l = &self.layout;
        let queries = tape.input(input.encodings.clone());
        let invalid: Vec<bool> = input.valid.iter().map(|v| !v).collect();
        let masked = tape.masked_fill(queries, &invalid, &[self.config.max_objects, 1], T::zero())?;
        let feats = tape.constant(input.features.clone());
        let d2 = tape.constant(input.d2.clone());
        let tokens = l.attn.forward(tape, store, masked, feats, d2)?;
        let h = l.mlp1.forward(tape, store, tokens)?;
        let h = tape.relu(h)?;
        let logits = l.mlp2.forward(tape, store, h)?;
        Ok(ObapForward { queries, logits })
    }

    /// Cross-entropy over the listed slots of each batch item; classes are
    /// 0-based.
    pub fn loss<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, batch: &[(&ObapInput<T>, &[usize], &[usize])]) -> Result<Var> {
        let mut acc = LossAccumulator::new(self.config.num_classes);
        for &(input, slots, classes) in batch {
            if slots.is_empty() {
                continue;
            }
            if let Some(&bad) = slots.iter().find(|&&s| !input.valid.get(s).copied().unwrap_or(false)) {
                return Err(Error::invalid(format!("slot {bad} holds no object")));
            }
            let fwd = self.forward_tape(tape, store, input)?;
            let rows = tape.gather_rows(fwd.logits, slots)?;
            acc.add_rows(tape, rows, classes, false)?;
        }
        acc.cross_entropy(tape)
    }

    fn logits_with(&self, store: &ParamStore<f32>, input: &ObapInput<f32>) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let fwd = self.forward_tape(&mut tape, store, input)?;
        Ok(tape.value(fwd.logits).data().to_vec())
    }

    pub fn forward(&self, volume: &FeatureVolume, image_size: (usize, usize), objects: &[Centroid]) -> Result<ObapOutput> {
        let input = self.prepare::<f32>(volume, image_size, objects)?;
        Ok(ObapOutput { logits: self.logits_with(&self.params, &input)?, valid: input.valid })
    }

    /// 1-based class per object, in the order given.
    pub fn predict(&self, volume: &FeatureVolume, image_size: (usize, usize), objects: &[Centroid]) -> Result<Vec<u16>> {
        let out = self.forward(volume, image_size, objects)?;
        let classes = row_argmax(&out.logits, self.config.num_classes);
        Ok(classes[..objects.len()].iter().map(|&c| c as u16 + 1).collect())
    }
}

fn check_example(config: &ObapConfig, i: usize, ex: &ObjectExample) -> Result<()> {
    if ex.objects.len() != ex.classes.len() {
        return Err(Error::invalid(format!("example {i}: {} objects but {} classes", ex.objects.len(), ex.classes.len())));
    }
    if let Some(&c) = ex.classes.iter().find(|&&c| c as usize > config.num_classes) {
        return Err(Error::invalid(format!("example {i}: class {c} exceeds {} classes", config.num_classes)));
    }
    Ok(())
}

/// Trains an object probe on `budget` objects drawn by inverse class
/// frequency from the labeled training objects.
pub fn train_obap(
    config: ObapConfig,
    train: &[ObjectExample],
    val: &[ObjectExample],
    budget: ObjectBudget,
    cfg: &TrainConfig,
) -> Result<(ObapProbe, TrainReport)> {
    cfg.validate()?;
    for (i, ex) in train.iter().chain(val).enumerate() {
        check_example(&config, i, ex)?;
    }
    let pool: Vec<(usize, usize)> = train
        .iter()
        .enumerate()
        .flat_map(|(i, ex)| (0..ex.objects.len()).map(move |j| (i, j)))
        .collect();
    let pool_classes: Vec<u16> = pool.iter().map(|&(i, j)| train[i].classes[j]).collect();
    let picks = sample_objects(&pool_classes, budget, cfg.seed);
    if picks.is_empty() {
        return Err(Error::invalid("no labeled training objects"));
    }
    let mut per_image: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for &p in &picks {
        let (i, j) = pool[p];
        let e = per_image.entry(i).or_default();
        e.0.push(j);
        e.1.push(pool_classes[p] as usize - 1);
    }
    if picks.iter().all(|&p| pool_classes[p] == pool_classes[picks[0]]) {
        log::warn!("all sampled training objects belong to one class");
    }
    let mut probe = ObapProbe::new(config, cfg.seed.wrapping_add(1))?;
    let active: Vec<(ObapInput<f32>, Vec<usize>, Vec<usize>)> = per_image
        .into_iter()
        .map(|(i, (slots, classes))| Ok((probe.prepare(&train[i].features, train[i].image_size, &train[i].objects)?, slots, classes)))
        .collect::<Result<_>>()?;
    let val_inputs: Vec<ObapInput<f32>> = val
        .iter()
        .map(|ex| probe.prepare(&ex.features, ex.image_size, &ex.objects))
        .collect::<Result<_>>()?;

    let mut params = std::mem::take(&mut probe.params);
    let report = {
        let probe = &probe;
        let k = probe.config.num_classes;
        optimise(
            &mut params,
            cfg,
            |tape, store, rng| {
                let chosen = choose_batch(rng, active.len(), cfg.batch_size);
                let batch: Vec<(&ObapInput<f32>, &[usize], &[usize])> =
                    chosen.iter().map(|&i| (&active[i].0, active[i].1.as_slice(), active[i].2.as_slice())).collect();
                probe.loss(tape, store, &batch)
            },
            |store| {
                let mut cm = ConfusionMatrix::new(k);
                for (ex, input) in val.iter().zip(&val_inputs) {
                    if ex.classes.iter().all(|&c| c == 0) {
                        continue;
                    }
                    let pred = row_argmax(&probe.logits_with(store, input)?, k);
                    for (&t, &p) in ex.classes.iter().zip(&pred) {
                        if t != 0 {
                            cm.add(t as usize - 1, p);
                        }
                    }
                }
                if cm.total() == 0 {
                    return Ok(None);
                }
                macro_f1(&cm).map(Some)
            },
        )?
    };
    probe.params = params;
    Ok((probe, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use fmclass_autodiff::{grad_check, GradCheckOptions};
    use rand::{Rng, SeedableRng};

    fn toy_config(max_objects: usize) -> ObapConfig {
        ObapConfig { max_objects, heads: 2, width: 8, mlp_hidden: 6, ..ObapConfig::new(3, 4) }
    }

    fn toy_volume(seed: u64) -> FeatureVolume {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        FeatureVolume::new(8, 8, 4, (0..256).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn toy_objects() -> Vec<Centroid> {
        [(1, 3.0, 4.5), (2, 20.0, 9.0), (5, 30.5, 28.0)]
            .iter()
            .map(|&(id, row, col)| Centroid { id, row, col })
            .collect()
    }

    #[test]
    fn centroids_are_coordinate_means() {
        let mut ids = vec![0u32; 100];
        ids[5 * 10 + 7] = 4;
        for r in 0..3 {
            for c in 0..3 {
                ids[r * 10 + c] = 9;
            }
        }
        // C shape opening to the right: rows 6..9, cols 0..3 minus the middle.
        for r in 6..9 {
            for c in 0..3 {
                if !(r == 7 && c > 0) {
                    ids[r * 10 + c] = 2;
                }
            }
        }
        let mask = InstanceMask::new(10, 10, ids).unwrap();
        let cs = object_centroids(&mask);
        assert_eq!(cs.iter().map(|c| c.id).collect::<Vec<_>>(), vec![2, 4, 9]);
        assert_eq!((cs[1].row, cs[1].col), (5.0, 7.0));
        assert_eq!((cs[2].row, cs[2].col), (1.0, 1.0));
        let (r, c) = (cs[0].row.round() as usize, cs[0].col.round() as usize);
        assert_eq!((cs[0].row, cs[0].col), (7.0, 6.0 / 7.0));
        assert_eq!(mask.ids[r * 10 + c], 0);
    }

    #[test]
    fn padding_does_not_leak_into_valid_logits() {
        let objects = toy_objects();
        let small = ObapProbe::new(toy_config(64), 7).unwrap();
        let large = ObapProbe::new(toy_config(256), 7).unwrap();
        assert_eq!(small.params, large.params);
        let a = small.forward(&toy_volume(1), (32, 32), &objects).unwrap();
        let b = large.forward(&toy_volume(1), (32, 32), &objects).unwrap();
        assert_eq!(a.valid.iter().filter(|&&v| v).count(), 3);
        assert_eq!(a.logits[..9], b.logits[..9]);
        let fewer = ObapProbe::new(toy_config(3), 7).unwrap().forward(&toy_volume(1), (32, 32), &objects).unwrap();
        assert_eq!(fewer.logits, a.logits[..9]);
    }

    #[test]
    fn twin_objects_get_identical_logits() {
        let probe = ObapProbe::new(toy_config(8), 2).unwrap();
        let twins = [Centroid { id: 1, row: 10.0, col: 11.0 }, Centroid { id: 2, row: 10.0, col: 11.0 }];
        let out = probe.forward(&toy_volume(2), (32, 32), &twins).unwrap();
        assert_eq!(out.logits[..3], out.logits[3..6]);
    }

    #[test]
    fn too_many_objects_is_an_error() {
        let probe = ObapProbe::new(toy_config(2), 0).unwrap();
        let err = probe.prepare::<f32>(&toy_volume(0), (32, 32), &toy_objects()).unwrap_err();
        assert!(err.to_string().contains("max_objects"));
    }

    #[test]
    fn empty_image_contributes_nothing() {
        let probe = ObapProbe::new(toy_config(4), 3).unwrap();
        let store = probe.params.cast::<f64>();
        let full = probe.prepare::<f64>(&toy_volume(3), (32, 32), &toy_objects()).unwrap();
        let empty = probe.prepare::<f64>(&toy_volume(4), (32, 32), &[]).unwrap();
        assert_eq!(empty.num_objects(), 0);
        let value = |batch: &[(&ObapInput<f64>, &[usize], &[usize])]| {
            let mut tape = Tape::new();
            let l = probe.loss(&mut tape, &store, batch).unwrap();
            tape.value(l).data()[0]
        };
        let slots = [0, 2];
        let classes = [1, 2];
        let a = value(&[(&full, &slots, &classes)]);
        let b = value(&[(&full, &slots, &classes), (&empty, &[], &[])]);
        assert_eq!(a.to_bits(), b.to_bits());
        let mut tape = Tape::new();
        assert!(probe.loss(&mut tape, &store, &[(&full, &[3], &[0])]).is_err());
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let mut probe = ObapProbe::new(toy_config(4), 3).unwrap();
        for name in ["mlp2.weight", "mlp2.bias"] {
            let id = probe.params.find(name).unwrap();
            probe.params.get_mut(id).value.data_mut().fill(0.0);
        }
        let store = probe.params.cast::<f64>();
        let input = probe.prepare::<f64>(&toy_volume(3), (32, 32), &toy_objects()).unwrap();
        let mut tape = Tape::new();
        let l = probe.loss(&mut tape, &store, &[(&input, &[0, 1, 2], &[0, 1, 2])]).unwrap();
        assert!((tape.value(l).data()[0] - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_and_padded_slots_get_none() {
        let probe = ObapProbe::new(toy_config(6), 5).unwrap();
        let input = probe.prepare::<f64>(&toy_volume(5), (32, 32), &toy_objects()).unwrap();
        let slots = [0, 1, 2];
        let classes = [2, 0, 1];
        let mut store = probe.params.cast::<f64>();
        let report = grad_check(
            &mut store,
            |tape, s| {
                probe.loss(tape, s, &[(&input, &slots, &classes)]).map_err(|e| match e {
                    Error::Tensor(t) => t,
                    other => panic!("{other}"),
                })
            },
            &GradCheckOptions { max_coords_per_param: 24, ..Default::default() },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        let id = store.find("attn.sigma_raw").unwrap();
        assert!(store.get(id).grad.data().iter().all(|&g| g != 0.0));

        let mut tape = Tape::new();
        let fwd = probe.forward_tape(&mut tape, &store, &input).unwrap();
        let rows = tape.gather_rows(fwd.logits, &slots).unwrap();
        let mut acc = LossAccumulator::new(3);
        acc.add_rows(&mut tape, rows, &classes, false).unwrap();
        let loss = acc.cross_entropy(&mut tape).unwrap();
        let grads = tape.backward(loss, &mut store).unwrap();
        let g = grads.wrt(fwd.queries).unwrap().data();
        assert!(g[..3 * 8].iter().any(|&v| v != 0.0));
        assert!(g[3 * 8..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_training_run_separates_prototypes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let examples: Vec<ObjectExample> = (0..6)
            .map(|_| {
                let objects: Vec<Centroid> = (0..4)
                    .map(|i| Centroid { id: i + 1, row: 4.0 + 8.0 * (i / 2) as f64 * 2.0, col: 4.0 + 16.0 * (i % 2) as f64 })
                    .collect();
                let classes: Vec<u16> = (0..4).map(|_| rng.random_range(1..=3)).collect();
                let mut values = vec![0f32; 8 * 8 * 4];
                for (o, &c) in objects.iter().zip(&classes) {
                    let (r0, c0) = ((o.row / 4.0) as usize, (o.col / 4.0) as usize);
                    for r in r0.saturating_sub(1)..(r0 + 2).min(8) {
                        for cc in c0.saturating_sub(1)..(c0 + 2).min(8) {
                            values[(r * 8 + cc) * 4 + c as usize - 1] = 1.0;
                        }
                    }
                }
                ObjectExample { features: FeatureVolume::new(8, 8, 4, values).unwrap(), image_size: (32, 32), objects, classes }
            })
            .collect();
        let tc = TrainConfig { iterations: 200, learning_rate: 1e-2, eval_every: 50, batch_size: 2, ..Default::default() };
        let cfg = ObapConfig { sigma_init: 2.0, ..toy_config(8) };
        let (probe, report) = train_obap(cfg, &examples[..4], &examples[4..], ObjectBudget::All, &tc).unwrap();
        assert!(report.best_val_f1.unwrap() > 0.9, "{report:?}");
        let pred = probe.predict(&examples[5].features, (32, 32), &examples[5].objects).unwrap();
        assert_eq!(pred.len(), 4);
    }
}
