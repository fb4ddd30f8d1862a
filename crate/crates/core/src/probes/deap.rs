//! Dense attentive probe for pixel classification.
//!
//! A fixed grid of queries, one per 8×8 block of the input image, attends
//! to the frozen feature volume through Gaussian-masked cross-attention.
//! Keys and values see each feature vector together with a sinusoidal
//! encoding of its cell position, so a head can favour one side of its
//! query.
//! The attended tokens pass a two-layer FFN, are laid out as a spatial
//! tensor and are decoded back to full resolution by three
//! (bilinear ×2, 3×3 conv, ReLU) stages and a 1×1 classifier conv.

use std::collections::HashMap;
use std::rc::Rc;

use fmclass_autodiff::{ParamId, ParamStore, Scalar, Tape, Tensor, UpsampleMode, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{macro_f1, ConfusionMatrix};
use crate::probes::encoding::sinusoidal_encoding;
use crate::probes::layers::{choose_batch, normal, GaussianCrossAttention, Linear, LossAccumulator};
use crate::probes::mask::{grid_centers, squared_distances};
use crate::probes::train::{optimise, TrainConfig, TrainReport};
use crate::sampling::{rng_for, sample_pixels_deap};
use crate::store::{FeatureVolume, LabelImage};

/// Width of the positional encoding appended to every feature vector:
/// sine and cosine of the row and column at one radian per cell. Slower
/// frequencies are nearly constant across a feature grid and only shift
/// all keys alike.
pub const FEATURE_POSITION_DIM: usize = 4;

/// Spatial factor between the query grid and the input image.
pub const QUERY_STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeapConfig {
    pub num_classes: usize,
    pub feature_channels: usize,
    /// Side of the square input image; the query grid side is a eighth of it.
    pub input_size: usize,
    pub heads: usize,
    pub width: usize,
    pub ffn_hidden: usize,
    pub decoder_channels: usize,
    /// Initial σ of every head, in feature cells.
    pub sigma_init: f64,
}

impl DeapConfig {
    pub fn new(num_classes: usize, feature_channels: usize) -> Self {
        Self {
            num_classes,
            feature_channels,
            input_size: 1024,
            heads: 4,
            width: 256,
            ffn_hidden: 512,
            decoder_channels: 64,
            sigma_init: 8.0,
        }
    }

    pub fn query_side(&self) -> usize {
        self.input_size / QUERY_STRIDE
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("a probe needs at least two classes"));
        }
        if self.input_size == 0 || self.input_size % QUERY_STRIDE != 0 {
            return Err(Error::invalid(format!("input size {} is not a positive multiple of {QUERY_STRIDE}", self.input_size)));
        }
        if self.width % 4 != 0 {
            return Err(Error::invalid(format!("width {} must be a multiple of 4", self.width)));
        }
        if [self.feature_channels, self.ffn_hidden, self.decoder_channels].contains(&0) {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct DeapLayout {
    input: Linear,
    attn: GaussianCrossAttention,
    ffn1: Linear,
    ffn2: Linear,
    decoder: Vec<(ParamId, ParamId)>,
    classifier: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct DeapProbe {
    pub config: DeapConfig,
    pub params: ParamStore<f32>,
    layout: DeapLayout,
}

/// Query encodings and squared distances for one feature-grid size.
#[derive(Debug)]
pub struct DenseGeometry<T> {
    encodings: Tensor<T>,
    cell_encodings: Vec<T>,
    d2: Tensor<T>,
}

/// A feature volume prepared for the probe.
#[derive(Clone, Debug)]
pub struct DeapInput<T> {
    features: Tensor<T>,
    geometry: Rc<DenseGeometry<T>>,
}

/// Training or validation image: features at native resolution and labels
/// at the probe's input size.
#[derive(Clone, Debug)]
pub struct DenseExample {
    pub features: FeatureVolume,
    pub labels: LabelImage,
}

impl DeapProbe {
    pub fn new(config: DeapConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed);
        let mut params = ParamStore::new();
        let w = config.width;
        let input = Linear::new(&mut params, "query_proj", &mut rng, w, w, 1.0 / (w as f64).sqrt());
        let attn = GaussianCrossAttention::new(&mut params, &mut rng, w, config.feature_channels + FEATURE_POSITION_DIM, w, config.heads, config.sigma_init)?;
        let ffn1 = Linear::new(&mut params, "ffn1", &mut rng, w, config.ffn_hidden, (2.0 / w as f64).sqrt());
        let ffn2 = Linear::new(&mut params, "ffn2", &mut rng, config.ffn_hidden, w, (1.0 / config.ffn_hidden as f64).sqrt());
        let dc = config.decoder_channels;
        let mut decoder = Vec::new();
        let mut cin = w;
        for stage in 0..3 {
            let std = (2.0 / (9 * cin) as f64).sqrt();
            let kernel = params.add(format!("decoder{stage}.weight"), normal(&mut rng, &[dc, cin, 3, 3], std));
            let bias = params.add(format!("decoder{stage}.bias"), Tensor::zeros(&[dc, 1, 1]));
            decoder.push((kernel, bias));
            cin = dc;
        }
        let k = config.num_classes;
        let cw = params.add("classifier.weight", normal(&mut rng, &[k, dc, 1, 1], (1.0 / dc as f64).sqrt()));
        let cb = params.add("classifier.bias", Tensor::zeros(&[k, 1, 1]));
        let layout = DeapLayout { input, attn, ffn1, ffn2, decoder, classifier: (cw, cb) };
        Ok(Self { config, params, layout })
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.layout.attn.sigmas(&self.params)
    }

    pub fn sigma_param(&self) -> ParamId {
        self.layout.attn.sigma_raw
    }

    pub fn geometry<T: Scalar>(&self, grid_h: usize, grid_w: usize) -> Result<DenseGeometry<T>> {
        let side = self.config.query_side();
        let queries = grid_centers(side, side, [grid_h as f64 / side as f64, grid_w as f64 / side as f64]);
        let cells = grid_centers(grid_h, grid_w, [1.0, 1.0]);
        let enc = sinusoidal_encoding(&queries, self.config.width)?;
        let cell_enc = sinusoidal_encoding(&cells, FEATURE_POSITION_DIM)?;
        let d2 = squared_distances(&queries, &cells);
        Ok(DenseGeometry {
            encodings: Tensor::new(vec![queries.len(), self.config.width], enc.into_iter().map(T::of).collect())?,
            cell_encodings: cell_enc.into_iter().map(T::of).collect(),
            d2: Tensor::new(vec![1, queries.len(), cells.len()], d2.into_iter().map(T::of).collect())?,
        })
    }

    fn check_volume(&self, volume: &FeatureVolume) -> Result<()> {
        if volume.channels() != self.config.feature_channels {
            return Err(Error::Dimension(format!(
                "feature volume has {} channels, probe expects {}",
                volume.channels(),
                self.config.feature_channels
            )));
        }
        Ok(())
    }

    pub fn prepare<T: Scalar>(&self, volume: &FeatureVolume) -> Result<DeapInput<T>> {
        let geometry = Rc::new(self.geometry(volume.height(), volume.width())?);
        self.prepare_with(volume, geometry)
    }

    fn prepare_with<T: Scalar>(&self, volume: &FeatureVolume, geometry: Rc<DenseGeometry<T>>) -> Result<DeapInput<T>> {
        self.check_volume(volume)?;
        let n = volume.height() * volume.width();
        let c = volume.channels();
        let mut values = Vec::with_capacity(n * (c + FEATURE_POSITION_DIM));
        for (px, pos) in volume.values().chunks_exact(c).zip(geometry.cell_encodings.chunks_exact(FEATURE_POSITION_DIM)) {
            values.extend(px.iter().map(|&v| T::of(v as f64)));
            values.extend_from_slice(pos);
        }
        let features = Tensor::new(vec![n, c + FEATURE_POSITION_DIM], values)?;
        Ok(DeapInput { features, geometry })
    }

    fn prepare_all<T: Scalar>(&self, volumes: &[&FeatureVolume]) -> Result<Vec<DeapInput<T>>> {
        let mut cache: HashMap<(usize, usize), Rc<DenseGeometry<T>>> = HashMap::new();
        let mut out = Vec::with_capacity(volumes.len());
        for v in volumes {
            let key = (v.height(), v.width());
            let geometry = match cache.get(&key) {
                Some(g) => g.clone(),
                None => {
                    let g = Rc::new(self.geometry(key.0, key.1)?);
                    cache.insert(key, g.clone());
                    g
                }
            };
            out.push(self.prepare_with(v, geometry)?);
        }
        Ok(out)
    }

    /// Class logits `[K, input_size, input_size]`.
    pub fn logits<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, input: &DeapInput<T>) -> Result<Var> {
        let l = &self.layout;
        let side = self.config.query_side();
        let enc = tape.constant(input.geometry.encodings.clone());
        let feats = tape.constant(input.features.clone());
        let d2 = tape.constant(input.geometry.d2.clone());
        let x = l.input.forward(tape, store, enc)?;
        let attended = l.attn.forward(tape, store, x, feats, d2)?;
        let t = tape.add(x, attended)?;
        let h = l.ffn1.forward(tape, store, t)?;
        let h = tape.relu(h)?;
        let h = l.ffn2.forward(tape, store, h)?;
        let y = tape.add(t, h)?;
        let y = tape.transpose(y)?;
        let mut z = tape.reshape(y, &[self.config.width, side, side])?;
        for &(kernel, bias) in &l.decoder {
            z = tape.upsample2x(z, UpsampleMode::Bilinear)?;
            let kv = tape.param(store, kernel);
            z = tape.conv2d(z, kv, 1)?;
            let bv = tape.param(store, bias);
            z = tape.add(z, bv)?;
            z = tape.relu(z)?;
        }
        let cw = tape.param(store, l.classifier.0);
        let out = tape.conv2d(z, cw, 0)?;
        let cb = tape.param(store, l.classifier.1);
        Ok(tape.add(out, cb)?)
    }

    /// Logits of the listed flat pixel indices as `[n, K]` rows.
    pub fn pixel_logits<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, input: &DeapInput<T>, pixels: &[usize]) -> Result<Var> {
        let k = self.config.num_classes;
        let hw = self.config.input_size * self.config.input_size;
        let logits = self.logits(tape, store, input)?;
        let flat = tape.reshape(logits, &[k, hw])?;
        let rows = tape.transpose(flat)?;
        Ok(tape.gather_rows(rows, pixels)?)
    }

    /// Weighted Dice + cross-entropy over the labeled pixels of `batch`;
    /// each item pairs an input with flat pixel indices and 0-based classes.
    pub fn loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        batch: &[(&DeapInput<T>, &[usize], &[usize])],
        dice_weight: f64,
        ce_weight: f64,
    ) -> Result<Var> {
        let mut acc = LossAccumulator::new(self.config.num_classes);
        for &(input, pixels, classes) in batch {
            if pixels.is_empty() {
                continue;
            }
            let rows = self.pixel_logits(tape, store, input, pixels)?;
            acc.add_rows(tape, rows, classes, dice_weight > 0.0)?;
        }
        acc.combined(tape, dice_weight, ce_weight)
    }

    fn predict_with(&self, store: &ParamStore<f32>, input: &DeapInput<f32>) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let logits = self.logits(&mut tape, store, input)?;
        let k = self.config.num_classes;
        let hw = self.config.input_size * self.config.input_size;
        let data = tape.value(logits).data();
        let mut out = vec![0usize; hw];
        for (p, slot) in out.iter_mut().enumerate() {
            let mut best = 0;
            for c in 1..k {
                if data[c * hw + p] > data[best * hw + p] {
                    best = c;
                }
            }
            *slot = best;
        }
        Ok(out)
    }

    /// Per-pixel class map (1-based) at the input size.
    pub fn predict(&self, volume: &FeatureVolume) -> Result<LabelImage> {
        let input = self.prepare::<f32>(volume)?;
        let classes = self.predict_with(&self.params, &input)?;
        let side = self.config.input_size;
        LabelImage::new(side, side, classes.into_iter().map(|c| c as u16 + 1).collect())
    }
}

fn check_labels(config: &DeapConfig, examples: &[DenseExample]) -> Result<()> {
    let side = config.input_size;
    for (i, ex) in examples.iter().enumerate() {
        if (ex.labels.height, ex.labels.width) != (side, side) {
            return Err(Error::Dimension(format!(
                "example {i}: labels are {}x{}, probe input is {side}x{side}",
                ex.labels.height, ex.labels.width
            )));
        }
        if ex.labels.max_label() as usize > config.num_classes {
            return Err(Error::invalid(format!("example {i}: label {} exceeds {} classes", ex.labels.max_label(), config.num_classes)));
        }
    }
    Ok(())
}

/// Trains a dense probe on `n_pixels` sampled training pixels and returns
/// the parameters with the best validation macro F1.
pub fn train_deap(
    config: DeapConfig,
    train: &[DenseExample],
    val: &[DenseExample],
    n_pixels: usize,
    cfg: &TrainConfig,
) -> Result<(DeapProbe, TrainReport)> {
    cfg.validate()?;
    check_labels(&config, train)?;
    check_labels(&config, val)?;
    let labels: Vec<LabelImage> = train.iter().map(|e| e.labels.clone()).collect();
    let picks = sample_pixels_deap(&labels, n_pixels, cfg.seed)?;
    let mut probe = DeapProbe::new(config, cfg.seed.wrapping_add(1))?;

    let mut active = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (ex, pix) in train.iter().zip(&picks) {
        if pix.is_empty() {
            continue;
        }
        let classes: Vec<usize> = pix.iter().map(|&p| ex.labels.labels[p] as usize - 1).collect();
        seen.extend(classes.iter().copied());
        active.push((&ex.features, pix.clone(), classes));
    }
    if seen.len() < 2 {
        log::warn!("all sampled training pixels belong to one class");
    }
    let train_inputs = probe.prepare_all::<f32>(&active.iter().map(|a| a.0).collect::<Vec<_>>())?;
    let val_inputs = probe.prepare_all::<f32>(&val.iter().map(|e| &e.features).collect::<Vec<_>>())?;

    let mut params = std::mem::take(&mut probe.params);
    let report = {
        let probe = &probe;
        let k = probe.config.num_classes;
        optimise(
            &mut params,
            cfg,
            |tape, store, rng| {
                let chosen = choose_batch(rng, active.len(), cfg.batch_size);
                let batch: Vec<(&DeapInput<f32>, &[usize], &[usize])> = chosen
                    .iter()
                    .map(|&i| (&train_inputs[i], active[i].1.as_slice(), active[i].2.as_slice()))
                    .collect();
                probe.loss(tape, store, &batch, cfg.dice_weight, cfg.ce_weight)
            },
            |store| {
                let mut cm = ConfusionMatrix::new(k);
                for (ex, input) in val.iter().zip(&val_inputs) {
                    if ex.labels.labeled_count() == 0 {
                        continue;
                    }
                    let pred = probe.predict_with(store, input)?;
                    for (&t, &p) in ex.labels.labels.iter().zip(&pred) {
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
