//! Building blocks shared by the dense and object probes.

use fmclass_autodiff::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub(crate) fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f32> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| dist.sample(rng) as f32)
}

/// Inverse of softplus, used to place σ at its initial value.
pub(crate) fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore<f32>, name: &str, rng: &mut ChaCha8Rng, din: usize, dout: usize, std: f64) -> Self {
        let w = store.add(format!("{name}.weight"), normal(rng, &[din, dout], std));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[dout]));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        Ok(tape.add(y, b)?)
    }
}

/// Multi-head cross-attention whose logits carry the Gaussian locality
/// offset `-d² / (2σ_h)`, one learnable `σ_h = softplus(s_h)` per head.
#[derive(Clone, Debug)]
pub(crate) struct GaussianCrossAttention {
    pub head_dim: usize,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    pub sigma_raw: ParamId,
}

impl GaussianCrossAttention {
    pub fn new(
        store: &mut ParamStore<f32>,
        rng: &mut ChaCha8Rng,
        query_dim: usize,
        feature_dim: usize,
        width: usize,
        heads: usize,
        sigma_init: f64,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::invalid(format!("width {width} is not divisible by {heads} heads")));
        }
        if !(sigma_init > 0.0) {
            return Err(Error::invalid(format!("initial sigma must be positive, got {sigma_init}")));
        }
        let dh = width / heads;
        let wq = store.add("attn.wq", normal(rng, &[heads, query_dim, dh], 1.0 / (query_dim as f64).sqrt()));
        let wk = store.add("attn.wk", normal(rng, &[heads, feature_dim, dh], 1.0 / (feature_dim as f64).sqrt()));
        let wv = store.add("attn.wv", normal(rng, &[heads, feature_dim, dh], 1.0 / (feature_dim as f64).sqrt()));
        let wo = store.add("attn.wo", normal(rng, &[heads, dh, width], 1.0 / (width as f64).sqrt()));
        let bo = store.add("attn.bo", Tensor::zeros(&[width]));
        let s = softplus_inv(sigma_init) as f32;
        let sigma_raw = store.add("attn.sigma_raw", Tensor::full(&[heads, 1, 1], s));
        Ok(Self { head_dim: dh, wq, wk, wv, wo, bo, sigma_raw })
    }

    /// `queries` is `[nq, query_dim]`, `features` is `[nf, feature_dim]` and
    /// `d2` holds squared query-feature distances as `[1, nq, nf]`.
    /// Returns `[nq, width]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, queries: Var, features: Var, d2: Var) -> Result<Var> {
        let wq = tape.param(store, self.wq);
        let wk = tape.param(store, self.wk);
        let wv = tape.param(store, self.wv);
        let q = tape.matmul(queries, wq)?;
        let k = tape.matmul(features, wk)?;
        let v = tape.matmul(features, wv)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.mul_scalar(scores, T::of(1.0 / (self.head_dim as f64).sqrt()))?;
        let raw = tape.param(store, self.sigma_raw);
        let sigma = tape.softplus(raw)?;
        let half = tape.constant(Tensor::full(&[1, 1, 1], T::of(-0.5)));
        let coef = tape.div(half, sigma)?;
        let offset = tape.mul(d2, coef)?;
        let logits = tape.add(scores, offset)?;
        let attn = tape.softmax(logits)?;
        let heads_out = tape.matmul(attn, v)?;
        let wo = tape.param(store, self.wo);
        let proj = tape.matmul(heads_out, wo)?;
        let merged = tape.sum(proj, &[0], false)?;
        let bo = tape.param(store, self.bo);
        Ok(tape.add(merged, bo)?)
    }

    pub fn sigmas(&self, store: &ParamStore<f32>) -> Vec<f64> {
        store
            .get(self.sigma_raw)
            .value
            .data()
            .iter()
            .map(|&s| (s as f64).exp().ln_1p())
            .collect()
    }
}

/// Row-major `[n, k]` one-hot matrix of 0-based classes.
pub(crate) fn one_hot<T: Scalar>(classes: &[usize], k: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(&[classes.len(), k]);
    for (i, &c) in classes.iter().enumerate() {
        t.data_mut()[i * k + c] = T::one();
    }
    t
}

/// Accumulates Dice and cross-entropy statistics over logit rows that may
/// come from several forward passes, so a batch needs no concatenation.
#[derive(Debug, Default)]
pub(crate) struct LossAccumulator {
    intersection: Option<Var>,
    prob_mass: Option<Var>,
    log_likelihood: Option<Var>,
    class_counts: Vec<f64>,
    rows: usize,
}

const DICE_EPS: f64 = 1e-6;

fn accumulate<T: Scalar>(tape: &mut Tape<T>, slot: &mut Option<Var>, v: Var) -> Result<()> {
    *slot = Some(match *slot {
        Some(acc) => tape.add(acc, v)?,
        None => v,
    });
    Ok(())
}

impl LossAccumulator {
    pub fn new(k: usize) -> Self {
        Self { class_counts: vec![0.0; k], ..Default::default() }
    }

    /// `logits` is `[n, k]`; `classes` holds the 0-based target of each row.
    pub fn add_rows<T: Scalar>(&mut self, tape: &mut Tape<T>, logits: Var, classes: &[usize], with_dice: bool) -> Result<()> {
        if classes.is_empty() {
            return Ok(());
        }
        let k = self.class_counts.len();
        let target = tape.constant(one_hot(classes, k));
        let logp = tape.log_softmax(logits)?;
        let picked = tape.mul(logp, target)?;
        let ll = tape.sum_all(picked)?;
        accumulate(tape, &mut self.log_likelihood, ll)?;
        if with_dice {
            let p = tape.softmax(logits)?;
            let overlap = tape.mul(p, target)?;
            let inter = tape.sum(overlap, &[0], false)?;
            let mass = tape.sum(p, &[0], false)?;
            accumulate(tape, &mut self.intersection, inter)?;
            accumulate(tape, &mut self.prob_mass, mass)?;
        }
        for &c in classes {
            self.class_counts[c] += 1.0;
        }
        self.rows += classes.len();
        Ok(())
    }

    /// Mean cross-entropy over all rows.
    pub fn cross_entropy<T: Scalar>(&self, tape: &mut Tape<T>) -> Result<Var> {
        let ll = self.log_likelihood.ok_or_else(|| Error::invalid("loss over an empty set of rows"))?;
        Ok(tape.mul_scalar(ll, T::of(-1.0 / self.rows as f64))?)
    }

    /// Soft Dice loss `1 - (2I + ε) / (P + Y + ε)` averaged over the
    /// classes that occur among the rows.
    pub fn dice<T: Scalar>(&self, tape: &mut Tape<T>) -> Result<Var> {
        let (inter, mass) = match (self.intersection, self.prob_mass) {
            (Some(i), Some(m)) => (i, m),
            _ => return Err(Error::invalid("dice requested but no rows were added with it")),
        };
        let k = self.class_counts.len();
        let present = self.class_counts.iter().filter(|&&c| c > 0.0).count() as f64;
        let weights: Vec<T> = self
            .class_counts
            .iter()
            .map(|&c| if c > 0.0 { T::of(1.0 / present) } else { T::zero() })
            .collect();
        let counts: Vec<T> = self.class_counts.iter().map(|&c| T::of(c + DICE_EPS)).collect();
        let counts = tape.constant(Tensor::new(vec![k], counts)?);
        let den = tape.add(mass, counts)?;
        let num = tape.mul_scalar(inter, T::of(2.0))?;
        let num = tape.add_scalar(num, T::of(DICE_EPS))?;
        let ratio = tape.div(num, den)?;
        let w = tape.constant(Tensor::new(vec![k], weights)?);
        let weighted = tape.mul(ratio, w)?;
        let score = tape.sum_all(weighted)?;
        let neg = tape.neg(score)?;
        Ok(tape.add_scalar(neg, T::one())?)
    }

    pub fn combined<T: Scalar>(&self, tape: &mut Tape<T>, dice_weight: f64, ce_weight: f64) -> Result<Var> {
        let ce = self.cross_entropy(tape)?;
        let ce = tape.mul_scalar(ce, T::of(ce_weight))?;
        if dice_weight == 0.0 {
            return Ok(ce);
        }
        let dice = self.dice(tape)?;
        let dice = tape.mul_scalar(dice, T::of(dice_weight))?;
        Ok(tape.add(ce, dice)?)
    }
}

/// Index of the largest entry in each `k`-wide row; ties go to the lowest.
pub(crate) fn row_argmax<T: Scalar>(data: &[T], k: usize) -> Vec<usize> {
    data.chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub(crate) fn choose_batch(rng: &mut ChaCha8Rng, pool: usize, batch: usize) -> Vec<usize> {
    if batch >= pool {
        return (0..pool).collect();
    }
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, pool, batch).into_vec();
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_for(logits: Vec<f64>, classes: &[usize], k: usize) -> (f64, f64) {
        let mut tape = Tape::<f64>::new();
        let n = classes.len();
        let x = tape.constant(Tensor::new(vec![n, k], logits).unwrap());
        let mut acc = LossAccumulator::new(k);
        acc.add_rows(&mut tape, x, classes, true).unwrap();
        let ce = acc.cross_entropy(&mut tape).unwrap();
        let dice = acc.dice(&mut tape).unwrap();
        (tape.value(ce).data()[0], tape.value(dice).data()[0])
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let (ce, _) = loss_for(vec![0.0; 16], &[0, 1, 2, 3], 4);
        assert!((ce - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_predictions_vanish() {
        let mut logits = vec![-60.0; 6];
        logits[0] = 60.0;
        logits[5] = 60.0;
        let (ce, dice) = loss_for(logits, &[0, 2], 3);
        assert!(ce < 1e-20);
        assert!(dice.abs() < 1e-9);
    }

    #[test]
    fn dice_matches_hand_computation() {
        // Probabilities [0.5, 0.5] per row for two rows of class 0.
        let (_, dice) = loss_for(vec![0.0; 4], &[0, 0], 2);
        let expect = 1.0 - (2.0 * 1.0 + DICE_EPS) / (1.0 + 2.0 + DICE_EPS);
        assert!((dice - expect).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(row_argmax(&[1.0f32, 1.0, 0.0, 0.0, 2.0, 2.0], 3), vec![0, 1]);
    }
}
