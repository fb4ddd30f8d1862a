//! Optimisation loop shared by both probes.

use fmclass_autodiff::{Adam, ParamStore, Tape, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub dice_weight: f64,
    pub ce_weight: f64,
    /// Images per optimisation step.
    pub batch_size: usize,
    /// Validation macro F1 is computed every this many iterations and the
    /// best-scoring parameters are kept.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            learning_rate: 1e-3,
            dice_weight: 0.5,
            ce_weight: 0.5,
            batch_size: 4,
            eval_every: 250,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::invalid("iterations, batch size and evaluation interval must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        let w = [self.dice_weight, self.ce_weight];
        if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || w.iter().all(|&x| x == 0.0) {
            return Err(Error::invalid("loss weights must be non-negative and not both zero"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Iteration whose parameters were returned.
    pub best_iteration: usize,
    pub best_val_f1: Option<f64>,
    pub final_loss: f64,
    pub val_history: Vec<(usize, f64)>,
}

/// Runs Adam for `cfg.iterations` steps and leaves the best-on-validation
/// parameters in `store`. When `validate` never produces a score the final
/// parameters are kept.
pub(crate) fn optimise<L, V>(store: &mut ParamStore<f32>, cfg: &TrainConfig, mut loss_fn: L, mut validate: V) -> Result<TrainReport>
where
    L: FnMut(&mut Tape<f32>, &ParamStore<f32>, &mut ChaCha8Rng) -> Result<Var>,
    V: FnMut(&ParamStore<f32>) -> Result<Option<f64>>,
{
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed.wrapping_add(2));
    let mut adam = Adam::new(cfg.learning_rate as f32, store);
    let mut report = TrainReport { best_iteration: cfg.iterations, ..Default::default() };
    let mut best: Option<ParamStore<f32>> = None;
    for it in 1..=cfg.iterations {
        store.zero_grad();
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, store, &mut rng)?;
        report.final_loss = tape.value(loss).data()[0] as f64;
        tape.backward(loss, store)?;
        drop(tape);
        adam.step(store);
        if it % cfg.eval_every == 0 || it == cfg.iterations {
            if let Some(score) = validate(store)? {
                log::debug!("iteration {it}: loss {:.4}, val macro F1 {score:.4}", report.final_loss);
                report.val_history.push((it, score));
                if report.best_val_f1.is_none_or(|b| score > b) {
                    report.best_val_f1 = Some(score);
                    report.best_iteration = it;
                    best = Some(store.clone());
                }
            }
        }
    }
    if let Some(b) = best {
        *store = b;
    } else {
        log::warn!("no validation labels; returning the final parameters");
    }
    Ok(report)
}
