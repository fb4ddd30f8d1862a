//! Confusion matrices, F1 scores and experiment bookkeeping.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::LabelImage;

/// `K × K` counts; rows are true classes, columns predicted classes, both
/// 0-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::Dimension(format!("{} counts for a {k}x{k} matrix", counts.len())));
        }
        Ok(Self { k, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.k + pred] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.k, other.k, "merging confusion matrices of different size");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn tp(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn fp(&self, c: usize) -> u64 {
        (0..self.k).map(|t| self.get(t, c)).sum::<u64>() - self.tp(c)
    }

    pub fn fn_(&self, c: usize) -> u64 {
        (0..self.k).map(|p| self.get(c, p)).sum::<u64>() - self.tp(c)
    }

    /// Per-class F1, `None` for classes absent from both truth and prediction.
    pub fn class_f1(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let (tp, fp, fn_) = (self.tp(c) as f64, self.fp(c) as f64, self.fn_(c) as f64);
                if tp + fp + fn_ == 0.0 {
                    return None;
                }
                let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
                let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
                Some(if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 })
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum F1Average {
    /// Unweighted mean over classes present in truth or prediction.
    #[default]
    Macro,
    /// Mean weighted by true-class support.
    Weighted,
}

pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    f1_score(cm, F1Average::Macro)
}

pub fn f1_score(cm: &ConfusionMatrix, average: F1Average) -> Result<f64> {
    let per_class = cm.class_f1();
    let (mut num, mut den) = (0.0, 0.0);
    for (c, f1) in per_class.iter().enumerate() {
        let Some(f1) = f1 else { continue };
        let weight = match average {
            F1Average::Macro => 1.0,
            F1Average::Weighted => (cm.tp(c) + cm.fn_(c)) as f64,
        };
        num += weight * f1;
        den += weight;
    }
    if den == 0.0 {
        return Err(Error::invalid("F1 is undefined for an empty confusion matrix"));
    }
    Ok(num / den)
}

/// Pixel-level confusion; unlabeled truth pixels are ignored. Labels are
/// 1-based in both rasters.
pub fn evaluate_pixels(pred: &LabelImage, truth: &LabelImage, k: usize) -> Result<ConfusionMatrix> {
    if (pred.height, pred.width) != (truth.height, truth.width) {
        return Err(Error::Dimension(format!(
            "prediction {}x{} vs truth {}x{}",
            pred.height, pred.width, truth.height, truth.width
        )));
    }
    let mut cm = ConfusionMatrix::new(k);
    for (&p, &t) in pred.labels.iter().zip(&truth.labels) {
        if t == 0 {
            continue;
        }
        if t as usize > k || p == 0 || p as usize > k {
            return Err(Error::invalid(format!("label pair truth={t} pred={p} outside 1..={k}")));
        }
        cm.add(t as usize - 1, p as usize - 1);
    }
    Ok(cm)
}

/// Object-level confusion over matching id sets. Truth entries of class 0
/// are unlabeled and skipped.
pub fn evaluate_objects(pred: &BTreeMap<u32, u16>, truth: &BTreeMap<u32, u16>, k: usize) -> Result<ConfusionMatrix> {
    let missing: Vec<String> = truth.keys().filter(|id| !pred.contains_key(id)).map(|id| format!("-{id}")).collect();
    let extra: Vec<String> = pred.keys().filter(|id| !truth.contains_key(id)).map(|id| format!("+{id}")).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::invalid(format!(
            "object id sets differ (- missing from prediction, + unknown to truth): {}",
            [missing, extra].concat().join(" ")
        )));
    }
    let mut cm = ConfusionMatrix::new(k);
    for (id, &t) in truth {
        if t == 0 {
            continue;
        }
        let p = pred[id];
        if t as usize > k || p == 0 || p as usize > k {
            return Err(Error::invalid(format!("object {id}: truth={t} pred={p} outside 1..={k}")));
        }
        cm.add(t as usize - 1, p as usize - 1);
    }
    Ok(cm)
}

/// One (method, model, budget, fold, repeat) result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub model: String,
    pub budget: String,
    pub fold: usize,
    pub repeat: usize,
    pub f1: f64,
    pub train_s: f64,
    pub infer_s_per_image: f64,
}

pub fn write_records_csv(records: &[RunRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

pub fn read_records_csv(path: impl AsRef<Path>) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub model: String,
    pub budget: String,
    pub n: usize,
    pub f1_mean: f64,
    /// Sample standard deviation (n - 1); 0 for a single run.
    pub f1_std: f64,
    pub train_s_mean: f64,
    pub infer_s_mean: f64,
}

/// Orders budgets numerically, with non-numeric budgets such as `all` last.
fn budget_key(b: &str) -> (u8, u64, String) {
    match b.parse::<u64>() {
        Ok(n) => (0, n, String::new()),
        Err(_) => (1, 0, b.to_string()),
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    // Shifting by the first value makes identical runs give exactly 0.
    let n = values.len() as f64;
    let shift = values[0];
    let offset = values.iter().map(|v| v - shift).sum::<f64>() / n;
    if values.len() < 2 {
        return (shift + offset, 0.0);
    }
    let var = values.iter().map(|v| (v - shift - offset).powi(2)).sum::<f64>() / (n - 1.0);
    (shift + offset, var.sqrt())
}

pub fn aggregate_runs(records: &[RunRecord]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(String, String, (u8, u64, String)), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.method.clone(), r.model.clone(), budget_key(&r.budget))).or_default().push(r);
    }
    groups
        .into_values()
        .map(|rs| {
            let f1: Vec<f64> = rs.iter().map(|r| r.f1).collect();
            let (f1_mean, f1_std) = mean_std(&f1);
            let n = rs.len() as f64;
            Aggregate {
                method: rs[0].method.clone(),
                model: rs[0].model.clone(),
                budget: rs[0].budget.clone(),
                n: rs.len(),
                f1_mean,
                f1_std,
                train_s_mean: rs.iter().map(|r| r.train_s).sum::<f64>() / n,
                infer_s_mean: rs.iter().map(|r| r.infer_s_per_image).sum::<f64>() / n,
            }
        })
        .collect()
}

pub fn write_aggregates_csv(aggs: &[Aggregate], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    for a in aggs {
        w.serialize(a)?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}
