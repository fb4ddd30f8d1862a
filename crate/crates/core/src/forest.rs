//! Random forest classifier with Gini splits.
//!
//! Bootstrap resamples are represented as integer per-row weights, so a
//! node's class counts and impurities are exact integers and the fitted
//! trees do not depend on floating-point summation order. Thresholds are
//! midpoints between consecutive distinct values of the sorted candidate
//! feature; samples with `x <= threshold` go left.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::rng_for;
use crate::store::volume::{parse_header, read_u32, FVOL_VERSION};

pub const RFST_MAGIC: &[u8; 4] = b"RFST";
const LEAF: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RFConfig {
    pub n_trees: usize,
    /// `None` grows trees until leaves are pure.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    /// `None` uses `floor(sqrt(n_features))`.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for RFConfig {
    fn default() -> Self {
        Self { n_trees: 100, max_depth: None, min_samples_leaf: 1, max_features: None, bootstrap: true, seed: 0 }
    }
}

impl RFConfig {
    fn mtry(&self, n_features: usize) -> Result<usize> {
        let m = self.max_features.unwrap_or_else(|| ((n_features as f64).sqrt().floor() as usize).max(1));
        if m == 0 || m > n_features {
            return Err(Error::invalid(format!("features per split must lie in 1..={n_features}, got {m}")));
        }
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Node {
    /// Split feature, or `LEAF`.
    feature: u32,
    threshold: f32,
    /// Child indices for splits; `left` holds the leaf index for leaves.
    left: u32,
    right: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    nodes: Vec<Node>,
    /// `n_classes` weighted counts per leaf.
    leaf_counts: Vec<u32>,
}

impl Tree {
    fn leaf_of(&self, row: &[f32]) -> usize {
        let mut i = 0;
        loop {
            let n = self.nodes[i];
            if n.feature == LEAF {
                return n.left as usize;
            }
            i = if row[n.feature as usize] <= n.threshold { n.left } else { n.right } as usize;
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| n.feature == LEAF).count()
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            let n = t.nodes[i];
            if n.feature == LEAF {
                0
            } else {
                1 + go(t, n.left as usize).max(go(t, n.right as usize))
            }
        }
        go(self, 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomForest {
    n_features: usize,
    n_classes: usize,
    trees: Vec<Tree>,
}

fn ordered_bits(x: f32) -> u32 {
    let b = x.to_bits();
    if b & 0x8000_0000 != 0 {
        !b
    } else {
        b | 0x8000_0000
    }
}

fn from_ordered_bits(b: u32) -> f32 {
    f32::from_bits(if b & 0x8000_0000 != 0 { b & 0x7fff_ffff } else { !b })
}

fn midpoint(a: f32, b: f32) -> f32 {
    let m = ((a as f64 + b as f64) * 0.5) as f32;
    if m >= b {
        a
    } else {
        m
    }
}

/// Training data as dense per-feature ranks, row-major, so the candidate
/// features of one row share cache lines. `values[f][rank]` recovers the
/// feature value, and rank order equals value order.
struct Ranked<'a> {
    d: usize,
    /// Bits needed for the largest rank of any feature.
    rank_bits: u32,
    ranks: Vec<u32>,
    values: Vec<Vec<f32>>,
    y: &'a [u16],
}

impl<'a> Ranked<'a> {
    fn new(x: &[f32], d: usize, y: &'a [u16]) -> Self {
        let n = y.len();
        let mut ranks = vec![0u32; n * d];
        let mut values = Vec::with_capacity(d);
        let mut order: Vec<u64> = Vec::with_capacity(n);
        for f in 0..d {
            order.clear();
            order.extend((0..n).map(|i| ((ordered_bits(x[i * d + f]) as u64) << 32) | i as u64));
            order.sort_unstable();
            let mut distinct = Vec::new();
            let mut prev = None;
            for &k in &order {
                let bits = (k >> 32) as u32;
                if prev != Some(bits) {
                    distinct.push(from_ordered_bits(bits));
                    prev = Some(bits);
                }
                ranks[(k & 0xffff_ffff) as usize * d + f] = (distinct.len() - 1) as u32;
            }
            values.push(distinct);
        }
        let max_rank = values.iter().map(|v| v.len() - 1).max().unwrap_or(0) as u32;
        Self { d, rank_bits: 32 - max_rank.leading_zeros(), ranks, values, y }
    }

    fn rank(&self, f: usize, r: u32) -> u32 {
        self.ranks[r as usize * self.d + f]
    }
}

/// Two-pass LSD radix sort of keys by their high 32 bits, which must be
/// below `2^rank_bits`. Stable, so equal ranks keep their input order.
fn sort_by_rank(keys: &mut [u64], buf: &mut Vec<u64>, histogram: &mut Vec<usize>, rank_bits: u32) {
    let digit = rank_bits.div_ceil(2).max(1);
    let buckets = 1usize << digit;
    let mask = (buckets - 1) as u64;
    histogram.clear();
    histogram.resize(2 * buckets, 0);
    for &k in keys.iter() {
        let r = k >> 32;
        histogram[(r & mask) as usize] += 1;
        histogram[buckets + ((r >> digit) & mask) as usize] += 1;
    }
    for pass in histogram.chunks_mut(buckets) {
        let mut acc = 0;
        for c in pass {
            let count = *c;
            *c = acc;
            acc += count;
        }
    }
    buf.clear();
    buf.resize(keys.len(), 0);
    for &k in keys.iter() {
        let b = ((k >> 32) & mask) as usize;
        buf[histogram[b]] = k;
        histogram[b] += 1;
    }
    for &k in buf.iter() {
        let b = buckets + ((k >> (32 + digit)) & mask) as usize;
        keys[histogram[b]] = k;
        histogram[b] += 1;
    }
}

struct Split {
    feature: usize,
    /// Largest rank that goes left.
    rank: u32,
}

struct Builder<'a> {
    data: &'a Ranked<'a>,
    weights: Vec<u32>,
    k: usize,
    d: usize,
    mtry: usize,
    min_leaf: usize,
    max_depth: usize,
    keys: Vec<u64>,
    radix_buf: Vec<u64>,
    histogram: Vec<usize>,
    scratch: Vec<u32>,
    left: Vec<u64>,
    total: Vec<u64>,
    features: Vec<usize>,
}

impl Builder<'_> {
    fn class_totals(&mut self, rows: &[u32]) {
        self.total.iter_mut().for_each(|t| *t = 0);
        for &r in rows {
            self.total[self.data.y[r as usize] as usize] += self.weights[r as usize] as u64;
        }
    }

    /// Best split over `rows` using the current `self.total` counts. Features
    /// are visited in random order until `mtry` non-constant ones have been
    /// evaluated or none remain.
    fn best_split(&mut self, rows: &[u32], rng: &mut impl Rng) -> Option<Split> {
        let m = rows.len();
        let total_w: u64 = self.total.iter().sum();
        let total_sq: u64 = self.total.iter().map(|c| c * c).sum();
        self.features.shuffle(rng);
        let mut best: Option<Split> = None;
        let mut best_score = f64::NEG_INFINITY;
        let (mut evaluated, mut next) = (0, 0);
        while evaluated < self.mtry && next < self.d {
            let batch = &self.features[next..(next + self.mtry - evaluated).min(self.d)];
            next += batch.len();
            // Key layout: rank in the high half, class and weight in the low
            // half, so the sweep reads nothing but the sorted keys.
            self.keys.clear();
            self.keys.resize(batch.len() * m, 0);
            for (j, &r) in rows.iter().enumerate() {
                let low = ((self.data.y[r as usize] as u64) << 16) | self.weights[r as usize] as u64;
                let row = &self.data.ranks[r as usize * self.d..(r as usize + 1) * self.d];
                for (b, &f) in batch.iter().enumerate() {
                    self.keys[b * m + j] = ((row[f] as u64) << 32) | low;
                }
            }
            for (b, &f) in batch.iter().enumerate() {
                let keys = &mut self.keys[b * m..(b + 1) * m];
                if m > 128 && self.data.rank_bits <= 24 {
                    sort_by_rank(keys, &mut self.radix_buf, &mut self.histogram, self.data.rank_bits);
                } else {
                    keys.sort_unstable();
                }
                if keys[0] >> 32 == keys[m - 1] >> 32 {
                    continue;
                }
                evaluated += 1;
                let left = &mut self.left[..];
                let total = &self.total[..];
                left.iter_mut().for_each(|c| *c = 0);
                let (mut wl, mut sql, mut sqr) = (0u64, 0u64, total_sq);
                let (first, last) = (self.min_leaf - 1, m - 1 - self.min_leaf);
                for (j, pair) in keys.windows(2).enumerate() {
                    let (key, next) = (pair[0], pair[1]);
                    let c = ((key >> 16) & 0xffff) as usize;
                    let w = key & 0xffff;
                    let lc = left[c];
                    let rc = total[c] - lc;
                    sql += (2 * lc + w) * w;
                    sqr -= (2 * rc - w) * w;
                    left[c] = lc + w;
                    wl += w;
                    if key >> 32 == next >> 32 || j < first || j > last {
                        continue;
                    }
                    // Weighted Gini decrease up to constants: sql/wl + sqr/wr.
                    let (fl, fr) = (wl as f64, (total_w - wl) as f64);
                    let num = sql as f64 * fr + sqr as f64 * fl;
                    let den = fl * fr;
                    if num > best_score * den {
                        best_score = num / den;
                        best = Some(Split { feature: f, rank: (key >> 32) as u32 });
                    }
                }
            }
        }
        best
    }

    fn push_leaf(&self, tree: &mut Tree) -> u32 {
        let leaf = (tree.leaf_counts.len() / self.k) as u32;
        tree.leaf_counts.extend(self.total.iter().map(|&c| c as u32));
        tree.nodes.push(Node { feature: LEAF, threshold: 0.0, left: leaf, right: 0 });
        (tree.nodes.len() - 1) as u32
    }

    fn grow(&mut self, rows: &mut [u32], rng: &mut impl Rng) -> Tree {
        let mut tree = Tree { nodes: Vec::new(), leaf_counts: Vec::new() };
        // (range start, range end, depth, parent slot to patch, is right child)
        let mut stack: Vec<(usize, usize, usize, Option<(usize, bool)>)> = vec![(0, rows.len(), 0, None)];
        while let Some((lo, hi, depth, parent)) = stack.pop() {
            let node_rows = &mut rows[lo..hi];
            self.class_totals(node_rows);
            let pure = self.total.iter().filter(|&&c| c > 0).count() <= 1;
            let split = if pure || depth >= self.max_depth || node_rows.len() < 2 * self.min_leaf {
                None
            } else {
                self.best_split(node_rows, rng)
            };
            let id = match split {
                None => self.push_leaf(&mut tree),
                Some(s) => {
                    self.scratch.clear();
                    let mut nl = 0;
                    for j in 0..node_rows.len() {
                        let r = node_rows[j];
                        if self.data.rank(s.feature, r) <= s.rank {
                            node_rows[nl] = r;
                            nl += 1;
                        } else {
                            self.scratch.push(r);
                        }
                    }
                    node_rows[nl..].copy_from_slice(&self.scratch);
                    let vals = &self.data.values[s.feature];
                    let threshold = midpoint(vals[s.rank as usize], vals[s.rank as usize + 1]);
                    tree.nodes.push(Node { feature: s.feature as u32, threshold, left: 0, right: 0 });
                    let id = tree.nodes.len() - 1;
                    stack.push((lo + nl, hi, depth + 1, Some((id, true))));
                    stack.push((lo, lo + nl, depth + 1, Some((id, false))));
                    id as u32
                }
            };
            if let Some((p, right)) = parent {
                if right {
                    tree.nodes[p].right = id;
                } else {
                    tree.nodes[p].left = id;
                }
            }
        }
        tree
    }
}

impl RandomForest {
    /// Fits a forest on row-major `x` (`y.len()` rows of `n_features`) with
    /// labels in `0..n_classes`. Trees are built in parallel on the current
    /// rayon pool; tree `t` uses seed `cfg.seed + t`.
    pub fn fit(x: &[f32], n_features: usize, y: &[u16], n_classes: usize, cfg: &RFConfig) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::invalid("cannot fit a random forest on an empty sample"));
        }
        if n_features == 0 || x.len() != n * n_features {
            return Err(Error::Dimension(format!("{} feature values for {n} rows of {n_features}", x.len())));
        }
        if n > u32::MAX as usize {
            return Err(Error::invalid("too many training rows"));
        }
        if cfg.n_trees == 0 {
            return Err(Error::invalid("tree count must be at least 1"));
        }
        if let Some(&bad) = y.iter().find(|&&c| c as usize >= n_classes) {
            return Err(Error::invalid(format!("label {bad} outside 0..{n_classes}")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("training features contain non-finite values"));
        }
        let mtry = cfg.mtry(n_features)?;
        let data = Ranked::new(x, n_features, y);
        let trees = (0..cfg.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = rng_for(cfg.seed.wrapping_add(t as u64));
                let mut weights = vec![0u32; n];
                if cfg.bootstrap {
                    for _ in 0..n {
                        weights[rng.random_range(0..n)] += 1;
                    }
                } else {
                    weights.iter_mut().for_each(|w| *w = 1);
                }
                assert!(weights.iter().all(|&w| w <= 0xffff), "bootstrap weight exceeds the 16-bit key field");
                let mut rows: Vec<u32> = (0..n as u32).filter(|&i| weights[i as usize] > 0).collect();
                let mut b = Builder {
                    data: &data,
                    weights,
                    k: n_classes,
                    d: n_features,
                    mtry,
                    min_leaf: cfg.min_samples_leaf.max(1),
                    max_depth: cfg.max_depth.unwrap_or(usize::MAX),
                    keys: Vec::with_capacity(mtry * rows.len()),
                    radix_buf: Vec::with_capacity(rows.len()),
                    histogram: Vec::new(),
                    scratch: Vec::with_capacity(rows.len()),
                    left: vec![0; n_classes],
                    total: vec![0; n_classes],
                    features: (0..n_features).collect(),
                };
                b.grow(&mut rows, &mut rng)
            })
            .collect();
        Ok(Self { n_features, n_classes, trees })
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    fn check_dims(&self, x: &[f32]) -> Result<usize> {
        if x.len() % self.n_features != 0 {
            return Err(Error::Dimension(format!("{} values are not rows of {} features", x.len(), self.n_features)));
        }
        Ok(x.len() / self.n_features)
    }

    fn predict_row(&self, row: &[f32], votes: &mut [u32]) -> u16 {
        votes.iter_mut().for_each(|v| *v = 0);
        for t in &self.trees {
            let leaf = t.leaf_of(row);
            votes[argmax_u32(&t.leaf_counts[leaf * self.n_classes..(leaf + 1) * self.n_classes])] += 1;
        }
        argmax_u32(votes) as u16
    }

    /// Majority vote over trees; ties go to the lowest class index.
    pub fn predict(&self, x: &[f32]) -> Result<Vec<u16>> {
        self.check_dims(x)?;
        Ok(x.par_chunks(self.n_features * 256)
            .flat_map_iter(|block| {
                let mut votes = vec![0u32; self.n_classes];
                block.chunks_exact(self.n_features).map(|r| self.predict_row(r, &mut votes)).collect::<Vec<_>>()
            })
            .collect())
    }

    /// Mean over trees of normalised leaf class counts, row-major `n × K`.
    pub fn predict_proba(&self, x: &[f32]) -> Result<Vec<f32>> {
        self.check_dims(x)?;
        let k = self.n_classes;
        Ok(x.par_chunks(self.n_features)
            .flat_map_iter(|row| {
                let mut p = vec![0f64; k];
                for t in &self.trees {
                    let leaf = t.leaf_of(row);
                    let counts = &t.leaf_counts[leaf * k..(leaf + 1) * k];
                    let total: u64 = counts.iter().map(|&c| c as u64).sum();
                    for (pc, &c) in p.iter_mut().zip(counts) {
                        *pc += c as f64 / total as f64;
                    }
                }
                let nt = self.trees.len() as f64;
                p.into_iter().map(move |v| (v / nt) as f32)
            })
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(RFST_MAGIC);
        for v in [FVOL_VERSION, 0, self.trees.len() as u32, self.n_features as u32, self.n_classes as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for t in &self.trees {
            out.extend_from_slice(&(t.nodes.len() as u32).to_le_bytes());
            out.extend_from_slice(&((t.leaf_counts.len() / self.n_classes) as u32).to_le_bytes());
            for n in &t.nodes {
                for v in [n.feature, n.threshold.to_bits(), n.left, n.right] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            for c in &t.leaf_counts {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (dims, mut at) = parse_header(bytes, RFST_MAGIC, 0, 3)?;
        let (n_trees, n_features, n_classes) = (dims[0], dims[1], dims[2]);
        let next = |at: &mut usize| -> Result<u32> {
            if *at + 4 > bytes.len() {
                return Err(Error::Truncated { expected: *at + 4, actual: bytes.len() });
            }
            let v = read_u32(bytes, *at);
            *at += 4;
            Ok(v)
        };
        let mut trees = Vec::with_capacity(n_trees);
        for _ in 0..n_trees {
            let n_nodes = next(&mut at)? as usize;
            let n_leaves = next(&mut at)? as usize;
            let mut nodes = Vec::with_capacity(n_nodes);
            for i in 0..n_nodes {
                let node_at = at;
                let node = Node { feature: next(&mut at)?, threshold: f32::from_bits(next(&mut at)?), left: next(&mut at)?, right: next(&mut at)? };
                let ok = if node.feature == LEAF {
                    (node.left as usize) < n_leaves
                } else {
                    (node.feature as usize) < n_features && (node.left as usize) > i && (node.right as usize) > i && (node.left.max(node.right) as usize) < n_nodes
                };
                if !ok {
                    return Err(Error::format(node_at, "node references out of range"));
                }
                nodes.push(node);
            }
            let mut leaf_counts = Vec::with_capacity(n_leaves * n_classes);
            for _ in 0..n_leaves * n_classes {
                leaf_counts.push(next(&mut at)?);
            }
            trees.push(Tree { nodes, leaf_counts });
        }
        if at != bytes.len() {
            return Err(Error::format(at, "unexpected trailing bytes"));
        }
        Ok(Self { n_features, n_classes, trees })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()).map_err(|e| Error::io(path.as_ref(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
        Self::from_bytes(&bytes)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax_u32(v: &[u32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
