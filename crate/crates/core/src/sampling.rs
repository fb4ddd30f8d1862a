//! Label-budget samplers.
//!
//! Inverse class-frequency sampling draws items one at a time without
//! replacement, each remaining item weighted by `1 / (remaining count of its
//! class)`. Every non-empty class then carries the same total weight, so a
//! draw is equivalent to picking a non-empty class uniformly and then a
//! uniform item of that class. Draws are sequential, so for a fixed seed a
//! larger budget returns a superset that starts with the smaller result.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::LabelImage;

pub fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Number of objects to sample, or every labeled object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObjectBudget {
    Count(usize),
    All,
}

impl std::fmt::Display for ObjectBudget {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ObjectBudget::Count(n) => write!(f, "{n}"),
            ObjectBudget::All => f.write_str("all"),
        }
    }
}

impl std::str::FromStr for ObjectBudget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(ObjectBudget::All);
        }
        match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(ObjectBudget::Count(n)),
            _ => Err(Error::invalid(format!("budget must be a positive integer or \"all\", got {s:?}"))),
        }
    }
}

/// Sequential inverse class-frequency draws over `classes` (pool order).
/// Items of class 0 are unlabeled and never selected. Returns pool indices
/// in draw order; a budget at least the labeled pool size returns every
/// labeled index in pool order.
pub fn sample_inverse_frequency(classes: &[u16], budget: usize, seed: u64) -> Vec<usize> {
    let labeled = classes.iter().filter(|&&c| c != 0).count();
    if budget >= labeled {
        return (0..classes.len()).filter(|&i| classes[i] != 0).collect();
    }
    let mut groups: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
    for (i, &c) in classes.iter().enumerate() {
        if c != 0 {
            groups.entry(c).or_default().push(i);
        }
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    let mut rng = rng_for(seed);
    let mut out = Vec::with_capacity(budget);
    while out.len() < budget {
        let g = rng.random_range(0..groups.len());
        let members = &mut groups[g];
        let pick = rng.random_range(0..members.len());
        out.push(members.swap_remove(pick));
        if members.is_empty() {
            groups.remove(g);
        }
    }
    out
}

/// Pixel sampling for the random forest; see [`sample_inverse_frequency`].
pub fn sample_pixels_rf(classes: &[u16], n_pixels: usize, seed: u64) -> Vec<usize> {
    sample_inverse_frequency(classes, n_pixels, seed)
}

pub fn sample_objects(classes: &[u16], budget: ObjectBudget, seed: u64) -> Vec<usize> {
    match budget {
        ObjectBudget::All => (0..classes.len()).filter(|&i| classes[i] != 0).collect(),
        ObjectBudget::Count(n) => sample_inverse_frequency(classes, n, seed),
    }
}

/// Splits `quota` across classes as evenly as availability allows. Classes
/// with fewer pixels than their share give all of them and the shortfall
/// is redistributed; leftover units go to random classes.
fn class_split(avail: &[usize], quota: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut take = vec![0; avail.len()];
    let mut active: Vec<usize> = (0..avail.len()).collect();
    let mut remaining = quota;
    loop {
        if active.is_empty() || remaining == 0 {
            return take;
        }
        let share = remaining / active.len();
        let (short, rest): (Vec<usize>, Vec<usize>) = active.iter().partition(|&&c| avail[c] <= share);
        if short.is_empty() {
            for &c in &rest {
                take[c] = share;
            }
            let extra = remaining - share * rest.len();
            for i in index::sample(rng, rest.len(), extra) {
                take[rest[i]] += 1;
            }
            return take;
        }
        for &c in &short {
            take[c] = avail[c];
            remaining -= avail[c];
        }
        active = rest;
    }
}

/// Chooses training pixels for a dense probe. Returns, per image, the sorted
/// flat indices of the sampled pixels.
///
/// With fewer pixels than eligible images, `n_pixels` distinct images each
/// contribute one pixel whose class is drawn uniformly among the classes
/// present in that image. Otherwise each image receives
/// `floor(n_pixels / n_images)` pixels, the remainder going to a random
/// subset of images, and each image's quota is split evenly across its
/// classes.
pub fn sample_pixels_deap(labels: &[LabelImage], n_pixels: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n_pixels == 0 {
        return Err(Error::invalid("pixel budget must be at least 1"));
    }
    let per_class: Vec<BTreeMap<u16, Vec<usize>>> = labels
        .iter()
        .map(|l| {
            let mut m: BTreeMap<u16, Vec<usize>> = BTreeMap::new();
            for (i, &c) in l.labels.iter().enumerate() {
                if c != 0 {
                    m.entry(c).or_default().push(i);
                }
            }
            m
        })
        .collect();
    let eligible: Vec<usize> = (0..labels.len()).filter(|&i| !per_class[i].is_empty()).collect();
    if eligible.is_empty() {
        return Err(Error::invalid("no training image has labeled pixels"));
    }
    if eligible.len() < labels.len() {
        log::warn!("{} training images without labels are ignored", labels.len() - eligible.len());
    }
    let mut rng = rng_for(seed);
    let mut out = vec![Vec::new(); labels.len()];
    let m = eligible.len();
    if n_pixels < m {
        for pick in index::sample(&mut rng, m, n_pixels) {
            let img = eligible[pick];
            let classes: Vec<&Vec<usize>> = per_class[img].values().collect();
            let pixels = classes[rng.random_range(0..classes.len())];
            out[img].push(pixels[rng.random_range(0..pixels.len())]);
        }
        return Ok(out);
    }
    let mut quota = vec![n_pixels / m; m];
    for i in index::sample(&mut rng, m, n_pixels % m) {
        quota[i] += 1;
    }
    for (slot, &img) in eligible.iter().enumerate() {
        let classes: Vec<&Vec<usize>> = per_class[img].values().collect();
        let avail: Vec<usize> = classes.iter().map(|p| p.len()).collect();
        let take = class_split(&avail, quota[slot], &mut rng);
        let mut chosen = Vec::new();
        for (pixels, &t) in classes.iter().zip(&take) {
            chosen.extend(index::sample(&mut rng, pixels.len(), t).into_iter().map(|i| pixels[i]));
        }
        if chosen.len() < quota[slot] {
            log::debug!("image {img}: quota {} exceeds its {} labeled pixels", quota[slot], chosen.len());
        }
        chosen.sort_unstable();
        out[img] = chosen;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budget_covering_pool_returns_everything_in_order() {
        let pool = [2, 0, 1, 1, 3];
        assert_eq!(sample_inverse_frequency(&pool, 4, 9), vec![0, 2, 3, 4]);
        assert_eq!(sample_inverse_frequency(&pool, 100, 9), vec![0, 2, 3, 4]);
        assert_eq!(sample_objects(&pool, ObjectBudget::All, 1), vec![0, 2, 3, 4]);
    }

    #[test]
    fn draws_are_distinct_labeled_and_nested() {
        let pool: Vec<u16> = (0..300).map(|i| [0, 1, 1, 1, 2, 3][i % 6]).collect();
        let small = sample_inverse_frequency(&pool, 20, 5);
        let large = sample_inverse_frequency(&pool, 60, 5);
        assert_eq!(&large[..20], &small[..]);
        let mut sorted = large.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 60);
        assert!(large.iter().all(|&i| pool[i] != 0));
    }

    #[test]
    fn single_class_pool_is_uniform() {
        let pool = vec![4u16; 10];
        let mut hits = [0usize; 10];
        for seed in 0..5000 {
            for i in sample_inverse_frequency(&pool, 3, seed) {
                hits[i] += 1;
            }
        }
        for h in hits {
            assert!((1300..1700).contains(&h), "{hits:?}");
        }
    }

    #[test]
    fn class_split_redistributes_shortfall() {
        let mut rng = rng_for(0);
        assert_eq!(class_split(&[5, 5], 4, &mut rng), vec![2, 2]);
        assert_eq!(class_split(&[1, 10, 10], 9, &mut rng), vec![1, 4, 4]);
        assert_eq!(class_split(&[1, 2], 9, &mut rng), vec![1, 2]);
        let t = class_split(&[9, 9, 9], 7, &mut rng);
        assert_eq!(t.iter().sum::<usize>(), 7);
        assert!(t.iter().all(|&x| x == 2 || x == 3));
    }

    fn two_class_image(split_col: usize) -> LabelImage {
        LabelImage::new(4, 4, (0..16).map(|i| if i % 4 < split_col { 1 } else { 2 }).collect()).unwrap()
    }

    #[test]
    fn deap_equal_split_per_class() {
        let imgs = vec![two_class_image(2), two_class_image(1)];
        let picked = sample_pixels_deap(&imgs, 8, 3).unwrap();
        for (img, px) in imgs.iter().zip(&picked) {
            assert_eq!(px.len(), 4);
            let ones = px.iter().filter(|&&i| img.labels[i] == 1).count();
            assert_eq!(ones, 2);
        }
    }

    #[test]
    fn deap_sparse_budget_uses_distinct_images() {
        let imgs: Vec<LabelImage> = (0..10).map(|i| two_class_image(1 + i % 3)).collect();
        let picked = sample_pixels_deap(&imgs, 3, 11).unwrap();
        assert_eq!(picked.iter().filter(|p| p.len() == 1).count(), 3);
        assert!(picked.iter().all(|p| p.len() <= 1));
    }

    #[test]
    fn object_budget_parses() {
        assert_eq!("all".parse::<ObjectBudget>().unwrap(), ObjectBudget::All);
        assert_eq!("25".parse::<ObjectBudget>().unwrap(), ObjectBudget::Count(25));
        assert!("0".parse::<ObjectBudget>().is_err());
    }
}
