//! Multi-scale pixel filter bank.
//!
//! All filters are separable Gaussian-derivative convolutions with kernels
//! truncated at `ceil(3σ)` and mirror boundary handling (`dcb|abcd|cba`).
//! Derivative kernels are normalised on polynomials so that a unit ramp has
//! first derivative exactly 1 and `x²/2` has second derivative exactly 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{FeatureVolume, GrayImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Filter {
    GaussianSmoothing,
    LaplacianOfGaussian,
    GradientMagnitude,
    DifferenceOfGaussians,
    StructureTensorEigenvalues,
    HessianEigenvalues,
}

impl Filter {
    pub const ALL: [Filter; 6] = [
        Filter::GaussianSmoothing,
        Filter::LaplacianOfGaussian,
        Filter::GradientMagnitude,
        Filter::DifferenceOfGaussians,
        Filter::StructureTensorEigenvalues,
        Filter::HessianEigenvalues,
    ];

    fn short_name(self) -> &'static str {
        match self {
            Filter::GaussianSmoothing => "gauss",
            Filter::LaplacianOfGaussian => "log",
            Filter::GradientMagnitude => "ggm",
            Filter::DifferenceOfGaussians => "dog",
            Filter::StructureTensorEigenvalues => "st",
            Filter::HessianEigenvalues => "hog",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterBankConfig {
    pub scales: Vec<f64>,
    pub filters: Vec<Filter>,
}

impl Default for FilterBankConfig {
    fn default() -> Self {
        Self { scales: vec![0.5, 1.0, 2.0, 4.0], filters: Filter::ALL.to_vec() }
    }
}

impl FilterBankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.filters.is_empty() {
            return Err(Error::invalid("filter bank needs at least one scale and one filter"));
        }
        if self.scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("filter scales must be positive"));
        }
        if self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("filter scales must be strictly ascending"));
        }
        Ok(())
    }

    /// Channel names in output order: filters in configured order, each
    /// expanded over scales (scale pairs for DoG) and eigenvalue index.
    pub fn channel_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for &f in &self.filters {
            match f {
                Filter::DifferenceOfGaussians => {
                    for w in self.scales.windows(2) {
                        names.push(format!("dog_{}_{}", w[0], w[1]));
                    }
                }
                Filter::StructureTensorEigenvalues | Filter::HessianEigenvalues => {
                    for s in &self.scales {
                        names.push(format!("{}_{s}_l1", f.short_name()));
                        names.push(format!("{}_{s}_l2", f.short_name()));
                    }
                }
                _ => names.extend(self.scales.iter().map(|s| format!("{}_{s}", f.short_name()))),
            }
        }
        names
    }

    pub fn num_channels(&self) -> usize {
        self.channel_names().len()
    }
}

/// Mirror-reflects an index into `0..n` without repeating the edge sample.
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Sampled kernels over offsets `-r..=r`, applied as correlation.
#[derive(Clone, Debug)]
pub struct Kernels {
    pub radius: usize,
    pub smooth: Vec<f64>,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl Kernels {
    pub fn new(sigma: f64) -> Self {
        let radius = (3.0 * sigma).ceil() as usize;
        let r = radius as isize;
        let raw: Vec<f64> = (-r..=r).map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp()).collect();
        let total: f64 = raw.iter().sum();
        let smooth: Vec<f64> = raw.iter().map(|g| g / total).collect();
        let offsets: Vec<f64> = (-r..=r).map(|k| k as f64).collect();
        let m2: f64 = offsets.iter().zip(&smooth).map(|(k, g)| k * k * g).sum();
        let m4: f64 = offsets.iter().zip(&smooth).map(|(k, g)| k.powi(4) * g).sum();
        let first = if m2 > 0.0 { offsets.iter().zip(&smooth).map(|(k, g)| k * g / m2).collect() } else { vec![0.0; smooth.len()] };
        let denom = m4 - m2 * m2;
        let second = if denom > 0.0 {
            offsets.iter().zip(&smooth).map(|(k, g)| 2.0 * (k * k - m2) * g / denom).collect()
        } else {
            vec![0.0; smooth.len()]
        };
        Self { radius, smooth, first, second }
    }
}

/// Plane of `f64` samples used for intermediate results.
#[derive(Clone, Debug)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn map2(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane { h: self.h, w: self.w, v: self.v.iter().zip(&other.v).map(|(&a, &b)| f(a, b)).collect() }
    }
}

fn correlate_rows(p: &Plane, k: &[f64]) -> Plane {
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0; p.v.len()];
    for y in 0..p.h {
        let row = &p.v[y * p.w..(y + 1) * p.w];
        for x in 0..p.w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * row[reflect(x as isize + j as isize - r, p.w)];
            }
            out[y * p.w + x] = acc;
        }
    }
    Plane { h: p.h, w: p.w, v: out }
}

fn correlate_cols(p: &Plane, k: &[f64]) -> Plane {
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0; p.v.len()];
    for y in 0..p.h {
        let dst = &mut out[y * p.w..(y + 1) * p.w];
        for (j, kv) in k.iter().enumerate() {
            let sy = reflect(y as isize + j as isize - r, p.h);
            for (d, s) in dst.iter_mut().zip(&p.v[sy * p.w..(sy + 1) * p.w]) {
                *d += kv * s;
            }
        }
    }
    Plane { h: p.h, w: p.w, v: out }
}

/// `kr` along rows (vertical axis), `kc` along columns.
fn separable(p: &Plane, kr: &[f64], kc: &[f64]) -> Plane {
    correlate_cols(&correlate_rows(p, kc), kr)
}

fn eigen_pair(a: f64, b: f64, c: f64) -> (f64, f64) {
    let mean = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    (mean + rad, mean - rad)
}

/// Computes the configured filter responses for a single-channel image.
pub fn pixel_filter_bank(image: &GrayImage, cfg: &FilterBankConfig) -> Result<FeatureVolume> {
    cfg.validate()?;
    if image.pixels.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("image contains non-finite values"));
    }
    let base = Plane { h: image.height, w: image.width, v: image.pixels.iter().map(|&p| p as f64).collect() };
    let kernels: Vec<Kernels> = cfg.scales.iter().map(|&s| Kernels::new(s)).collect();
    let smoothed: Vec<Plane> = kernels.iter().map(|k| separable(&base, &k.smooth, &k.smooth)).collect();
    let mut channels: Vec<Plane> = Vec::new();
    for &f in &cfg.filters {
        match f {
            Filter::GaussianSmoothing => channels.extend(smoothed.iter().cloned()),
            Filter::LaplacianOfGaussian => {
                for k in &kernels {
                    let yy = separable(&base, &k.second, &k.smooth);
                    let xx = separable(&base, &k.smooth, &k.second);
                    channels.push(yy.map2(&xx, |a, b| a + b));
                }
            }
            Filter::GradientMagnitude => {
                for k in &kernels {
                    let gy = separable(&base, &k.first, &k.smooth);
                    let gx = separable(&base, &k.smooth, &k.first);
                    channels.push(gy.map2(&gx, |a, b| (a * a + b * b).sqrt()));
                }
            }
            Filter::DifferenceOfGaussians => {
                for w in smoothed.windows(2) {
                    channels.push(w[0].map2(&w[1], |a, b| a - b));
                }
            }
            Filter::StructureTensorEigenvalues => {
                for (k, &s) in kernels.iter().zip(&cfg.scales) {
                    let gy = separable(&base, &k.first, &k.smooth);
                    let gx = separable(&base, &k.smooth, &k.first);
                    let outer = Kernels::new(0.5 * s);
                    let smooth = |p: Plane| separable(&p, &outer.smooth, &outer.smooth);
                    let yy = smooth(gy.map2(&gy, |a, b| a * b));
                    let xy = smooth(gy.map2(&gx, |a, b| a * b));
                    let xx = smooth(gx.map2(&gx, |a, b| a * b));
                    push_eigen(&mut channels, &yy, &xy, &xx);
                }
            }
            Filter::HessianEigenvalues => {
                for k in &kernels {
                    let yy = separable(&base, &k.second, &k.smooth);
                    let xy = separable(&base, &k.first, &k.first);
                    let xx = separable(&base, &k.smooth, &k.second);
                    push_eigen(&mut channels, &yy, &xy, &xx);
                }
            }
        }
    }
    let c = channels.len();
    let n = image.height * image.width;
    let mut values = vec![0f32; n * c];
    for (ci, plane) in channels.iter().enumerate() {
        for (i, &v) in plane.v.iter().enumerate() {
            values[i * c + ci] = v as f32;
        }
    }
    FeatureVolume::new(image.height, image.width, c, values)
}

fn push_eigen(channels: &mut Vec<Plane>, a: &Plane, b: &Plane, c: &Plane) {
    let (mut l1, mut l2) = (a.clone(), a.clone());
    for i in 0..a.v.len() {
        let (e1, e2) = eigen_pair(a.v[i], b.v[i], c.v[i]);
        l1.v[i] = e1;
        l2.v[i] = e2;
    }
    channels.push(l1);
    channels.push(l2);
}
