//! Per-object shape and intensity descriptors.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::store::{GrayImage, InstanceMask};

pub const REGION_FEATURE_NAMES: [&str; 13] = [
    "area",
    "mean_intensity",
    "max_intensity",
    "min_intensity",
    "perimeter",
    "eccentricity",
    "solidity",
    "extent",
    "major_axis_length",
    "minor_axis_length",
    "orientation",
    "centroid_row",
    "centroid_col",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RegionFeatures {
    pub area: f64,
    pub mean_intensity: f64,
    pub max_intensity: f64,
    pub min_intensity: f64,
    /// Number of pixel edges between the object and anything else
    /// (4-connectivity, image border included).
    pub perimeter: f64,
    pub eccentricity: f64,
    pub solidity: f64,
    pub extent: f64,
    pub major_axis_length: f64,
    pub minor_axis_length: f64,
    /// Angle in `(-π/2, π/2]` between the row axis and the major axis.
    pub orientation: f64,
    pub centroid_row: f64,
    pub centroid_col: f64,
}

impl RegionFeatures {
    pub fn to_vec(&self) -> Vec<f32> {
        [
            self.area,
            self.mean_intensity,
            self.max_intensity,
            self.min_intensity,
            self.perimeter,
            self.eccentricity,
            self.solidity,
            self.extent,
            self.major_axis_length,
            self.minor_axis_length,
            self.orientation,
            self.centroid_row,
            self.centroid_col,
        ]
        .iter()
        .map(|&v| v as f32)
        .collect()
    }
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Convex hull (counter-clockwise, collinear points dropped) of lattice points.
fn convex_hull(mut pts: Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(i64, i64)>> = if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// Number of lattice points inside or on the convex hull of `pts`.
fn hull_pixel_count(pts: &[(i64, i64)], bbox: (i64, i64, i64, i64)) -> usize {
    let hull = convex_hull(pts.to_vec());
    match hull.len() {
        1 => 1,
        2 => (gcd(hull[1].0 - hull[0].0, hull[1].1 - hull[0].1) + 1) as usize,
        n => {
            let (r0, c0, r1, c1) = bbox;
            let mut count = 0;
            for r in r0..=r1 {
                for c in c0..=c1 {
                    if (0..n).all(|i| cross(hull[i], hull[(i + 1) % n], (r, c)) >= 0) {
                        count += 1;
                    }
                }
            }
            count
        }
    }
}

fn features_for(pixels: &[usize], image: &GrayImage, mask: &InstanceMask, id: u32) -> RegionFeatures {
    let w = mask.width;
    let coords: Vec<(i64, i64)> = pixels.iter().map(|&i| ((i / w) as i64, (i % w) as i64)).collect();
    let n = coords.len() as f64;
    let (mut sr, mut sc) = (0.0, 0.0);
    let (mut sum, mut max, mut min) = (0.0f64, f64::NEG_INFINITY, f64::INFINITY);
    let mut bbox = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
    for (&i, &(r, c)) in pixels.iter().zip(&coords) {
        sr += r as f64;
        sc += c as f64;
        let v = image.pixels[i] as f64;
        sum += v;
        max = max.max(v);
        min = min.min(v);
        bbox = (bbox.0.min(r), bbox.1.min(c), bbox.2.max(r), bbox.3.max(c));
    }
    let (mr, mc) = (sr / n, sc / n);
    // Pixels are unit squares, hence the 1/12 added to each axis variance.
    let (mut vrr, mut vcc, mut vrc) = (1.0 / 12.0, 1.0 / 12.0, 0.0);
    for &(r, c) in &coords {
        let (dr, dc) = (r as f64 - mr, c as f64 - mc);
        vrr += dr * dr / n;
        vcc += dc * dc / n;
        vrc += dr * dc / n;
    }
    let mean = 0.5 * (vrr + vcc);
    let rad = (0.25 * (vrr - vcc).powi(2) + vrc * vrc).sqrt();
    let (l1, l2) = (mean + rad, (mean - rad).max(0.0));

    let inside = |r: i64, c: i64| r >= 0 && c >= 0 && (r as usize) < mask.height && (c as usize) < w && mask.ids[r as usize * w + c as usize] == id;
    let mut perimeter = 0usize;
    for &(r, c) in &coords {
        perimeter += [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)].iter().filter(|&&(a, b)| !inside(a, b)).count();
    }
    let bbox_area = ((bbox.2 - bbox.0 + 1) * (bbox.3 - bbox.1 + 1)) as f64;
    RegionFeatures {
        area: n,
        mean_intensity: sum / n,
        max_intensity: max,
        min_intensity: min,
        perimeter: perimeter as f64,
        eccentricity: (1.0 - l2 / l1).max(0.0).sqrt(),
        solidity: n / hull_pixel_count(&coords, bbox) as f64,
        extent: n / bbox_area,
        major_axis_length: 4.0 * l1.sqrt(),
        minor_axis_length: 4.0 * l2.sqrt(),
        orientation: 0.5 * (2.0 * vrc).atan2(vrr - vcc),
        centroid_row: mr,
        centroid_col: mc,
    }
}

/// Descriptors for every instance in `mask`, keyed by instance id.
pub fn region_props(image: &GrayImage, mask: &InstanceMask) -> Result<BTreeMap<u32, RegionFeatures>> {
    if (image.height, image.width) != (mask.height, mask.width) {
        return Err(Error::Dimension(format!(
            "image {}x{} vs mask {}x{}",
            image.height, image.width, mask.height, mask.width
        )));
    }
    let mut out = BTreeMap::new();
    for (id, pixels) in mask.pixels_by_id() {
        if pixels.is_empty() {
            log::warn!("instance {id} has no pixels; skipped");
            continue;
        }
        out.insert(id, features_for(&pixels, image, mask, id));
    }
    Ok(out)
}
