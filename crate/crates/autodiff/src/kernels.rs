//! Slice-level numeric kernels used by both the forward and backward passes.
//!
//! Every kernel walks its reductions in a fixed order, so results depend only
//! on the inputs and never on scheduling.

use crate::tensor::Scalar;

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
pub fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }

    pub fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

/// Unrolls one `[cin, h, w]` image into a `[cin·kh·kw, oh·ow]` matrix.
pub fn im2col<T: Scalar>(x: &[T], g: ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut cols = vec![T::zero(); g.patch() * oh * ow];
    for ci in 0..g.cin {
        for u in 0..g.kh {
            for v in 0..g.kw {
                let row = (ci * g.kh + u) * g.kw + v;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let sy = y as isize + u as isize - g.pad as isize;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(ci * g.h + sy as usize) * g.w..(ci * g.h + sy as usize + 1) * g.w];
                    for xo in 0..ow {
                        let sx = xo as isize + v as isize - g.pad as isize;
                        if sx >= 0 && sx < g.w as isize {
                            dst[y * ow + xo] = src[sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub fn col2im_acc<T: Scalar>(cols: &[T], g: ConvGeom, dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for ci in 0..g.cin {
        for u in 0..g.kh {
            for v in 0..g.kw {
                let row = (ci * g.kh + u) * g.kw + v;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let sy = y as isize + u as isize - g.pad as isize;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    let base = (ci * g.h + sy as usize) * g.w;
                    for xo in 0..ow {
                        let sx = xo as isize + v as isize - g.pad as isize;
                        if sx >= 0 && sx < g.w as isize {
                            dx[base + sx as usize] = dx[base + sx as usize] + src[y * ow + xo];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

/// Source taps of a 2× bilinear upsample along one axis (half-pixel centres).
fn bilinear_taps(dst: usize, src_len: usize) -> (usize, usize, f64) {
    let s = ((dst as f64 + 0.5) / 2.0 - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

/// 2× upsample of the last two axes; `planes` is the product of leading axes.
pub fn upsample2x<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, mode: UpsampleMode) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        match mode {
            UpsampleMode::Nearest => {
                for y in 0..oh {
                    for xo in 0..ow {
                        dst[y * ow + xo] = src[(y / 2) * w + xo / 2];
                    }
                }
            }
            UpsampleMode::Bilinear => {
                for y in 0..oh {
                    let (y0, y1, fy) = bilinear_taps(y, h);
                    let (fy, gy) = (T::of(fy), T::of(1.0 - fy));
                    for xo in 0..ow {
                        let (x0, x1, fx) = bilinear_taps(xo, w);
                        let (fx, gx) = (T::of(fx), T::of(1.0 - fx));
                        dst[y * ow + xo] = gy * (gx * src[y0 * w + x0] + fx * src[y0 * w + x1])
                            + fy * (gx * src[y1 * w + x0] + fx * src[y1 * w + x1]);
                    }
                }
            }
        }
    }
    out
}

pub fn upsample2x_backward<T: Scalar>(g: &[T], planes: usize, h: usize, w: usize, mode: UpsampleMode) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        match mode {
            UpsampleMode::Nearest => {
                for y in 0..oh {
                    for xo in 0..ow {
                        let j = (y / 2) * w + xo / 2;
                        dst[j] = dst[j] + src[y * ow + xo];
                    }
                }
            }
            UpsampleMode::Bilinear => {
                for y in 0..oh {
                    let (y0, y1, fy) = bilinear_taps(y, h);
                    let (fy, gy) = (T::of(fy), T::of(1.0 - fy));
                    for xo in 0..ow {
                        let (x0, x1, fx) = bilinear_taps(xo, w);
                        let (fx, gx) = (T::of(fx), T::of(1.0 - fx));
                        let v = src[y * ow + xo];
                        dst[y0 * w + x0] = dst[y0 * w + x0] + gy * gx * v;
                        dst[y0 * w + x1] = dst[y0 * w + x1] + gy * fx * v;
                        dst[y1 * w + x0] = dst[y1 * w + x0] + fy * gx * v;
                        dst[y1 * w + x1] = dst[y1 * w + x1] + fy * fx * v;
                    }
                }
            }
        }
    }
    dx
}

/// Row-wise softmax over contiguous rows of length `n`.
pub fn softmax_rows<T: Scalar>(x: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total = total + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / total;
        }
    }
    out
}

pub fn log_softmax_rows<T: Scalar>(x: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let total: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + total.ln();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = v - lse;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_via_im2col_matches_direct_loops() {
        let g = ConvGeom { cin: 2, h: 4, w: 5, kh: 3, kw: 3, pad: 1 };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let wt: Vec<f64> = (0..54).map(|i| (i as f64 * 0.91).cos()).collect();
        let cout = 3;
        let mut fast = vec![0.0; cout * 20];
        gemm_acc(&wt, &im2col(&x, g), &mut fast, cout, g.patch(), 20);
        for co in 0..cout {
            for y in 0..4isize {
                for xo in 0..5isize {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for u in 0..3isize {
                            for v in 0..3isize {
                                let (sy, sx) = (y + u - 1, xo + v - 1);
                                if (0..4).contains(&sy) && (0..5).contains(&sx) {
                                    acc += wt[((co * 2 + ci) * 3 + u as usize) * 3 + v as usize]
                                        * x[(ci * 4 + sy as usize) * 5 + sx as usize];
                                }
                            }
                        }
                    }
                    let got = fast[co * 20 + y as usize * 5 + xo as usize];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn nearest_upsample_replicates_blocks() {
        let out = upsample2x(&[1.0f32, 2.0, 3.0, 4.0], 1, 2, 2, UpsampleMode::Nearest);
        assert_eq!(
            out,
            vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn bilinear_upsample_keeps_constants() {
        let out = upsample2x(&[2.5f64; 6], 1, 2, 3, UpsampleMode::Bilinear);
        assert!(out.iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        // <U x, y> == <x, U^T y>
        for mode in [UpsampleMode::Nearest, UpsampleMode::Bilinear] {
            let x: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
            let y: Vec<f64> = (0..48).map(|i| (i as f64 * 1.3).cos()).collect();
            let ux = upsample2x(&x, 1, 3, 4, mode);
            let uty = upsample2x_backward(&y, 1, 3, 4, mode);
            let lhs: f64 = ux.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&uty).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
