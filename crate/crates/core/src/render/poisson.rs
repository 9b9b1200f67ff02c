//! Gradient-domain blending by a masked Poisson solve.

use crate::error::{Error, Result};
use crate::imaging::Image;

/// Conjugate-gradient stopping threshold on the residual infinity norm.
pub const POISSON_TOLERANCE: f64 = 1e-9;

/// Solve `lap f = lap src` on the mask with `f = dst` on its boundary.
///
/// Pixels outside the mask are copied from `dst`. The mask may not touch the
/// image border, so every masked pixel has four neighbours.
pub fn poisson_blend(src: &Image, dst: &Image, mask: &[bool]) -> Result<Image> {
    if !src.same_size(dst) || mask.len() != dst.pixel_count() {
        return Err(Error::Dimension("source, destination and mask sizes must match".into()));
    }
    let (w, h) = (dst.width() as usize, dst.height() as usize);
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] && (x == 0 || y == 0 || x + 1 == w || y + 1 == h) {
                return Err(Error::InvalidArgument(format!("mask touches the image border at ({x}, {y})")));
            }
        }
    }
    let unknowns: Vec<usize> = (0..w * h).filter(|&i| mask[i]).collect();
    let mut slot = vec![usize::MAX; w * h];
    for (k, &i) in unknowns.iter().enumerate() {
        slot[i] = k;
    }
    let neighbours = |i: usize| [i - 1, i + 1, i - w, i + w];

    let mut out = dst.clone();
    for ch in 0..3 {
        let s = |i: usize| src.data()[i * 3 + ch] as f64;
        let d = |i: usize| dst.data()[i * 3 + ch] as f64;
        // A f = b with A = 4I - adjacency over unknowns (symmetric positive definite).
        let b: Vec<f64> = unknowns
            .iter()
            .map(|&i| {
                let mut v = 4.0 * s(i);
                for q in neighbours(i) {
                    v -= s(q);
                    if !mask[q] {
                        v += d(q);
                    }
                }
                v
            })
            .collect();
        let apply = |x: &[f64], y: &mut [f64]| {
            for (k, &i) in unknowns.iter().enumerate() {
                let mut v = 4.0 * x[k];
                for q in neighbours(i) {
                    if mask[q] {
                        v -= x[slot[q]];
                    }
                }
                y[k] = v;
            }
        };
        let x = conjugate_gradient(apply, &b, unknowns.iter().map(|&i| d(i)).collect());
        for (k, &i) in unknowns.iter().enumerate() {
            let mut rgb = out.rgb_f64(i);
            rgb[ch] = x[k];
            out.set_rgb(i, rgb);
        }
    }
    Ok(out)
}

fn conjugate_gradient(apply: impl Fn(&[f64], &mut [f64]), b: &[f64], mut x: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    let mut ax = vec![0.0; n];
    apply(&x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut p = r.clone();
    let mut rr: f64 = r.iter().map(|v| v * v).sum();
    let mut ap = vec![0.0; n];
    for _ in 0..(4 * n + 10) {
        if r.iter().all(|v| v.abs() <= POISSON_TOLERANCE) {
            break;
        }
        apply(&p, &mut ap);
        let alpha = rr / p.iter().zip(&ap).map(|(a, b)| a * b).sum::<f64>();
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        let next: f64 = r.iter().map(|v| v * v).sum();
        let beta = next / rr;
        rr = next;
        for k in 0..n {
            p[k] = r[k] + beta * p[k];
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    fn interior_mask(w: usize, h: usize, x0: usize, x1: usize, y0: usize, y1: usize) -> Vec<bool> {
        (0..w * h).map(|i| (x0..x1).contains(&(i % w)) && (y0..y1).contains(&(i / w))).collect()
    }

    #[test]
    fn identical_inputs_are_fixed_points() {
        let img = Image::from_rgb(6, 5, (0..90).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let mask = interior_mask(6, 5, 1, 5, 1, 4);
        let out = poisson_blend(&img, &img, &mask).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_offset_is_removed() {
        let w = 10;
        let dst = Image::from_rgb(w as u32, w as u32, (0..w * w * 3).map(|i| 0.2 + 0.4 * ((i * 13) % 17) as f32 / 17.0).collect()).unwrap();
        let mask = interior_mask(w, w, 2, 8, 3, 7);
        // The offset region covers the mask and its one-pixel boundary ring.
        let region = interior_mask(w, w, 1, 9, 2, 8);
        let mut src = dst.clone();
        for i in 0..w * w {
            if region[i] {
                let p = dst.rgb_f64(i);
                src.set_rgb(i, [p[0] + 0.3, p[1] + 0.3, p[2] + 0.3]);
            }
        }
        let out = poisson_blend(&src, &dst, &mask).unwrap();
        for (a, b) in out.data().iter().zip(dst.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    /// Dense oracle: assemble the full Laplacian system and solve it directly.
    #[test]
    fn matches_dense_solve_on_8x8() {
        let n = 8;
        let src = Image::from_rgb(n as u32, n as u32, (0..n * n * 3).map(|i| ((i / 3) % n) as f32 / 10.0).collect()).unwrap();
        let dst = Image::filled(n as u32, n as u32, [0.3, 0.5, 0.7]);
        let mask = interior_mask(n, n, 1, 7, 1, 7);
        let out = poisson_blend(&src, &dst, &mask).unwrap();
        let idx: Vec<usize> = (0..n * n).filter(|&i| mask[i]).collect();
        for ch in 0..3 {
            let m = idx.len();
            let mut a = DMatrix::<f64>::zeros(m, m);
            let mut b = DVector::<f64>::zeros(m);
            for (r, &i) in idx.iter().enumerate() {
                let (x, y) = ((i % n) as i64, (i / n) as i64);
                a[(r, r)] = 4.0;
                let sv = |q: usize| src.data()[q * 3 + ch] as f64;
                b[r] = 4.0 * sv(i);
                for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let q = ((y + dy) * n as i64 + x + dx) as usize;
                    b[r] -= sv(q);
                    match idx.iter().position(|&k| k == q) {
                        Some(c) => a[(r, c)] = -1.0,
                        None => b[r] += dst.data()[q * 3 + ch] as f64,
                    }
                }
            }
            let sol = a.lu().solve(&b).unwrap();
            for (r, &i) in idx.iter().enumerate() {
                let got = out.data()[i * 3 + ch] as f64;
                assert!((got - sol[r].clamp(0.0, 1.0)).abs() < 1e-5, "{got} vs {}", sol[r]);
            }
        }
    }

    #[test]
    fn border_mask_rejected() {
        let img = Image::filled(4, 4, [0.5; 3]);
        let mut mask = vec![false; 16];
        mask[1] = true;
        assert!(poisson_blend(&img, &img, &mask).is_err());
    }
}
