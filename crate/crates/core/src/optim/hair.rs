//! Hairstyle matching by silhouette descriptors, and hair swapping.

use serde::Serialize;

use crate::checkpoint::{Checkpoint, Head};
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::hexplane::HexPlanes;
use crate::render::{render_image, Branch, RenderConfig, Scene};

/// Side of the square descriptor grid.
pub const DESCRIPTOR_SIZE: usize = 16;

/// One observed hair silhouette and the camera it was seen from.
#[derive(Debug, Clone, Copy)]
pub struct HairQuery<'a> {
    pub mask: &'a [bool],
    pub camera: &'a Camera,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HairMatch {
    pub hairstyle: usize,
    /// Mean-L1 descriptor distance to every library style.
    pub distances: Vec<f64>,
}

/// Box-average a `w x h` map onto the descriptor grid.
pub fn downsample(values: &[f64], w: usize, h: usize) -> Vec<f64> {
    let n = DESCRIPTOR_SIZE;
    let mut sum = vec![0.0; n * n];
    let mut count = vec![0usize; n * n];
    for y in 0..h {
        let cy = y * n / h;
        for x in 0..w {
            let cell = cy * n + x * n / w;
            sum[cell] += values[y * w + x];
            count[cell] += 1;
        }
    }
    sum.iter().zip(&count).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect()
}

/// Hair-only alpha descriptor of library style `style` seen from `camera`,
/// with the head planes (if given) occluding the hair.
pub fn style_descriptor(ck: &Checkpoint, style: usize, camera: &Camera, occluder: Option<&HexPlanes>, cfg: &RenderConfig) -> Result<Vec<f64>> {
    let (w, h) = (camera.width() as usize, camera.height() as usize);
    let Some(field) = ck.hair_field(style)? else {
        return Ok(vec![0.0; DESCRIPTOR_SIZE * DESCRIPTOR_SIZE]);
    };
    let hair = Branch::of(field);
    let alpha: Vec<f64> = match occluder {
        Some(planes) => {
            let head = Branch::new(planes, &ck.decoder)?;
            render_image(&Scene::with_hair(head, Some(hair)), camera, cfg)?.hair_alpha.iter().map(|&a| a as f64).collect()
        }
        None => render_image(field, camera, cfg)?.image.alpha().expect("renders carry alpha").iter().map(|&a| a as f64).collect(),
    };
    Ok(downsample(&alpha, w, h))
}

/// Library style whose silhouettes are closest in mean L1; ties go to the lowest id.
pub fn match_hairstyle(ck: &Checkpoint, queries: &[HairQuery], occluder: Option<&HexPlanes>, cfg: &RenderConfig) -> Result<HairMatch> {
    if ck.hairstyle_count() == 0 {
        return Err(Error::InvalidArgument("hair library is empty".into()));
    }
    if queries.is_empty() {
        return Err(Error::InvalidArgument("hair matching needs at least one silhouette".into()));
    }
    let mut observed = Vec::with_capacity(queries.len());
    for q in queries {
        let (w, h) = (q.camera.width() as usize, q.camera.height() as usize);
        if q.mask.len() != w * h {
            return Err(Error::Dimension(format!("hair mask has {} pixels, camera has {}", q.mask.len(), w * h)));
        }
        let m: Vec<f64> = q.mask.iter().map(|&b| b as u8 as f64).collect();
        observed.push(downsample(&m, w, h));
    }
    let mut distances = Vec::with_capacity(ck.hairstyle_count());
    for style in 0..ck.hairstyle_count() {
        let mut total = 0.0;
        let mut cells = 0;
        for (q, obs) in queries.iter().zip(&observed) {
            let d = style_descriptor(ck, style, q.camera, occluder, cfg)?;
            total += d.iter().zip(obs).map(|(a, b)| (a - b).abs()).sum::<f64>();
            cells += d.len();
        }
        distances.push(total / cells as f64);
    }
    let mut best = 0;
    for (i, &d) in distances.iter().enumerate() {
        if d < distances[best] {
            best = i;
        }
    }
    Ok(HairMatch { hairstyle: best, distances })
}

/// Replace the hairstyle only; shape and texture are untouched.
pub fn swap_hair(ck: &Checkpoint, head: &Head, hairstyle: usize) -> Result<Head> {
    ck.check_hairstyle(hairstyle)?;
    Ok(Head {
        hairstyle,
        ..head.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_averages_blocks() {
        let w = 32;
        let v: Vec<f64> = (0..w * w).map(|i| if (i % w) < 2 { 1.0 } else { 0.0 }).collect();
        let d = downsample(&v, w, w);
        assert_eq!(d.len(), 256);
        assert!(d.iter().enumerate().all(|(i, &x)| if i % 16 == 0 { x == 1.0 } else { x == 0.0 }));
    }

    #[test]
    fn downsample_uneven_sizes_keeps_mean() {
        let (w, h) = (37, 23);
        let v = vec![0.25; w * h];
        assert!(downsample(&v, w, h).iter().all(|&x| (x - 0.25).abs() < 1e-15));
    }
}
