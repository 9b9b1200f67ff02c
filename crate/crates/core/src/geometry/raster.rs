//! Scanline-free triangle rasterizer with a z-buffer.
//!
//! Coverage uses pixel-centre inclusion with the top-left tie rule, so two
//! triangles sharing an edge never both claim a pixel and no pixel on a shared
//! edge is dropped. Back faces are not culled.

use crate::error::Result;
use crate::geometry::camera::Camera;
use crate::geometry::mesh::{TriMesh, VertexAttributes};
use crate::imaging::Image;
use crate::Vec3;

pub const NO_FACE: u32 = u32::MAX;

/// Per-pixel winning face and its screen-space barycentric weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Fragments {
    pub width: usize,
    pub height: usize,
    pub face: Vec<u32>,
    /// Barycentric weights in the face's own vertex order.
    pub bary: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
}

impl Fragments {
    fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            face: vec![NO_FACE; n],
            bary: vec![[0.0; 3]; n],
            depth: vec![f64::INFINITY; n],
        }
    }

    pub fn covered(&self, idx: usize) -> bool {
        self.face[idx] != NO_FACE
    }

    pub fn coverage(&self) -> Vec<bool> {
        self.face.iter().map(|&f| f != NO_FACE).collect()
    }

    pub fn covered_count(&self) -> usize {
        self.face.iter().filter(|&&f| f != NO_FACE).count()
    }
}

#[inline]
fn edge(u: [f64; 2], v: [f64; 2], p: [f64; 2]) -> f64 {
    (v[0] - u[0]) * (p[1] - u[1]) - (v[1] - u[1]) * (p[0] - u[0])
}

#[inline]
fn is_top_left(u: [f64; 2], v: [f64; 2]) -> bool {
    let dx = v[0] - u[0];
    let dy = v[1] - u[1];
    (dy == 0.0 && dx > 0.0) || dy < 0.0
}

#[inline]
fn inside(w: f64, top_left: bool) -> bool {
    w > 0.0 || (w == 0.0 && top_left)
}

/// Rasterize triangles given in screen space (`x`, `y` in pixels, y down).
///
/// `depth_of(face, bary)` returns the depth of a fragment, or `None` to
/// discard it; the smallest depth wins and ties keep the earlier face.
pub(crate) fn rasterize_screen<D>(
    screen: &[[f64; 2]],
    faces: &[[u32; 3]],
    width: usize,
    height: usize,
    mut depth_of: D,
) -> Fragments
where
    D: FnMut(usize, [f64; 3]) -> Option<f64>,
{
    let mut out = Fragments::empty(width, height);
    for (fi, f) in faces.iter().enumerate() {
        let p = f.map(|i| screen[i as usize]);
        if p.iter().any(|q| !(q[0].is_finite() && q[1].is_finite())) {
            continue;
        }
        let area = edge(p[0], p[1], p[2]);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        // Orient counter-clockwise in y-down screen space; `perm` maps back.
        let (a, b, c, perm) = if area > 0.0 {
            (p[0], p[1], p[2], [0usize, 1, 2])
        } else {
            (p[0], p[2], p[1], [0usize, 2, 1])
        };
        let area = area.abs();
        let tl_bc = is_top_left(b, c);
        let tl_ca = is_top_left(c, a);
        let tl_ab = is_top_left(a, b);

        let min_x = a[0].min(b[0]).min(c[0]);
        let max_x = a[0].max(b[0]).max(c[0]);
        let min_y = a[1].min(b[1]).min(c[1]);
        let max_y = a[1].max(b[1]).max(c[1]);
        let x0 = ((min_x - 0.5).ceil().max(0.0)) as i64;
        let x1 = ((max_x - 0.5).floor()).min(width as f64 - 1.0) as i64;
        let y0 = ((min_y - 0.5).ceil().max(0.0)) as i64;
        let y1 = ((max_y - 0.5).floor()).min(height as f64 - 1.0) as i64;
        if x1 < x0 || y1 < y0 {
            continue;
        }
        for y in y0..=y1 {
            let py = y as f64 + 0.5;
            for x in x0..=x1 {
                let q = [x as f64 + 0.5, py];
                let w0 = edge(b, c, q);
                let w1 = edge(c, a, q);
                let w2 = edge(a, b, q);
                if !(inside(w0, tl_bc) && inside(w1, tl_ca) && inside(w2, tl_ab)) {
                    continue;
                }
                let oriented = [w0 / area, w1 / area, w2 / area];
                let mut bary = [0.0; 3];
                for k in 0..3 {
                    bary[perm[k]] = oriented[k];
                }
                let Some(d) = depth_of(fi, bary) else {
                    continue;
                };
                let idx = y as usize * width + x as usize;
                if d < out.depth[idx] {
                    out.depth[idx] = d;
                    out.face[idx] = fi as u32;
                    out.bary[idx] = bary;
                }
            }
        }
    }
    out
}

/// Fixed directional light plus ambient term, evaluated per vertex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lighting {
    /// Unit vector pointing towards the light.
    pub direction: Vec3,
    pub ambient: f64,
}

impl Default for Lighting {
    fn default() -> Self {
        Self {
            direction: Vec3::new(0.3, 0.6, 0.75).normalize(),
            ambient: 0.3,
        }
    }
}

impl Lighting {
    pub fn shade(&self, normal: &Vec3) -> f64 {
        self.ambient + (1.0 - self.ambient) * normal.dot(&self.direction).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterOptions {
    pub clear_color: [f64; 3],
    pub clear_feature: f64,
    pub lighting: Option<Lighting>,
}

impl Default for RasterOptions {
    fn default() -> Self {
        Self {
            clear_color: [1.0, 1.0, 1.0],
            clear_feature: 0.0,
            lighting: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RasterOutput {
    pub fragments: Fragments,
    /// Present when the mesh carries vertex colours.
    pub color: Option<Image>,
    /// Present when the mesh carries vertex features: `(channels, W*H*channels values)`.
    pub features: Option<(usize, Vec<f64>)>,
}

impl RasterOutput {
    pub fn coverage(&self) -> Vec<bool> {
        self.fragments.coverage()
    }

    pub fn depth(&self) -> &[f64] {
        &self.fragments.depth
    }
}

/// Perspective rasterization of `mesh` into `camera`'s image with
/// perspective-correct attribute interpolation. Faces with a vertex at or
/// behind the camera plane are skipped.
pub fn rasterize_mesh(mesh: &TriMesh, camera: &Camera, opts: &RasterOptions) -> Result<RasterOutput> {
    mesh.validate()?;
    let width = camera.width() as usize;
    let height = camera.height() as usize;
    let k = camera.intrinsics;
    let cam_pts: Vec<Vec3> = mesh.vertices.iter().map(|v| camera.world_to_camera(v)).collect();
    let screen: Vec<[f64; 2]> = cam_pts
        .iter()
        .map(|c| {
            if c.z > 1e-9 {
                [k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy]
            } else {
                [f64::NAN, f64::NAN]
            }
        })
        .collect();
    let inv_z: Vec<f64> = cam_pts.iter().map(|c| 1.0 / c.z).collect();
    let faces = &mesh.faces;
    let frags = rasterize_screen(&screen, faces, width, height, |fi, b| {
        let f = faces[fi];
        let iz = b[0] * inv_z[f[0] as usize] + b[1] * inv_z[f[1] as usize] + b[2] * inv_z[f[2] as usize];
        Some(1.0 / iz)
    });

    // Perspective-correct weights for a covered pixel.
    let weights = |idx: usize| -> ([usize; 3], [f64; 3]) {
        let f = faces[frags.face[idx] as usize].map(|i| i as usize);
        let b = frags.bary[idx];
        let mut w = [b[0] * inv_z[f[0]], b[1] * inv_z[f[1]], b[2] * inv_z[f[2]]];
        let s = w[0] + w[1] + w[2];
        for v in &mut w {
            *v /= s;
        }
        (f, w)
    };

    let color = match &mesh.attributes {
        VertexAttributes::Colors(colors) => {
            let shaded: Vec<[f64; 3]> = match &opts.lighting {
                Some(light) => {
                    let normals = mesh.vertex_normals();
                    colors
                        .iter()
                        .zip(&normals)
                        .map(|(c, n)| {
                            let s = light.shade(n);
                            [c[0] * s, c[1] * s, c[2] * s]
                        })
                        .collect()
                }
                None => colors.clone(),
            };
            let mut img = Image::filled(width as u32, height as u32, opts.clear_color);
            for idx in 0..width * height {
                if !frags.covered(idx) {
                    continue;
                }
                let (f, w) = weights(idx);
                let mut rgb = [0.0; 3];
                for k in 0..3 {
                    for ch in 0..3 {
                        rgb[ch] += w[k] * shaded[f[k]][ch];
                    }
                }
                img.set_rgb(idx, rgb);
            }
            Some(img)
        }
        _ => None,
    };

    let features = match &mesh.attributes {
        VertexAttributes::Features { channels, data } => {
            let c = *channels;
            let mut out = vec![opts.clear_feature; width * height * c];
            for idx in 0..width * height {
                if !frags.covered(idx) {
                    continue;
                }
                let (f, w) = weights(idx);
                let dst = &mut out[idx * c..(idx + 1) * c];
                dst.iter_mut().for_each(|v| *v = 0.0);
                for k in 0..3 {
                    let src = &data[f[k] * c..(f[k] + 1) * c];
                    for ch in 0..c {
                        dst[ch] += w[k] * src[ch];
                    }
                }
            }
            Some((c, out))
        }
        _ => None,
    };

    Ok(RasterOutput {
        fragments: frags,
        color,
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::camera::Intrinsics;
    use nalgebra::Matrix3;

    fn ortho_cam(size: u32) -> Camera {
        // Identity pose; scene placed at z = 1 so the pinhole acts like a scaled orthographic view.
        let k = Intrinsics {
            fx: size as f64 / 2.0,
            fy: size as f64 / 2.0,
            cx: size as f64 / 2.0,
            cy: size as f64 / 2.0,
            width: size,
            height: size,
        };
        Camera::new(k, Matrix3::identity(), Vec3::zeros()).unwrap()
    }

    fn tri(z: f64, color: [f64; 3], verts: [[f64; 2]; 3]) -> TriMesh {
        TriMesh::new(
            verts.iter().map(|v| Vec3::new(v[0] * z, v[1] * z, z)).collect(),
            vec![[0, 1, 2]],
        )
        .unwrap()
        .with_colors(vec![color; 3])
        .unwrap()
    }

    #[test]
    fn full_screen_constant_triangle() {
        let cam = ortho_cam(16);
        let mesh = tri(1.0, [0.2, 0.4, 0.6], [[-3.0, -3.0], [3.0, -3.0], [0.0, 6.0]]);
        let out = rasterize_mesh(&mesh, &cam, &RasterOptions::default()).unwrap();
        let img = out.color.unwrap();
        assert_eq!(out.fragments.covered_count(), 256);
        for idx in 0..256 {
            let p = img.rgb(idx);
            assert!((p[0] - 0.2).abs() < 1e-6 && (p[1] - 0.4).abs() < 1e-6 && (p[2] - 0.6).abs() < 1e-6);
        }
    }

    #[test]
    fn nearer_triangle_wins() {
        let cam = ortho_cam(16);
        let big = [[-3.0, -3.0], [3.0, -3.0], [0.0, 6.0]];
        let far = tri(3.0, [1.0, 0.0, 0.0], big);
        let near = tri(2.0, [0.0, 0.0, 1.0], big);
        for mesh in [far.merged(&near).unwrap(), near.merged(&far).unwrap()] {
            let out = rasterize_mesh(&mesh, &cam, &RasterOptions::default()).unwrap();
            let img = out.color.unwrap();
            for idx in 0..256 {
                assert_eq!(img.rgb(idx), [0.0, 0.0, 1.0]);
                assert!((out.fragments.depth[idx] - 2.0).abs() < 1e-9);
            }
        }
    }

    /// Brute-force oracle: explicit point-in-triangle test against every pixel
    /// centre with barycentrics from a direct 2x2 solve.
    #[test]
    fn tiny_image_matches_scanline_oracle() {
        let cam = ortho_cam(4);
        let verts = [[-0.8, -0.9], [0.9, -0.2], [-0.3, 0.85]];
        let colors = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let mesh = TriMesh::new(
            verts.iter().map(|v| Vec3::new(v[0], v[1], 1.0)).collect(),
            vec![[0, 1, 2]],
        )
        .unwrap()
        .with_colors(colors.to_vec())
        .unwrap();
        let out = rasterize_mesh(&mesh, &cam, &RasterOptions::default()).unwrap();
        let img = out.color.unwrap();
        let s: Vec<[f64; 2]> = verts.iter().map(|v| [v[0] * 2.0 + 2.0, v[1] * 2.0 + 2.0]).collect();
        for y in 0..4 {
            for x in 0..4 {
                let p = [x as f64 + 0.5, y as f64 + 0.5];
                let m = nalgebra::Matrix2::new(s[1][0] - s[0][0], s[2][0] - s[0][0], s[1][1] - s[0][1], s[2][1] - s[0][1]);
                let rhs = nalgebra::Vector2::new(p[0] - s[0][0], p[1] - s[0][1]);
                let sol = m.try_inverse().unwrap() * rhs;
                let l = [1.0 - sol[0] - sol[1], sol[0], sol[1]];
                let idx = y * 4 + x;
                let inside = l.iter().all(|&v| v > 1e-12);
                assert_eq!(out.fragments.covered(idx), inside, "pixel {x},{y}");
                if inside {
                    let px = img.rgb(idx);
                    for ch in 0..3 {
                        let expect: f64 = (0..3).map(|k| l[k] * colors[k][ch]).sum();
                        assert!((px[ch] as f64 - expect).abs() < 1e-6);
                    }
                } else {
                    assert_eq!(img.rgb(idx), [1.0, 1.0, 1.0]);
                }
            }
        }
    }

    #[test]
    fn shared_edge_pixels_claimed_once() {
        // A quad split along a diagonal that passes exactly through pixel centres.
        let screen = vec![[0.0, 0.0], [8.0, 0.0], [8.0, 8.0], [0.0, 8.0]];
        let faces = vec![[0, 1, 2], [0, 2, 3]];
        let mut hits = vec![0u32; 64];
        for f in &faces {
            let fr = rasterize_screen(&screen, std::slice::from_ref(f), 8, 8, |_, _| Some(0.0));
            for (i, h) in hits.iter_mut().enumerate() {
                *h += fr.covered(i) as u32;
            }
        }
        assert!(hits.iter().all(|&h| h == 1), "{hits:?}");
    }

    #[test]
    fn coverage_invariant_under_vertex_permutation() {
        let screen = vec![[0.3, 0.2], [7.1, 2.5], [2.5, 7.5]];
        let base = rasterize_screen(&screen, &[[0, 1, 2]], 8, 8, |_, _| Some(0.0));
        for perm in [[1, 2, 0], [2, 0, 1], [0, 2, 1], [2, 1, 0], [1, 0, 2]] {
            let fr = rasterize_screen(&screen, &[perm], 8, 8, |_, _| Some(0.0));
            assert_eq!(fr.coverage(), base.coverage());
        }
    }

    #[test]
    fn empty_mesh_gives_clear_image() {
        let cam = ortho_cam(8);
        let mesh = TriMesh::default().with_colors(vec![]).unwrap();
        let out = rasterize_mesh(&mesh, &cam, &RasterOptions::default()).unwrap();
        assert_eq!(out.fragments.covered_count(), 0);
        assert!(out.color.unwrap().data().iter().all(|&v| v == 1.0));
    }
}
