//! Per-vertex neural textures and their orthographic rasterization into hex-planes.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bilinear::{BilinearModel, BlendCode, ShapeCode};
use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::geometry::raster::rasterize_screen;
use crate::geometry::{TriMesh, VertexAttributes};
use crate::hexplane::HexPlanes;
use crate::Vec3;

pub const TEXTURE_MAGIC: &[u8; 8] = b"H360TEX\0";
pub const GENERATOR_MAGIC: &[u8; 8] = b"H360GEN\0";

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralTexture {
    vertex_count: usize,
    channels: usize,
    /// Row-major `(N, C)`.
    pub data: Vec<f32>,
}

impl NeuralTexture {
    pub fn new(vertex_count: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || channels > crate::hexplane::MAX_CHANNELS {
            return Err(Error::InvalidArgument(format!("texture channel count {channels} out of range")));
        }
        if data.len() != vertex_count * channels {
            return Err(Error::Dimension(format!(
                "{} texture values for N={vertex_count}, C={channels}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite texture value".into()));
        }
        Ok(Self {
            vertex_count,
            channels,
            data,
        })
    }

    pub fn zeros(vertex_count: usize, channels: usize) -> Result<Self> {
        Self::new(vertex_count, channels, vec![0.0; vertex_count * channels])
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn feature(&self, vertex: usize) -> &[f32] {
        &self.data[vertex * self.channels..(vertex + 1) * self.channels]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(TEXTURE_MAGIC);
        w.u32(self.vertex_count as u32);
        w.u32(self.channels as u32);
        w.f32s(&self.data);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(TEXTURE_MAGIC)?;
        let n = r.u32()? as usize;
        let c = r.u32()? as usize;
        let data = r.f32s(n * c)?;
        r.finish()?;
        Self::new(n, c, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextureCode(pub Vec<f64>);

/// Affine map from a texture code to a neural texture.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureGenerator {
    code_dim: usize,
    vertex_count: usize,
    channels: usize,
    /// Row-major `(N*C, d_t)`.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl TextureGenerator {
    pub fn new(code_dim: usize, vertex_count: usize, channels: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        let rows = vertex_count * channels;
        if weights.len() != rows * code_dim || bias.len() != rows {
            return Err(Error::Dimension(format!(
                "generator payload {} + {} does not match d_t={code_dim}, N={vertex_count}, C={channels}",
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite generator weight".into()));
        }
        Ok(Self {
            code_dim,
            vertex_count,
            channels,
            weights,
            bias,
        })
    }

    pub fn code_dim(&self) -> usize {
        self.code_dim
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn generate(&self, t: &TextureCode) -> Result<NeuralTexture> {
        if t.0.len() != self.code_dim {
            return Err(Error::Dimension(format!(
                "texture code has {} entries, generator expects {}",
                t.0.len(),
                self.code_dim
            )));
        }
        let d = self.code_dim;
        let data = self
            .bias
            .iter()
            .enumerate()
            .map(|(row, &b)| {
                let w = &self.weights[row * d..(row + 1) * d];
                (b as f64 + w.iter().zip(&t.0).map(|(&w, &t)| w as f64 * t).sum::<f64>()) as f32
            })
            .collect();
        NeuralTexture::new(self.vertex_count, self.channels, data)
    }

    /// Principal-component generator of a set of textures: the bias is their mean
    /// and the columns are the leading orthonormal directions. Also returns the
    /// code of each input texture.
    pub fn fit_pca(textures: &[NeuralTexture], code_dim: usize) -> Result<(Self, Vec<TextureCode>)> {
        let first = textures.first().ok_or_else(|| Error::InvalidArgument("no textures to fit".into()))?;
        let (n, c) = (first.vertex_count, first.channels);
        if textures.iter().any(|t| t.vertex_count != n || t.channels != c) {
            return Err(Error::Dimension("textures disagree in shape".into()));
        }
        let rows = n * c;
        let count = textures.len();
        let code_dim = code_dim.min(count).max(1);
        let mut mean = vec![0.0f64; rows];
        for t in textures {
            for (m, &v) in mean.iter_mut().zip(&t.data) {
                *m += v as f64 / count as f64;
            }
        }
        let centered = DMatrix::from_fn(rows, count, |r, k| textures[k].data[r] as f64 - mean[r]);
        let svd = centered.clone().svd(true, false);
        let u = svd.u.as_ref().expect("left singular vectors requested");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));
        let mut basis = DMatrix::<f64>::zeros(rows, code_dim);
        for (col, &src) in order.iter().take(code_dim).enumerate() {
            let mut v = u.column(src).clone_owned();
            let imax = v.iamax();
            if v[imax] < 0.0 {
                v = -v;
            }
            basis.set_column(col, &v);
        }
        let codes = (basis.transpose() * &centered)
            .column_iter()
            .map(|c| TextureCode(c.iter().copied().collect()))
            .collect();
        let mut weights = Vec::with_capacity(rows * code_dim);
        for r in 0..rows {
            for k in 0..code_dim {
                weights.push(basis[(r, k)] as f32);
            }
        }
        let bias = mean.iter().map(|&m| m as f32).collect();
        Ok((Self::new(code_dim, n, c, weights, bias)?, codes))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(GENERATOR_MAGIC);
        w.u32(self.code_dim as u32);
        w.u32(self.vertex_count as u32);
        w.u32(self.channels as u32);
        w.f32s(&self.weights);
        w.f32s(&self.bias);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(GENERATOR_MAGIC)?;
        let d = r.u32()? as usize;
        let n = r.u32()? as usize;
        let c = r.u32()? as usize;
        let weights = r.f32s(n * c * d)?;
        let bias = r.f32s(n * c)?;
        r.finish()?;
        Self::new(d, n, c, weights, bias)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?)
    }
}

/// Geometry of the plane grids shared by every head field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RasterConfig {
    pub resolution: usize,
    pub half_extent: f64,
    pub delta: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            resolution: 128,
            half_extent: 1.0,
            delta: 0.1,
        }
    }
}

/// One covered texel: the winning face's vertices and barycentric weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoveredTexel {
    /// `(plane * R + row) * R + col`.
    pub texel: u32,
    pub vertices: [u32; 3],
    pub bary: [f64; 3],
}

/// Cached orthographic rasterization of a posed mesh onto the six planes.
///
/// Filling planes from features and mapping plane gradients back to vertices
/// are both linear in the features, so the raster depends on geometry only.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneRaster {
    config: RasterConfig,
    vertex_count: usize,
    covered: Vec<CoveredTexel>,
}

impl PlaneRaster {
    pub fn build(vertices: &[Vec3], faces: &[[u32; 3]], config: RasterConfig) -> Result<Self> {
        if config.resolution == 0 || !(config.half_extent > 0.0) {
            return Err(Error::InvalidArgument("bad raster configuration".into()));
        }
        if faces.iter().flatten().any(|&v| v as usize >= vertices.len()) {
            return Err(Error::InvalidArgument("face index out of range".into()));
        }
        let r = config.resolution;
        let h = config.half_extent;
        let scale = r as f64 / (2.0 * h);
        let inside = |p: &Vec3| p.iter().all(|c| c.abs() <= h);
        let axes = [(1usize, 2usize), (0, 2), (0, 1)];
        let mut covered = Vec::new();
        for (axis, &(cu, cv)) in axes.iter().enumerate() {
            let screen: Vec<[f64; 2]> = vertices.iter().map(|p| [(p[cu] + h) * scale, (p[cv] + h) * scale]).collect();
            for (side, sign) in [(0usize, 1.0f64), (1, -1.0)] {
                let plane = 2 * axis + side;
                let frags = rasterize_screen(&screen, faces, r, r, |fi, bary| {
                    let f = faces[fi];
                    let p = vertices[f[0] as usize] * bary[0] + vertices[f[1] as usize] * bary[1] + vertices[f[2] as usize] * bary[2];
                    // The surface nearest the plane wins: smallest -sign * p_a.
                    inside(&p).then_some(-sign * p[axis])
                });
                for (idx, &face) in frags.face.iter().enumerate() {
                    if face == crate::geometry::raster::NO_FACE {
                        continue;
                    }
                    covered.push(CoveredTexel {
                        texel: (plane * r * r + idx) as u32,
                        vertices: faces[face as usize],
                        bary: frags.bary[idx],
                    });
                }
            }
        }
        Ok(Self {
            config,
            vertex_count: vertices.len(),
            covered,
        })
    }

    pub fn config(&self) -> RasterConfig {
        self.config
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn covered(&self) -> &[CoveredTexel] {
        &self.covered
    }

    /// Planes whose covered texels interpolate the vertex features; uncovered texels are zero.
    pub fn fill(&self, texture: &NeuralTexture) -> Result<HexPlanes> {
        if texture.vertex_count() != self.vertex_count {
            return Err(Error::Dimension(format!(
                "texture has {} vertices, mesh has {}",
                texture.vertex_count(),
                self.vertex_count
            )));
        }
        let c = texture.channels();
        let mut planes = HexPlanes::zeros(self.config.resolution, c, self.config.half_extent, self.config.delta)?;
        let data = planes.data_mut();
        for t in &self.covered {
            let base = t.texel as usize * c;
            for ch in 0..c {
                let mut v = 0.0f64;
                for k in 0..3 {
                    v += t.bary[k] * texture.data[t.vertices[k] as usize * c + ch] as f64;
                }
                data[base + ch] = v;
            }
        }
        Ok(planes)
    }

    /// Adjoint of [`PlaneRaster::fill`]: accumulate plane gradients into per-vertex gradients.
    pub fn backproject(&self, plane_grad: &[f64], channels: usize, vertex_grad: &mut [f64]) {
        debug_assert_eq!(vertex_grad.len(), self.vertex_count * channels);
        for t in &self.covered {
            let g = &plane_grad[t.texel as usize * channels..(t.texel as usize + 1) * channels];
            for k in 0..3 {
                let base = t.vertices[k] as usize * channels;
                for ch in 0..channels {
                    vertex_grad[base + ch] += t.bary[k] * g[ch];
                }
            }
        }
    }
}

/// Rasterize a feature-carrying mesh onto the six planes.
pub fn rasterize_to_planes(mesh: &TriMesh, config: RasterConfig) -> Result<HexPlanes> {
    let VertexAttributes::Features { channels, data } = &mesh.attributes else {
        return Err(Error::InvalidArgument("mesh carries no per-vertex features".into()));
    };
    let texture = NeuralTexture::new(mesh.vertices.len(), *channels, data.iter().map(|&v| v as f32).collect())?;
    PlaneRaster::build(&mesh.vertices, &mesh.faces, config)?.fill(&texture)
}

/// Head-branch planes for a shape, expression and texture.
pub fn condition_field(
    model: &BilinearModel,
    s: &ShapeCode,
    b: &BlendCode,
    texture: &NeuralTexture,
    config: RasterConfig,
) -> Result<HexPlanes> {
    let vertices = model.synthesize(s, b)?;
    PlaneRaster::build(&vertices, model.faces(), config)?.fill(texture)
}

/// Random per-vertex features with the first channel biased toward occupancy.
pub fn initial_texture(vertex_count: usize, channels: usize, occupancy: f32, scale: f32, rng: &mut impl Rng) -> Result<NeuralTexture> {
    let mut data = Vec::with_capacity(vertex_count * channels);
    for _ in 0..vertex_count {
        for ch in 0..channels {
            let noise = rng.random_range(-scale..=scale);
            data.push(if ch == 0 { occupancy + noise } else { noise });
        }
    }
    NeuralTexture::new(vertex_count, channels, data)
}
