//! Bilinear morphable mesh model.
//!
//! Training meshes are stacked into a vertex tensor of shape
//! `(3N, identities, expressions)`. Only the identity mode is reduced: the
//! mode-2 unfolding is factored by a truncated SVD, giving an orthonormal
//! identity factor `U` and a core `C = V x2 U^T` of shape `(3N, rank, E)`.
//! Vertices for a shape code `s` and blend code `b` are `C x2 s x3 b`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::geometry::{Camera, TriMesh};
use crate::Vec3;

pub const MODEL_MAGIC: &[u8; 16] = b"H360BILINEAR\0\0\0\0";

/// Gauss-Newton iterations used by [`fit_shape_landmarks`].
pub const LANDMARK_ITERATIONS: usize = 5;
/// Early-exit threshold on the Gauss-Newton step norm.
pub const LANDMARK_STEP_TOL: f64 = 1e-8;

/// Stacked training meshes, `data[(k * I + i) * E + j]` for coordinate row `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexTensor {
    vertex_count: usize,
    identities: usize,
    expressions: usize,
    data: Vec<f64>,
    faces: Vec<[u32; 3]>,
}

impl VertexTensor {
    pub fn new(
        vertex_count: usize,
        identities: usize,
        expressions: usize,
        data: Vec<f64>,
        faces: Vec<[u32; 3]>,
    ) -> Result<Self> {
        if vertex_count == 0 || identities == 0 || expressions == 0 {
            return Err(Error::InvalidArgument("tensor dimensions must be nonzero".into()));
        }
        if data.len() != 3 * vertex_count * identities * expressions {
            return Err(Error::Dimension(format!(
                "{} values for a ({}, {identities}, {expressions}) tensor",
                data.len(),
                3 * vertex_count
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite vertex coordinate".into()));
        }
        if faces.iter().flatten().any(|&v| v as usize >= vertex_count) {
            return Err(Error::InvalidArgument("face index out of range".into()));
        }
        Ok(Self {
            vertex_count,
            identities,
            expressions,
            data,
            faces,
        })
    }

    /// Stack meshes given as `meshes[identity][expression]`. All meshes must share topology.
    pub fn from_meshes(meshes: &[Vec<TriMesh>]) -> Result<Self> {
        let identities = meshes.len();
        let expressions = meshes.first().map_or(0, Vec::len);
        if identities == 0 || expressions == 0 {
            return Err(Error::InvalidArgument("no meshes".into()));
        }
        let reference = &meshes[0][0];
        let n = reference.vertices.len();
        let mut data = vec![0.0; 3 * n * identities * expressions];
        for (i, row) in meshes.iter().enumerate() {
            if row.len() != expressions {
                return Err(Error::Dimension(format!(
                    "identity {i} has {} expressions, expected {expressions}",
                    row.len()
                )));
            }
            for (j, mesh) in row.iter().enumerate() {
                if mesh.vertices.len() != n || mesh.faces != reference.faces {
                    return Err(Error::Dimension(format!("mesh ({i}, {j}) does not share the reference topology")));
                }
                for (v, p) in mesh.vertices.iter().enumerate() {
                    for c in 0..3 {
                        data[((3 * v + c) * identities + i) * expressions + j] = p[c];
                    }
                }
            }
        }
        Self::new(n, identities, expressions, data, reference.faces.clone())
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn identities(&self) -> usize {
        self.identities
    }

    pub fn expressions(&self) -> usize {
        self.expressions
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    #[inline]
    pub fn get(&self, row: usize, identity: usize, expression: usize) -> f64 {
        self.data[(row * self.identities + identity) * self.expressions + expression]
    }

    /// Vertices of training mesh `(identity, expression)`.
    pub fn mesh_vertices(&self, identity: usize, expression: usize) -> Vec<Vec3> {
        (0..self.vertex_count)
            .map(|v| {
                Vec3::new(
                    self.get(3 * v, identity, expression),
                    self.get(3 * v + 1, identity, expression),
                    self.get(3 * v + 2, identity, expression),
                )
            })
            .collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// True when every coordinate lies in `[-bound, bound]`.
    pub fn within_bounds(&self, bound: f64) -> bool {
        self.data.iter().all(|v| v.abs() <= bound)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeCode(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct BlendCode(pub Vec<f64>);

impl BlendCode {
    pub fn neutral(expressions: usize) -> Self {
        Self::unit(expressions, 0)
    }

    pub fn unit(expressions: usize, j: usize) -> Self {
        let mut b = vec![0.0; expressions];
        b[j] = 1.0;
        BlendCode(b)
    }
}

/// Map `E - 1` blendshape activations in `[0, 1]` to basis weights anchored at
/// the neutral base: `b = e0 + sum_j a_j (e_{j+1} - e0)`.
///
/// The weights always sum to one; under co-activation (`sum a > 1`) the
/// neutral weight `b_0` turns negative.
pub fn blend_from_activations(activations: &[f64], expressions: usize) -> Result<BlendCode> {
    if expressions == 0 || activations.len() != expressions - 1 {
        return Err(Error::Dimension(format!(
            "{} activations for {expressions} expression bases",
            activations.len()
        )));
    }
    if let Some((k, a)) = activations.iter().enumerate().find(|(_, a)| !(0.0..=1.0).contains(*a)) {
        return Err(Error::InvalidArgument(format!("activation {k} = {a} outside [0, 1]")));
    }
    let mut b = vec![0.0; expressions];
    b[0] = 1.0 - activations.iter().sum::<f64>();
    b[1..].copy_from_slice(activations);
    Ok(BlendCode(b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BilinearModel {
    vertex_count: usize,
    identities: usize,
    expressions: usize,
    rank: usize,
    /// `(3N, rank, E)` row-major.
    core: Vec<f64>,
    /// `(identities, rank)` row-major, orthonormal columns.
    identity_factor: Vec<f64>,
    faces: Vec<[u32; 3]>,
}

impl BilinearModel {
    /// Truncated SVD of the identity-mode unfolding. Column signs are fixed so
    /// that each column's largest-magnitude entry is positive.
    pub fn build(tensor: &VertexTensor, rank: usize) -> Result<Self> {
        let (n, ids, ex) = (tensor.vertex_count, tensor.identities, tensor.expressions);
        if rank == 0 || rank > ids {
            return Err(Error::RankOutOfRange { rank, max: ids });
        }
        if tensor.frobenius_norm() == 0.0 {
            return Err(Error::Degenerate("vertex tensor is all zeros".into()));
        }
        // Transposed unfolding: rows (k, j), columns identities.
        let rows = 3 * n * ex;
        let mut xt = DMatrix::<f64>::zeros(rows, ids);
        for k in 0..3 * n {
            for i in 0..ids {
                for j in 0..ex {
                    xt[(k * ex + j, i)] = tensor.get(k, i, j);
                }
            }
        }
        let svd = xt.svd(false, true);
        let v_t = svd.v_t.as_ref().expect("right singular vectors requested");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));

        let mut factor = vec![0.0; ids * rank];
        for (col, &src) in order.iter().take(rank).enumerate() {
            let mut column: Vec<f64> = (0..ids).map(|i| v_t[(src, i)]).collect();
            let mut best = 0;
            for i in 1..ids {
                if column[i].abs() > column[best].abs() {
                    best = i;
                }
            }
            if column[best] < 0.0 {
                column.iter_mut().for_each(|v| *v = -*v);
            }
            for i in 0..ids {
                factor[i * rank + col] = column[i];
            }
        }

        let mut core = vec![0.0; 3 * n * rank * ex];
        for k in 0..3 * n {
            for a in 0..rank {
                for j in 0..ex {
                    let mut acc = 0.0;
                    for i in 0..ids {
                        acc += factor[i * rank + a] * tensor.get(k, i, j);
                    }
                    core[(k * rank + a) * ex + j] = acc;
                }
            }
        }
        Ok(Self {
            vertex_count: n,
            identities: ids,
            expressions: ex,
            rank,
            core,
            identity_factor: factor,
            faces: tensor.faces.clone(),
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn identities(&self) -> usize {
        self.identities
    }

    pub fn expressions(&self) -> usize {
        self.expressions
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn core(&self) -> &[f64] {
        &self.core
    }

    /// Core tensor shape `(3N, rank, E)`.
    pub fn core_shape(&self) -> (usize, usize, usize) {
        (3 * self.vertex_count, self.rank, self.expressions)
    }

    pub fn identity_factor(&self) -> &[f64] {
        &self.identity_factor
    }

    /// Row `i` of the identity factor: the shape code of training identity `i`.
    pub fn identity_code(&self, identity: usize) -> ShapeCode {
        ShapeCode(self.identity_factor[identity * self.rank..(identity + 1) * self.rank].to_vec())
    }

    /// Mean of the identity factor rows.
    pub fn mean_code(&self) -> ShapeCode {
        let mut s = vec![0.0; self.rank];
        for i in 0..self.identities {
            for a in 0..self.rank {
                s[a] += self.identity_factor[i * self.rank + a];
            }
        }
        s.iter_mut().for_each(|v| *v /= self.identities as f64);
        ShapeCode(s)
    }

    fn check_codes(&self, s: &ShapeCode, b: &BlendCode) -> Result<()> {
        if s.0.len() != self.rank {
            return Err(Error::Dimension(format!("shape code has {} entries, model rank is {}", s.0.len(), self.rank)));
        }
        if b.0.len() != self.expressions {
            return Err(Error::Dimension(format!(
                "blend code has {} entries, model has {} expressions",
                b.0.len(),
                self.expressions
            )));
        }
        if s.0.iter().chain(&b.0).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite code entry".into()));
        }
        Ok(())
    }

    /// `V = C x2 s x3 b`, reshaped to one point per vertex.
    pub fn synthesize(&self, s: &ShapeCode, b: &BlendCode) -> Result<Vec<Vec3>> {
        self.check_codes(s, b)?;
        let (r, e) = (self.rank, self.expressions);
        let mut w = vec![0.0; r * e];
        for a in 0..r {
            for j in 0..e {
                w[a * e + j] = s.0[a] * b.0[j];
            }
        }
        let coord = |k: usize| -> f64 {
            let block = &self.core[k * r * e..(k + 1) * r * e];
            block.iter().zip(&w).map(|(c, w)| c * w).sum()
        };
        Ok((0..self.vertex_count)
            .map(|v| Vec3::new(coord(3 * v), coord(3 * v + 1), coord(3 * v + 2)))
            .collect())
    }

    pub fn synthesize_mesh(&self, s: &ShapeCode, b: &BlendCode) -> Result<TriMesh> {
        Ok(TriMesh {
            vertices: self.synthesize(s, b)?,
            faces: self.faces.clone(),
            attributes: Default::default(),
        })
    }

    /// `C x3 b` restricted to the rows of `vertex`: a 3 x rank matrix `M` with `V[vertex] = M s`.
    fn vertex_basis(&self, vertex: usize, b: &BlendCode) -> nalgebra::Matrix3xX<f64> {
        let (r, e) = (self.rank, self.expressions);
        let mut m = nalgebra::Matrix3xX::zeros(r);
        for c in 0..3 {
            let k = 3 * vertex + c;
            for a in 0..r {
                let base = (k * r + a) * e;
                m[(c, a)] = (0..e).map(|j| self.core[base + j] * b.0[j]).sum();
            }
        }
        m
    }

    /// Relative Frobenius error of reconstructing `tensor` from this model.
    pub fn reconstruction_error(&self, tensor: &VertexTensor) -> Result<f64> {
        if tensor.vertex_count != self.vertex_count
            || tensor.identities != self.identities
            || tensor.expressions != self.expressions
        {
            return Err(Error::Dimension("tensor does not match the model".into()));
        }
        let (r, e, ids) = (self.rank, self.expressions, self.identities);
        let mut err = 0.0;
        for k in 0..3 * self.vertex_count {
            for i in 0..ids {
                for j in 0..e {
                    let mut rec = 0.0;
                    for a in 0..r {
                        rec += self.identity_factor[i * r + a] * self.core[(k * r + a) * e + j];
                    }
                    let d = rec - tensor.get(k, i, j);
                    err += d * d;
                }
            }
        }
        Ok(err.sqrt() / tensor.frobenius_norm())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MODEL_MAGIC);
        for v in [self.vertex_count, self.identities, self.expressions, self.rank] {
            w.u32(v as u32);
        }
        w.f64s(&self.core);
        w.f64s(&self.identity_factor);
        let faces: Vec<f64> = self.faces.iter().flatten().map(|&v| v as f64).collect();
        w.f64s(&faces);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MODEL_MAGIC)?;
        let n = r.u32()? as usize;
        let ids = r.u32()? as usize;
        let ex = r.u32()? as usize;
        let rank = r.u32()? as usize;
        if n == 0 || ids == 0 || ex == 0 || rank == 0 || rank > ids {
            return Err(Error::Format(format!("bad header N={n} I={ids} E={ex} r={rank}")));
        }
        let core = r.f64s(3 * n * rank * ex)?;
        let identity_factor = r.f64s(ids * rank)?;
        if r.remaining() % 24 != 0 {
            return Err(Error::Format("face payload is not a whole number of triangles".into()));
        }
        let raw = r.f64s(r.remaining() / 8)?;
        let mut faces = Vec::with_capacity(raw.len() / 3);
        for t in raw.chunks_exact(3) {
            let mut f = [0u32; 3];
            for (dst, &v) in f.iter_mut().zip(t) {
                if v < 0.0 || v.fract() != 0.0 || v as usize >= n {
                    return Err(Error::Format(format!("bad face index {v}")));
                }
                *dst = v as u32;
            }
            faces.push(f);
        }
        r.finish()?;
        Ok(Self {
            vertex_count: n,
            identities: ids,
            expressions: ex,
            rank,
            core,
            identity_factor,
            faces,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub vertex: usize,
    pub pixel: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkFit {
    pub shape: ShapeCode,
    /// Root-mean-square reprojection error in pixels at the returned code.
    pub rms_px: f64,
    pub iterations: usize,
}

fn landmark_residuals(
    model: &BilinearModel,
    bases: &[nalgebra::Matrix3xX<f64>],
    landmarks: &[Landmark],
    camera: &Camera,
    s: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let r = model.rank;
    let mut res = DVector::zeros(2 * landmarks.len());
    let mut jac = DMatrix::zeros(2 * landmarks.len(), r);
    let k = camera.intrinsics;
    for (l, (lm, m)) in landmarks.iter().zip(bases).enumerate() {
        let world = m * s;
        let c = camera.world_to_camera(&world);
        if !(c.z > crate::geometry::camera::MIN_DEPTH) {
            return Err(Error::BehindCamera(c.z));
        }
        res[2 * l] = k.fx * c.x / c.z + k.cx - lm.pixel[0];
        res[2 * l + 1] = k.fy * c.y / c.z + k.cy - lm.pixel[1];
        let dproj = nalgebra::Matrix2x3::new(
            k.fx / c.z,
            0.0,
            -k.fx * c.x / (c.z * c.z),
            0.0,
            k.fy / c.z,
            -k.fy * c.y / (c.z * c.z),
        );
        let j = dproj * camera.rotation * m;
        jac.view_mut((2 * l, 0), (2, r)).copy_from(&j);
    }
    Ok((res, jac))
}

/// Damped Gauss-Newton fit of a shape code to 2D landmarks under a fixed blend code.
///
/// Minimises `sum |project(V(s, b)[k]) - p_k|^2 + ridge |s|^2`, starting from the
/// mean identity code and re-linearising the projection every iteration.
pub fn fit_shape_landmarks(
    model: &BilinearModel,
    landmarks: &[Landmark],
    camera: &Camera,
    blend: &BlendCode,
    ridge: f64,
) -> Result<LandmarkFit> {
    if landmarks.is_empty() {
        return Err(Error::InvalidArgument("at least one landmark is required".into()));
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::InvalidArgument(format!("ridge must be finite and nonnegative, got {ridge}")));
    }
    if blend.0.len() != model.expressions {
        return Err(Error::Dimension("blend code length".into()));
    }
    if let Some(bad) = landmarks.iter().find(|l| l.vertex >= model.vertex_count) {
        return Err(Error::InvalidArgument(format!("landmark vertex {} out of range", bad.vertex)));
    }
    let r = model.rank;
    let bases: Vec<_> = landmarks.iter().map(|l| model.vertex_basis(l.vertex, blend)).collect();
    let mut s = DVector::from_vec(model.mean_code().0);
    let mut iterations = 0;
    for _ in 0..LANDMARK_ITERATIONS {
        let (res, jac) = landmark_residuals(model, &bases, landmarks, camera, &s)?;
        let jt = jac.transpose();
        let mut normal = &jt * &jac;
        for a in 0..r {
            normal[(a, a)] += ridge;
        }
        let rhs = -(&jt * &res + &s * ridge);
        if ridge == 0.0 {
            let eig = normal.clone().symmetric_eigenvalues();
            let max = eig.max();
            if !(eig.min() > max * 1e-12) {
                return Err(Error::SingularNormalMatrix);
            }
        }
        let chol = normal.cholesky().ok_or(Error::SingularNormalMatrix)?;
        let step = chol.solve(&rhs);
        s += &step;
        iterations += 1;
        if step.norm() < LANDMARK_STEP_TOL {
            break;
        }
    }
    let (res, _) = landmark_residuals(model, &bases, landmarks, camera, &s)?;
    let rms_px = (res.norm_squared() / landmarks.len() as f64).sqrt();
    Ok(LandmarkFit {
        shape: ShapeCode(s.iter().copied().collect()),
        rms_px,
        iterations,
    })
}
