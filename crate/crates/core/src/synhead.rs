//! Procedural toy-head dataset: identity meshes with localized expression
//! rigs, parametric hair caps, multi-view renders and the on-disk layout.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bilinear::VertexTensor;
use crate::binio;
use crate::error::{Error, Result};
use crate::geometry::camera::{cameras_to_json, load_cameras};
use crate::geometry::mesh::{icosphere, load_obj, obj_to_string};
use crate::geometry::{rasterize_mesh, Camera, CameraRig, Intrinsics, Lighting, RasterOptions, TriMesh};
use crate::imaging::{mask_from_png_bytes, mask_to_png_bytes, Image};
use crate::Vec3;

pub const FOV_DEG: f64 = 30.0;
pub const RIG_RADIUS: f64 = 2.7;
pub const EXPRESSION_NAMES: [&str; 6] = ["neutral", "jaw_open", "smile", "brow_raise", "eye_close", "cheek_puff"];
pub const HAIRSTYLE_NAMES: [&str; 4] = ["bald", "crop", "bob", "long"];
pub const BALD: usize = 0;
/// Samples per pixel side when rendering ground truth.
pub const SUPERSAMPLE: u32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub seed: u64,
    pub identities: usize,
    pub expressions: usize,
    pub hairstyles: usize,
    pub yaw_count: usize,
    pub pitch_angles: Vec<f64>,
    pub image_size: u32,
    pub mesh_level: u32,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            identities: 8,
            expressions: 6,
            hairstyles: 4,
            yaw_count: 24,
            pitch_angles: vec![0.0],
            image_size: 64,
            mesh_level: 4,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.identities == 0 || self.yaw_count == 0 || self.pitch_angles.is_empty() || self.image_size == 0 {
            return bad("identity, camera and image counts must all be at least 1".into());
        }
        if !(1..=EXPRESSION_NAMES.len()).contains(&self.expressions) {
            return bad(format!("expressions must be in 1..={}", EXPRESSION_NAMES.len()));
        }
        if !(1..=HAIRSTYLE_NAMES.len()).contains(&self.hairstyles) {
            return bad(format!("hairstyles must be in 1..={}", HAIRSTYLE_NAMES.len()));
        }
        if self.mesh_level > 6 {
            return bad("mesh_level above 6 is not supported".into());
        }
        if self.pitch_angles.iter().any(|p| !(p.abs() < 89.0)) {
            return bad("pitch angles must lie strictly inside (-89, 89) degrees".into());
        }
        Ok(())
    }

    pub fn cameras_per_identity(&self) -> usize {
        self.yaw_count * self.pitch_angles.len()
    }

    pub fn image_count(&self) -> usize {
        self.identities * self.expressions * self.cameras_per_identity()
    }

    pub fn rig(&self) -> Result<CameraRig> {
        CameraRig::build(
            self.yaw_count,
            &self.pitch_angles,
            RIG_RADIUS,
            Intrinsics::from_fov(self.image_size, self.image_size, FOV_DEG),
        )
    }

    /// Hairstyle worn by identity `id`.
    pub fn hairstyle_of(&self, id: usize) -> usize {
        id % self.hairstyles
    }

    fn shape_seeds(&self) -> Vec<u64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.identities).map(|_| rng.random()).collect()
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Compactly supported bump: `(1 - (|d - c| / radius)^2)^2` inside the radius, 0 outside.
fn bump(d: &Vec3, center: &Vec3, radius: f64) -> f64 {
    let q = (d - center).norm_squared() / (radius * radius);
    if q >= 1.0 {
        0.0
    } else {
        (1.0 - q) * (1.0 - q)
    }
}

fn dir(x: f64, y: f64, z: f64) -> Vec3 {
    Vec3::new(x, y, z).normalize()
}

/// One localized expression displacement: bumps with their centre, radius and offset.
struct ExpressionRig {
    parts: Vec<(Vec3, f64, Displace)>,
}

enum Displace {
    Fixed(Vec3),
    Radial(f64),
}

fn expression_rig(j: usize) -> ExpressionRig {
    let parts = match j {
        1 => vec![(dir(0.0, -0.8, 0.6), 0.6, Displace::Fixed(Vec3::new(0.0, -0.14, 0.02)))],
        2 => vec![
            (dir(0.45, -0.3, 0.84), 0.32, Displace::Fixed(Vec3::new(0.03, 0.035, 0.0))),
            (dir(-0.45, -0.3, 0.84), 0.32, Displace::Fixed(Vec3::new(-0.03, 0.035, 0.0))),
        ],
        3 => vec![(dir(0.0, 0.42, 0.9), 0.38, Displace::Fixed(Vec3::new(0.0, 0.05, 0.01)))],
        4 => vec![
            (dir(0.32, 0.15, 0.93), 0.2, Displace::Fixed(Vec3::new(0.0, -0.025, -0.015))),
            (dir(-0.32, 0.15, 0.93), 0.2, Displace::Fixed(Vec3::new(0.0, -0.025, -0.015))),
        ],
        5 => vec![
            (dir(0.62, -0.2, 0.76), 0.36, Displace::Radial(0.05)),
            (dir(-0.62, -0.2, 0.76), 0.36, Displace::Radial(0.05)),
        ],
        _ => Vec::new(),
    };
    ExpressionRig { parts }
}

/// A generated identity: one mesh per expression (shared topology, vertex
/// colours) plus the vertex support of every expression displacement.
#[derive(Debug, Clone)]
pub struct Identity {
    pub expressions: Vec<TriMesh>,
    /// `supports[j]` lists vertices moved by expression `j` (empty for neutral).
    pub supports: Vec<BTreeSet<u32>>,
}

impl Identity {
    pub fn neutral(&self) -> &TriMesh {
        &self.expressions[0]
    }
}

pub fn generate_identity(seed: u64, spec: &DatasetSpec) -> Result<Identity> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sphere = icosphere(spec.mesh_level);
    let axes = [
        0.42 * (1.0 + rng.random_range(-0.06..0.06)),
        0.55 * (1.0 + rng.random_range(-0.06..0.06)),
        0.47 * (1.0 + rng.random_range(-0.06..0.06)),
    ];
    let p: f64 = 2.6 + rng.random_range(-0.2..0.2);
    let bumps: Vec<(Vec3, f64, f64)> = (0..5)
        .map(|_| {
            let c = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let c = if c.norm() < 1e-3 { Vec3::z() } else { c.normalize() };
            (c, rng.random_range(0.35..0.6), rng.random_range(-0.04..0.04))
        })
        .collect();
    let nose_amp = rng.random_range(0.14..0.2);
    let nose = dir(0.0, -0.02, 1.0);
    let ears = [dir(1.0, 0.0, -0.05), dir(-1.0, 0.0, -0.05)];
    let ear_amp = rng.random_range(0.06..0.1);

    let base: Vec<Vec3> = sphere
        .vertices
        .iter()
        .map(|d| {
            let s = (d.x / axes[0]).abs().powf(p) + (d.y / axes[1]).abs().powf(p) + (d.z / axes[2]).abs().powf(p);
            let mut r = s.powf(-1.0 / p);
            let mut scale = 1.0;
            for (c, w, a) in &bumps {
                scale += a * bump(d, c, *w);
            }
            scale += nose_amp * bump(d, &nose, 0.22);
            for e in &ears {
                scale += ear_amp * bump(d, e, 0.2);
            }
            r *= scale;
            d * r
        })
        .collect();

    let skin = {
        let k = rng.random_range(0.8..1.1);
        [0.86 * k, 0.64 * k, 0.5 * k]
    };
    let lips = [0.72, 0.28 + rng.random_range(0.0..0.08), 0.3];
    let brow = [0.3, 0.22, 0.16];
    let eye = [0.95, 0.95, 0.92];
    let iris = [rng.random_range(0.1..0.3), rng.random_range(0.15..0.4), rng.random_range(0.2..0.5)];
    let features: [(Vec3, f64, [f64; 3]); 7] = [
        (dir(0.0, -0.42, 0.9), 0.2, lips),
        (dir(0.3, 0.32, 0.9), 0.16, brow),
        (dir(-0.3, 0.32, 0.9), 0.16, brow),
        (dir(0.3, 0.14, 0.94), 0.16, eye),
        (dir(-0.3, 0.14, 0.94), 0.16, eye),
        (dir(0.3, 0.14, 0.94), 0.08, iris),
        (dir(-0.3, 0.14, 0.94), 0.08, iris),
    ];
    let colors: Vec<[f64; 3]> = sphere
        .vertices
        .iter()
        .map(|d| {
            let mut c = skin;
            for (center, radius, col) in &features {
                let w = smoothstep(0.0, 0.6, bump(d, center, *radius));
                for k in 0..3 {
                    c[k] = c[k] * (1.0 - w) + col[k] * w;
                }
            }
            c.map(|v| v.clamp(0.0, 1.0))
        })
        .collect();

    let mut expressions = Vec::with_capacity(spec.expressions);
    let mut supports = Vec::with_capacity(spec.expressions);
    for j in 0..spec.expressions {
        let rig = expression_rig(j);
        let mut support = BTreeSet::new();
        let verts: Vec<Vec3> = sphere
            .vertices
            .iter()
            .zip(&base)
            .enumerate()
            .map(|(i, (d, v))| {
                let mut out = *v;
                for (c, radius, disp) in &rig.parts {
                    let w = bump(d, c, *radius);
                    if w > 0.0 {
                        support.insert(i as u32);
                        out += match disp {
                            Displace::Fixed(o) => o * w,
                            Displace::Radial(a) => d * (a * w),
                        };
                    }
                }
                out
            })
            .collect();
        expressions.push(TriMesh::new(verts, sphere.faces.clone())?.with_colors(colors.clone())?);
        supports.push(support);
    }
    Ok(Identity { expressions, supports })
}

/// Lowest allowed direction height (`d.y`) for each style's cap.
pub fn hairline_threshold(style: usize) -> f64 {
    match style {
        1 => 0.45,
        2 => 0.0,
        3 => -0.55,
        _ => f64::INFINITY,
    }
}

/// Style hairline height as a function of direction; the cap covers `d.y > hairline(d)`.
fn hairline(style: usize, d: &Vec3) -> f64 {
    let front = smoothstep(-0.1, 0.45, d.z);
    match style {
        1 => 0.45 + 0.1 * front,
        2 => {
            // Bob: jaw-length at back and sides, fringe dipping at the forehead centre.
            let fringe = 0.55 - 0.2 * smoothstep(0.45, 0.0, d.x.abs());
            front * fringe
        }
        3 => {
            let back = smoothstep(0.1, -0.4, d.z);
            let side = -0.15;
            let base = side * (1.0 - back) + -0.55 * back;
            (1.0 - front) * base + front * 0.6
        }
        _ => f64::INFINITY,
    }
}

fn hair_thickness(style: usize) -> f64 {
    match style {
        1 => 0.045,
        2 => 0.09,
        3 => 0.11,
        _ => 0.0,
    }
}

fn hair_color(style: usize) -> [f64; 3] {
    match style {
        1 => [0.24, 0.16, 0.1],
        2 => [0.5, 0.3, 0.14],
        3 => [0.12, 0.1, 0.09],
        _ => [0.0; 3],
    }
}

/// Hair cap for `style` grown radially from the scalp of `base`. Bald gives an empty mesh.
pub fn generate_hairstyle(style: usize, base: &TriMesh) -> Result<TriMesh> {
    if style >= HAIRSTYLE_NAMES.len() {
        return Err(Error::UnknownId(format!("hairstyle {style}")));
    }
    if style == BALD {
        return Ok(TriMesh::default());
    }
    let mut index = vec![u32::MAX; base.vertices.len()];
    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    let thick = hair_thickness(style);
    let col = hair_color(style);
    for (i, v) in base.vertices.iter().enumerate() {
        let r = v.norm();
        if r == 0.0 {
            continue;
        }
        let d = v / r;
        let h = hairline(style, &d);
        if d.y <= h {
            continue;
        }
        let taper = 0.15 + 0.85 * smoothstep(0.0, 0.2, d.y - h);
        // Slight strand shading so the cap is not flat.
        let streak = 0.06 * (9.0 * d.x.atan2(d.z)).sin() * taper;
        index[i] = vertices.len() as u32;
        vertices.push(d * (r + thick * taper));
        colors.push(col.map(|c| (c * (1.0 + streak)).clamp(0.0, 1.0)));
    }
    let faces: Vec<[u32; 3]> = base
        .faces
        .iter()
        .filter(|f| f.iter().all(|&i| index[i as usize] != u32::MAX))
        .map(|f| f.map(|i| index[i as usize]))
        .collect();
    TriMesh::new(vertices, faces)?.with_colors(colors)
}

/// Full render, bald render and hair mask of one view.
#[derive(Debug, Clone)]
pub struct ViewTruth {
    pub full: Image,
    pub bald: Image,
    pub hair_mask: Vec<bool>,
}

fn raster_opts() -> RasterOptions {
    RasterOptions {
        clear_color: [1.0, 1.0, 1.0],
        clear_feature: 0.0,
        lighting: Some(Lighting::default()),
    }
}

/// Rasterize `head` with and without `hair` at `SUPERSAMPLE`² samples per pixel
/// and box-filter down. A pixel is in the hair mask when hair wins the depth
/// test for at least half of its samples.
pub fn render_truth(head: &TriMesh, hair: &TriMesh, camera: &Camera) -> Result<ViewTruth> {
    let (w, h) = (camera.width(), camera.height());
    let hi = camera.resized(w * SUPERSAMPLE, h * SUPERSAMPLE);
    let opts = raster_opts();
    let bald_out = rasterize_mesh(head, &hi, &opts)?;
    let bald_hi = bald_out.color.ok_or_else(|| Error::InvalidArgument("head mesh has no colours".into()))?;
    let bald = downsample(&bald_hi, SUPERSAMPLE)?;
    if hair.is_empty() {
        return Ok(ViewTruth {
            full: bald.clone(),
            bald,
            hair_mask: vec![false; (w * h) as usize],
        });
    }
    let merged = head.merged(hair)?;
    let out = rasterize_mesh(&merged, &hi, &opts)?;
    let head_faces = head.faces.len() as u32;
    let hair_hi: Vec<bool> = out
        .fragments
        .face
        .iter()
        .map(|&f| f != crate::geometry::raster::NO_FACE && f >= head_faces)
        .collect();
    let s = SUPERSAMPLE as usize;
    let wh = w as usize * s;
    let hair_mask = (0..(w * h) as usize)
        .map(|idx| {
            let (x, y) = (idx % w as usize, idx / w as usize);
            let count = (0..s * s).filter(|k| hair_hi[(y * s + k / s) * wh + x * s + k % s]).count();
            2 * count >= s * s
        })
        .collect();
    Ok(ViewTruth {
        full: downsample(&out.color.expect("merged mesh keeps colours"), SUPERSAMPLE)?,
        bald,
        hair_mask,
    })
}

/// Box-filter an image by an integer factor.
fn downsample(img: &Image, factor: u32) -> Result<Image> {
    let (w, h) = (img.width() / factor, img.height() / factor);
    let s = factor as usize;
    let mut data = Vec::with_capacity((w * h * 3) as usize);
    for y in 0..h as usize {
        for x in 0..w as usize {
            let mut acc = [0.0f64; 3];
            for k in 0..s * s {
                let px = img.rgb((y * s + k / s) * img.width() as usize + x * s + k % s);
                for c in 0..3 {
                    acc[c] += px[c] as f64;
                }
            }
            data.extend(acc.map(|v| (v / (s * s) as f64) as f32));
        }
    }
    Image::from_rgb(w, h, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityRecord {
    pub id: usize,
    pub hairstyle: usize,
    pub shape_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub name: String,
    pub vertex: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub hairstyles: Vec<String>,
    pub identities: Vec<IdentityRecord>,
    pub files: Vec<FileRecord>,
}

impl DatasetManifest {
    pub fn image_files(&self) -> impl Iterator<Item = &FileRecord> {
        self.files.iter().filter(|f| f.path.starts_with("images/"))
    }

    pub fn summary(&self) -> String {
        format!(
            "identities={} expressions={} images={}",
            self.spec.identities,
            self.spec.expressions,
            self.image_files().count()
        )
    }
}

pub fn image_name(id: usize, expr: usize, cam: usize) -> String {
    format!("{id:03}_{expr:02}_{cam:03}.png")
}

pub fn mesh_name(id: usize, expr: usize) -> String {
    format!("{id:03}_{expr:02}.obj")
}

pub fn hair_mesh_name(id: usize) -> String {
    format!("{id:03}_hair.obj")
}

/// Landmark vertices: the sphere vertices closest to fixed facial directions.
/// Indices depend only on the mesh level, so all identities share them.
pub fn landmark_vertices(mesh_level: u32) -> Vec<Landmark> {
    let sphere = icosphere(mesh_level);
    let targets: [(&str, Vec3); 18] = [
        ("nose_tip", dir(0.0, -0.02, 1.0)),
        ("nose_bridge", dir(0.0, 0.15, 1.0)),
        ("eye_outer_l", dir(0.45, 0.14, 0.88)),
        ("eye_inner_l", dir(0.15, 0.14, 0.97)),
        ("eye_inner_r", dir(-0.15, 0.14, 0.97)),
        ("eye_outer_r", dir(-0.45, 0.14, 0.88)),
        ("brow_l", dir(0.3, 0.35, 0.9)),
        ("brow_r", dir(-0.3, 0.35, 0.9)),
        ("mouth_l", dir(0.22, -0.42, 0.88)),
        ("mouth_r", dir(-0.22, -0.42, 0.88)),
        ("chin", dir(0.0, -0.8, 0.6)),
        ("jaw_l", dir(0.7, -0.55, 0.45)),
        ("jaw_r", dir(-0.7, -0.55, 0.45)),
        ("cheek_l", dir(0.62, -0.2, 0.76)),
        ("cheek_r", dir(-0.62, -0.2, 0.76)),
        ("ear_l", dir(1.0, 0.0, -0.05)),
        ("ear_r", dir(-1.0, 0.0, -0.05)),
        ("crown", dir(0.0, 1.0, 0.0)),
    ];
    targets
        .iter()
        .map(|(name, t)| {
            let vertex = sphere
                .vertices
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.dot(t).total_cmp(&b.1.dot(t)))
                .map(|(i, _)| i as u32)
                .expect("sphere has vertices");
            Landmark {
                name: name.to_string(),
                vertex,
            }
        })
        .collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Outcome of [`render_dataset`].
#[derive(Debug, Clone)]
pub struct DatasetReport {
    pub manifest: DatasetManifest,
    /// True when the directory already held this exact dataset and nothing was written.
    pub unchanged: bool,
}

/// Generate every identity and hairstyle, render all views and write the dataset to `out`.
pub fn render_dataset(spec: &DatasetSpec, out: &Path) -> Result<DatasetReport> {
    spec.validate()?;
    let rig = spec.rig()?;
    let seeds = spec.shape_seeds();
    let identities: Vec<Identity> = seeds
        .par_iter()
        .map(|&s| generate_identity(s, spec))
        .collect::<Result<_>>()?;
    let hair: Vec<TriMesh> = identities
        .iter()
        .enumerate()
        .map(|(i, ident)| generate_hairstyle(spec.hairstyle_of(i), ident.neutral()))
        .collect::<Result<_>>()?;

    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    let cams = rig.len();
    let jobs: Vec<(usize, usize, usize)> = (0..spec.identities)
        .flat_map(|i| (0..spec.expressions).flat_map(move |j| (0..cams).map(move |c| (i, j, c))))
        .collect();
    let renders: Vec<[Vec<u8>; 3]> = jobs
        .par_iter()
        .map(|&(i, j, c)| {
            let view = render_truth(&identities[i].expressions[j], &hair[i], &rig.cameras[c])?;
            Ok([
                view.full.to_png_bytes()?,
                view.bald.to_png_bytes()?,
                mask_to_png_bytes(spec.image_size, spec.image_size, &view.hair_mask)?,
            ])
        })
        .collect::<Result<_>>()?;
    for (&(i, j, c), [full, bald, mask]) in jobs.iter().zip(renders) {
        let name = image_name(i, j, c);
        files.push((format!("images/{name}"), full));
        files.push((format!("bald/{name}"), bald));
        files.push((format!("masks/{name}"), mask));
    }
    for (i, ident) in identities.iter().enumerate() {
        for (j, mesh) in ident.expressions.iter().enumerate() {
            files.push((format!("meshes/{}", mesh_name(i, j)), obj_to_string(mesh).into_bytes()));
        }
        files.push((format!("meshes/{}", hair_mesh_name(i)), obj_to_string(&hair[i]).into_bytes()));
    }
    files.push(("cameras.json".into(), cameras_to_json(&rig.cameras)?.into_bytes()));
    files.push((
        "landmarks.json".into(),
        serde_json::to_string_pretty(&landmark_vertices(spec.mesh_level))?.into_bytes(),
    ));

    let manifest = DatasetManifest {
        spec: spec.clone(),
        hairstyles: HAIRSTYLE_NAMES[..spec.hairstyles].iter().map(|s| s.to_string()).collect(),
        identities: seeds
            .iter()
            .enumerate()
            .map(|(id, &shape_seed)| IdentityRecord {
                id,
                hairstyle: spec.hairstyle_of(id),
                shape_seed,
            })
            .collect(),
        files: files
            .iter()
            .map(|(path, bytes)| FileRecord {
                path: path.clone(),
                sha256: sha256_hex(bytes),
            })
            .collect(),
    };
    let manifest_bytes = serde_json::to_string_pretty(&manifest)?.into_bytes();
    let manifest_path = out.join("manifest.json");
    if fs::read(&manifest_path).is_ok_and(|old| old == manifest_bytes) && verify_dataset(out).is_ok() {
        return Ok(DatasetReport {
            manifest,
            unchanged: true,
        });
    }
    for sub in ["images", "bald", "masks", "meshes"] {
        let p = out.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for (path, bytes) in &files {
        binio::write_file(&out.join(path), bytes)?;
    }
    binio::write_file(&manifest_path, &manifest_bytes)?;
    Ok(DatasetReport {
        manifest,
        unchanged: false,
    })
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let bytes = binio::read_file(&dir.join("manifest.json"))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Check that every manifest file exists and matches its recorded digest.
pub fn verify_dataset(dir: &Path) -> Result<DatasetManifest> {
    let manifest = load_manifest(dir)?;
    for f in &manifest.files {
        let bytes = binio::read_file(&dir.join(&f.path))?;
        if sha256_hex(&bytes) != f.sha256 {
            return Err(Error::Format(format!("{}: digest mismatch", f.path)));
        }
    }
    Ok(manifest)
}

/// Stack all meshes into an `(3N, I, E)` tensor in manifest order.
pub fn build_vertex_tensor(dir: &Path) -> Result<VertexTensor> {
    let manifest = load_manifest(dir)?;
    let spec = &manifest.spec;
    let meshes: Vec<Vec<TriMesh>> = manifest
        .identities
        .iter()
        .map(|rec| {
            (0..spec.expressions)
                .map(|j| load_obj(&dir.join("meshes").join(mesh_name(rec.id, j))))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    VertexTensor::from_meshes(&meshes)
}

/// Read access to a generated dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub cameras: Vec<Camera>,
    pub landmarks: Vec<Landmark>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = load_manifest(dir)?;
        let cameras = load_cameras(&dir.join("cameras.json"))?;
        let landmarks: Vec<Landmark> = serde_json::from_slice(&binio::read_file(&dir.join("landmarks.json"))?)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            cameras,
            landmarks,
        })
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.manifest.spec
    }

    pub fn image(&self, id: usize, expr: usize, cam: usize) -> Result<Image> {
        Image::load_png(&self.dir.join("images").join(image_name(id, expr, cam)))
    }

    pub fn bald(&self, id: usize, expr: usize, cam: usize) -> Result<Image> {
        Image::load_png(&self.dir.join("bald").join(image_name(id, expr, cam)))
    }

    pub fn mask(&self, id: usize, expr: usize, cam: usize) -> Result<Vec<bool>> {
        let bytes = binio::read_file(&self.dir.join("masks").join(image_name(id, expr, cam)))?;
        Ok(mask_from_png_bytes(&bytes)?.2)
    }

    pub fn mesh(&self, id: usize, expr: usize) -> Result<TriMesh> {
        load_obj(&self.dir.join("meshes").join(mesh_name(id, expr)))
    }

    pub fn hair_mesh(&self, id: usize) -> Result<TriMesh> {
        load_obj(&self.dir.join("meshes").join(hair_mesh_name(id)))
    }
}
