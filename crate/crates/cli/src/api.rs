//! Request types shared by the command line and the HTTP service.

use std::io::{Cursor, Read, Write};

use head360::bilinear::{blend_from_activations, BlendCode, Landmark, ShapeCode};
use head360::checkpoint::{Checkpoint, Head};
use head360::geometry::camera::CameraRecord;
use head360::geometry::Camera;
use head360::imaging::{mask_from_png_bytes, Image};
use head360::optim::fit::{fit_single_image, FitConfig, FitTarget, FittedHead};
use head360::render::RenderConfig;
use serde::{Deserialize, Serialize};

pub const DEFAULT_MAX_SIZE: u32 = 256;
pub const MAX_SAMPLES: usize = 1024;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Unprocessable(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Busy(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    pub fn status(&self) -> u16 {
        match self {
            ApiError::BadRequest(_) => 400,
            ApiError::NotFound(_) => 404,
            ApiError::Conflict(_) => 409,
            ApiError::Unprocessable(_) => 422,
            ApiError::Busy(_) => 503,
            ApiError::Internal(_) => 500,
        }
    }
}

impl From<head360::Error> for ApiError {
    fn from(e: head360::Error) -> Self {
        use head360::Error as E;
        match e {
            E::Dimension(_) | E::RankOutOfRange { .. } => ApiError::Unprocessable(e.to_string()),
            E::UnknownId(_) => ApiError::NotFound(e.to_string()),
            E::InvalidArgument(_) | E::Parse { .. } | E::Format(_) | E::Image(_) | E::Json(_) => ApiError::BadRequest(e.to_string()),
            _ => ApiError::Internal(e.to_string()),
        }
    }
}

/// Trained identity texture by id, or the result of a fit job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TextureRef {
    Id(usize),
    Job { job: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HairRef {
    Id(usize),
    Name(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    /// Shape code; the texture owner's code when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s: Option<Vec<f64>>,
    /// Expression activations (E-1 values in 0..=1); neutral when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activations: Option<Vec<f64>>,
    /// Lowest trained identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texture: Option<TextureRef>,
    /// The texture owner's hairstyle when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hairstyle: Option<HairRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<CameraRecord>,
    /// Square output size; the camera's own size when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
}

/// Fitted heads the service can render, keyed by job id.
pub trait FittedLookup {
    fn fitted(&self, job: &str) -> Option<Head>;
}

pub struct NoJobs;

impl FittedLookup for NoJobs {
    fn fitted(&self, _: &str) -> Option<Head> {
        None
    }
}

fn base_head(ck: &Checkpoint, texture: &Option<TextureRef>, jobs: &dyn FittedLookup) -> Result<Head, ApiError> {
    match texture {
        None => {
            let id = *ck.textures.keys().next().ok_or_else(|| ApiError::NotFound("library has no textures".into()))?;
            Ok(ck.identity_head(id)?)
        }
        Some(TextureRef::Id(id)) => Ok(ck.identity_head(*id)?),
        Some(TextureRef::Job { job }) => jobs.fitted(job).ok_or_else(|| ApiError::NotFound(format!("no finished fit job `{job}`"))),
    }
}

pub fn resolve_hair(ck: &Checkpoint, hair: &HairRef) -> Result<usize, ApiError> {
    let id = match hair {
        HairRef::Id(i) => {
            ck.check_hairstyle(*i)?;
            *i
        }
        HairRef::Name(n) => ck.hairstyle_id(n)?,
    };
    Ok(id)
}

pub fn resolve_camera(ck: &Checkpoint, id: Option<usize>, record: Option<&CameraRecord>, size: Option<u32>, max_size: u32) -> Result<Camera, ApiError> {
    let cam = match (id, record) {
        (Some(_), Some(_)) => return Err(ApiError::BadRequest("give camera_id or camera, not both".into())),
        (Some(i), None) => ck.camera(i)?.clone(),
        (None, Some(r)) => r.to_camera()?,
        (None, None) => ck.camera(0)?.clone(),
    };
    let cam = match size {
        Some(s) => cam.resized(s, s),
        None => cam,
    };
    let (w, h) = (cam.width(), cam.height());
    if w == 0 || h == 0 || w > max_size || h > max_size {
        return Err(ApiError::Unprocessable(format!("image size {w}x{h} outside 1..={max_size}")));
    }
    Ok(cam)
}

pub fn render_config(ck: &Checkpoint, samples: Option<usize>) -> Result<RenderConfig, ApiError> {
    let mut cfg = ck.config.render;
    if let Some(n) = samples {
        if !(2..=MAX_SAMPLES).contains(&n) {
            return Err(ApiError::Unprocessable(format!("samples must be in 2..={MAX_SAMPLES}, got {n}")));
        }
        cfg.samples = n;
    }
    Ok(cfg)
}

pub fn blend(ck: &Checkpoint, activations: Option<&[f64]>) -> Result<BlendCode, ApiError> {
    let e = ck.model.expressions();
    match activations {
        None => Ok(BlendCode::neutral(e)),
        Some(a) => {
            if a.len() + 1 != e {
                return Err(ApiError::Unprocessable(format!("expected {} activations, got {}", e - 1, a.len())));
            }
            if a.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(ApiError::Unprocessable("activations must lie in [0, 1]".into()));
            }
            Ok(blend_from_activations(a, e)?)
        }
    }
}

/// Resolve the head (shape, texture, hairstyle) a request refers to.
pub fn request_head(ck: &Checkpoint, s: Option<&[f64]>, texture: &Option<TextureRef>, hair: Option<&HairRef>, jobs: &dyn FittedLookup) -> Result<Head, ApiError> {
    let mut head = base_head(ck, texture, jobs)?;
    if let Some(s) = s {
        if s.len() != ck.model.rank() {
            return Err(ApiError::Unprocessable(format!("shape code has {} entries, model rank is {}", s.len(), ck.model.rank())));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(ApiError::BadRequest("shape code must be finite".into()));
        }
        head.shape = ShapeCode(s.to_vec());
    }
    if let Some(h) = hair {
        head.hairstyle = resolve_hair(ck, h)?;
    }
    Ok(head)
}

pub fn render_png(ck: &Checkpoint, req: &RenderRequest, max_size: u32, jobs: &dyn FittedLookup) -> Result<Vec<u8>, ApiError> {
    let head = request_head(ck, req.s.as_deref(), &req.texture, req.hairstyle.as_ref(), jobs)?;
    let b = blend(ck, req.activations.as_deref())?;
    let cam = resolve_camera(ck, req.camera_id, req.camera.as_ref(), req.size, max_size)?;
    let cfg = render_config(ck, req.samples)?;
    let r = ck.render(&head, &b, &cam, &cfg, true)?;
    Ok(r.image.to_png_bytes()?)
}

/// Either a bare frame array or an object naming the head to animate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnimateRequest {
    Frames(Vec<head360::animate::Frame>),
    Full(AnimateSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnimateSpec {
    pub frames: Vec<head360::animate::Frame>,
    #[serde(default)]
    pub s: Option<Vec<f64>>,
    #[serde(default)]
    pub texture: Option<TextureRef>,
    #[serde(default)]
    pub hairstyle: Option<HairRef>,
    #[serde(default)]
    pub size: Option<u32>,
    #[serde(default)]
    pub samples: Option<usize>,
}

impl AnimateRequest {
    pub fn into_spec(self) -> AnimateSpec {
        match self {
            AnimateRequest::Frames(frames) => AnimateSpec {
                frames,
                s: None,
                texture: None,
                hairstyle: None,
                size: None,
                samples: None,
            },
            AnimateRequest::Full(s) => s,
        }
    }
}

pub fn frame_name(k: usize) -> String {
    format!("frame_{k:04}.png")
}

/// Render every frame of an animation as PNG files.
pub fn animate_frames(ck: &Checkpoint, spec: &AnimateSpec, max_size: u32, jobs: &dyn FittedLookup) -> Result<Vec<(String, Vec<u8>)>, ApiError> {
    let head = request_head(ck, spec.s.as_deref(), &spec.texture, spec.hairstyle.as_ref(), jobs)?;
    let cfg = render_config(ck, spec.samples)?;
    for cam in head360::animate::resolve_frames(ck, &spec.frames)? {
        let (w, h) = match spec.size {
            Some(s) => (s, s),
            None => (cam.width(), cam.height()),
        };
        if w == 0 || h == 0 || w > max_size || h > max_size {
            return Err(ApiError::Unprocessable(format!("image size {w}x{h} outside 1..={max_size}")));
        }
    }
    let frames = head360::animate::animate(ck, &head, &spec.frames, &cfg, spec.size.map(|s| (s, s)))?;
    frames
        .iter()
        .enumerate()
        .map(|(k, img)| Ok((frame_name(k), img.to_png_bytes()?)))
        .collect()
}

/// Stored (uncompressed) zip with fixed timestamps, so equal inputs give equal bytes.
pub fn zip_files(files: &[(String, Vec<u8>)]) -> Result<Vec<u8>, ApiError> {
    let mut zw = zip::ZipWriter::new(Cursor::new(Vec::new()));
    let opts = zip::write::SimpleFileOptions::default()
        .compression_method(zip::CompressionMethod::Stored)
        .last_modified_time(zip::DateTime::default());
    for (name, bytes) in files {
        zw.start_file(name.as_str(), opts).map_err(|e| ApiError::Internal(e.to_string()))?;
        zw.write_all(bytes).map_err(|e| ApiError::Internal(e.to_string()))?;
    }
    Ok(zw.finish().map_err(|e| ApiError::Internal(e.to_string()))?.into_inner())
}

pub fn unzip_files(bytes: &[u8]) -> Result<Vec<(String, Vec<u8>)>, ApiError> {
    let mut za = zip::ZipArchive::new(Cursor::new(bytes)).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let mut out = Vec::with_capacity(za.len());
    for i in 0..za.len() {
        let mut f = za.by_index(i).map_err(|e| ApiError::BadRequest(e.to_string()))?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf).map_err(|e| ApiError::BadRequest(e.to_string()))?;
        out.push((f.name().to_string(), buf));
    }
    Ok(out)
}

/// A 2D landmark given by vertex index or by its name in the library's landmark list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkObservation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vertex: Option<usize>,
    pub pixel: [f64; 2],
}

pub fn resolve_landmarks(ck: &Checkpoint, obs: &[LandmarkObservation]) -> Result<Vec<Landmark>, ApiError> {
    obs.iter()
        .map(|o| {
            let vertex = match (&o.vertex, &o.name) {
                (Some(v), _) => *v,
                (None, Some(n)) => ck
                    .landmarks
                    .iter()
                    .find(|l| &l.name == n)
                    .map(|l| l.vertex as usize)
                    .ok_or_else(|| ApiError::NotFound(format!("landmark `{n}`")))?,
                (None, None) => return Err(ApiError::BadRequest("landmark needs a vertex or a name".into())),
            };
            if vertex >= ck.model.vertex_count() {
                return Err(ApiError::Unprocessable(format!("landmark vertex {vertex} out of range")));
            }
            Ok(Landmark { vertex, pixel: o.pixel })
        })
        .collect()
}

/// Everything a fit needs, decoded from files or a multipart upload.
#[derive(Debug, Clone)]
pub struct FitInput {
    pub image: Image,
    pub mask: Vec<bool>,
    pub landmarks: Vec<LandmarkObservation>,
    pub camera_id: Option<usize>,
    pub camera: Option<CameraRecord>,
    pub activations: Option<Vec<f64>>,
    pub config: FitConfig,
}

impl FitInput {
    pub fn decode(image_png: &[u8], mask_png: &[u8], landmarks_json: &[u8]) -> Result<Self, ApiError> {
        let image = Image::from_png_bytes(image_png)?;
        let (w, h, mask) = mask_from_png_bytes(mask_png)?;
        if (w, h) != (image.width(), image.height()) {
            return Err(ApiError::Unprocessable(format!(
                "mask is {w}x{h}, image is {}x{}",
                image.width(),
                image.height()
            )));
        }
        let landmarks = serde_json::from_slice(landmarks_json).map_err(|e| ApiError::BadRequest(format!("landmarks: {e}")))?;
        Ok(Self {
            image,
            mask,
            landmarks,
            camera_id: None,
            camera: None,
            activations: None,
            config: FitConfig::default(),
        })
    }
}

pub fn run_fit(ck: &Checkpoint, input: &FitInput, progress: impl FnMut(&str, usize, usize)) -> Result<FittedHead, ApiError> {
    let landmarks = resolve_landmarks(ck, &input.landmarks)?;
    let cam = resolve_camera(ck, input.camera_id, input.camera.as_ref(), None, u32::MAX)?.resized(input.image.width(), input.image.height());
    let b = blend(ck, input.activations.as_deref())?;
    let target = FitTarget {
        image: &input.image,
        hair_mask: &input.mask,
        landmarks: &landmarks,
        camera: &cam,
        blend: &b,
    };
    Ok(fit_single_image(ck, target, &input.config, progress)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HairstyleInfo {
    pub id: usize,
    pub name: String,
    pub has_field: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigSummary {
    pub cameras: usize,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct ModelInfo {
    pub r: usize,
    pub E: usize,
    pub H: usize,
    pub texture_ids: Vec<usize>,
    pub hairstyles: Vec<HairstyleInfo>,
    pub rig: RigSummary,
    pub max_size: u32,
}

pub fn model_info(ck: &Checkpoint, max_size: u32) -> ModelInfo {
    let first = ck.cameras.first();
    ModelInfo {
        r: ck.model.rank(),
        E: ck.model.expressions(),
        H: ck.hairstyle_count(),
        texture_ids: ck.textures.keys().copied().collect(),
        hairstyles: ck
            .config
            .hairstyles
            .iter()
            .enumerate()
            .map(|(id, name)| HairstyleInfo {
                id,
                name: name.clone(),
                has_field: ck.hair[id].is_some(),
            })
            .collect(),
        rig: RigSummary {
            cameras: ck.cameras.len(),
            width: first.map_or(0, |c| c.width()),
            height: first.map_or(0, |c| c.height()),
        },
        max_size,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::Digest;
    hex::encode(sha2::Sha256::digest(bytes))
}
