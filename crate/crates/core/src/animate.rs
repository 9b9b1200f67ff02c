//! Blendshape-stream animation.
//!
//! A stream is a JSON array of frames, each
//! `{"activations": [E-1 floats in 0..=1], "camera_id": k}` or with an explicit
//! `"camera"` record instead of the id.

use serde::{Deserialize, Serialize};

use crate::bilinear::blend_from_activations;
use crate::checkpoint::{Checkpoint, Head};
use crate::error::{Error, Result};
use crate::geometry::camera::CameraRecord;
use crate::geometry::Camera;
use crate::imaging::Image;
use crate::render::RenderConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Frame {
    pub activations: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_id: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<CameraRecord>,
}

pub fn parse_stream(text: &str) -> Result<Vec<Frame>> {
    serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("malformed animation stream: {e}")))
}

/// Check every frame against the library and resolve its camera.
pub fn resolve_frames(ck: &Checkpoint, frames: &[Frame]) -> Result<Vec<Camera>> {
    let e = ck.model.expressions();
    frames
        .iter()
        .enumerate()
        .map(|(k, f)| {
            if f.activations.len() + 1 != e {
                return Err(Error::Dimension(format!(
                    "frame {k}: {} activations, model expects {}",
                    f.activations.len(),
                    e - 1
                )));
            }
            if let Some(a) = f.activations.iter().find(|a| !(0.0..=1.0).contains(*a)) {
                return Err(Error::InvalidArgument(format!("frame {k}: activation {a} outside [0, 1]")));
            }
            match (&f.camera_id, &f.camera) {
                (Some(id), None) => ck.camera(*id).cloned(),
                (None, Some(rec)) => rec.to_camera(),
                _ => Err(Error::InvalidArgument(format!("frame {k}: give exactly one of camera_id and camera"))),
            }
        })
        .collect()
}

/// Render every frame; `size` overrides each camera's image size.
pub fn animate(ck: &Checkpoint, head: &Head, frames: &[Frame], cfg: &RenderConfig, size: Option<(u32, u32)>) -> Result<Vec<Image>> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("animation stream has no frames".into()));
    }
    ck.check_hairstyle(head.hairstyle)?;
    let cameras = resolve_frames(ck, frames)?;
    let e = ck.model.expressions();
    frames
        .iter()
        .zip(cameras)
        .map(|(f, cam)| {
            let cam = match size {
                Some((w, h)) => cam.resized(w, h),
                None => cam,
            };
            let blend = blend_from_activations(&f.activations, e)?;
            Ok(ck.render(head, &blend, &cam, cfg, true)?.image)
        })
        .collect()
}
