//! Single-image fitting: landmark shape fit, neural-texture optimization on the
//! bald region, then hairstyle matching. Shape and texture are never optimized
//! jointly; the shape code is fixed after the first stage.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bilinear::{fit_shape_landmarks, BlendCode, Landmark, ShapeCode};
use crate::checkpoint::{Checkpoint, Head};
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::imaging::Image;
use crate::optim::adam::{Adam, AdamConfig};
use crate::optim::density::{density_regularizer, PairSampler};
use crate::optim::grad::{backward_render, GradTargets, TrainRay};
use crate::optim::hair::{match_hairstyle, HairMatch, HairQuery};
use crate::render::metrics::masked_psnr;
use crate::render::{poisson_blend, psnr, Branch, RenderConfig, Scene};
use crate::texture::{NeuralTexture, PlaneRaster};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub seed: u64,
    pub landmark_ridge: f64,
    pub texture_steps: usize,
    pub lr_texture: f64,
    pub rays_per_step: usize,
    pub photometric_weight: f64,
    pub density_weight: f64,
    pub density_pairs: usize,
    pub density_rho: f64,
    /// Harmonize the target with the initial render before optimizing.
    pub poisson: bool,
    /// Library texture to start from; a random trained one when `None`.
    pub init_texture: Option<usize>,
    /// Sampling used while fitting; the library's when `None`.
    pub render: Option<RenderConfig>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            landmark_ridge: 1e-6,
            texture_steps: 300,
            lr_texture: 0.01,
            rays_per_step: 1024,
            photometric_weight: 1.0,
            density_weight: 0.0,
            density_pairs: 256,
            density_rho: 0.01,
            poisson: false,
            init_texture: None,
            render: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.landmark_ridge, self.lr_texture, self.photometric_weight, self.density_weight, self.density_rho];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument("fit weights and rates must be finite and nonnegative".into()));
        }
        if self.rays_per_step == 0 || self.density_pairs == 0 {
            return Err(Error::InvalidArgument("rays_per_step and density_pairs must be positive".into()));
        }
        if let Some(r) = &self.render {
            r.validate()?;
            if r.jitter {
                return Err(Error::InvalidArgument("fitting requires deterministic sampling (jitter off)".into()));
            }
        }
        Ok(())
    }
}

/// The observation being fitted.
#[derive(Debug, Clone, Copy)]
pub struct FitTarget<'a> {
    pub image: &'a Image,
    pub hair_mask: &'a [bool],
    pub landmarks: &'a [Landmark],
    pub camera: &'a Camera,
    pub blend: &'a BlendCode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub landmark_rms_px: f64,
    pub init_texture: usize,
    pub texture_losses: Vec<f64>,
    /// Head-only render against the target over the bald region, before and after stage 2.
    pub bald_psnr_init: f64,
    pub bald_psnr_final: f64,
    /// Final composite against the whole input image.
    pub input_psnr: f64,
    pub hair_distances: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedHead {
    pub head: Head,
    pub report: FitReport,
}

impl FittedHead {
    /// Bundle files: `shape.json`, `texture.bin`, `head.json`, `report.json`.
    pub fn to_files(&self, ck: &Checkpoint) -> Result<Vec<(String, Vec<u8>)>> {
        let meta = serde_json::json!({
            "hairstyle": self.head.hairstyle,
            "hairstyle_name": ck.config.hairstyles.get(self.head.hairstyle),
            "rank": self.head.shape.0.len(),
            "channels": self.head.texture.channels(),
        });
        Ok(vec![
            ("shape.json".into(), serde_json::to_vec(&self.head.shape.0)?),
            ("texture.bin".into(), self.head.texture.to_bytes()),
            ("head.json".into(), serde_json::to_vec_pretty(&meta)?),
            ("report.json".into(), serde_json::to_vec_pretty(&self.report)?),
        ])
    }

    pub fn from_files(files: &[(String, Vec<u8>)]) -> Result<Self> {
        let get = |name: &str| {
            files
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, b)| b.as_slice())
                .ok_or_else(|| Error::Format(format!("bundle is missing {name}")))
        };
        let shape: Vec<f64> = serde_json::from_slice(get("shape.json")?)?;
        let meta: serde_json::Value = serde_json::from_slice(get("head.json")?)?;
        let hairstyle = meta["hairstyle"].as_u64().ok_or_else(|| Error::Format("head.json lacks hairstyle".into()))? as usize;
        Ok(Self {
            head: Head {
                shape: ShapeCode(shape),
                texture: NeuralTexture::from_bytes(get("texture.bin")?)?,
                hairstyle,
            },
            report: serde_json::from_slice(get("report.json")?)?,
        })
    }
}

/// Clear mask pixels on the image border so a Dirichlet boundary exists.
fn interior(mask: &[bool], w: usize, h: usize) -> Vec<bool> {
    (0..w * h).map(|i| mask[i] && i % w != 0 && i % w != w - 1 && i >= w && i < w * (h - 1)).collect()
}

pub fn fit_single_image(ck: &Checkpoint, target: FitTarget, cfg: &FitConfig, mut progress: impl FnMut(&str, usize, usize)) -> Result<FittedHead> {
    cfg.validate()?;
    let render = cfg.render.unwrap_or(ck.config.render);
    let cam = target.camera;
    let (w, h) = (cam.width() as usize, cam.height() as usize);
    if target.image.width() as usize != w || target.image.height() as usize != h {
        return Err(Error::Dimension(format!(
            "image is {}x{}, camera expects {w}x{h}",
            target.image.width(),
            target.image.height()
        )));
    }
    if target.hair_mask.len() != w * h {
        return Err(Error::Dimension(format!("hair mask has {} pixels, image has {}", target.hair_mask.len(), w * h)));
    }
    if target.landmarks.is_empty() {
        return Err(Error::InvalidArgument("missing landmarks".into()));
    }
    let bald: Vec<bool> = target.hair_mask.iter().map(|&m| !m).collect();
    let bald_pixels: Vec<usize> = (0..w * h).filter(|&i| bald[i]).collect();
    if bald_pixels.is_empty() {
        return Err(Error::InvalidArgument("bald region is empty after masking".into()));
    }
    if ck.textures.is_empty() {
        return Err(Error::InvalidArgument("library has no trained textures".into()));
    }

    progress("shape", 0, 1);
    let lm = fit_shape_landmarks(&ck.model, target.landmarks, cam, target.blend, cfg.landmark_ridge)?;
    let shape = lm.shape;
    progress("shape", 1, 1);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids: Vec<usize> = ck.textures.keys().copied().collect();
    let init_id = match cfg.init_texture {
        Some(i) => {
            ck.texture(i)?;
            i
        }
        None => ids[rng.random_range(0..ids.len())],
    };
    let mut texture = ck.texture(init_id)?.clone();
    let vertices = ck.model.synthesize(&shape, target.blend)?;
    let raster = PlaneRaster::build(&vertices, ck.model.faces(), ck.config.raster)?;
    let c = ck.config.channels;

    let head_render = |tex: &NeuralTexture| -> Result<Image> {
        let planes = raster.fill(tex)?;
        ck.render_planes(&planes, 0, cam, &render, false).map(|r| r.image)
    };
    let init_render = head_render(&texture)?;
    let bald_psnr_init = masked_psnr(&init_render, target.image, &bald)?;
    let (goal, pixels) = if cfg.poisson {
        let blended = poisson_blend(&init_render, target.image, &interior(target.hair_mask, w, h))?;
        (blended, (0..w * h).collect::<Vec<_>>())
    } else {
        (target.image.clone(), bald_pixels)
    };

    let mut adam = Adam::new(texture.data.len(), AdamConfig::with_lr(cfg.lr_texture));
    let mut losses = Vec::with_capacity(cfg.texture_steps);
    let full_batch = cfg.rays_per_step >= pixels.len();
    for step in 0..cfg.texture_steps {
        let chosen: Vec<usize> = if full_batch {
            pixels.clone()
        } else {
            (0..cfg.rays_per_step).map(|_| pixels[rng.random_range(0..pixels.len())]).collect()
        };
        let rays: Vec<TrainRay> = chosen
            .iter()
            .enumerate()
            .map(|(k, &i)| TrainRay {
                ray: cam.pixel_ray((i % w) as u32, (i / w) as u32, render.near, render.far),
                target: goal.rgb_f64(i),
                weight: 1.0,
                index: k as u64,
            })
            .collect();
        let planes = raster.fill(&texture)?;
        let branch = Branch::new(&planes, &ck.decoder)?;
        let (loss, mut tape) = backward_render(&Scene::head_only(branch), &rays, &render, GradTargets::default(), cfg.photometric_weight, None)?;
        if cfg.density_weight > 0.0 {
            let sampler = PairSampler {
                seed: rng.random(),
                half_extent: ck.config.raster.half_extent,
                direction: None,
            };
            density_regularizer(&branch, cfg.density_pairs, cfg.density_rho, sampler, cfg.density_weight, Some(&mut tape.head))?;
        }
        tape.backproject_head(&raster, c);
        tape.check_finite()?;
        adam.step(&mut texture.data, &tape.vertex_features)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
        progress("texture", step + 1, cfg.texture_steps);
    }
    let planes = raster.fill(&texture)?;
    let bald_render = ck.render_planes(&planes, 0, cam, &render, false)?.image;
    let bald_psnr_final = masked_psnr(&bald_render, target.image, &bald)?;

    progress("hair", 0, 1);
    let query = HairQuery {
        mask: target.hair_mask,
        camera: cam,
    };
    let HairMatch { hairstyle, distances } = match_hairstyle(ck, &[query], Some(&planes), &render)?;
    let composite = ck.render_planes(&planes, hairstyle, cam, &render, true)?.image;
    progress("hair", 1, 1);

    Ok(FittedHead {
        head: Head { shape, texture, hairstyle },
        report: FitReport {
            landmark_rms_px: lm.rms_px,
            init_texture: init_id,
            texture_losses: losses,
            bald_psnr_init,
            bald_psnr_final,
            input_psnr: psnr(&composite, target.image)?,
            hair_distances: distances,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interior_clears_border() {
        let m = interior(&[true; 16], 4, 4);
        let expect: Vec<bool> = (0..16).map(|i| [5, 6, 9, 10].contains(&i)).collect();
        assert_eq!(m, expect);
    }

    #[test]
    fn config_rejects_negative_weights() {
        let cfg = FitConfig {
            photometric_weight: -1.0,
            ..FitConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(FitConfig::default().validate().is_ok());
    }
}
