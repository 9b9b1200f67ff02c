//! Finite-difference verification of [`backward_render`] on a small random scene.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::geometry::mesh::icosphere;
use crate::geometry::{CameraRig, Intrinsics};
use crate::hexplane::{Decoder, HexPlanes};
use crate::optim::grad::{backward_render, render_loss, GradTargets, TrainRay};
use crate::render::{render_ray, Branch, RenderConfig, Scene};
use crate::texture::{initial_texture, NeuralTexture, PlaneRaster, RasterConfig};
use crate::Vec3;

/// Denominator floor of the relative error, far above finite-difference noise.
pub const REL_ERR_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub resolution: usize,
    pub channels: usize,
    pub rays: usize,
    pub samples: usize,
    pub seed: u64,
    pub coords_per_block: usize,
    pub step: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            resolution: 16,
            channels: 4,
            rays: 32,
            samples: 16,
            seed: 0,
            coords_per_block: 40,
            step: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub blocks: Vec<BlockCheck>,
    pub max_rel_err: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

struct Setup {
    raster: PlaneRaster,
    texture: NeuralTexture,
    head_decoder: Decoder,
    hair_planes: HexPlanes,
    hair_decoder: Decoder,
    rays: Vec<TrainRay>,
    render: RenderConfig,
}

impl Setup {
    fn new(cfg: &GradcheckConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let c = cfg.channels;
        let sphere = icosphere(2);
        let verts: Vec<Vec3> = sphere.vertices.iter().map(|v| Vec3::new(v.x * 0.55, v.y * 0.65, v.z * 0.6)).collect();
        let raster_cfg = RasterConfig {
            resolution: cfg.resolution,
            half_extent: 1.0,
            delta: 0.1,
        };
        let raster = PlaneRaster::build(&verts, &sphere.faces, raster_cfg)?;
        let texture = initial_texture(verts.len(), c, 1.5, 0.8, &mut rng)?;
        let mut head_decoder = Decoder::random(c, 1.0, &mut rng)?;
        head_decoder.weights[0] = 1.0;
        head_decoder.bias = [-3.0, 0.1, -0.1, 0.2];
        let hair_planes = HexPlanes::random(cfg.resolution, c, 1.0, 0.1, 1.0, &mut rng)?;
        let mut hair_decoder = Decoder::random(c, 1.0, &mut rng)?;
        hair_decoder.bias[0] = -1.5;

        let rig = CameraRig::build(8, &[-15.0, 0.0, 15.0], 2.7, Intrinsics::from_fov(32, 32, 30.0))?;
        let render = RenderConfig {
            samples: cfg.samples,
            ..RenderConfig::default()
        };
        let mut rays = Vec::with_capacity(cfg.rays);
        let head_planes = raster.fill(&texture)?;
        let scene = Scene::with_hair(Branch::new(&head_planes, &head_decoder)?, Some(Branch::new(&hair_planes, &hair_decoder)?));
        for index in 0..cfg.rays as u64 {
            let cam = &rig.cameras[rng.random_range(0..rig.len())];
            let ray = cam.pixel_ray(rng.random_range(8..24), rng.random_range(8..24), render.near, render.far);
            let out = render_ray(&scene, &ray, &render, index);
            // Targets sit well away from the render so no L1 kink is crossed.
            let target = out.rgb.map(|v| v + if rng.random::<bool>() { 1.0 } else { -1.0 } * rng.random_range(0.1..0.3));
            rays.push(TrainRay {
                ray,
                target,
                weight: rng.random_range(0.5..1.5),
                index,
            });
        }
        Ok(Self {
            raster,
            texture,
            head_decoder,
            hair_planes,
            hair_decoder,
            rays,
            render,
        })
    }

    fn loss(&self, head_planes: &HexPlanes, head_decoder: &Decoder, hair_planes: &HexPlanes, hair_decoder: &Decoder) -> f64 {
        let scene = Scene::with_hair(
            Branch::new(head_planes, head_decoder).expect("matching widths"),
            Some(Branch::new(hair_planes, hair_decoder).expect("matching widths")),
        );
        render_loss(&scene, &self.rays, &self.render, 1.0)
    }
}

/// Indices to probe: half among entries with nonzero analytic gradient, half uniform.
fn pick(rng: &mut ChaCha8Rng, grad: &[f64], count: usize) -> Vec<usize> {
    let nonzero: Vec<usize> = (0..grad.len()).filter(|&i| grad[i] != 0.0).collect();
    let mut out = Vec::new();
    let half = (count / 2).min(nonzero.len());
    out.extend(sample(rng, nonzero.len(), half).into_iter().map(|k| nonzero[k]));
    let rest = (count - half).min(grad.len());
    out.extend(sample(rng, grad.len(), rest));
    out.sort_unstable();
    out.dedup();
    out
}

/// Central difference over an f32 parameter, dividing by the step actually representable.
fn central_f32(v: f32, h: f64, mut eval: impl FnMut(f32) -> f64) -> f64 {
    let plus = (v as f64 + h) as f32;
    let minus = (v as f64 - h) as f32;
    (eval(plus) - eval(minus)) / (plus as f64 - minus as f64)
}

pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let s = Setup::new(cfg)?;
    let head_planes = s.raster.fill(&s.texture)?;
    let scene = Scene::with_hair(
        Branch::new(&head_planes, &s.head_decoder)?,
        Some(Branch::new(&s.hair_planes, &s.hair_decoder)?),
    );
    let (_, tape) = backward_render(&scene, &s.rays, &s.render, GradTargets::default(), 1.0, Some(&s.raster))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let h = cfg.step;
    let mut blocks = Vec::new();
    let mut record = |name: &str, errs: Vec<f64>| {
        blocks.push(BlockCheck {
            name: name.to_string(),
            checked: errs.len(),
            max_rel_err: errs.into_iter().fold(0.0, f64::max),
        });
    };

    let errs = pick(&mut rng, &tape.head.planes, cfg.coords_per_block)
        .into_iter()
        .map(|i| {
            let mut p = head_planes.clone();
            p.data_mut()[i] += h;
            let mut m = head_planes.clone();
            m.data_mut()[i] -= h;
            let fd = (s.loss(&p, &s.head_decoder, &s.hair_planes, &s.hair_decoder) - s.loss(&m, &s.head_decoder, &s.hair_planes, &s.hair_decoder)) / (2.0 * h);
            relative_error(tape.head.planes[i], fd)
        })
        .collect();
    record("head planes", errs);

    let errs = pick(&mut rng, &tape.head.decoder, cfg.coords_per_block)
        .into_iter()
        .map(|i| {
            let fd = central_f32(decoder_param(&s.head_decoder, i), h, |v| {
                let d = with_decoder_param(&s.head_decoder, i, v);
                s.loss(&head_planes, &d, &s.hair_planes, &s.hair_decoder)
            });
            relative_error(tape.head.decoder[i], fd)
        })
        .collect();
    record("head decoder", errs);

    let errs = pick(&mut rng, &tape.hair.planes, cfg.coords_per_block)
        .into_iter()
        .map(|i| {
            let mut p = s.hair_planes.clone();
            p.data_mut()[i] += h;
            let mut m = s.hair_planes.clone();
            m.data_mut()[i] -= h;
            let fd = (s.loss(&head_planes, &s.head_decoder, &p, &s.hair_decoder) - s.loss(&head_planes, &s.head_decoder, &m, &s.hair_decoder)) / (2.0 * h);
            relative_error(tape.hair.planes[i], fd)
        })
        .collect();
    record("hair planes", errs);

    let errs = pick(&mut rng, &tape.hair.decoder, cfg.coords_per_block)
        .into_iter()
        .map(|i| {
            let fd = central_f32(decoder_param(&s.hair_decoder, i), h, |v| {
                let d = with_decoder_param(&s.hair_decoder, i, v);
                s.loss(&head_planes, &s.head_decoder, &s.hair_planes, &d)
            });
            relative_error(tape.hair.decoder[i], fd)
        })
        .collect();
    record("hair decoder", errs);

    let mut errs = Vec::new();
    for i in pick(&mut rng, &tape.vertex_features, cfg.coords_per_block) {
        let fd = central_f32(s.texture.data[i], h, |v| {
            let mut t = s.texture.clone();
            t.data[i] = v;
            let planes = s.raster.fill(&t).expect("texture matches raster");
            s.loss(&planes, &s.head_decoder, &s.hair_planes, &s.hair_decoder)
        });
        errs.push(relative_error(tape.vertex_features[i], fd));
    }
    record("vertex features", errs);

    let max_rel_err = blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport { blocks, max_rel_err })
}

fn decoder_param(d: &Decoder, i: usize) -> f32 {
    let wlen = d.weights.len();
    if i < wlen {
        d.weights[i]
    } else {
        d.bias[i - wlen]
    }
}

fn with_decoder_param(d: &Decoder, i: usize, v: f32) -> Decoder {
    let mut out = d.clone();
    let wlen = out.weights.len();
    if i < wlen {
        out.weights[i] = v;
    } else {
        out.bias[i - wlen] = v;
    }
    out
}
