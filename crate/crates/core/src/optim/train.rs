//! Two-phase photometric training of the head library.
//!
//! Phase A fits the per-identity neural textures and the shared head decoder
//! to bald renders. Phase B freezes the head branch and fits one free hair
//! field per hairstyle to full renders, with extra weight on hair pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bilinear::{BilinearModel, BlendCode};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::hexplane::{Decoder, HexField, HexPlanes};
use crate::imaging::Image;
use crate::optim::adam::{Adam, AdamConfig};
use crate::optim::density::{density_regularizer, PairSampler};
use crate::optim::grad::{backward_render, GradTargets, TrainRay};
use crate::render::{Branch, RenderConfig, Scene};
use crate::synhead::Dataset;
use crate::texture::{initial_texture, NeuralTexture, PlaneRaster, RasterConfig};

const STATE_MAGIC: &[u8; 8] = b"H360OPT\0";
/// Initial occupancy feature of head textures (first channel).
const HEAD_OCCUPANCY: f32 = 1.0;
/// Initial density decoder gain and bias: the logit is `gain * (sum of three
/// occupancies) + bias`, so points seen by all three plane pairs are dense and
/// points seen by only two are empty.
const HEAD_DENSITY_GAIN: f32 = 40.0;
const HEAD_DENSITY_BIAS: f32 = -100.0;
/// Initial density logit of trainable hair fields inside the box.
const HAIR_INIT_LOGIT: f32 = -4.0;
const HAIR_DENSITY_GAIN: f32 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub channels: usize,
    pub raster: RasterConfig,
    pub render: RenderConfig,
    pub head_steps: usize,
    /// Steps per trained hairstyle.
    pub hair_steps: usize,
    pub rays_per_step: usize,
    pub lr_texture: f64,
    pub lr_decoder: f64,
    pub lr_hair: f64,
    pub density_weight: f64,
    pub density_pairs: usize,
    pub density_rho: f64,
    /// Extra per-ray weight on hair-mask pixels in phase B.
    pub mask_weight: f64,
    /// Texture-code dimension of the generator fitted after training.
    pub code_dim: usize,
    /// Ablation: one branch trained on full renders, no hair phase.
    pub single_branch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            channels: 8,
            raster: RasterConfig::default(),
            render: RenderConfig {
                samples: 64,
                near: 1.85,
                far: 3.55,
                ..RenderConfig::default()
            },
            head_steps: 3000,
            hair_steps: 1000,
            rays_per_step: 1024,
            lr_texture: 0.01,
            lr_decoder: 0.0025,
            lr_hair: 0.01,
            density_weight: 0.25,
            density_pairs: 256,
            density_rho: 0.01,
            mask_weight: 4.0,
            code_dim: 4,
            single_branch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.render.validate()?;
        if self.render.jitter {
            return Err(Error::InvalidArgument("training requires deterministic sampling (jitter off)".into()));
        }
        if self.rays_per_step == 0 || self.density_pairs == 0 || self.channels == 0 {
            return Err(Error::InvalidArgument("rays_per_step, density_pairs and channels must be positive".into()));
        }
        let weights = [self.lr_texture, self.lr_decoder, self.lr_hair, self.density_weight, self.mask_weight, self.density_rho];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument("learning rates and loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// One supervised view: full render, bald render and hair mask.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub identity: usize,
    pub expression: usize,
    pub camera: usize,
    pub full: Image,
    pub bald: Image,
    pub hair_mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct TrainSet {
    pub cameras: Vec<Camera>,
    pub views: Vec<TrainView>,
    /// Hairstyle worn by each identity.
    pub hairstyle_of: Vec<usize>,
    pub hairstyles: Vec<String>,
}

impl TrainSet {
    pub fn from_dataset(ds: &Dataset, identities: &[usize], expressions: &[usize], cameras: &[usize]) -> Result<Self> {
        let spec = ds.spec();
        let mut views = Vec::new();
        for &i in identities {
            for &j in expressions {
                for &c in cameras {
                    if i >= spec.identities || j >= spec.expressions || c >= ds.cameras.len() {
                        return Err(Error::UnknownId(format!("view ({i}, {j}, {c})")));
                    }
                    views.push(TrainView {
                        identity: i,
                        expression: j,
                        camera: c,
                        full: ds.image(i, j, c)?,
                        bald: ds.bald(i, j, c)?,
                        hair_mask: ds.mask(i, j, c)?,
                    });
                }
            }
        }
        Ok(Self {
            cameras: ds.cameras.clone(),
            views,
            hairstyle_of: ds.manifest.identities.iter().map(|r| r.hairstyle).collect(),
            hairstyles: ds.manifest.hairstyles.clone(),
        })
    }
}

/// Training phase of a global step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Phase {
    Head,
    Hair { style: usize },
    Done,
}

struct Group {
    identity: usize,
    raster: PlaneRaster,
    views: Vec<usize>,
}

/// Mutable training state; everything needed to resume bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub step: usize,
    pub textures: Vec<NeuralTexture>,
    pub head_decoder: Decoder,
    /// One field per hairstyle; untrained styles stay empty.
    pub hair: Vec<HexField>,
    pub losses: Vec<f64>,
    adam_textures: Vec<Adam>,
    adam_decoder: Adam,
    adam_hair_planes: Vec<Adam>,
    adam_hair_decoder: Vec<Adam>,
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: &'a TrainSet,
    groups: Vec<Group>,
    /// Phase-B plan: (style, groups of identities wearing it).
    styles: Vec<(usize, Vec<usize>)>,
    pub state: TrainerState,
}

pub fn decoder_params(d: &Decoder) -> Vec<f32> {
    let mut p = d.weights.clone();
    p.extend_from_slice(&d.bias);
    p
}

pub fn set_decoder_params(d: &mut Decoder, p: &[f32]) {
    let n = d.weights.len();
    d.weights.copy_from_slice(&p[..n]);
    d.bias.copy_from_slice(&p[n..n + 4]);
}

/// Hair field with empty-space density everywhere.
pub fn empty_hair_field(raster: RasterConfig, channels: usize) -> Result<HexField> {
    HexField::new(
        HexPlanes::zeros(raster.resolution, channels, raster.half_extent, raster.delta)?,
        Decoder::empty(channels)?,
    )
}

fn initial_head_decoder(channels: usize, rng: &mut impl Rng) -> Result<Decoder> {
    let mut d = Decoder::random(channels, 0.1, rng)?;
    d.weights[..channels].iter_mut().for_each(|w| *w = 0.0);
    d.weights[0] = HEAD_DENSITY_GAIN;
    d.bias = [HEAD_DENSITY_BIAS, 0.0, 0.0, 0.0];
    Ok(d)
}

fn initial_hair_field(raster: RasterConfig, channels: usize, rng: &mut impl Rng) -> Result<HexField> {
    let mut planes = HexPlanes::random(raster.resolution, channels, raster.half_extent, raster.delta, 0.05, rng)?;
    for (i, v) in planes.data_mut().iter_mut().enumerate() {
        if i % channels == 0 {
            *v += 1.0;
        }
    }
    let mut d = Decoder::random(channels, 0.1, rng)?;
    d.weights[..channels].iter_mut().for_each(|w| *w = 0.0);
    d.weights[0] = HAIR_DENSITY_GAIN;
    d.bias = [HAIR_INIT_LOGIT - 3.0 * HAIR_DENSITY_GAIN, 0.0, 0.0, 0.0];
    HexField::new(planes, d)
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: &'a TrainSet, model: &BilinearModel) -> Result<Self> {
        cfg.validate()?;
        if data.views.is_empty() {
            return Err(Error::InvalidArgument("training set has no views".into()));
        }
        let ids = model.identities();
        let e = model.expressions();
        let mut groups: Vec<Group> = Vec::new();
        for (vi, v) in data.views.iter().enumerate() {
            if v.identity >= ids || v.expression >= e || v.camera >= data.cameras.len() {
                return Err(Error::Dimension(format!(
                    "view ({}, {}, {}) outside model/cameras",
                    v.identity, v.expression, v.camera
                )));
            }
            match groups.iter_mut().find(|g| g.identity == v.identity && g.views.first().map(|&f| data.views[f].expression) == Some(v.expression)) {
                Some(g) => g.views.push(vi),
                None => {
                    let verts = model.synthesize(&model.identity_code(v.identity), &BlendCode::unit(e, v.expression))?;
                    groups.push(Group {
                        identity: v.identity,
                        raster: PlaneRaster::build(&verts, model.faces(), cfg.raster)?,
                        views: vec![vi],
                    });
                }
            }
        }
        let mut styles = Vec::new();
        if !cfg.single_branch {
            for style in 0..data.hairstyles.len() {
                let members: Vec<usize> = (0..groups.len())
                    .filter(|&g| data.hairstyle_of.get(groups[g].identity) == Some(&style))
                    .collect();
                let supervised = members
                    .iter()
                    .any(|&g| groups[g].views.iter().any(|&v| data.views[v].hair_mask.iter().any(|&m| m)));
                if supervised {
                    styles.push((style, members));
                }
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n = model.vertex_count();
        let c = cfg.channels;
        let textures = (0..ids)
            .map(|_| initial_texture(n, c, HEAD_OCCUPANCY, 0.1, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head_decoder = initial_head_decoder(c, &mut rng)?;
        let mut hair = Vec::with_capacity(data.hairstyles.len());
        for style in 0..data.hairstyles.len() {
            hair.push(if styles.iter().any(|(s, _)| *s == style) {
                initial_hair_field(cfg.raster, c, &mut rng)?
            } else {
                empty_hair_field(cfg.raster, c)?
            });
        }
        let tex_len = n * c;
        let dec_len = head_decoder.param_count();
        let state = TrainerState {
            step: 0,
            adam_textures: (0..ids).map(|_| Adam::new(tex_len, AdamConfig::with_lr(cfg.lr_texture))).collect(),
            adam_decoder: Adam::new(dec_len, AdamConfig::with_lr(cfg.lr_decoder)),
            adam_hair_planes: hair.iter().map(|h| Adam::new(h.planes.data().len(), AdamConfig::with_lr(cfg.lr_hair))).collect(),
            adam_hair_decoder: hair.iter().map(|_| Adam::new(dec_len, AdamConfig::with_lr(cfg.lr_decoder))).collect(),
            textures,
            head_decoder,
            hair,
            losses: Vec::new(),
        };
        Ok(Self {
            cfg,
            data,
            groups,
            styles,
            state,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.head_steps + self.styles.len() * self.cfg.hair_steps
    }

    /// Styles that receive a hair phase, in training order.
    pub fn trained_styles(&self) -> Vec<usize> {
        self.styles.iter().map(|(s, _)| *s).collect()
    }

    pub fn phase(&self, step: usize) -> Phase {
        if step < self.cfg.head_steps {
            return Phase::Head;
        }
        let k = (step - self.cfg.head_steps) / self.cfg.hair_steps.max(1);
        match self.styles.get(k) {
            Some((style, _)) if self.cfg.hair_steps > 0 => Phase::Hair { style: *style },
            _ => Phase::Done,
        }
    }

    fn sample_rays(&self, rng: &mut ChaCha8Rng, group: &Group, hair: bool) -> Vec<TrainRay> {
        let render = &self.cfg.render;
        (0..self.cfg.rays_per_step)
            .map(|k| {
                let view = &self.data.views[group.views[rng.random_range(0..group.views.len())]];
                let cam = &self.data.cameras[view.camera];
                let (w, h) = (cam.width(), cam.height());
                let (x, y) = (rng.random_range(0..w), rng.random_range(0..h));
                let idx = (y * w + x) as usize;
                let (target, weight) = if hair {
                    let m = if view.hair_mask[idx] { self.cfg.mask_weight } else { 0.0 };
                    (view.full.rgb_f64(idx), 1.0 + m)
                } else if self.cfg.single_branch {
                    (view.full.rgb_f64(idx), 1.0)
                } else {
                    (view.bald.rgb_f64(idx), 1.0)
                };
                TrainRay {
                    ray: cam.pixel_ray(x, y, render.near, render.far),
                    target,
                    weight,
                    index: k as u64,
                }
            })
            .collect()
    }

    /// Run one optimization step; returns the photometric loss, or `None` when training is done.
    pub fn step(&mut self) -> Result<Option<f64>> {
        let step = self.state.step;
        let phase = self.phase(step);
        let mut rng = step_rng(self.cfg.seed, step);
        let sampler = PairSampler {
            seed: rng.random(),
            half_extent: self.cfg.raster.half_extent,
            direction: None,
        };
        let c = self.cfg.channels;
        let loss = match phase {
            Phase::Done => return Ok(None),
            Phase::Head => {
                let group = &self.groups[rng.random_range(0..self.groups.len())];
                let rays = self.sample_rays(&mut rng, group, false);
                let st = &mut self.state;
                let planes = group.raster.fill(&st.textures[group.identity])?;
                let branch = Branch::new(&planes, &st.head_decoder)?;
                let (loss, mut tape) = backward_render(&Scene::head_only(branch), &rays, &self.cfg.render, GradTargets::default(), 1.0, None)?;
                if self.cfg.density_weight > 0.0 {
                    density_regularizer(&branch, self.cfg.density_pairs, self.cfg.density_rho, sampler, self.cfg.density_weight, Some(&mut tape.head))?;
                }
                tape.backproject_head(&group.raster, c);
                tape.check_finite()?;
                st.adam_textures[group.identity].step(&mut st.textures[group.identity].data, &tape.vertex_features)?;
                let mut p = decoder_params(&st.head_decoder);
                st.adam_decoder.step(&mut p, &tape.head.decoder)?;
                set_decoder_params(&mut st.head_decoder, &p);
                loss
            }
            Phase::Hair { style } => {
                let members = &self.styles.iter().find(|(s, _)| *s == style).expect("planned style").1;
                let group = &self.groups[members[rng.random_range(0..members.len())]];
                let rays = self.sample_rays(&mut rng, group, true);
                let st = &mut self.state;
                let planes = group.raster.fill(&st.textures[group.identity])?;
                let head = Branch::new(&planes, &st.head_decoder)?;
                let hair = Branch::of(&st.hair[style]);
                let targets = GradTargets { head: false, hair: true };
                let (loss, mut tape) = backward_render(&Scene::with_hair(head, Some(hair)), &rays, &self.cfg.render, targets, 1.0, None)?;
                if self.cfg.density_weight > 0.0 {
                    density_regularizer(&hair, self.cfg.density_pairs, self.cfg.density_rho, sampler, self.cfg.density_weight, Some(&mut tape.hair))?;
                }
                tape.check_finite()?;
                let field = &mut st.hair[style];
                st.adam_hair_planes[style].step(field.planes.data_mut(), &tape.hair.planes)?;
                let mut p = decoder_params(&field.decoder);
                st.adam_hair_decoder[style].step(&mut p, &tape.hair.decoder)?;
                set_decoder_params(&mut field.decoder, &p);
                loss
            }
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        self.state.losses.push(loss);
        self.state.step += 1;
        Ok(Some(loss))
    }

    /// Train to completion, reporting `(step, total, loss)` after each step.
    pub fn run(&mut self, mut progress: impl FnMut(usize, usize, f64)) -> Result<()> {
        let total = self.total_steps();
        while let Some(loss) = self.step()? {
            progress(self.state.step, total, loss);
        }
        Ok(())
    }

    /// Hair fields as stored in a checkpoint (planes rounded to f32).
    pub fn hair_fields(&self) -> Vec<HexField> {
        self.state
            .hair
            .iter()
            .map(|h| {
                let mut h = h.clone();
                h.planes.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
                h
            })
            .collect()
    }

    pub fn state_bytes(&self) -> Vec<u8> {
        let st = &self.state;
        let mut w = Writer::default();
        w.bytes(STATE_MAGIC);
        w.u32(st.step as u32);
        w.u32(st.textures.len() as u32);
        w.u32(st.hair.len() as u32);
        for t in &st.textures {
            w.f32s(&t.data);
        }
        w.f32s(&decoder_params(&st.head_decoder));
        for h in &st.hair {
            w.f64s(h.planes.data());
            w.f32s(&decoder_params(&h.decoder));
        }
        w.u32(st.losses.len() as u32);
        w.f64s(&st.losses);
        for a in st.adam_textures.iter().chain([&st.adam_decoder]).chain(&st.adam_hair_planes).chain(&st.adam_hair_decoder) {
            a.write(&mut w);
        }
        w.buf
    }

    /// Restore state written by [`Trainer::state_bytes`] for the same config and data.
    pub fn restore(&mut self, bytes: &[u8]) -> Result<()> {
        let mut r = Reader::new(bytes);
        r.magic(STATE_MAGIC)?;
        let mut st = self.state.clone();
        st.step = r.u32()? as usize;
        let (nt, nh) = (r.u32()? as usize, r.u32()? as usize);
        if nt != st.textures.len() || nh != st.hair.len() {
            return Err(Error::Dimension(format!(
                "state has {nt} textures / {nh} hair fields, trainer expects {} / {}",
                st.textures.len(),
                st.hair.len()
            )));
        }
        for t in &mut st.textures {
            t.data = r.f32s(t.data.len())?;
        }
        let p = r.f32s(st.head_decoder.param_count())?;
        set_decoder_params(&mut st.head_decoder, &p);
        for h in &mut st.hair {
            let n = h.planes.data().len();
            h.planes.data_mut().copy_from_slice(&r.f64s(n)?);
            let p = r.f32s(h.decoder.param_count())?;
            set_decoder_params(&mut h.decoder, &p);
        }
        let nl = r.u32()? as usize;
        st.losses = r.f64s(nl)?;
        let read_adam = |r: &mut Reader, like: &Adam| -> Result<Adam> {
            let a = Adam::read(r)?;
            if a.len() != like.len() {
                return Err(Error::Format("optimizer block size mismatch".into()));
            }
            Ok(a)
        };
        for a in &mut st.adam_textures {
            *a = read_adam(&mut r, a)?;
        }
        st.adam_decoder = read_adam(&mut r, &st.adam_decoder)?;
        for a in &mut st.adam_hair_planes {
            *a = read_adam(&mut r, a)?;
        }
        for a in &mut st.adam_hair_decoder {
            *a = read_adam(&mut r, a)?;
        }
        r.finish()?;
        self.state = st;
        Ok(())
    }
}
