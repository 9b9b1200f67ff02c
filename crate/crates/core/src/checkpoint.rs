//! Trained head library on disk and the renderer that composes it.
//!
//! Layout: `model.bin`, `generator.bin`, `decoder.bin`, `textures/<id>.bin`,
//! `hair/<style>.bin`, `config.json`, `report.json`, `cameras.json`,
//! `landmarks.json`, and `optimizer.bin` when training can be resumed.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bilinear::{BilinearModel, BlendCode, ShapeCode};
use crate::binio;
use crate::error::{Error, Result};
use crate::geometry::camera::{load_cameras, save_cameras};
use crate::geometry::Camera;
use crate::hexplane::{Decoder, HexField, HexPlanes};
use crate::imaging::Image;
use crate::optim::train::{Phase, TrainConfig, TrainSet, Trainer};
use crate::render::{psnr, render_image, Branch, RenderConfig, Rendered, Scene};
use crate::synhead::Landmark;
use crate::texture::{condition_field, NeuralTexture, RasterConfig, TextureGenerator};

pub const FORMAT_VERSION: u32 = 1;
pub const OPTIMIZER_FILE: &str = "optimizer.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub version: u32,
    pub channels: usize,
    pub raster: RasterConfig,
    pub render: RenderConfig,
    pub hairstyles: Vec<String>,
    /// Hairstyle worn by each identity of the bilinear model.
    pub identity_hairstyles: Vec<usize>,
    /// Training configuration, when the library came from training.
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpan {
    pub phase: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsnrRecord {
    pub step: usize,
    /// `bald` compares the head branch alone with bald renders; `full` the composite with full renders.
    pub target: String,
    pub identity: usize,
    pub expression: usize,
    pub camera: usize,
    pub psnr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub losses: Vec<f64>,
    pub phases: Vec<PhaseSpan>,
    pub psnr_history: Vec<PsnrRecord>,
}

impl TrainReport {
    /// Mean PSNR of the records for `target` at the last step that has any.
    pub fn final_mean_psnr(&self, target: &str) -> Option<f64> {
        let last = self.psnr_history.iter().filter(|r| r.target == target).map(|r| r.step).max()?;
        let vals: Vec<f64> = self
            .psnr_history
            .iter()
            .filter(|r| r.target == target && r.step == last)
            .map(|r| r.psnr)
            .collect();
        Some(vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Shape, texture and hairstyle: everything that varies between heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub shape: ShapeCode,
    pub texture: NeuralTexture,
    pub hairstyle: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub model: BilinearModel,
    pub generator: TextureGenerator,
    /// Trained per-identity textures.
    pub textures: BTreeMap<usize, NeuralTexture>,
    pub decoder: Decoder,
    /// One entry per hairstyle; `None` renders without a hair branch (bald or untrained).
    pub hair: Vec<Option<HexField>>,
    pub cameras: Vec<Camera>,
    pub landmarks: Vec<Landmark>,
    pub report: TrainReport,
}

fn style_file(name: &str) -> String {
    format!("hair/{name}.bin")
}

fn texture_file(id: usize) -> String {
    format!("textures/{id:03}.bin")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    binio::write_file(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&binio::read_file(path)?)?)
}

impl Checkpoint {
    pub fn hairstyle_count(&self) -> usize {
        self.config.hairstyles.len()
    }

    /// Resolve a hairstyle by name or decimal index.
    pub fn hairstyle_id(&self, key: &str) -> Result<usize> {
        if let Some(i) = self.config.hairstyles.iter().position(|h| h == key) {
            return Ok(i);
        }
        match key.parse::<usize>() {
            Ok(i) if i < self.hairstyle_count() => Ok(i),
            _ => Err(Error::UnknownId(format!("hairstyle `{key}`"))),
        }
    }

    pub fn check_hairstyle(&self, id: usize) -> Result<()> {
        if id < self.hairstyle_count() {
            Ok(())
        } else {
            Err(Error::UnknownId(format!("hairstyle {id} (library has {})", self.hairstyle_count())))
        }
    }

    pub fn texture(&self, id: usize) -> Result<&NeuralTexture> {
        self.textures.get(&id).ok_or_else(|| Error::UnknownId(format!("texture {id}")))
    }

    pub fn camera(&self, id: usize) -> Result<&Camera> {
        self.cameras.get(id).ok_or_else(|| Error::UnknownId(format!("camera {id}")))
    }

    /// A trained identity with its own shape code, texture and hairstyle.
    pub fn identity_head(&self, id: usize) -> Result<Head> {
        let texture = self.texture(id)?.clone();
        Ok(Head {
            shape: self.model.identity_code(id),
            texture,
            hairstyle: self.config.identity_hairstyles.get(id).copied().unwrap_or(0),
        })
    }

    pub fn head_planes(&self, shape: &ShapeCode, blend: &BlendCode, texture: &NeuralTexture) -> Result<HexPlanes> {
        if texture.channels() != self.config.channels {
            return Err(Error::Dimension(format!(
                "texture has {} channels, library uses {}",
                texture.channels(),
                self.config.channels
            )));
        }
        condition_field(&self.model, shape, blend, texture, self.config.raster)
    }

    pub fn hair_field(&self, style: usize) -> Result<Option<&HexField>> {
        self.check_hairstyle(style)?;
        Ok(self.hair[style].as_ref())
    }

    /// Render `head` under `blend`; `hair: false` drops the hair branch.
    pub fn render(&self, head: &Head, blend: &BlendCode, camera: &Camera, cfg: &RenderConfig, hair: bool) -> Result<Rendered> {
        let planes = self.head_planes(&head.shape, blend, &head.texture)?;
        self.render_planes(&planes, head.hairstyle, camera, cfg, hair)
    }

    pub fn render_planes(&self, planes: &HexPlanes, hairstyle: usize, camera: &Camera, cfg: &RenderConfig, hair: bool) -> Result<Rendered> {
        let field = self.hair_field(hairstyle)?;
        let head = Branch::new(planes, &self.decoder)?;
        let hair = if hair { field.map(Branch::of) } else { None };
        render_image(&Scene::with_hair(head, hair), camera, cfg)
    }

    /// Hair branch alone (alpha carries its silhouette); `None` for hairless styles.
    pub fn render_hair_only(&self, hairstyle: usize, camera: &Camera, cfg: &RenderConfig) -> Result<Option<Rendered>> {
        match self.hair_field(hairstyle)? {
            Some(f) => Ok(Some(render_image(f, camera, cfg)?)),
            None => Ok(None),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.model.save(&dir.join("model.bin"))?;
        self.generator.save(&dir.join("generator.bin"))?;
        self.decoder.save(&dir.join("decoder.bin"))?;
        for (id, t) in &self.textures {
            t.save(&dir.join(texture_file(*id)))?;
        }
        for (name, h) in self.config.hairstyles.iter().zip(&self.hair) {
            if let Some(h) = h {
                h.save(&dir.join(style_file(name)))?;
            }
        }
        write_json(&dir.join("config.json"), &self.config)?;
        write_json(&dir.join("report.json"), &self.report)?;
        write_json(&dir.join("landmarks.json"), &self.landmarks)?;
        save_cameras(&dir.join("cameras.json"), &self.cameras)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: CheckpointConfig = read_json(&dir.join("config.json"))?;
        if config.version != FORMAT_VERSION {
            return Err(Error::Format(format!("checkpoint version {} (expected {FORMAT_VERSION})", config.version)));
        }
        let model = BilinearModel::load(&dir.join("model.bin"))?;
        let generator = TextureGenerator::load(&dir.join("generator.bin"))?;
        let decoder = Decoder::load(&dir.join("decoder.bin"))?;
        let mut textures = BTreeMap::new();
        let tex_dir = dir.join("textures");
        let entries = fs::read_dir(&tex_dir).map_err(|e| Error::io(&tex_dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&tex_dir, e))?.path();
            let Some(id) = path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<usize>().ok()) else {
                continue;
            };
            textures.insert(id, NeuralTexture::load(&path)?);
        }
        let mut hair = Vec::with_capacity(config.hairstyles.len());
        for name in &config.hairstyles {
            let path = dir.join(style_file(name));
            hair.push(if path.exists() {
                Some(HexField::load(&path, config.raster.half_extent, config.raster.delta)?)
            } else {
                None
            });
        }
        let ck = Self {
            model,
            generator,
            textures,
            decoder,
            hair,
            cameras: load_cameras(&dir.join("cameras.json"))?,
            landmarks: read_json(&dir.join("landmarks.json"))?,
            report: read_json(&dir.join("report.json"))?,
            config,
        };
        ck.validate()?;
        Ok(ck)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.config.channels;
        let n = self.model.vertex_count();
        if self.decoder.channels() != c {
            return Err(Error::Dimension("decoder channels".into()));
        }
        if self.hair.len() != self.config.hairstyles.len() {
            return Err(Error::Dimension("hair field count".into()));
        }
        for (id, t) in &self.textures {
            if t.vertex_count() != n || t.channels() != c || *id >= self.model.identities() {
                return Err(Error::Dimension(format!("texture {id} does not fit the model")));
            }
        }
        if self.generator.vertex_count() != n || self.generator.channels() != c {
            return Err(Error::Dimension("generator does not fit the model".into()));
        }
        if let Some(bad) = self.landmarks.iter().find(|l| l.vertex as usize >= n) {
            return Err(Error::Dimension(format!("landmark `{}` vertex out of range", bad.name)));
        }
        Ok(())
    }

    /// Assemble a library from a finished trainer.
    pub fn from_trainer(
        trainer: &Trainer,
        data: &TrainSet,
        model: &BilinearModel,
        landmarks: Vec<Landmark>,
        report: TrainReport,
    ) -> Result<Self> {
        let cfg = trainer.config().clone();
        let ids: Vec<usize> = {
            let mut v: Vec<usize> = data.views.iter().map(|v| v.identity).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let textures: BTreeMap<usize, NeuralTexture> = ids.iter().map(|&i| (i, trainer.state.textures[i].clone())).collect();
        let list: Vec<NeuralTexture> = textures.values().cloned().collect();
        let (generator, _) = TextureGenerator::fit_pca(&list, cfg.code_dim)?;
        let trained = trainer.trained_styles();
        let hair = trainer
            .hair_fields()
            .into_iter()
            .enumerate()
            .map(|(s, f)| trained.contains(&s).then_some(f))
            .collect();
        let mut identity_hairstyles = data.hairstyle_of.clone();
        identity_hairstyles.resize(model.identities(), 0);
        let ck = Self {
            config: CheckpointConfig {
                version: FORMAT_VERSION,
                channels: cfg.channels,
                raster: cfg.raster,
                render: cfg.render,
                hairstyles: data.hairstyles.clone(),
                identity_hairstyles,
                train: Some(cfg),
            },
            model: model.clone(),
            generator,
            textures,
            decoder: trainer.state.head_decoder.clone(),
            hair,
            cameras: data.cameras.clone(),
            landmarks,
            report,
        };
        ck.validate()?;
        Ok(ck)
    }

    /// PSNR of every training view: head branch against bald renders and composite against full renders.
    pub fn evaluate_views(&self, data: &TrainSet, step: usize) -> Result<Vec<PsnrRecord>> {
        let mut out = Vec::new();
        for v in &data.views {
            let mut head = self.identity_head(v.identity)?;
            head.hairstyle = data.hairstyle_of.get(v.identity).copied().unwrap_or(0);
            let blend = BlendCode::unit(self.model.expressions(), v.expression);
            let planes = self.head_planes(&head.shape, &blend, &head.texture)?;
            let cam = &data.cameras[v.camera];
            for (target, hair, truth) in [("bald", false, &v.bald), ("full", true, &v.full)] {
                let r = self.render_planes(&planes, head.hairstyle, cam, &self.config.render, hair)?;
                out.push(PsnrRecord {
                    step,
                    target: target.into(),
                    identity: v.identity,
                    expression: v.expression,
                    camera: v.camera,
                    psnr: psnr(&r.image, truth)?,
                });
            }
        }
        Ok(out)
    }
}

/// Train a library end to end; `progress` sees `(step, total, loss)`.
///
/// On divergence the error is returned together with the library built from
/// the last good state, so callers can still write it out.
pub fn train_library(
    cfg: TrainConfig,
    data: &TrainSet,
    model: &BilinearModel,
    landmarks: Vec<Landmark>,
    resume: Option<&[u8]>,
    mut progress: impl FnMut(usize, usize, f64),
) -> std::result::Result<(Checkpoint, Vec<u8>), (Error, Option<Box<Checkpoint>>)> {
    let mut trainer = Trainer::new(cfg, data, model).map_err(|e| (e, None))?;
    if let Some(bytes) = resume {
        trainer.restore(bytes).map_err(|e| (e, None))?;
    }
    let total = trainer.total_steps();
    let mut history = Vec::new();
    let report_of = |t: &Trainer, history: &[PsnrRecord]| TrainReport {
        steps: t.state.step,
        losses: t.state.losses.clone(),
        phases: phase_spans(t),
        psnr_history: history.to_vec(),
    };
    loop {
        let before = trainer.state.step;
        match trainer.step() {
            Ok(Some(loss)) => progress(trainer.state.step, total, loss),
            Ok(None) => break,
            Err(e) => {
                let ck = Checkpoint::from_trainer(&trainer, data, model, landmarks.clone(), report_of(&trainer, &history)).ok();
                return Err((e, ck.map(Box::new)));
            }
        }
        let phase_ended = trainer.phase(before) == Phase::Head && trainer.phase(trainer.state.step) != Phase::Head;
        if phase_ended {
            let ck = Checkpoint::from_trainer(&trainer, data, model, landmarks.clone(), TrainReport::default()).map_err(|e| (e, None))?;
            history.extend(ck.evaluate_views(data, trainer.state.step).map_err(|e| (e, None))?.into_iter().filter(|r| r.target == "bald"));
        }
    }
    let mut ck = Checkpoint::from_trainer(&trainer, data, model, landmarks, TrainReport::default()).map_err(|e| (e, None))?;
    history.extend(ck.evaluate_views(data, trainer.state.step).map_err(|e| (e, None))?);
    ck.report = report_of(&trainer, &history);
    Ok((ck, trainer.state_bytes()))
}

fn phase_spans(t: &Trainer) -> Vec<PhaseSpan> {
    let cfg = t.config();
    let mut spans = vec![PhaseSpan {
        phase: "head".into(),
        start: 0,
        end: cfg.head_steps,
    }];
    for (k, style) in t.trained_styles().into_iter().enumerate() {
        let start = cfg.head_steps + k * cfg.hair_steps;
        spans.push(PhaseSpan {
            phase: format!("hair:{style}"),
            start,
            end: start + cfg.hair_steps,
        });
    }
    spans
}

/// Mean PSNR of `a` against `b` over several image pairs.
pub fn mean_psnr(pairs: &[(&Image, &Image)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no images to compare".into()));
    }
    let mut total = 0.0;
    for (a, b) in pairs {
        total += psnr(a, b)?;
    }
    Ok(total / pairs.len() as f64)
}
