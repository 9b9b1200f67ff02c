//! Reverse-mode gradients of the photometric L1 loss through the renderer.

use crate::error::{Error, Result};
use crate::geometry::Ray;
use crate::hexplane::{sigmoid, Decoder, FieldSample, Footprint, MAX_CHANNELS};
use crate::render::{for_each_segment, Branch, RenderConfig, Scene};
use crate::texture::PlaneRaster;

/// Rays per accumulation chunk; chunk tapes are reduced in index order.
pub const RAY_CHUNK: usize = 512;

/// Gradients of one field branch: planes payload and decoder (`4C` weights, then 4 biases).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BranchGrad {
    pub planes: Vec<f64>,
    pub decoder: Vec<f64>,
}

impl BranchGrad {
    pub fn for_branch(branch: &Branch) -> Self {
        Self {
            planes: vec![0.0; branch.planes.data().len()],
            decoder: vec![0.0; branch.decoder.param_count()],
        }
    }

    fn add(&mut self, other: &BranchGrad) {
        for (a, b) in self.planes.iter_mut().zip(&other.planes) {
            *a += b;
        }
        for (a, b) in self.decoder.iter_mut().zip(&other.decoder) {
            *a += b;
        }
    }

    fn scale(&mut self, s: f64) {
        self.planes.iter_mut().chain(self.decoder.iter_mut()).for_each(|v| *v *= s);
    }

    pub fn is_zero(&self) -> bool {
        self.planes.iter().chain(&self.decoder).all(|&v| v == 0.0)
    }

    /// Backpropagate `d loss / d (logits)` at one sample into decoder and plane gradients.
    #[inline]
    pub(crate) fn accumulate(&mut self, branch: &Branch, fp: &Footprint, feature: &[f64], dz: [f64; 4]) {
        let c = branch.planes.channels();
        let mut df = [0.0; MAX_CHANNELS];
        for (r, &d) in dz.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &branch.decoder.weights[r * c..(r + 1) * c];
            let grow = &mut self.decoder[r * c..(r + 1) * c];
            for ch in 0..c {
                grow[ch] += d * feature[ch];
                df[ch] += d * row[ch] as f64;
            }
            self.decoder[4 * c + r] += d;
        }
        for tap in fp.taps() {
            let g = &mut self.planes[tap.offset as usize..tap.offset as usize + c];
            for ch in 0..c {
                g[ch] += tap.weight * df[ch];
            }
        }
    }
}

/// Gradients keyed by parameter block.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientTape {
    pub head: BranchGrad,
    pub hair: BranchGrad,
    /// Per-vertex feature gradients, filled when the head planes come from a [`PlaneRaster`].
    pub vertex_features: Vec<f64>,
}

impl GradientTape {
    pub fn for_scene(head: Option<&Branch>, hair: Option<&Branch>) -> Self {
        Self {
            head: head.map(BranchGrad::for_branch).unwrap_or_default(),
            hair: hair.map(BranchGrad::for_branch).unwrap_or_default(),
            vertex_features: Vec::new(),
        }
    }

    pub fn zero(&mut self) {
        for v in [
            &mut self.head.planes,
            &mut self.head.decoder,
            &mut self.hair.planes,
            &mut self.hair.decoder,
            &mut self.vertex_features,
        ] {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn add(&mut self, other: &GradientTape) {
        self.head.add(&other.head);
        self.hair.add(&other.hair);
        for (a, b) in self.vertex_features.iter_mut().zip(&other.vertex_features) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.head.scale(s);
        self.hair.scale(s);
        self.vertex_features.iter_mut().for_each(|v| *v *= s);
    }

    /// Named blocks in a fixed order.
    pub fn blocks(&self) -> [(&'static str, &[f64]); 5] {
        [
            ("head planes", &self.head.planes),
            ("head decoder", &self.head.decoder),
            ("hair planes", &self.hair.planes),
            ("hair decoder", &self.hair.decoder),
            ("vertex features", &self.vertex_features),
        ]
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, block) in self.blocks() {
            if let Some(i) = block.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(format!("{name} entry {i}")));
            }
        }
        Ok(())
    }

    /// Fill `vertex_features` from the head plane gradients.
    pub fn backproject_head(&mut self, raster: &PlaneRaster, channels: usize) {
        self.vertex_features = vec![0.0; raster.vertex_count() * channels];
        raster.backproject(&self.head.planes, channels, &mut self.vertex_features);
    }
}

/// One supervised ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRay {
    pub ray: Ray,
    pub target: [f64; 3],
    /// Per-ray loss weight.
    pub weight: f64,
    /// Index used to seed jitter; irrelevant when jitter is off.
    pub index: u64,
}

/// Which branches receive gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradTargets {
    pub head: bool,
    pub hair: bool,
}

impl Default for GradTargets {
    fn default() -> Self {
        Self { head: true, hair: true }
    }
}

#[derive(Clone, Copy)]
struct BranchRecord {
    fp: Footprint,
    feature: [f64; MAX_CHANNELS],
    sample: FieldSample,
    /// Softplus slope at the density logit.
    density_slope: f64,
}

impl BranchRecord {
    fn eval(branch: &Branch, p: &crate::Vec3) -> Self {
        let fp = branch.planes.footprint(p);
        let mut feature = [0.0; MAX_CHANNELS];
        branch.planes.gather(&fp, &mut feature);
        let z = branch.decoder.logits(&feature[..branch.planes.channels()]);
        Self {
            fp,
            feature,
            sample: Decoder::activate(z),
            density_slope: sigmoid(z[0]),
        }
    }

    /// Logit gradients from gradients on density and color.
    fn logit_grad(&self, g_sigma: f64, g_color: [f64; 3]) -> [f64; 4] {
        let mut dz = [g_sigma * self.density_slope, 0.0, 0.0, 0.0];
        for k in 0..3 {
            let c = self.sample.color[k];
            dz[k + 1] = g_color[k] * c * (1.0 - c);
        }
        dz
    }
}

struct SampleRecord {
    delta: f64,
    head: Option<BranchRecord>,
    hair: Option<BranchRecord>,
    sigma: f64,
    color: [f64; 3],
}

/// Mean-L1 loss and its gradient for one chunk of rays.
fn backward_chunk(
    scene: &Scene,
    rays: &[TrainRay],
    cfg: &RenderConfig,
    targets: GradTargets,
    scale: f64,
    tape: &mut GradientTape,
) -> f64 {
    let mut loss = 0.0;
    let mut records: Vec<SampleRecord> = Vec::with_capacity(cfg.samples);
    for tr in rays {
        records.clear();
        for_each_segment(cfg, &tr.ray, tr.index, |p, delta| {
            let head = scene.head.map(|b| BranchRecord::eval(&b, &p));
            let hair = scene.hair.map(|b| BranchRecord::eval(&b, &p));
            let hs = head.map(|r| r.sample).unwrap_or_default();
            let rs = hair.map(|r| r.sample).unwrap_or_default();
            let mixed = crate::hexplane::composite(hs, rs);
            records.push(SampleRecord {
                delta,
                head,
                hair,
                sigma: mixed.sigma,
                color: mixed.color,
            });
        });
        let n = records.len();
        // Forward quadrature.
        let mut trans = vec![1.0; n + 1];
        let mut weights = vec![0.0; n];
        let mut rgb = [0.0; 3];
        for (i, r) in records.iter().enumerate() {
            trans[i + 1] = trans[i] * (-r.sigma * r.delta).exp();
            weights[i] = trans[i] - trans[i + 1];
            for k in 0..3 {
                rgb[k] += weights[i] * r.color[k];
            }
        }
        let t_n = trans[n];
        for k in 0..3 {
            rgb[k] += t_n * cfg.background[k];
        }
        // dL/drgb for the weighted mean L1 (subgradient 0 at 0).
        let mut g = [0.0; 3];
        for k in 0..3 {
            let d = rgb[k] - tr.target[k];
            loss += tr.weight * d.abs();
            g[k] = scale * tr.weight * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
        }
        if g == [0.0; 3] {
            continue;
        }
        let g_bg: f64 = (0..3).map(|k| g[k] * cfg.background[k]).sum();
        let mut suffix = 0.0; // sum_{j > i} w_j (g . c_j)
        for i in (0..n).rev() {
            let r = &records[i];
            let gc: f64 = (0..3).map(|k| g[k] * r.color[k]).sum();
            let g_sigma = r.delta * (trans[i + 1] * gc - suffix - t_n * g_bg);
            suffix += weights[i] * gc;
            let g_color = [g[0] * weights[i], g[1] * weights[i], g[2] * weights[i]];
            let hs = r.head.map(|h| h.sample).unwrap_or_default();
            let rs = r.hair.map(|h| h.sample).unwrap_or_default();
            let per_branch = |own: FieldSample| -> (f64, [f64; 3]) {
                if r.sigma > 1e-12 {
                    let mut gs = g_sigma;
                    let mut gcol = [0.0; 3];
                    for k in 0..3 {
                        gs += g_color[k] * (own.color[k] - r.color[k]) / r.sigma;
                        gcol[k] = g_color[k] * own.sigma / r.sigma;
                    }
                    (gs, gcol)
                } else {
                    (g_sigma, [0.0; 3])
                }
            };
            if targets.head {
                if let (Some(rec), Some(branch)) = (&r.head, &scene.head) {
                    let (gs, gcol) = per_branch(hs);
                    let dz = rec.logit_grad(gs, gcol);
                    tape.head.accumulate(branch, &rec.fp, &rec.feature, dz);
                }
            }
            if targets.hair {
                if let (Some(rec), Some(branch)) = (&r.hair, &scene.hair) {
                    let (gs, gcol) = per_branch(rs);
                    let dz = rec.logit_grad(gs, gcol);
                    tape.hair.accumulate(branch, &rec.fp, &rec.feature, dz);
                }
            }
        }
    }
    loss
}

/// Loss `scale * sum_r weight_r * sum_c |rgb - target| / (3 * rays)` and its exact
/// gradient with respect to every plane texel and decoder weight of the scene.
///
/// When `raster` is given the head planes are treated as rasterized from
/// per-vertex features and their gradient is backprojected into
/// `tape.vertex_features`.
pub fn backward_render(
    scene: &Scene,
    rays: &[TrainRay],
    cfg: &RenderConfig,
    targets: GradTargets,
    loss_scale: f64,
    raster: Option<&PlaneRaster>,
) -> Result<(f64, GradientTape)> {
    cfg.validate()?;
    if rays.is_empty() {
        return Err(Error::InvalidArgument("no rays to backpropagate".into()));
    }
    let norm = loss_scale / (3.0 * rays.len() as f64);
    let mut total = GradientTape::for_scene(scene.head.as_ref(), scene.hair.as_ref());
    let mut chunk_tape = total.clone();
    let mut loss = 0.0;
    for chunk in rays.chunks(RAY_CHUNK) {
        chunk_tape.zero();
        loss += backward_chunk(scene, chunk, cfg, targets, norm, &mut chunk_tape);
        total.add(&chunk_tape);
    }
    if let (Some(raster), Some(head)) = (raster, scene.head.as_ref()) {
        total.backproject_head(raster, head.planes.channels());
    }
    total.check_finite()?;
    Ok((loss * norm, total))
}

/// Forward-only loss matching [`backward_render`].
pub fn render_loss(scene: &Scene, rays: &[TrainRay], cfg: &RenderConfig, loss_scale: f64) -> f64 {
    let norm = loss_scale / (3.0 * rays.len() as f64);
    let mut loss = 0.0;
    for tr in rays {
        let out = crate::render::render_ray(scene, &tr.ray, cfg, tr.index);
        for k in 0..3 {
            loss += tr.weight * (out.rgb[k] - tr.target[k]).abs();
        }
    }
    loss * norm
}
