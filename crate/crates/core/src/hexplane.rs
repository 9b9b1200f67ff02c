//! Six axis-aligned feature planes decoded into density and color.
//!
//! Planes are labelled `+x, -x, +y, -y, +z, -z` and stored in that order. The
//! plane pair of axis `a` is indexed by the two remaining coordinates in
//! increasing axis order (`x -> (y, z)`, `y -> (x, z)`, `z -> (x, y)`); the
//! first coordinate selects the column and the second the row. Texel centres
//! sit at `(i + 0.5) / R` of the box extent.

use std::path::Path;

use rand::Rng;

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::Vec3;

pub const HEX_MAGIC: &[u8; 8] = b"H360HEX\0";
pub const DECODER_MAGIC: &[u8; 8] = b"H360DEC\0";

/// Upper bound on the feature width, so per-sample features fit on the stack.
pub const MAX_CHANNELS: usize = 32;
/// Initial density logit bias: untrained space is empty.
pub const EMPTY_DENSITY_BIAS: f32 = -10.0;
pub const PLANE_LABELS: [&str; 6] = ["+x", "-x", "+y", "-y", "+z", "-z"];

/// In-plane coordinates `(column, row)` for each axis.
const PLANE_AXES: [(usize, usize); 3] = [(1, 2), (0, 2), (0, 1)];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    /// Index of the texel's first channel in the plane payload.
    pub offset: u32,
    pub weight: f64,
}

/// Texels (and weights) read by one point sample: at most 2 planes x 4 texels per axis.
#[derive(Debug, Clone, Copy)]
pub struct Footprint {
    taps: [Tap; 24],
    len: usize,
}

impl Default for Footprint {
    fn default() -> Self {
        Self {
            taps: [Tap { offset: 0, weight: 0.0 }; 24],
            len: 0,
        }
    }
}

impl Footprint {
    pub fn taps(&self) -> &[Tap] {
        &self.taps[..self.len]
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    fn push(&mut self, offset: usize, weight: f64) {
        self.taps[self.len] = Tap {
            offset: offset as u32,
            weight,
        };
        self.len += 1;
    }
}

/// Half-space blend weight of the `+a` plane.
#[inline]
pub fn blend_weight(coord: f64, delta: f64) -> f64 {
    (0.5 + coord / (2.0 * delta)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HexPlanes {
    resolution: usize,
    channels: usize,
    half_extent: f64,
    delta: f64,
    /// Held in f64 so planes derived from textures carry no extra rounding;
    /// checkpoints store f32.
    data: Vec<f64>,
}

impl HexPlanes {
    pub fn zeros(resolution: usize, channels: usize, half_extent: f64, delta: f64) -> Result<Self> {
        Self::from_data(resolution, channels, half_extent, delta, vec![0.0; 6 * resolution * resolution * channels])
    }

    pub fn from_data(resolution: usize, channels: usize, half_extent: f64, delta: f64, data: Vec<f64>) -> Result<Self> {
        if resolution == 0 || channels == 0 || channels > MAX_CHANNELS {
            return Err(Error::InvalidArgument(format!(
                "plane resolution {resolution} / channels {channels} out of range (channels <= {MAX_CHANNELS})"
            )));
        }
        if !(half_extent > 0.0) || !(delta > 0.0) || delta >= half_extent {
            return Err(Error::InvalidArgument(format!(
                "blend width {delta} must be positive and below the box half-extent {half_extent}"
            )));
        }
        if data.len() != 6 * resolution * resolution * channels {
            return Err(Error::Dimension(format!("{} plane values for R={resolution}, C={channels}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite plane value".into()));
        }
        Ok(Self {
            resolution,
            channels,
            half_extent,
            delta,
            data,
        })
    }

    /// Planes filled with independent uniform values in `[-scale, scale]`.
    pub fn random(resolution: usize, channels: usize, half_extent: f64, delta: f64, scale: f32, rng: &mut impl Rng) -> Result<Self> {
        let mut planes = Self::zeros(resolution, channels, half_extent, delta)?;
        for v in &mut planes.data {
            *v = rng.random_range(-scale..=scale) as f64;
        }
        Ok(planes)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn half_extent(&self) -> f64 {
        self.half_extent
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_layout(&self, other: &HexPlanes) -> bool {
        self.resolution == other.resolution && self.channels == other.channels
    }

    #[inline]
    pub fn texel_offset(&self, plane: usize, row: usize, col: usize) -> usize {
        ((plane * self.resolution + row) * self.resolution + col) * self.channels
    }

    pub fn texel(&self, plane: usize, row: usize, col: usize) -> &[f64] {
        let o = self.texel_offset(plane, row, col);
        &self.data[o..o + self.channels]
    }

    pub fn set_texel(&mut self, plane: usize, row: usize, col: usize, value: &[f64]) {
        let o = self.texel_offset(plane, row, col);
        self.data[o..o + self.channels].copy_from_slice(value);
    }

    /// World coordinate of texel centre `i` along an in-plane axis.
    pub fn texel_center(&self, i: usize) -> f64 {
        -self.half_extent + (i as f64 + 0.5) * 2.0 * self.half_extent / self.resolution as f64
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        p.iter().all(|c| c.abs() <= self.half_extent)
    }

    fn push_bilinear(&self, fp: &mut Footprint, plane: usize, u: f64, v: f64, weight: f64) {
        let r = self.resolution;
        let scale = r as f64 / (2.0 * self.half_extent);
        let gu = (u + self.half_extent) * scale - 0.5;
        let gv = (v + self.half_extent) * scale - 0.5;
        let (fu, fv) = (gu.floor(), gv.floor());
        let (tu, tv) = (gu - fu, gv - fv);
        let clamp = |i: f64| i.clamp(0.0, (r - 1) as f64) as usize;
        let (c0, c1) = (clamp(fu), clamp(fu + 1.0));
        let (r0, r1) = (clamp(fv), clamp(fv + 1.0));
        for (row, wr) in [(r0, 1.0 - tv), (r1, tv)] {
            for (col, wc) in [(c0, 1.0 - tu), (c1, tu)] {
                let w = weight * wr * wc;
                if w != 0.0 {
                    fp.push(self.texel_offset(plane, row, col), w);
                }
            }
        }
    }

    /// Texels and weights contributing to the feature at `p`; empty outside the box.
    pub fn footprint(&self, p: &Vec3) -> Footprint {
        let mut fp = Footprint::default();
        if !self.contains(p) {
            return fp;
        }
        for (axis, &(cu, cv)) in PLANE_AXES.iter().enumerate() {
            let w = blend_weight(p[axis], self.delta);
            let (u, v) = (p[cu], p[cv]);
            if w > 0.0 {
                self.push_bilinear(&mut fp, 2 * axis, u, v, w);
            }
            if w < 1.0 {
                self.push_bilinear(&mut fp, 2 * axis + 1, u, v, 1.0 - w);
            }
        }
        fp
    }

    /// Gather the feature vector for a footprint into `out[..C]`.
    #[inline]
    pub fn gather(&self, fp: &Footprint, out: &mut [f64]) {
        let c = self.channels;
        out[..c].iter_mut().for_each(|v| *v = 0.0);
        for tap in fp.taps() {
            let texel = &self.data[tap.offset as usize..tap.offset as usize + c];
            for (o, &t) in out.iter_mut().zip(texel) {
                *o += tap.weight * t;
            }
        }
    }

    /// Sum over axes of the half-space-blended bilinear plane samples.
    pub fn sample_features(&self, p: &Vec3) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.gather(&self.footprint(p), &mut out);
        out
    }
}

#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Density and color at a point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FieldSample {
    pub sigma: f64,
    pub color: [f64; 3],
}

/// Mix two fields at one point: densities add, colors are density-weighted.
pub fn composite(a: FieldSample, b: FieldSample) -> FieldSample {
    let sigma = a.sigma + b.sigma;
    if sigma > 1e-12 {
        let mut color = [0.0; 3];
        for k in 0..3 {
            color[k] = (a.sigma * a.color[k] + b.sigma * b.color[k]) / sigma;
        }
        FieldSample { sigma, color }
    } else {
        FieldSample {
            sigma,
            color: [0.0; 3],
        }
    }
}

/// Linear map `R^C -> R^4` followed by softplus (density) and sigmoid (color).
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    channels: usize,
    /// Row-major `4 x C`.
    pub weights: Vec<f32>,
    pub bias: [f32; 4],
}

impl Decoder {
    pub fn new(channels: usize, weights: Vec<f32>, bias: [f32; 4]) -> Result<Self> {
        if channels == 0 || channels > MAX_CHANNELS {
            return Err(Error::InvalidArgument(format!("decoder width {channels} out of range")));
        }
        if weights.len() != 4 * channels {
            return Err(Error::Dimension(format!("{} decoder weights for C={channels}", weights.len())));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite decoder weight".into()));
        }
        Ok(Self { channels, weights, bias })
    }

    /// Zero weights with the empty-space density bias.
    pub fn empty(channels: usize) -> Result<Self> {
        Self::new(channels, vec![0.0; 4 * channels], [EMPTY_DENSITY_BIAS, 0.0, 0.0, 0.0])
    }

    pub fn random(channels: usize, scale: f32, rng: &mut impl Rng) -> Result<Self> {
        let weights = (0..4 * channels).map(|_| rng.random_range(-scale..=scale)).collect();
        Self::new(channels, weights, [EMPTY_DENSITY_BIAS, 0.0, 0.0, 0.0])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn param_count(&self) -> usize {
        4 * self.channels + 4
    }

    #[inline]
    pub fn logits(&self, feature: &[f64]) -> [f64; 4] {
        let c = self.channels;
        let mut z = [0.0; 4];
        for (r, zr) in z.iter_mut().enumerate() {
            let row = &self.weights[r * c..(r + 1) * c];
            *zr = self.bias[r] as f64 + row.iter().zip(feature).map(|(&w, &f)| w as f64 * f).sum::<f64>();
        }
        z
    }

    #[inline]
    pub fn activate(z: [f64; 4]) -> FieldSample {
        FieldSample {
            sigma: softplus(z[0]),
            color: [sigmoid(z[1]), sigmoid(z[2]), sigmoid(z[3])],
        }
    }

    pub fn decode(&self, feature: &[f64]) -> FieldSample {
        Self::activate(self.logits(feature))
    }

    fn write(&self, w: &mut Writer) {
        w.f32s(&self.weights);
        w.f32s(&self.bias);
    }

    fn read(r: &mut Reader, channels: usize) -> Result<Self> {
        let weights = r.f32s(4 * channels)?;
        let b = r.f32s(4)?;
        Self::new(channels, weights, [b[0], b[1], b[2], b[3]])
    }

    /// Standalone decoder file: magic, u32 C, f32 weights, f32 bias.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(DECODER_MAGIC);
        w.u32(self.channels as u32);
        self.write(&mut w);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(DECODER_MAGIC)?;
        let c = r.u32()? as usize;
        let d = Self::read(&mut r, c)?;
        r.finish()?;
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?)
    }
}

/// Planes plus their decoder: one radiance-field branch.
#[derive(Debug, Clone, PartialEq)]
pub struct HexField {
    pub planes: HexPlanes,
    pub decoder: Decoder,
}

impl HexField {
    pub fn new(planes: HexPlanes, decoder: Decoder) -> Result<Self> {
        if planes.channels() != decoder.channels() {
            return Err(Error::Dimension(format!(
                "planes have {} channels, decoder expects {}",
                planes.channels(),
                decoder.channels()
            )));
        }
        Ok(Self { planes, decoder })
    }

    pub fn sample(&self, p: &Vec3) -> FieldSample {
        self.decoder.decode(&self.planes.sample_features(p))
    }

    /// Checkpoint: magic, u32 (R, C), f32 planes in label order, f32 decoder weights and bias.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(HEX_MAGIC);
        w.u32(self.planes.resolution as u32);
        w.u32(self.planes.channels as u32);
        let planes: Vec<f32> = self.planes.data.iter().map(|&v| v as f32).collect();
        w.f32s(&planes);
        self.decoder.write(&mut w);
        w.buf
    }

    /// The box and blend width are configuration, not part of the payload.
    pub fn from_bytes(bytes: &[u8], half_extent: f64, delta: f64) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(HEX_MAGIC)?;
        let res = r.u32()? as usize;
        let c = r.u32()? as usize;
        if res == 0 || c == 0 || c > MAX_CHANNELS {
            return Err(Error::Format(format!("bad plane header R={res} C={c}")));
        }
        let data = r.f32s(6 * res * res * c)?.into_iter().map(f64::from).collect();
        let planes = HexPlanes::from_data(res, c, half_extent, delta, data)?;
        let decoder = Decoder::read(&mut r, c)?;
        r.finish()?;
        Self::new(planes, decoder)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path, half_extent: f64, delta: f64) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?, half_extent, delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant_planes(v: f32) -> HexPlanes {
        HexPlanes::from_data(4, 2, 1.0, 0.1, vec![v as f64; 6 * 16 * 2]).unwrap()
    }

    #[test]
    fn constant_planes_sum_three_times() {
        let planes = constant_planes(0.7);
        for p in [Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.3, -0.95, 0.05), Vec3::new(-1.0, 1.0, 0.5)] {
            for f in planes.sample_features(&p) {
                assert!((f - 2.1).abs() < 1e-6);
            }
        }
        assert_eq!(planes.sample_features(&Vec3::new(1.01, 0.0, 0.0)), vec![0.0, 0.0]);
    }

    /// Hand computation on a 4x4 grid: texel centres are at -0.75, -0.25, 0.25, 0.75.
    #[test]
    fn texel_centre_hand_values() {
        let mut planes = HexPlanes::zeros(4, 1, 1.0, 0.1).unwrap();
        // p = (0.25, -0.75, 0.75): x plane at (y, z) = (-0.75, 0.75) -> col 0, row 3.
        planes.set_texel(0, 3, 0, &[2.0]);
        planes.set_texel(1, 3, 0, &[100.0]);
        // y plane at (x, z) = (0.25, 0.75) -> col 2, row 3; y = -0.75 selects -y fully.
        planes.set_texel(2, 3, 2, &[100.0]);
        planes.set_texel(3, 3, 2, &[3.0]);
        // z plane at (x, y) = (0.25, -0.75) -> col 2, row 0; z = 0.75 selects +z.
        planes.set_texel(4, 0, 2, &[5.0]);
        planes.set_texel(5, 0, 2, &[100.0]);
        let f = planes.sample_features(&Vec3::new(0.25, -0.75, 0.75));
        assert!((f[0] - 10.0).abs() < 1e-12);
        // Inside the blend band of x: w = 0.5 + 0.05 / 0.2 = 0.75.
        let f = planes.sample_features(&Vec3::new(0.05, -0.75, 0.75));
        let x_part = 0.75 * 2.0 + 0.25 * 100.0;
        let y_plane_col = |x: f64| {
            // bilinear between col 1 (x=-0.25) and col 2 (x=0.25) on the -y plane, row 3.
            let t = (x + 0.25) / 0.5;
            (1.0 - t) * 0.0 + t * 3.0
        };
        let z_part = {
            let t = (0.05f64 + 0.25) / 0.5;
            t * 5.0
        };
        let expected = x_part + y_plane_col(0.05) + z_part;
        assert!((f[0] - expected).abs() < 1e-9, "{} vs {expected}", f[0]);
    }

    #[test]
    fn blend_boundary() {
        assert_eq!(blend_weight(0.1, 0.1), 1.0);
        assert_eq!(blend_weight(-0.1, 0.1), 0.0);
        assert_eq!(blend_weight(0.0, 0.1), 0.5);
        let mut planes = HexPlanes::zeros(4, 1, 1.0, 0.1).unwrap();
        for row in 0..4 {
            for col in 0..4 {
                planes.set_texel(1, row, col, &[9.0]);
            }
        }
        assert_eq!(planes.sample_features(&Vec3::new(0.1, 0.3, 0.3))[0], 0.0);
        assert_eq!(planes.sample_features(&Vec3::new(-0.1, 0.3, 0.3))[0], 9.0);
    }

    #[test]
    fn decoder_activations() {
        let mut w = vec![0.0; 8];
        w[0] = 1.0;
        w[5] = 1.0;
        let d = Decoder::new(2, w, [0.0; 4]).unwrap();
        let s = d.decode(&[0.0, 0.0]);
        assert!((s.sigma - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(s.color, [0.5; 3]);
        assert!(softplus(-20.0) < 1e-8);
        assert!(softplus(-20.0) > 0.0);
        assert!((softplus(40.0) - 40.0).abs() < 1e-12);
        assert!((sigmoid(-800.0)).abs() < 1e-300);
        assert!((sigmoid(800.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn outside_box_decodes_to_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let planes = HexPlanes::random(8, 4, 1.0, 0.1, 1.0, &mut rng).unwrap();
        let field = HexField::new(planes, Decoder::random(4, 1.0, &mut rng).unwrap()).unwrap();
        let s = field.sample(&Vec3::new(0.0, 1.5, 0.0));
        assert!((s.sigma - softplus(-10.0)).abs() < 1e-15);
        assert!(s.sigma < 5e-5);
    }

    #[test]
    fn composite_cases() {
        let head = FieldSample {
            sigma: 2.0,
            color: [0.2, 0.4, 0.6],
        };
        let none = FieldSample::default();
        assert_eq!(composite(head, none), head);
        let hair = FieldSample {
            sigma: 2.0,
            color: [0.6, 0.0, 0.2],
        };
        let c = composite(head, hair);
        for k in 0..3 {
            assert!((c.color[k] - (head.color[k] + hair.color[k]) / 2.0).abs() < 1e-15);
        }
        assert_eq!(composite(hair, head), c);
        assert_eq!(composite(none, none).color, [0.0; 3]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let field = HexField::new(
            HexPlanes::random(5, 3, 1.0, 0.1, 0.5, &mut rng).unwrap(),
            Decoder::random(3, 0.5, &mut rng).unwrap(),
        )
        .unwrap();
        let bytes = field.to_bytes();
        assert_eq!(&bytes[..8], HEX_MAGIC);
        let back = HexField::from_bytes(&bytes, 1.0, 0.1).unwrap();
        assert_eq!(back, field);
        assert_eq!(back.to_bytes(), bytes);
        let dec = Decoder::from_bytes(&field.decoder.to_bytes()).unwrap();
        assert_eq!(dec, field.decoder);
        assert!(HexField::from_bytes(&bytes[..bytes.len() - 1], 1.0, 0.1).is_err());
    }

    #[test]
    fn invalid_blend_width() {
        assert!(HexPlanes::zeros(4, 1, 1.0, 1.0).is_err());
        assert!(HexPlanes::zeros(4, 1, 1.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn continuity_across_half_space_boundary(
            seed in 0u64..200,
            axis in 0usize..3,
            u in -0.9f64..0.9,
            v in -0.9f64..0.9,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let planes = HexPlanes::random(8, 2, 1.0, 0.1, 1.0, &mut rng).unwrap();
            let at = |c: f64| {
                let mut p = Vec3::zeros();
                p[axis] = c;
                let (cu, cv) = PLANE_AXES[axis];
                p[cu] = u;
                p[cv] = v;
                planes.sample_features(&p)
            };
            let mut prev = f64::INFINITY;
            for eps in [1e-2, 1e-3, 1e-4, 1e-5] {
                let a = at(eps);
                let b = at(-eps);
                let gap = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                prop_assert!(gap <= prev + 1e-12);
                prev = gap;
            }
            prop_assert!(prev < 1e-2);
        }

        #[test]
        fn softplus_is_monotone(a in -50.0f64..50.0, d in 0.0f64..10.0) {
            prop_assert!(softplus(a + d) >= softplus(a));
            prop_assert!(softplus(a) >= 0.0);
        }

        #[test]
        fn composite_density_adds(s1 in 0.0f64..10.0, s2 in 0.0f64..10.0, c in 0.0f64..1.0) {
            let a = FieldSample { sigma: s1, color: [c, 1.0 - c, 0.5] };
            let b = FieldSample { sigma: s2, color: [1.0 - c, c, 0.25] };
            let m = composite(a, b);
            prop_assert!((m.sigma - (s1 + s2)).abs() < 1e-12);
            for k in 0..3 {
                prop_assert!((0.0..=1.0).contains(&m.color[k]));
            }
        }
    }
}
