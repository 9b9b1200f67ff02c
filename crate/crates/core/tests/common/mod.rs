#![allow(dead_code)]

use std::collections::BTreeMap;

use head360::bilinear::{BilinearModel, VertexTensor};
use head360::checkpoint::{Checkpoint, CheckpointConfig, TrainReport, FORMAT_VERSION};
use head360::geometry::{CameraRig, Intrinsics};
use head360::hexplane::{Decoder, HexField, HexPlanes};
use head360::render::RenderConfig;
use head360::synhead::{generate_identity, landmark_vertices, DatasetSpec};
use head360::texture::{initial_texture, RasterConfig, TextureGenerator};
use head360::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CHANNELS: usize = 4;
pub const SIZE: u32 = 40;

pub fn raster() -> RasterConfig {
    RasterConfig {
        resolution: 32,
        half_extent: 1.0,
        delta: 0.1,
    }
}

pub fn render_cfg() -> RenderConfig {
    RenderConfig {
        samples: 48,
        near: 1.85,
        far: 3.55,
        ..RenderConfig::default()
    }
}

/// Opaque axis-aligned box of constant color.
pub fn box_field(lo: Vec3, hi: Vec3, color_logits: [f32; 3]) -> HexField {
    let r = raster();
    let mut planes = HexPlanes::zeros(r.resolution, CHANNELS, r.half_extent, r.delta).unwrap();
    let axes = [(1, 2), (0, 2), (0, 1)];
    for (a, &(cu, cv)) in axes.iter().enumerate() {
        for plane in [2 * a, 2 * a + 1] {
            for row in 0..r.resolution {
                for col in 0..r.resolution {
                    let (u, v) = (planes.texel_center(col), planes.texel_center(row));
                    if (lo[cu]..=hi[cu]).contains(&u) && (lo[cv]..=hi[cv]).contains(&v) {
                        planes.set_texel(plane, row, col, &[1.0, 0.0, 0.0, 0.0]);
                    }
                }
            }
        }
    }
    let mut weights = vec![0.0; 4 * CHANNELS];
    weights[0] = 20.0;
    let bias = [-50.0, color_logits[0], color_logits[1], color_logits[2]];
    HexField::new(planes, Decoder::new(CHANNELS, weights, bias).unwrap()).unwrap()
}

pub fn spec() -> DatasetSpec {
    DatasetSpec {
        identities: 3,
        expressions: 2,
        hairstyles: 3,
        yaw_count: 8,
        image_size: SIZE,
        mesh_level: 3,
        ..DatasetSpec::default()
    }
}

/// Library with untrained but well-formed heads and three hairstyles:
/// bald, a flat cap and a tall crest.
pub fn toy_checkpoint() -> Checkpoint {
    let spec = spec();
    let meshes: Vec<Vec<_>> = (0..spec.identities)
        .map(|i| generate_identity(100 + i as u64, &spec).unwrap().expressions)
        .collect();
    let tensor = VertexTensor::from_meshes(&meshes).unwrap();
    let model = BilinearModel::build(&tensor, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = model.vertex_count();
    let textures: BTreeMap<usize, _> = (0..spec.identities)
        .map(|i| (i, initial_texture(n, CHANNELS, 1.0, 0.5, &mut rng).unwrap()))
        .collect();
    let list: Vec<_> = textures.values().cloned().collect();
    let (generator, _) = TextureGenerator::fit_pca(&list, 2).unwrap();
    let mut weights: Vec<f32> = (0..4 * CHANNELS).map(|_| rng.random_range(-1.0..1.0)).collect();
    weights[..CHANNELS].iter_mut().for_each(|w| *w = 0.0);
    weights[0] = 40.0;
    let decoder = Decoder::new(CHANNELS, weights, [-100.0, 0.3, -0.2, 0.1]).unwrap();
    let hair = vec![
        None,
        Some(box_field(Vec3::new(-0.5, 0.35, -0.5), Vec3::new(0.5, 0.7, 0.45), [-2.0, -2.5, -3.0])),
        Some(box_field(Vec3::new(-0.2, 0.3, -0.6), Vec3::new(0.2, 0.95, 0.3), [1.5, -1.0, -2.0])),
    ];
    let rig = CameraRig::build(spec.yaw_count, &spec.pitch_angles, 2.7, Intrinsics::from_fov(SIZE, SIZE, 30.0)).unwrap();
    Checkpoint {
        config: CheckpointConfig {
            version: FORMAT_VERSION,
            channels: CHANNELS,
            raster: raster(),
            render: render_cfg(),
            hairstyles: vec!["bald".into(), "cap".into(), "crest".into()],
            identity_hairstyles: vec![0, 1, 2],
            train: None,
        },
        model,
        generator,
        textures,
        decoder,
        hair,
        cameras: rig.cameras,
        landmarks: landmark_vertices(spec.mesh_level),
        report: TrainReport::default(),
    }
}
