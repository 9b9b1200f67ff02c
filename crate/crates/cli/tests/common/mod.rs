#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use head360::optim::train::TrainConfig;
use head360::render::RenderConfig;
use head360::synhead::Dataset;
use head360::texture::RasterConfig;

pub fn head360(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_head360"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

pub fn ok(args: &[&str]) -> String {
    let out = head360(args);
    assert!(
        out.status.success(),
        "head360 {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small dataset, model and checkpoint shared by every test in a binary.
pub struct Fixture {
    pub root: PathBuf,
    pub data: PathBuf,
    pub model: PathBuf,
    pub checkpoint: PathBuf,
}

pub fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        channels: 4,
        raster: RasterConfig {
            resolution: 16,
            ..RasterConfig::default()
        },
        render: RenderConfig {
            samples: 16,
            ..TrainConfig::default().render
        },
        head_steps: 20,
        hair_steps: 10,
        rays_per_step: 64,
        density_pairs: 16,
        code_dim: 1,
        ..TrainConfig::default()
    }
}

pub fn gen_tiny(out: &Path) -> String {
    ok(&[
        "gen-data", "--out", s(out), "--identities", "2", "--expressions", "2", "--hairstyles", "2",
        "--yaw", "4", "--pitch", "0", "--size", "24", "--mesh-level", "2",
    ])
}

pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap().keep();
        let data = root.join("data");
        gen_tiny(&data);
        let model = root.join("model.bin");
        ok(&["build-model", "--data", s(&data), "--rank", "2", "--out", s(&model)]);
        let cfg = root.join("train.json");
        std::fs::write(&cfg, serde_json::to_vec(&tiny_train_config()).unwrap()).unwrap();
        let checkpoint = root.join("ck");
        ok(&["train", "--data", s(&data), "--model", s(&model), "--config", s(&cfg), "--out", s(&checkpoint)]);
        Fixture {
            root,
            data,
            model,
            checkpoint,
        }
    })
}

/// Fit inputs for a dataset view: image and mask PNG paths plus landmark JSON.
pub fn fit_inputs(f: &Fixture, id: usize, cam: usize) -> (PathBuf, PathBuf, Vec<u8>) {
    let ds = Dataset::open(&f.data).unwrap();
    let name = head360::synhead::image_name(id, 0, cam);
    let mesh = ds.mesh(id, 0).unwrap();
    let camera = &ds.cameras[cam];
    let obs: Vec<serde_json::Value> = ds
        .landmarks
        .iter()
        .map(|l| {
            let p = camera.project(&mesh.vertices[l.vertex as usize]).unwrap();
            serde_json::json!({ "name": l.name, "pixel": p })
        })
        .collect();
    (
        f.data.join("images").join(&name),
        f.data.join("masks").join(&name),
        serde_json::to_vec(&obs).unwrap(),
    )
}
