use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use head360::bilinear::BilinearModel;
use head360::checkpoint::{train_library, Checkpoint, Head, OPTIMIZER_FILE};
use head360::geometry::camera::CameraRecord;
use head360::imaging::Image;
use head360::optim::fit::{FitConfig, FittedHead};
use head360::optim::gradcheck::{gradcheck, GradcheckConfig};
use head360::optim::hair::swap_hair;
use head360::optim::train::{TrainConfig, TrainSet};
use head360::render::{psnr, ssim};
use head360::synhead::{build_vertex_tensor, render_dataset, Dataset, DatasetSpec};
use head360_cli::api::{self, ApiError, FitInput, FittedLookup, HairRef, RenderRequest, TextureRef};
use head360_cli::server::{self, ServerConfig};
use log::info;

const GRADCHECK_LIMIT: f64 = 1e-3;
const FITTED_JOB: &str = "fitted";

#[derive(Parser)]
#[command(name = "head360", version, about = "Parametric 360-degree head toolkit")]
struct Cli {
    /// Seed for every random choice; 0 keeps runs reproducible.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the procedural multi-view head dataset.
    GenData(GenData),
    /// Build the bilinear mesh model from a dataset.
    BuildModel(BuildModel),
    /// Train textures, decoder and hair fields.
    Train(Train),
    /// Fit a head to one image.
    Fit(Fit),
    /// Render one image.
    Render(Render),
    /// Render a blendshape stream.
    Animate(Animate),
    /// Replace the hairstyle of a fitted head.
    SwapHair(SwapHair),
    /// PSNR/SSIM of matching PNG files in two directories, as CSV.
    Eval(Eval),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(Gradcheck),
    /// Serve the HTTP API.
    Serve(Serve),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, env = "HEAD360_DATA", default_value = "data")]
    out: PathBuf,
    #[arg(long)]
    identities: Option<usize>,
    #[arg(long)]
    expressions: Option<usize>,
    #[arg(long)]
    hairstyles: Option<usize>,
    #[arg(long)]
    yaw: Option<usize>,
    /// Comma-separated pitch angles in degrees.
    #[arg(long, value_delimiter = ',')]
    pitch: Option<Vec<f64>>,
    #[arg(long)]
    size: Option<u32>,
    #[arg(long)]
    mesh_level: Option<u32>,
}

#[derive(Args)]
struct BuildModel {
    #[arg(long, env = "HEAD360_DATA", default_value = "data")]
    data: PathBuf,
    #[arg(long)]
    rank: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    #[arg(long, env = "HEAD360_DATA", default_value = "data")]
    data: PathBuf,
    /// Bilinear model file; built at full rank when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// Training configuration (JSON); missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    identities: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    expressions: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    cameras: Option<Vec<usize>>,
    /// Continue from the optimizer state in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct HeadArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Trained identity to use.
    #[arg(long, conflicts_with = "fitted")]
    identity: Option<usize>,
    /// Fitted-head bundle directory.
    #[arg(long)]
    fitted: Option<PathBuf>,
    /// Hairstyle name or id.
    #[arg(long)]
    hairstyle: Option<String>,
    #[arg(long)]
    size: Option<u32>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = api::DEFAULT_MAX_SIZE)]
    max_size: u32,
}

#[derive(Args)]
struct Fit {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Hair mask PNG (white = hair).
    #[arg(long)]
    mask: PathBuf,
    /// JSON array of `{"vertex": k | "name": s, "pixel": [x, y]}`.
    #[arg(long)]
    landmarks: PathBuf,
    #[arg(long, conflicts_with = "camera")]
    camera_id: Option<usize>,
    /// Camera record (JSON).
    #[arg(long)]
    camera: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    activations: Option<Vec<f64>>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Bundle directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Render {
    #[command(flatten)]
    head: HeadArgs,
    /// Render request (JSON), as accepted by POST /render; flags below override it.
    #[arg(long)]
    request: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    activations: Option<Vec<f64>>,
    #[arg(long)]
    camera_id: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Report PSNR against this image.
    #[arg(long)]
    compare: Option<PathBuf>,
}

#[derive(Args)]
struct Animate {
    #[command(flatten)]
    head: HeadArgs,
    /// JSON array of frames.
    #[arg(long)]
    stream: PathBuf,
    /// Directory for the frame PNGs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SwapHair {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    fitted: PathBuf,
    #[arg(long)]
    hairstyle: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
}

#[derive(Args)]
struct Gradcheck {
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct Serve {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = api::DEFAULT_MAX_SIZE)]
    max_size: u32,
    #[arg(long, default_value_t = server::DEFAULT_QUEUE)]
    queue: usize,
}

/// Errors caused by the request rather than by running it.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<head360::Error>() {
            use head360::Error as E;
            return match e {
                E::Dimension(_) | E::RankOutOfRange { .. } | E::InvalidArgument(_) | E::UnknownId(_) => 2,
                _ => 1,
            };
        }
        if let Some(e) = cause.downcast_ref::<ApiError>() {
            return match e {
                ApiError::BadRequest(_) | ApiError::NotFound(_) | ApiError::Unprocessable(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let seed = cli.seed;
    match cli.cmd {
        Cmd::GenData(a) => gen_data(a, seed),
        Cmd::BuildModel(a) => build_model(a),
        Cmd::Train(a) => train(a, seed),
        Cmd::Fit(a) => fit(a, seed),
        Cmd::Render(a) => render(a),
        Cmd::Animate(a) => animate(a),
        Cmd::SwapHair(a) => swap(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Gradcheck(a) => grad(a, seed),
        Cmd::Serve(a) => serve(a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| Usage(format!("{}: {e}", path.display())).into())
}

fn gen_data(a: GenData, seed: Option<u64>) -> Result<ExitCode> {
    let mut spec: DatasetSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => DatasetSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.identities = a.identities.unwrap_or(spec.identities);
    spec.expressions = a.expressions.unwrap_or(spec.expressions);
    spec.hairstyles = a.hairstyles.unwrap_or(spec.hairstyles);
    spec.yaw_count = a.yaw.unwrap_or(spec.yaw_count);
    spec.image_size = a.size.unwrap_or(spec.image_size);
    spec.mesh_level = a.mesh_level.unwrap_or(spec.mesh_level);
    if let Some(p) = a.pitch {
        spec.pitch_angles = p;
    }
    let report = render_dataset(&spec, &a.out)?;
    println!("{}", report.manifest.summary());
    if report.unchanged {
        println!("unchanged");
    }
    Ok(ExitCode::SUCCESS)
}

fn build_model(a: BuildModel) -> Result<ExitCode> {
    let tensor = build_vertex_tensor(&a.data)?;
    let model = BilinearModel::build(&tensor, a.rank)?;
    let err = model.reconstruction_error(&tensor)?;
    if err < 1e-6 {
        info!("recon_err={err:.3e} (recon_err<1e-6)");
    } else {
        info!("recon_err={err:.3e}");
    }
    println!("recon_err={err:.6e}");
    model.save(&a.out)?;
    Ok(ExitCode::SUCCESS)
}

fn train(a: Train, seed: Option<u64>) -> Result<ExitCode> {
    let ds = Dataset::open(&a.data)?;
    let model = match &a.model {
        Some(p) => BilinearModel::load(p)?,
        None => BilinearModel::build(&build_vertex_tensor(&a.data)?, ds.spec().identities)?,
    };
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let ids = a.identities.unwrap_or_else(|| (0..ds.spec().identities).collect());
    let cams = a.cameras.unwrap_or_else(|| (0..ds.cameras.len()).collect());
    let set = TrainSet::from_dataset(&ds, &ids, &a.expressions, &cams)?;
    let resume = if a.resume {
        Some(fs::read(a.out.join(OPTIMIZER_FILE)).with_context(|| format!("reading optimizer state in {}", a.out.display()))?)
    } else {
        None
    };
    let every = 100;
    let result = train_library(cfg, &set, &model, ds.landmarks.clone(), resume.as_deref(), |step, total, loss| {
        if step % every == 0 || step == total {
            info!("step {step}/{total} loss={loss:.5}");
        }
    });
    match result {
        Ok((ck, state)) => {
            ck.save(&a.out)?;
            fs::write(a.out.join(OPTIMIZER_FILE), state).with_context(|| format!("writing {}", a.out.display()))?;
            if let Some(p) = ck.report.final_mean_psnr("full") {
                println!("train_psnr_full={p:.3}");
            }
            if let Some(p) = ck.report.final_mean_psnr("bald") {
                println!("train_psnr_bald={p:.3}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Err((e, last)) => {
            if let Some(ck) = last {
                ck.save(&a.out)?;
                eprintln!("wrote last good state to {}", a.out.display());
            }
            Err(e.into())
        }
    }
}

fn load_fitted(dir: &Path) -> Result<FittedHead> {
    let names = ["shape.json", "texture.bin", "head.json", "report.json"];
    let mut files = Vec::new();
    for n in names {
        let p = dir.join(n);
        files.push((n.to_string(), fs::read(&p).with_context(|| format!("reading {}", p.display()))?));
    }
    Ok(FittedHead::from_files(&files)?)
}

fn write_bundle(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, bytes) in files {
        fs::write(dir.join(name), bytes).with_context(|| format!("writing {}", dir.join(name).display()))?;
    }
    Ok(())
}

fn fit(a: Fit, seed: Option<u64>) -> Result<ExitCode> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let read = |p: &PathBuf| fs::read(p).with_context(|| format!("reading {}", p.display()));
    let mut input = FitInput::decode(&read(&a.image)?, &read(&a.mask)?, &read(&a.landmarks)?)?;
    input.camera_id = a.camera_id;
    if let Some(p) = &a.camera {
        input.camera = Some(read_json::<CameraRecord>(p)?);
    }
    input.activations = a.activations;
    if let Some(p) = &a.config {
        input.config = read_json::<FitConfig>(p)?;
    }
    if let Some(s) = seed {
        input.config.seed = s;
    }
    let fitted = api::run_fit(&ck, &input, |stage, done, total| {
        if done == total || done % 50 == 0 {
            info!("{stage} {done}/{total}");
        }
    })?;
    write_bundle(&a.out, &fitted.to_files(&ck)?)?;
    let r = &fitted.report;
    println!(
        "hairstyle={} landmark_rms_px={:.4} bald_psnr={:.3} input_psnr={:.3}",
        ck.config.hairstyles[fitted.head.hairstyle], r.landmark_rms_px, r.bald_psnr_final, r.input_psnr
    );
    Ok(ExitCode::SUCCESS)
}

struct OneFitted(Option<Head>);

impl FittedLookup for OneFitted {
    fn fitted(&self, job: &str) -> Option<Head> {
        (job == FITTED_JOB).then(|| self.0.clone()).flatten()
    }
}

/// Apply the shared head flags to a request.
fn head_request(h: &HeadArgs, req: &mut RenderRequest) -> Result<OneFitted> {
    if let Some(id) = h.identity {
        req.texture = Some(TextureRef::Id(id));
    }
    if let Some(name) = &h.hairstyle {
        req.hairstyle = Some(match name.parse::<usize>() {
            Ok(i) => HairRef::Id(i),
            Err(_) => HairRef::Name(name.clone()),
        });
    }
    req.size = h.size.or(req.size);
    req.samples = h.samples.or(req.samples);
    match &h.fitted {
        Some(dir) => {
            req.texture = Some(TextureRef::Job { job: FITTED_JOB.into() });
            Ok(OneFitted(Some(load_fitted(dir)?.head)))
        }
        None => Ok(OneFitted(None)),
    }
}

fn render(a: Render) -> Result<ExitCode> {
    let ck = Checkpoint::load(&a.head.checkpoint)?;
    let mut req: RenderRequest = match &a.request {
        Some(p) => read_json(p)?,
        None => RenderRequest::default(),
    };
    let lookup = head_request(&a.head, &mut req)?;
    if a.activations.is_some() {
        req.activations = a.activations;
    }
    if a.camera_id.is_some() {
        req.camera_id = a.camera_id;
    }
    let png = api::render_png(&ck, &req, a.head.max_size, &lookup)?;
    fs::write(&a.out, &png).with_context(|| format!("writing {}", a.out.display()))?;
    if let Some(p) = &a.compare {
        let truth = Image::load_png(p)?;
        println!("psnr={:.4}", psnr(&Image::from_png_bytes(&png)?, &truth)?);
    }
    Ok(ExitCode::SUCCESS)
}

fn animate(a: Animate) -> Result<ExitCode> {
    let ck = Checkpoint::load(&a.head.checkpoint)?;
    let text = fs::read_to_string(&a.stream).with_context(|| format!("reading {}", a.stream.display()))?;
    let frames = head360::animate::parse_stream(&text)?;
    let mut req = RenderRequest::default();
    let lookup = head_request(&a.head, &mut req)?;
    let spec = api::AnimateSpec {
        frames,
        s: None,
        texture: req.texture,
        hairstyle: req.hairstyle,
        size: req.size,
        samples: req.samples,
    };
    let files = api::animate_frames(&ck, &spec, a.head.max_size, &lookup)?;
    write_bundle(&a.out, &files)?;
    println!("frames={}", files.len());
    Ok(ExitCode::SUCCESS)
}

fn swap(a: SwapHair) -> Result<ExitCode> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut fitted = load_fitted(&a.fitted)?;
    let id = ck.hairstyle_id(&a.hairstyle)?;
    fitted.head = swap_hair(&ck, &fitted.head, id)?;
    write_bundle(&a.out, &fitted.to_files(&ck)?)?;
    println!("hairstyle={}", ck.config.hairstyles[id]);
    Ok(ExitCode::SUCCESS)
}

fn eval(a: Eval) -> Result<ExitCode> {
    let mut names: Vec<String> = fs::read_dir(&a.truth)
        .with_context(|| format!("reading {}", a.truth.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!(Usage(format!("no PNG files in {}", a.truth.display())));
    }
    println!("file,psnr,ssim");
    let (mut tp, mut ts) = (0.0, 0.0);
    for n in &names {
        let truth = Image::load_png(&a.truth.join(n))?;
        let pred = Image::load_png(&a.pred.join(n))?;
        let (p, s) = (psnr(&pred, &truth)?, ssim(&pred, &truth)?);
        println!("{n},{p:.4},{s:.6}");
        tp += p;
        ts += s;
    }
    let k = names.len() as f64;
    println!("mean,{:.4},{:.6}", tp / k, ts / k);
    Ok(ExitCode::SUCCESS)
}

fn grad(a: Gradcheck, seed: Option<u64>) -> Result<ExitCode> {
    let cfg = GradcheckConfig {
        seed: seed.unwrap_or(0),
        ..GradcheckConfig::default()
    };
    let report = gradcheck(&cfg)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for b in &report.blocks {
            println!("{}: checked={} max_rel_err={:.3e}", b.name, b.checked, b.max_rel_err);
        }
    }
    println!("max_rel_err={:.3e}", report.max_rel_err);
    if report.max_rel_err < GRADCHECK_LIMIT {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradient check failed: {:.3e} >= {GRADCHECK_LIMIT:e}", report.max_rel_err);
        Ok(ExitCode::from(1))
    }
}

fn serve(a: Serve) -> Result<ExitCode> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    if a.queue == 0 {
        bail!(Usage("--queue must be at least 1".into()));
    }
    let state = server::AppState::new(
        ck,
        ServerConfig {
            max_size: a.max_size,
            queue: a.queue,
        },
    );
    let app = server::router(state);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let addr = format!("{}:{}", a.host, a.port);
        let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
        info!("listening on http://{addr}");
        axum::serve(listener, app).await?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(ExitCode::SUCCESS)
}
