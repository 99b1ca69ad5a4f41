mod config;

use std::fmt::Write as _;
use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use config::{GuidanceConfig, RunConfig};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use streetsplat::gaussians::GaussianCloud;
use streetsplat::geometry::{apply_yaw, sample_pseudo_views, CameraView, Intrinsics, Pose, PseudoViewConfig};
use streetsplat::guidance::wire::{self, RemoteProvider};
use streetsplat::guidance::{GuidanceProvider, GuidanceRequest, IdentityProvider, OracleProvider, StrengthSchedule, ToyProvider};
use streetsplat::lidar::{accumulate_and_downsample, colorize_sweep, render_depth, save_point_cloud, DepthMap, LidarError};
use streetsplat::losses::{perceptual_proxy, psnr, ssim};
use streetsplat::pixels::Image;
use streetsplat::rasterizer::{render, RenderSettings};
use streetsplat::scene_io::{load_checkpoint, load_dataset, save_checkpoint, save_dataset, write_ply};
use streetsplat::synthetic::{generate, SyntheticConfig};
use streetsplat::trainer::{train_with, TrainOptions, CHECKPOINT_FILE};

/// Sparse-view Gaussian splatting for street scenes.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural street dataset with its ground-truth cloud.
    Synth(SynthArgs),
    /// Colorize and merge the training LiDAR sweeps into a point-cloud file.
    Ingest(IngestArgs),
    /// Print sampled pseudo-view poses around a training frame.
    SampleViews(SampleViewsArgs),
    /// Render a checkpoint from one camera pose.
    Render(RenderArgs),
    /// Score a checkpoint on the test frames.
    Eval(EvalArgs),
    /// Train a cloud on a dataset.
    Train(TrainArgs),
    /// Send one synthetic request to a guidance service and check the reply.
    GuidanceProbe(ProbeArgs),
    /// Serve the built-in identity or toy provider over the wire protocol.
    GuidanceServe(ServeArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Structured-text file with scene parameters.
    #[arg(long)]
    scene_config: Option<PathBuf>,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    data_root: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    voxel_size: f64,
    #[arg(long, default_value_t = 80)]
    top_mask: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleViewsArgs {
    #[arg(long)]
    data_root: PathBuf,
    #[arg(long)]
    anchor: u32,
    /// Yaw bound in degrees.
    #[arg(long, default_value_t = 15.0)]
    delta: f64,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Twelve numbers, row-major 3x4 camera-to-world.
    #[arg(long, conflicts_with = "frame", allow_hyphen_values = true)]
    pose: Option<String>,
    /// Use the pose of this dataset frame (needs --data-root).
    #[arg(long)]
    frame: Option<u32>,
    /// Extra yaw about the world up axis, degrees.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    yaw: f64,
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// "fx fy cx cy width height", when there is no dataset.
    #[arg(long)]
    intrinsics: Option<String>,
    /// "r g b" in [0, 1].
    #[arg(long)]
    background: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    ply_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data_root: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write the table as tab-separated text.
    #[arg(long)]
    tsv: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data_root: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// identity | toy | oracle | remote:HOST:PORT (overrides the config).
    #[arg(long)]
    provider: Option<String>,
    /// Ground-truth cloud for the oracle provider.
    #[arg(long)]
    oracle: Option<PathBuf>,
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    iters: Option<u64>,
    /// Checkpoints and metrics go here.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    address: String,
    /// The service runs in echo mode: require a byte-exact round trip.
    #[arg(long)]
    echo: bool,
    #[arg(long, default_value_t = 30.0)]
    timeout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    listen: String,
    #[arg(long, default_value = "toy")]
    provider: String,
    #[arg(long)]
    echo: bool,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth(a) => synth(a),
        Command::Ingest(a) => ingest(a),
        Command::SampleViews(a) => sample_views(a),
        Command::Render(a) => render_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Train(a) => train_cmd(a),
        Command::GuidanceProbe(a) => probe(a),
        Command::GuidanceServe(a) => serve(a),
    }
}

const GROUND_TRUTH_FILE: &str = "ground_truth.bin";

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg: SyntheticConfig = match &a.scene_config {
        Some(p) => toml::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => SyntheticConfig::default(),
    };
    cfg.seed = a.seed;
    let scene = generate(&cfg);
    save_dataset(&a.out, &scene.manifest)?;
    save_checkpoint(&scene.ground_truth, 0, &a.out.join(GROUND_TRUTH_FILE))?;

    let mut run = RunConfig::default();
    run.train.total_iters = 2000;
    run.train.sh_degree = 1;
    run.train.top_mask_rows = 0;
    run.train.background = cfg.background;
    run.train.seed = a.seed;
    run.train.densify.until_iter = 2000;
    run.train.densify.max_gaussians = 8000;
    run.train.eval_every = 500;
    run.guidance.provider = "oracle".into();
    fs::write(a.out.join("train.toml"), toml::to_string_pretty(&run)?)?;
    println!(
        "wrote {} frames ({} train, {} test) and {} ground-truth Gaussians to {}",
        scene.manifest.frames.len(),
        scene.manifest.split.train.len(),
        scene.manifest.split.test.len(),
        scene.ground_truth.len(),
        a.out.display()
    );
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<()> {
    let manifest = load_dataset(&a.data_root)?;
    let mut colored = Vec::new();
    println!("{:>6}  {:>7}  {:>9}  {:>12}", "frame", "points", "colored", "depth-pixels");
    for f in manifest.train_frames() {
        let Some(sweep) = &f.lidar else { continue };
        let view = manifest.view(f);
        let depth = render_depth(&sweep.points, &view, a.top_mask);
        let n = match colorize_sweep(sweep, &view, &f.image) {
            Ok(c) => {
                let n = c.len();
                colored.push(c);
                n
            }
            Err(LidarError::EmptyResult) => 0,
            Err(e) => return Err(e.into()),
        };
        println!("{:>6}  {:>7}  {:>9}  {:>12}", f.frame_id, sweep.points.len(), n, depth.valid_count());
    }
    ensure!(!colored.is_empty(), "no training frame has LiDAR points inside its image");
    let cloud = accumulate_and_downsample(&colored, a.voxel_size)?;
    save_point_cloud(&cloud, &a.out)?;
    println!("{} points after {} m voxels -> {}", cloud.len(), a.voxel_size, a.out.display());
    Ok(())
}

fn pose_line(p: &Pose) -> String {
    let r = p.rotation_matrix();
    let t = p.translation;
    let v = [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x, r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y, r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z];
    v.iter().map(|x| format!("{x:.9}")).collect::<Vec<_>>().join(" ")
}

fn sample_views(a: SampleViewsArgs) -> Result<()> {
    let manifest = load_dataset(&a.data_root)?;
    let train = manifest.train_frames();
    let idx = train
        .iter()
        .position(|f| f.frame_id == a.anchor)
        .ok_or_else(|| anyhow!("frame {} is not a training frame", a.anchor))?;
    let prev = train[if idx > 0 { idx - 1 } else { (idx + 1).min(train.len() - 1) }];
    let next = train[if idx + 1 < train.len() { idx + 1 } else { idx.saturating_sub(1) }];
    let cfg = PseudoViewConfig { delta_max: a.delta.to_radians(), count_per_event: a.count, cadence: 1, seed: a.seed };
    cfg.validate()?;
    let anchor = manifest.view(train[idx]);
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let views = sample_pseudo_views(&anchor, &manifest.view(prev), &manifest.view(next), &cfg, &mut rng);
    println!("# anchor {} prev {} next {}; index, yaw offset (deg), 3x4 camera-to-world", a.anchor, prev.frame_id, next.frame_id);
    for (j, v) in views.iter().enumerate() {
        let yaw = streetsplat::geometry::relative_yaw(&anchor.pose, &v.pose).to_degrees();
        println!("{j} {yaw:.4} {}", pose_line(&v.pose));
    }
    Ok(())
}

fn parse_numbers(s: &str, n: usize, what: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = s
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().with_context(|| format!("{what}: bad number {t:?}")))
        .collect::<Result<_>>()?;
    ensure!(v.len() == n, "{what}: expected {n} numbers, got {}", v.len());
    Ok(v)
}

fn render_cmd(a: RenderArgs) -> Result<()> {
    let (cloud, iter) = load_checkpoint(&a.checkpoint)?;
    let manifest = a.data_root.as_deref().map(load_dataset).transpose()?;
    let intrinsics = match (&a.intrinsics, &manifest) {
        (Some(s), _) => {
            let v = parse_numbers(s, 6, "--intrinsics")?;
            Intrinsics::new(v[0], v[1], v[2], v[3], v[4] as usize, v[5] as usize)?
        }
        (None, Some(m)) => m.intrinsics,
        (None, None) => bail!("need --intrinsics or --data-root"),
    };
    let pose = match (&a.pose, a.frame) {
        (Some(s), _) => {
            let v = parse_numbers(s, 12, "--pose")?;
            let r = nalgebra::Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
            streetsplat::scene_io::validate_rotation(&r).map_err(|e| anyhow!("--pose: {e}"))?;
            Pose::from_matrix(&r, nalgebra::Vector3::new(v[3], v[7], v[11]))
        }
        (None, Some(id)) => {
            let m = manifest.as_ref().ok_or_else(|| anyhow!("--frame needs --data-root"))?;
            m.frame(id).ok_or_else(|| anyhow!("no frame {id}"))?.pose
        }
        (None, None) => bail!("need --pose or --frame"),
    };
    let pose = if a.yaw != 0.0 { apply_yaw(&pose, a.yaw.to_radians()) } else { pose };
    let view = CameraView::new(intrinsics, pose)?;
    let background = match &a.background {
        Some(s) => {
            let v = parse_numbers(s, 3, "--background")?;
            [v[0], v[1], v[2]]
        }
        None => [0.0; 3],
    };
    let out = render(&cloud, &view, &RenderSettings { sh_degree: cloud.sh_degree(), background, parallel: true });
    out.color.save_png(&a.out)?;
    println!("rendered {} Gaussians (iteration {iter}) -> {}", cloud.len(), a.out.display());
    if let Some(p) = &a.ply_out {
        write_ply(&cloud, p)?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

struct EvalLine {
    frame: String,
    psnr: f64,
    ssim: f64,
    perceptual: f64,
}

fn eval(a: EvalArgs) -> Result<()> {
    let run = RunConfig::load(a.config.as_deref())?;
    let mut manifest = load_dataset(&a.data_root)?;
    run.apply_split(&mut manifest)?;
    let (cloud, iter) = load_checkpoint(&a.checkpoint)?;
    let settings = RenderSettings { sh_degree: run.train.sh_degree, background: run.train.background, parallel: true };
    let mut lines = Vec::new();
    for f in manifest.test_frames() {
        let img = render(&cloud, &manifest.view(f), &settings).color;
        lines.push(EvalLine {
            frame: f.frame_id.to_string(),
            psnr: psnr(&img, &f.image)?,
            ssim: ssim(&img, &f.image)?,
            perceptual: perceptual_proxy(&img, &f.image)?,
        });
    }
    ensure!(!lines.is_empty(), "the dataset has no test frames");
    let n = lines.len() as f64;
    let mean = EvalLine {
        frame: "mean".into(),
        psnr: lines.iter().map(|l| l.psnr).sum::<f64>() / n,
        ssim: lines.iter().map(|l| l.ssim).sum::<f64>() / n,
        perceptual: lines.iter().map(|l| l.perceptual).sum::<f64>() / n,
    };
    lines.push(mean);

    println!("checkpoint iteration {iter}, {} Gaussians", cloud.len());
    println!("{:>6}  {:>8}  {:>7}  {:>16}", "frame", "psnr", "ssim", "perceptual-proxy");
    for l in &lines {
        println!("{:>6}  {:>8.3}  {:>7.4}  {:>16.5}", l.frame, l.psnr, l.ssim, l.perceptual);
    }
    let mut tsv = String::from("frame\tpsnr\tssim\tperceptual-proxy\n");
    for l in &lines {
        writeln!(tsv, "{}\t{}\t{}\t{}", l.frame, l.psnr, l.ssim, l.perceptual)?;
    }
    match &a.tsv {
        Some(p) => fs::write(p, tsv)?,
        None => print!("\n{tsv}"),
    }
    Ok(())
}

fn make_provider(name: &str, g: &GuidanceConfig, oracle: Option<(GaussianCloud, [f64; 3])>) -> Result<Box<dyn GuidanceProvider>> {
    Ok(match name {
        "identity" => Box::new(IdentityProvider),
        "toy" => Box::new(ToyProvider::default()),
        "oracle" => {
            let (truth, background) = oracle.ok_or_else(|| anyhow!("the oracle provider needs a ground-truth cloud"))?;
            let truth = Arc::new(truth);
            let settings = RenderSettings { sh_degree: truth.sh_degree(), background, parallel: false };
            Box::new(OracleProvider::new(move |v| render(&truth, v, &settings).color))
        }
        s => match s.strip_prefix("remote:") {
            Some(addr) if !addr.is_empty() => Box::new(RemoteProvider::new(addr).with_timeout(g.timeout())),
            _ => bail!("unknown provider {s:?} (identity, toy, oracle, remote:ADDR)"),
        },
    })
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut run = RunConfig::load(a.config.as_deref())?;
    if let Some(p) = a.provider {
        run.guidance.provider = p;
    }
    if let Some(n) = a.iters {
        run.train.total_iters = n;
    }
    run.train.deterministic |= a.deterministic;
    let mut manifest = load_dataset(&a.data_root)?;
    run.apply_split(&mut manifest)?;
    let oracle = if run.guidance.provider == "oracle" {
        let path = a.oracle.unwrap_or_else(|| a.data_root.join(GROUND_TRUTH_FILE));
        let (cloud, _) = load_checkpoint(&path).with_context(|| format!("loading ground truth {}", path.display()))?;
        Some((cloud, run.train.background))
    } else {
        None
    };
    let provider = make_provider(&run.guidance.provider, &run.guidance, oracle)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.toml"), toml::to_string_pretty(&run)?)?;
    info!(
        "training {} iterations on {} train / {} test frames with provider {}",
        run.train.total_iters,
        manifest.split.train.len(),
        manifest.split.test.len(),
        provider.id()
    );
    let opts = TrainOptions { checkpoint_dir: Some(a.out.clone()), stop_after: None, resume: a.resume };
    let outcome = train_with(&manifest, &run.train, provider.as_ref(), &opts)?;
    write_metrics(&a.out, &outcome.history.steps_tsv(), &outcome.history.evals_tsv())?;
    let failed = outcome.state.events.iter().filter(|e| matches!(e.status, streetsplat::trainer::EventStatus::Failed(_))).count();
    if failed > 0 {
        log::warn!("{failed} of {} pseudo-view events were skipped after provider errors", outcome.state.events.len());
    }
    if let Some(e) = outcome.history.final_eval() {
        println!("iteration {}: psnr {:.3}  ssim {:.4}  perceptual-proxy {:.5}  ({} views)", e.iter, e.psnr, e.ssim, e.perceptual, e.views);
    }
    println!("{} Gaussians -> {}", outcome.cloud().len(), a.out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn write_metrics(dir: &Path, steps: &str, evals: &str) -> Result<()> {
    fs::write(dir.join("steps.tsv"), steps)?;
    fs::write(dir.join("evals.tsv"), evals)?;
    Ok(())
}

fn probe_request(seed: u64) -> GuidanceRequest {
    let (w, h) = (32, 24);
    // Values on a 1/1024 grid survive the f32 wire encoding unchanged.
    let q = |v: f64| (v * 1024.0).round() / 1024.0;
    let img = |phase: f64| {
        Image::from_fn(w, h, |x, y| std::array::from_fn(|c| q(0.5 + 0.4 * ((x as f64 * 0.3 + y as f64 * 0.2 + c as f64 + phase).sin()))))
    };
    let depth = |k: f64| DepthMap::from_values(w, h, (0..w * h).map(|i| q(2.0 + k + (i % w) as f64 * 0.125)).collect(), 4);
    let sched = StrengthSchedule::default();
    let strength = 0.4;
    GuidanceRequest {
        request_id: seed,
        rendered: img(0.0),
        ref_prev: img(0.5),
        ref_next: img(-0.5),
        depth_target: depth(0.0),
        depth_prev: depth(0.5),
        depth_next: depth(-0.5),
        strength,
        t: sched.level_for(strength),
        t_max: sched.t_max,
        seed,
        view: None,
    }
}

fn probe(a: ProbeArgs) -> Result<()> {
    let req = probe_request(a.seed);
    let provider = RemoteProvider::new(&a.address).with_timeout(std::time::Duration::from_secs_f64(a.timeout));
    let resp = provider.round_trip(&req)?;
    ensure!(
        resp.guidance.dims() == req.dims(),
        "response is {:?}, request was {:?}",
        resp.guidance.dims(),
        req.dims()
    );
    ensure!(resp.guidance.data().iter().all(|v| v.is_finite()), "response has non-finite values");
    if a.echo {
        let bits = |img: &Image| img.to_planar().iter().map(|v| (*v as f32).to_bits()).collect::<Vec<_>>();
        ensure!(bits(&resp.guidance) == bits(&req.rendered), "echo response differs from the request tensor");
    }
    println!(
        "ok: {}x{} guidance from {:?} at level {}{}",
        req.dims().0,
        req.dims().1,
        resp.provider_id,
        resp.noise_level_used,
        if a.echo { ", echo byte-exact" } else { "" }
    );
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let provider = make_provider(&a.provider, &GuidanceConfig::default(), None)?;
    let listener = TcpListener::bind(&a.listen).with_context(|| format!("binding {}", a.listen))?;
    info!("serving {} on {}", if a.echo { "echo".to_string() } else { provider.id() }, listener.local_addr()?);
    wire::serve(&listener, provider.as_ref(), a.echo, None)?;
    Ok(())
}
