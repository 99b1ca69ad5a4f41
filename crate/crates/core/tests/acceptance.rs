//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streetsplat::geometry::{project, unproject, CameraView, Intrinsics, Pose};
use streetsplat::guidance::{InstrumentedProvider, OracleProvider, StrengthSchedule, ToyProvider};
use streetsplat::lidar::{accumulate_and_downsample, ColoredPoint, ColoredPointCloud, DepthMap};
use streetsplat::losses::*;
use streetsplat::pixels::{Image, Plane};
use streetsplat::rasterizer::{render, RenderSettings};
use streetsplat::synthetic::{generate, SyntheticConfig, SyntheticScene};
use streetsplat::trainer::*;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rasterizer_correctness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut worst = 0.0f64;
    for scene in 0..50 {
        let n = rng.random_range(1..=16);
        let degree = scene % 4;
        let (cloud, view) = random_scene(&mut rng, n, 8, degree, (0.05, 0.8));
        let bg = [rng.random(), rng.random(), rng.random()];
        let out = render(&cloud, &view, &RenderSettings { sh_degree: degree, background: bg, parallel: true });
        let oracle = oracle_render(&cloud, &view, degree, bg);
        for (a, b) in out.color.data().iter().zip(oracle.color.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst < 1e-5 && secs < 10.0, format!("max |diff| {worst:.2e}, {secs:.2}s"))
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut total = GradCheckStats::default();
    for _ in 0..10 {
        let n = rng.random_range(8..=32);
        let (cloud, view) = random_scene(&mut rng, n, 32, 3, (1.0, 3.0));
        let loss = LinearLoss::random(&mut rng, 32, 32);
        total.merge(&grad_check(&cloud, &view, &loss, &RenderSettings::default(), 1e-3, 1e-2, 1e-6));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        total.fraction() >= 0.99 && secs < 120.0,
        format!("{}/{} agree ({:.4}), {secs:.1}s", total.agreed, total.checked, total.fraction()),
    )
}

fn random_view(rng: &mut ChaCha8Rng) -> CameraView {
    let (w, h) = (rng.random_range(16..2000), rng.random_range(16..1200));
    let f = rng.random_range(0.5..2.0) * w as f64;
    let intr = Intrinsics::new(f, f * rng.random_range(0.9..1.1), w as f64 * rng.random_range(0.4..0.6), h as f64 * rng.random_range(0.4..0.6), w, h)
        .unwrap();
    let q = UnitQuaternion::from_euler_angles(rng.random_range(-3.0..3.0), rng.random_range(-1.5..1.5), rng.random_range(-3.0..3.0));
    let t = Vector3::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), rng.random_range(-10.0..10.0));
    CameraView::new(intr, Pose::new(q, t)).unwrap()
}

fn geometry_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let view = random_view(&mut rng);
        let px = Vector2::new(rng.random_range(0.0..view.width() as f64), rng.random_range(0.0..view.height() as f64));
        let depth = rng.random_range(0.1..200.0);
        let world = unproject(&view, &px, depth).map_err(|e| e.to_string())?;
        let (back, d) = project(&view, &world).map_err(|e| e.to_string())?;
        worst = worst.max((back - px).norm() / px.norm().max(1.0)).max((d - depth).abs() / depth);
    }
    check(worst < 1e-6, format!("max relative error {worst:.2e}"))
}

// Independent grid grouping: ordered map keyed by integer cell, means in f64.
fn voxel_oracle(points: &[ColoredPoint], size: f64) -> Vec<([f64; 3], [f64; 3])> {
    let mut cells: BTreeMap<(i64, i64, i64), (Vec<Vector3<f64>>, Vec<[f64; 3]>)> = BTreeMap::new();
    for p in points {
        let k = |v: f64| (v / size).floor() as i64;
        let e = cells.entry((k(p.position.x), k(p.position.y), k(p.position.z))).or_default();
        e.0.push(p.position);
        e.1.push(p.color);
    }
    cells
        .into_values()
        .map(|(pos, col)| {
            let n = pos.len() as f64;
            let c: Vector3<f64> = pos.iter().sum::<Vector3<f64>>() / n;
            let rgb = std::array::from_fn(|i| col.iter().map(|x| x[i]).sum::<f64>() / n);
            ([c.x, c.y, c.z], rgb)
        })
        .collect()
}

fn voxel_downsampling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let points: Vec<ColoredPoint> = (0..10_000)
        .map(|_| ColoredPoint {
            position: Vector3::new(rng.random_range(-40.0..40.0), rng.random_range(-15.0..15.0), rng.random_range(-2.0..8.0)),
            color: [rng.random(), rng.random(), rng.random()],
        })
        .collect();
    let half = points.len() / 2;
    let clouds =
        [ColoredPointCloud { points: points[..half].to_vec() }, ColoredPointCloud { points: points[half..].to_vec() }];
    let mut details = Vec::new();
    let mut ok = true;
    for size in [0.5, 5.0] {
        let got = accumulate_and_downsample(&clouds, size).map_err(|e| e.to_string())?;
        let mut want = voxel_oracle(&points, size);
        let mut have: Vec<([f64; 3], [f64; 3])> =
            got.points.iter().map(|p| ([p.position.x, p.position.y, p.position.z], p.color)).collect();
        let key = |a: &([f64; 3], [f64; 3])| a.0.map(|v| (v / size).floor() as i64);
        want.sort_by_key(key);
        have.sort_by_key(key);
        let same = want.len() == have.len()
            && want.iter().zip(&have).all(|(a, b)| (0..3).all(|i| (a.0[i] - b.0[i]).abs() < 1e-9 && (a.1[i] - b.1[i]).abs() < 1e-12));
        ok &= same;
        details.push(format!("size {size}: {} cells (oracle {})", have.len(), want.len()));
    }
    check(ok, details.join(", "))
}

fn schedule_conformance() -> Outcome {
    let total = 50_000u64;
    let lr = LearningRates::default();
    let lr_ok = lr_at(0, total, lr.lr_start, lr.lr_end) == 1.6e-4 && lr_at(total, total, lr.lr_start, lr.lr_end) == 1.6e-6;
    let sched = StrengthSchedule { total_iters: total, ..Default::default() };
    let mut s_ok = sched.s_max(0) == 0.6 && sched.s_max(total) == 0.4;
    let mut prev = f64::INFINITY;
    for i in 0..=total {
        let s = sched.s_max(i);
        s_ok &= s <= prev;
        prev = s;
    }
    let t_ok = sched.t_max == 10 && (0..=1000).all(|k| {
        let s = k as f64 / 1000.0;
        sched.level_for(s) == (s * 10.0).round() as u32
    });
    check(lr_ok && s_ok && t_ok, format!("lr endpoints {lr_ok}, s_max {s_ok}, levels {t_ok}"))
}

fn small_scene(seed: u64) -> SyntheticScene {
    generate(&SyntheticConfig {
        width: 32,
        height: 20,
        focal: 20.0,
        train_views: 6,
        test_views: 2,
        lidar_azimuth_steps: 120,
        lidar_beams: 16,
        seed,
        ..Default::default()
    })
}

fn small_config(scene: &SyntheticScene, total: u64, warmup: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        total_iters: total,
        warmup_iters: warmup,
        sh_degree: 1,
        sh_increase_interval: 50,
        top_mask_rows: 0,
        background: scene.config.background,
        deterministic: true,
        log_every: 0,
        ..Default::default()
    };
    cfg.densify.max_gaussians = 3000;
    cfg
}

fn cadence_conformance() -> Outcome {
    let scene = small_scene(11);
    let cfg = small_config(&scene, 620, 500);
    let provider = InstrumentedProvider::new(ToyProvider::default());
    train(&scene.manifest, &cfg, &provider).map_err(|e| e.to_string())?;
    let m = cfg.pseudo.count_per_event as u64;
    let mut per_iter: BTreeMap<u64, usize> = BTreeMap::new();
    for (id, _) in provider.calls() {
        *per_iter.entry(id / m).or_default() += 1;
    }
    let early = per_iter.range(..500).count();
    let expected: Vec<u64> = (500..620).step_by(10).collect();
    let ok = early == 0
        && m == 4
        && per_iter.keys().copied().collect::<Vec<_>>() == expected
        && per_iter.values().all(|c| *c == 4);
    check(ok, format!("{} calls, {} before warm-up, events at {:?}", provider.call_count(), early, per_iter.keys().collect::<Vec<_>>()))
}

struct AblationRun {
    psnr: f64,
    early_loss: f64,
    late_loss: f64,
}

fn ablation_run(scene: &SyntheticScene, seed: u64, lambda: f64) -> Result<AblationRun, String> {
    let iters = 2000;
    let mut cfg = TrainConfig {
        total_iters: iters,
        warmup_iters: 500,
        sh_degree: 1,
        top_mask_rows: 0,
        background: scene.config.background,
        seed,
        log_every: 0,
        ..Default::default()
    };
    cfg.weights.lambda_pseudo = lambda;
    cfg.densify.until_iter = iters as usize;
    cfg.densify.max_gaussians = 8000;
    let gt = Arc::new(scene.ground_truth.clone());
    let bg = scene.config.background;
    let provider =
        OracleProvider::new(move |v| render(&gt, v, &RenderSettings { sh_degree: 0, background: bg, parallel: false }).color);
    let out = train(&scene.manifest, &cfg, &provider).map_err(|e| e.to_string())?;
    let psnr = out.history.final_eval().ok_or("no evaluation")?.psnr;
    let window = |end: usize| {
        let steps = &out.history.steps[end - 500..end];
        steps.iter().map(|s| s.report.recon_total(&cfg.weights)).sum::<f64>() / 500.0
    };
    Ok(AblationRun { psnr, early_loss: window(500), late_loss: window(2000) })
}

fn ablation(loss_trend: &mut Option<Outcome>) -> Outcome {
    let start = Instant::now();
    let mut gaps = Vec::new();
    let (mut early, mut late) = (0.0, 0.0);
    for seed in 0..3 {
        let scene = generate(&SyntheticConfig { seed, ..Default::default() });
        if scene.ground_truth.len() < 2000 {
            return Err(format!("ground truth has only {} Gaussians", scene.ground_truth.len()));
        }
        let base = ablation_run(&scene, seed, 0.0)?;
        let guided = ablation_run(&scene, seed, 0.5)?;
        gaps.push(guided.psnr - base.psnr);
        for r in [&base, &guided] {
            early += r.early_loss / 6.0;
            late += r.late_loss / 6.0;
        }
    }
    let elapsed = start.elapsed();
    *loss_trend = Some(check(late < early, format!("moving average {early:.4} at 500, {late:.4} at 2000")));
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    check(
        mean >= 0.5 && elapsed < Duration::from_secs(600),
        format!("mean gap {mean:.3} dB over seeds {gaps:.3?}, {:.0}s", elapsed.as_secs_f64()),
    )
}

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    Image::from_fn(w, h, |_, _| std::array::from_fn(|_| rng.random_range(0.0..1.0)))
}

fn random_plane(rng: &mut ChaCha8Rng, w: usize, h: usize, lo: f64, hi: f64) -> Plane {
    Plane::from_vec(w, h, (0..w * h).map(|_| rng.random_range(lo..hi)).collect())
}

fn random_depth_map(rng: &mut ChaCha8Rng, w: usize, h: usize) -> DepthMap {
    let v = (0..w * h).map(|_| if rng.random_bool(0.7) { rng.random_range(1.0..10.0) } else { 0.0 }).collect();
    DepthMap::from_values(w, h, v, 2)
}

// Fraction of coordinates whose central difference agrees within 1e-3 relative.
fn fd_agreement(x: &[f64], grad: &[f64], f: impl Fn(usize, f64) -> f64) -> (usize, usize) {
    let h = 1e-6;
    let mut agreed = 0;
    for i in 0..x.len() {
        let num = (f(i, x[i] + h) - f(i, x[i] - h)) / (2.0 * h);
        let scale = grad[i].abs().max(num.abs());
        if (grad[i] - num).abs() <= 1e-3 * scale + 1e-9 {
            agreed += 1;
        }
    }
    (agreed, x.len())
}

fn loss_recomposition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let (w, h) = (12, 10);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let color = random_image(&mut rng, w, h);
        let target = random_image(&mut rng, w, h);
        let depth = random_plane(&mut rng, w, h, 1.0, 10.0);
        let alpha = random_plane(&mut rng, w, h, 0.0, 1.0);
        let dm = random_depth_map(&mut rng, w, h);
        let wts = LossWeights {
            lambda_ssim: rng.random_range(0.0..1.0),
            lambda_depth: rng.random_range(0.0..1.0),
            lambda_pseudo: rng.random_range(0.0..1.0),
            lambda_p_lpips: rng.random_range(0.0..1.0),
            lambda_p_depth: rng.random_range(0.0..1.0),
        };
        let recon = recon_loss_parts(&color, &depth, &alpha, &target, &dm, &wts).map_err(|e| e.to_string())?;
        let pseudo =
            pseudo_loss_parts(&color, &depth, &alpha, &target, &dm, &wts, &GradientMagnitudeProxy).map_err(|e| e.to_string())?;
        let r = LossReport::new(&recon, Some(&pseudo.terms), &wts);
        let expect = r.recon_l1
            + wts.lambda_ssim * r.recon_ssim
            + wts.lambda_depth * r.recon_depth
            + wts.lambda_pseudo * (r.pseudo_l1 + wts.lambda_p_lpips * r.pseudo_perceptual + wts.lambda_p_depth * r.pseudo_depth);
        worst = worst.max((r.total - expect).abs());
    }

    let img = random_image(&mut rng, w, h);
    let depth = random_plane(&mut rng, w, h, 1.0, 10.0);
    let ones = Plane::from_vec(w, h, vec![1.0; w * h]);
    let dm = DepthMap::from_values(w, h, depth.data().to_vec(), 0);
    let l1 = l1_with_grad(&img, &img).map_err(|e| e.to_string())?.0;
    let dssim = 1.0 - ssim(&img, &img).map_err(|e| e.to_string())?;
    let perc = perceptual_proxy(&img, &img).map_err(|e| e.to_string())?;
    let dl1 = depth_l1_with_grad(&depth, &ones, &dm).map_err(|e| e.to_string())?.0;
    let identity_ok = [l1, dssim, perc, dl1].iter().all(|v| v.abs() < 1e-12);

    let a = random_image(&mut rng, w, h);
    let b = random_image(&mut rng, w, h);
    let d = random_plane(&mut rng, w, h, 1.0, 10.0);
    let alpha = random_plane(&mut rng, w, h, 0.1, 1.0);
    let target_depth = random_depth_map(&mut rng, w, h);
    let perturbed = |i: usize, v: f64| {
        let mut x = a.clone();
        x.data_mut()[i] = v;
        x
    };
    let mut agreed = 0;
    let mut checked = 0;
    let mut add = |(ag, n): (usize, usize)| {
        agreed += ag;
        checked += n;
    };
    let (_, g) = l1_with_grad(&a, &b).map_err(|e| e.to_string())?;
    add(fd_agreement(a.data(), g.data(), |i, v| l1_with_grad(&perturbed(i, v), &b).unwrap().0));
    let (_, g) = ssim_with_grad(&a, &b).map_err(|e| e.to_string())?;
    add(fd_agreement(a.data(), g.data(), |i, v| ssim(&perturbed(i, v), &b).unwrap()));
    let (_, g) = perceptual_proxy_with_grad(&a, &b);
    add(fd_agreement(a.data(), g.data(), |i, v| perceptual_proxy(&perturbed(i, v), &b).unwrap()));
    let (_, g) = depth_l1_with_grad(&d, &alpha, &target_depth).map_err(|e| e.to_string())?;
    add(fd_agreement(d.data(), g.data(), |i, v| {
        let mut x = d.clone();
        x.data_mut()[i] = v;
        depth_l1_with_grad(&x, &alpha, &target_depth).unwrap().0
    }));
    check(
        worst < 1e-12 && identity_ok && agreed == checked,
        format!("recomposition error {worst:.1e}, zero at identity {identity_ok}, gradients {agreed}/{checked}"),
    )
}

fn metric_sanity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let a = random_image(&mut rng, 24, 16);
    let b = random_image(&mut rng, 24, 16);
    let s_self = ssim(&a, &a).map_err(|e| e.to_string())?;
    let asym = (ssim(&a, &b).map_err(|e| e.to_string())? - ssim(&b, &a).map_err(|e| e.to_string())?).abs();
    let x = Image::from_fn(24, 16, |_, _| [0.5; 3]);
    let y = Image::from_fn(24, 16, |_, _| [0.6; 3]);
    let p = psnr(&x, &y).map_err(|e| e.to_string())?;
    check(
        (s_self - 1.0).abs() < 1e-12 && asym < 1e-12 && (p - 20.0).abs() < 1e-9,
        format!("ssim(x,x) {s_self}, asymmetry {asym:.1e}, psnr {p:.12}"),
    )
}

fn determinism_and_resume() -> Outcome {
    let scene = small_scene(12);
    let mut cfg = small_config(&scene, 300, 100);
    cfg.checkpoint_every = 100;
    let provider = ToyProvider::default();
    let a = train(&scene.manifest, &cfg, &provider).map_err(|e| e.to_string())?;
    let b = train(&scene.manifest, &cfg, &provider).map_err(|e| e.to_string())?;
    let repeat = a.state.cloud == b.state.cloud && a.history.steps == b.history.steps && a.history.evals == b.history.evals;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let opts = TrainOptions { checkpoint_dir: Some(dir.path().to_path_buf()), stop_after: Some(150), resume: false };
    let killed = train_with(&scene.manifest, &cfg, &provider, &opts).map_err(|e| e.to_string())?;
    let resumed = train_with(&scene.manifest, &cfg, &provider, &TrainOptions { stop_after: None, resume: true, ..opts })
        .map_err(|e| e.to_string())?;
    let resume_ok = !killed.completed
        && resumed.completed
        && resumed.history.final_eval() == a.history.final_eval()
        && resumed.state.cloud == a.state.cloud;
    check(
        repeat && resume_ok,
        format!("repeat identical {repeat}, resume identical {resume_ok}, final {:?}", a.history.final_eval().map(|e| e.psnr)),
    )
}

#[test]
fn acceptance() {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("rasterizer correctness", rasterizer_correctness()),
        ("gradient fidelity", gradient_fidelity()),
        ("geometry round trip", geometry_round_trip()),
        ("voxel downsampling", voxel_downsampling()),
        ("schedule conformance", schedule_conformance()),
        ("cadence conformance", cadence_conformance()),
    ];
    let mut trend = None;
    results.push(("ablation direction", ablation(&mut trend)));
    results.push(("training loss trend", trend.unwrap_or_else(|| Err("ablation did not finish".into()))));
    results.push(("loss recomposition", loss_recomposition()));
    results.push(("metric sanity", metric_sanity()));
    results.push(("determinism and resume", determinism_and_resume()));

    let mut failed = Vec::new();
    for (name, outcome) in &results {
        match outcome {
            Ok(d) => println!("PASS  {name}: {d}"),
            Err(d) => {
                println!("FAIL  {name}: {d}");
                failed.push(*name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
