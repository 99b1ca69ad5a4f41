use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output};
use std::time::Duration;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_streetsplat"));
    c.env("RUST_LOG", "warn").env("RUST_BACKTRACE", "0");
    c
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn small_dataset(dir: &Path) -> String {
    let scene = dir.join("scene.toml");
    fs::write(&scene, "width = 32\nheight = 20\nfocal = 20.0\ntrain_views = 6\ntest_views = 2\nlidar_azimuth_steps = 120\nlidar_beams = 16\n")
        .unwrap();
    let data = dir.join("data");
    run(&["synth", "--out", data.to_str().unwrap(), "--seed", "4", "--scene-config", scene.to_str().unwrap()]);
    data.to_str().unwrap().to_string()
}

fn free_port() -> String {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap().to_string()
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn spawn_server(extra: &[&str]) -> (Server, String) {
    let addr = free_port();
    let child = bin().args(["guidance-serve", "--listen", &addr]).args(extra).spawn().unwrap();
    for _ in 0..100 {
        if std::net::TcpStream::connect(&addr).is_ok() {
            break;
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    (Server(child), addr)
}

#[test]
fn synth_ingest_and_sample_views() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    for f in ["intrinsics.txt", "poses.txt", "split.txt", "ground_truth.bin", "train.toml", "images/000000.png", "lidar/000000.bin"] {
        assert!(Path::new(&data).join(f).exists(), "missing {f}");
    }
    let points = dir.path().join("points.bin");
    let out = run(&["ingest", "--data-root", &data, "--voxel-size", "0.5", "--top-mask", "4", "--out", points.to_str().unwrap()]);
    assert!(stdout(&out).contains("points after 0.5 m voxels"));
    let cloud = streetsplat::lidar::load_point_cloud(&points).unwrap();
    assert!(!cloud.is_empty());

    let out = run(&["sample-views", "--data-root", &data, "--anchor", "2", "--delta", "15", "--count", "3", "--seed", "1"]);
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(lines.len(), 3);
    for l in &lines {
        let v: Vec<f64> = l.split_whitespace().map(|t| t.parse().unwrap()).collect();
        assert_eq!(v.len(), 14);
        assert!(v[1].abs() <= 15.0 + 1e-9);
    }
    let again = run(&["sample-views", "--data-root", &data, "--anchor", "2", "--delta", "15", "--count", "3", "--seed", "1"]);
    assert_eq!(stdout(&again), stdout(&out));
}

#[test]
fn train_eval_render_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let cfg = dir.path().join("train.toml");
    let mut text = fs::read_to_string(Path::new(&data).join("train.toml")).unwrap();
    text = text.replace("warmup_iters = 500", "warmup_iters = 10").replace("eval_every = 500", "eval_every = 20");
    fs::write(&cfg, text).unwrap();
    let out_dir = dir.path().join("run");
    let args = ["train", "--data-root", &data, "--config", cfg.to_str().unwrap(), "--iters", "40", "--out", out_dir.to_str().unwrap(), "--deterministic"];
    let o = run(&args);
    assert!(stdout(&o).contains("iteration 40: psnr"));
    let steps = fs::read_to_string(out_dir.join("steps.tsv")).unwrap();
    assert_eq!(steps.lines().count(), 41);
    assert!(steps.starts_with("iter\tframe\tlr\ttotal\trecon_l1"));
    let evals = fs::read_to_string(out_dir.join("evals.tsv")).unwrap();
    assert_eq!(evals.lines().next(), Some("iter\tpsnr\tssim\tperceptual-proxy\tviews"));
    assert_eq!(evals.lines().count(), 3);

    let ckpt = out_dir.join("checkpoint.bin");
    let (cloud, iter) = streetsplat::scene_io::load_checkpoint(&ckpt).unwrap();
    assert_eq!(iter, 40);

    let tsv = dir.path().join("eval.tsv");
    let o = run(&["eval", "--data-root", &data, "--checkpoint", ckpt.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "--tsv", tsv.to_str().unwrap()]);
    assert!(stdout(&o).contains("perceptual-proxy"));
    let table = fs::read_to_string(&tsv).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert!(table.lines().last().unwrap().starts_with("mean\t"));

    let png = dir.path().join("view.png");
    let ply = dir.path().join("cloud.ply");
    run(&[
        "render", "--checkpoint", ckpt.to_str().unwrap(), "--pose", "0 0 1 0 -1 0 0 0 0 -1 0 1.6", "--intrinsics", "20 20 16 10 32 20",
        "--out", png.to_str().unwrap(), "--ply-out", ply.to_str().unwrap(),
    ]);
    assert_eq!(streetsplat::pixels::Image::load_png(&png).unwrap().dims(), (32, 20));
    let ply_text = fs::read_to_string(&ply).unwrap();
    assert!(ply_text.contains(&format!("element vertex {}\n", cloud.len())));
    assert_eq!(ply_text.split_once("end_header\n").unwrap().1.lines().count(), cloud.len());

    // Resuming a finished run has nothing left to do.
    let o = run(&[&args[..], &["--resume"]].concat());
    assert!(stdout(&o).contains("iteration 40"));
    assert_eq!(streetsplat::scene_io::load_checkpoint(&ckpt).unwrap().0, cloud);
}

#[test]
fn probe_passes_against_echo_and_toy_services() {
    let (_echo, addr) = spawn_server(&["--echo"]);
    let o = run(&["guidance-probe", "--address", &addr, "--echo"]);
    assert!(stdout(&o).contains("echo byte-exact"));

    let (_toy, addr) = spawn_server(&["--provider", "toy"]);
    run(&["guidance-probe", "--address", &addr]);
    let bad = bin().args(["guidance-probe", "--address", &addr, "--echo"]).output().unwrap();
    assert!(!bad.status.success());
}

#[test]
fn unreachable_service_and_unknown_provider_fail() {
    let addr = free_port();
    let o = bin().args(["guidance-probe", "--address", &addr, "--timeout", "1"]).output().unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unavailable"));

    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let o = bin()
        .args(["train", "--data-root", &data, "--provider", "nonsense", "--out", dir.path().join("r").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown provider"));
}
