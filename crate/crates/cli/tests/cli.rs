use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dualformer::io;
use dualformer::{Model, ModelConfig, Rng, Shape, Tensor};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dualformer"));
    c.env_remove("DF_THREADS");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("spawn")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write_image(path: &Path, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let x: Tensor<f32> = Rng::new(seed).uniform_tensor(Shape::new(1, 3, h, w), 0.0, 1.0);
    io::save_ppm(path, &x).unwrap();
    io::load_ppm(path).unwrap()
}

const QUICK: [&str; 8] = ["--steps", "3", "--batch", "2", "--patch", "16", "--heldout", "2"];

#[test]
fn analyze_paper_with_variants() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["analyze", "--variant", "fusion=concat", "--variant", "ffn=mlp", "--out", "a.json"], dir.path());
    assert_eq!(code(&o), 0, "{o:?}");
    let r = json(&dir.path().join("a.json"));
    let params = r["totals"]["params"].as_f64().unwrap();
    let macs = r["totals"]["macs"].as_f64().unwrap();
    assert!((params / 14.23e6 - 1.0).abs() <= 0.08, "{params}");
    assert!((macs / 9.28e9 - 1.0).abs() <= 0.10, "{macs}");
    let v = r["variants"].as_array().unwrap();
    assert!(v[0]["params"].as_f64().unwrap() < params);
    assert!(v[1]["params"].as_f64().unwrap() > params);
    assert_eq!(r["config_hash"].as_str().unwrap(), ModelConfig::paper().hash());
    assert!(stdout(&o).contains("fusion=concat"));
}

#[test]
fn analyze_tiny_matches_allocated_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["analyze", "--preset", "tiny", "--resolution", "32x48", "--out", "t.json"], dir.path());
    assert_eq!(code(&o), 0, "{o:?}");
    let (_, store) = Model::build::<f32>(&ModelConfig::tiny(), &Rng::new(0)).unwrap();
    let r = json(&dir.path().join("t.json"));
    assert_eq!(r["totals"]["params"].as_u64().unwrap(), store.total());
    assert_eq!(r["resolution"], serde_json::json!([32, 48]));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = ModelConfig::tiny().canonical_json();
    text = text.replacen("\"heads\"", "\"haeds\"", 1);
    fs::write(dir.path().join("bad.json"), text).unwrap();
    assert_eq!(code(&run(&["analyze", "--config", "bad.json"], dir.path())), 2);
    assert_eq!(code(&run(&["analyze", "--variant", "fusion=magic"], dir.path())), 2);
    assert_eq!(code(&run(&["analyze", "--preset", "huge"], dir.path())), 2);
    assert_eq!(code(&run(&["erf", "--stage", "enc9", "--out", "m.dft"], dir.path())), 2);
    assert_eq!(code(&run(&["frobnicate"], dir.path())), 2);
    let o = bin().args(["sweep"]).env("DF_THREADS", "zero").current_dir(dir.path()).output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_scopes_and_negative_control() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["gradcheck", "--scope", "op", "--out", "g.json"], dir.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let r = json(&dir.path().join("g.json"));
    assert!(r["units"].as_array().unwrap().iter().all(|u| u["tol"] == 1e-4 && u["passed"] == true));

    let o = run(&["gradcheck", "--scope", "model"], dir.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("tiny_model"));

    let o = run(&["gradcheck", "--scope", "block", "--filter", "lfe", "--inject-fault", "lfe_no_ca"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL block  lfe_no_ca"), "{}", stdout(&o));
    assert_eq!(code(&run(&["gradcheck", "--scope", "everything"], dir.path())), 2);
}

#[test]
fn erf_stem_and_latent() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &["erf", "--stage", "stem", "--resolution", "32", "--probes", "2", "--out", "s.dft", "--summary", "s.json"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{o:?}");
    let s = json(&dir.path().join("s.json"));
    assert_eq!(s["support_fraction"].as_f64().unwrap(), 9.0 / 1024.0);
    assert_eq!(s["within_bound"], true);
    let map: Tensor<f64> = io::load_tensor(&dir.path().join("s.dft")).unwrap();
    assert_eq!(map.shape(), Shape::new(1, 1, 32, 32));

    let o = run(
        &["erf", "--stage", "latent_after_htb1", "--resolution", "32", "--probes", "1", "--out", "l.dft"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{o:?}");
    let s: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(s["support_fraction"].as_f64().unwrap(), 1.0);
    assert_eq!(s["analytic_bound"], Value::Null);
}

#[test]
fn sweep_rows_and_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["sweep", "--resolutions", "128,192,256", "--out", "w.json"], dir.path());
    assert_eq!(code(&o), 0, "{o:?}");
    let r = json(&dir.path().join("w.json"));
    let rows = r["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    let ratio = rows[2]["macs"].as_f64().unwrap() / rows[0]["macs"].as_f64().unwrap();
    assert!((3.9..=4.3).contains(&ratio), "{ratio}");
    assert_eq!(r["monotone"], true);
}

#[test]
fn train_zero_steps_writes_the_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--steps", "0", "--seed", "5", "--out", "init.dfck"], dir.path());
    assert_eq!(code(&o), 0, "{o:?}");
    let (_, saved) = io::load_checkpoint::<f32>(&dir.path().join("init.dfck")).unwrap();
    let (_, init) = Model::build::<f32>(&ModelConfig::tiny(), &Rng::new(5)).unwrap();
    assert!(saved == init);
}

#[test]
fn train_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let with = |extra: &[&str]| -> Vec<String> { QUICK.iter().chain(extra).map(|s| s.to_string()).collect() };
    let go = |args: Vec<String>, threads: &str| {
        let o = bin().arg("train").args(&args).env("DF_THREADS", threads).current_dir(d).output().unwrap();
        assert_eq!(code(&o), 0, "{o:?}");
    };
    go(with(&["--out", "a.dfck", "--log", "a.jsonl", "--summary", "a.json"]), "1");
    go(with(&["--out", "b.dfck", "--log", "b.jsonl", "--summary", "b.json"]), "2");
    go(with(&["--out", "c.dfck", "--log", "c.jsonl", "--stop-after", "1"]), "1");
    go(with(&["--out", "c.dfck", "--log", "c.jsonl", "--resume", "c.dfck"]), "1");
    let read = |n: &str| fs::read(d.join(n)).unwrap();
    assert_eq!(read("a.dfck"), read("b.dfck"));
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
    assert_eq!(read("a.dfck"), read("c.dfck"));
    assert_eq!(read("a.dfck.adam"), read("c.dfck.adam"));
    assert_eq!(read("a.jsonl"), read("c.jsonl"));
    let log = String::from_utf8(read("a.jsonl")).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["step"], i + 1);
        assert!(l["lr"].is_f64() && l["loss"].is_f64());
    }
    let (a, b) = (json(&d.join("a.json")), json(&d.join("b.json")));
    assert_eq!(a["threads"], 1);
    assert_eq!(b["threads"], 2);
    assert_eq!(a["run_hash"], b["run_hash"]);
}

#[test]
fn train_flags_cover_loss_and_degradation() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        &[
            "train",
            "--print-config",
            "--out",
            "x",
            "--degrade",
            "rain",
            "--rain-count",
            "3",
            "--rain-angle",
            "-20",
            "--lambda-perceptual",
            "0",
            "--perceptual-layers",
            "1,3",
            "--extractor-seed",
            "4",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{o:?}");
    let c: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(c["degrade"]["kind"], "rain");
    assert_eq!(c["degrade"]["count"], 3);
    assert_eq!(c["degrade"]["angle_deg"], -20.0);
    assert_eq!(c["model"]["loss_lambda"], serde_json::json!([1.0, 0.0]));
    assert_eq!(c["perceptual"]["layers"], serde_json::json!([1, 3]));
    assert_eq!(c["perceptual"]["extractor_seed"], 4);
    assert_eq!(code(&run(&["train", "--print-config", "--out", "x", "--haze-airlight", "0.5"], dir.path())), 2);
    assert_eq!(code(&run(&["train", "--print-config", "--out", "x", "--perceptual-layers", "7"], dir.path())), 2);
    assert_eq!(
        code(&run(
            &["train", "--print-config", "--out", "x", "--lambda-psnr", "0", "--lambda-perceptual", "0"],
            dir.path()
        )),
        2
    );
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--lr0", "1e30", "--lr-min", "1e30", "--out", "d.dfck", "--log", "d.jsonl"];
    args.extend(QUICK);
    let o = run(&args, dir.path());
    assert_eq!(code(&o), 3, "{o:?}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
    assert!(!dir.path().join("d.dfck").exists());
}

#[test]
fn forward_identity_padding_and_reference() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let x = write_image(&d.join("in.ppm"), 18, 21, 1);
    let o = run(&["forward", "--zero-init", "--in", "in.ppm", "--out", "out.ppm", "--ref", "in.ppm"], d);
    assert_eq!(code(&o), 0, "{o:?}");
    assert_eq!(fs::read(d.join("in.ppm")).unwrap(), fs::read(d.join("out.ppm")).unwrap());
    assert!(stdout(&o).contains("restored psnr inf dB"));

    let o = run(&["forward", "--in", "in.ppm", "--out", "r.ppm", "--ref", "in.ppm"], d);
    assert_eq!(code(&o), 0, "{o:?}");
    let y: Tensor<f32> = io::load_ppm(&d.join("r.ppm")).unwrap();
    assert_eq!(y.shape(), x.shape());

    assert_eq!(code(&run(&["forward", "--no-pad", "--in", "in.ppm", "--out", "n.ppm"], d)), 2);
    fs::write(d.join("bad.ppm"), b"P6\n4 4\n255\nabc").unwrap();
    assert_eq!(code(&run(&["forward", "--in", "bad.ppm", "--out", "b.ppm"], d)), 2);
}

#[test]
fn forward_with_trained_checkpoint_matches_library_inference() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args = vec!["train", "--out", "ck.dfck"];
    args.extend(QUICK);
    assert_eq!(code(&run(&args, d)), 0);
    let x = write_image(&d.join("in.ppm"), 32, 16, 2);
    assert_eq!(code(&run(&["forward", "--weights", "ck.dfck", "--in", "in.ppm", "--out", "o.ppm"], d)), 0);
    let (m, p) = io::load_checkpoint::<f32>(&d.join("ck.dfck")).unwrap();
    let want = io::encode_ppm(&m.infer(&p, &x).unwrap()).unwrap();
    assert_eq!(fs::read(d.join("o.ppm")).unwrap(), want);
    assert_eq!(
        code(&run(&["forward", "--preset", "paper", "--weights", "ck.dfck", "--in", "in.ppm", "--out", "o.ppm"], d)),
        2
    );
}

#[test]
fn eval_identical_directories() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for sub in ["p", "r"] {
        fs::create_dir(d.join(sub)).unwrap();
        for (i, name) in ["a.ppm", "b.ppm"].iter().enumerate() {
            write_image(&d.join(sub).join(name), 16, 16, i as u64);
        }
    }
    let o = run(&["eval", "--pred", "p", "--ref", "r", "--out", "e.json"], d);
    assert_eq!(code(&o), 0, "{o:?}");
    let r = json(&d.join("e.json"));
    assert_eq!(r["mean_psnr"], "inf");
    assert_eq!(r["mean_ssim"].as_f64().unwrap(), 1.0);
    assert_eq!(r["images"], 2);

    let o = run(&["eval", "--pred", "p", "--ref", "r", "--y", "--out", "y.json"], d);
    assert_eq!(code(&o), 0);
    assert_eq!(json(&d.join("y.json"))["channel_mode"], "y");

    fs::remove_file(d.join("r").join("b.ppm")).unwrap();
    assert_eq!(code(&run(&["eval", "--pred", "p", "--ref", "r"], d)), 2);
}
