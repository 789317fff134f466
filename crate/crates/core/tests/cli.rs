//! End-to-end checks of the `lpci` binary: exit codes, artifact layout,
//! determinism, and the documented error contracts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lpci::pointcloud;
use lpci::projection::{ImageKind, ProjectionMeta, RangeImage};
use lpci::synth::toy_range_image;
use lpci::tensorfile::Tensor;

fn lpci() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lpci"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary launches")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn small_meta() -> ProjectionMeta {
    ProjectionMeta { height: 8, width: 16, ..ProjectionMeta::equirect_default() }
}

/// Config sized so training and sampling finish in milliseconds.
fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    std::fs::write(
        &path,
        r#"{
            "projection": {"height": 8, "width": 16},
            "schedule": {"params": {"steps": 20}},
            "embedding": {"dim": 8, "harmonics": 2},
            "denoiser": {"base_channels": 4, "depth": 1, "embed_dim": 8, "dropout_rate": 0.0},
            "training": {"epochs": 2, "batch_size": 2, "patience": 0},
            "metrics": {"bins": 16, "pool": 8}
        }"#,
    )
    .unwrap();
    path
}

fn write_toy_images(dir: &Path, n: usize) {
    std::fs::create_dir_all(dir).unwrap();
    let meta = small_meta();
    for i in 0..n {
        let img = toy_range_image(&meta, 1000 + i as u64).unwrap();
        img.to_tensor().write(dir.join(format!("img_{i:03}.lpci"))).unwrap();
    }
}

#[test]
fn project_fans_out_views_and_backproject_inverts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    // a scan with structure: toy scene, backprojected to a cloud
    let img = toy_range_image(&small_meta(), 5).unwrap();
    let cloud = lpci::projection::backproject_equirect(&img).unwrap();
    let scan = tmp.path().join("scan.bin");
    pointcloud::save_scan_bin(&scan, &cloud).unwrap();

    let out_dir = tmp.path().join("proj");
    let out = run(lpci()
        .args(["project", scan.to_str().unwrap()])
        .args(["--out", out_dir.to_str().unwrap()])
        .args(["--views", "equirect,bev", "--png"])
        .args(["--config", cfg.to_str().unwrap()]));
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    for name in ["scan.equirect.lpci", "scan.bev.lpci", "scan.equirect.png", "scan.bev.png"] {
        assert!(out_dir.join(name).exists(), "missing {name}");
    }
    assert!(out_dir.join("run_config.json").exists(), "config echo missing");

    // PNGs carry 16-bit grayscale
    let png = image::open(out_dir.join("scan.equirect.png")).unwrap();
    assert_eq!(png.color(), image::ColorType::L16);

    // back-projection: one point per nonzero pixel
    let round = tmp.path().join("round.lpci");
    let out = run(lpci()
        .args(["backproject", out_dir.join("scan.equirect.lpci").to_str().unwrap()])
        .args(["--out", round.to_str().unwrap()])
        .args(["--config", cfg.to_str().unwrap()]));
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    let projected = RangeImage::from_tensor(&Tensor::read(out_dir.join("scan.equirect.lpci")).unwrap()).unwrap();
    let nonzero = projected.data.iter().filter(|v| **v != 0.0).count();
    let t = Tensor::read(&round).unwrap();
    assert_eq!(t.shape[0], nonzero);
}

#[test]
fn unreadable_scan_fails_with_exit_2_and_names_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("proj");
    let out = run(lpci()
        .args(["project", "/nonexistent/ghost.bin"])
        .args(["--out", out_dir.to_str().unwrap()]));
    assert_eq!(code(&out), 2);
    assert!(stderr_of(&out).contains("ghost.bin"), "stderr: {}", stderr_of(&out));
}

#[test]
fn schedules_emit_the_constant_alpha_bar_table_and_all_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("sched");
    let out = run(lpci()
        .args(["schedules", "--kinds", "constant", "--steps", "3"])
        .args(["--set", "schedule.params.beta_start=0.1", "--set", "schedule.params.beta_end=0.1"])
        .args(["--out", out_dir.to_str().unwrap()]));
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    let csv = std::fs::read_to_string(out_dir.join("constant.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "step,beta,alpha,alpha_bar,snr");
    let expect = [0.9, 0.81, 0.729];
    for (i, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[0], (i + 1).to_string());
        let alpha_bar: f64 = cols[3].parse().unwrap();
        assert!((alpha_bar - expect[i]).abs() < 1e-12, "row {i}: {alpha_bar}");
    }

    // all eight kinds fan out (default 1000 steps satisfies every family)
    let all_dir = tmp.path().join("all");
    let out = run(lpci()
        .args(["schedules", "--kinds", "all"])
        .args(["--out", all_dir.to_str().unwrap()]));
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    let csvs = std::fs::read_dir(&all_dir)
        .unwrap()
        .filter(|e| {
            e.as_ref().unwrap().path().extension().and_then(|x| x.to_str()) == Some("csv")
        })
        .count();
    assert_eq!(csvs, 8);

    let out = run(lpci()
        .args(["schedules", "--kinds", "banana"])
        .args(["--out", tmp.path().join("x").to_str().unwrap()]));
    assert_eq!(code(&out), 2);
}

#[test]
fn train_sample_eval_pipeline_with_deterministic_sampling() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    write_toy_images(&data, 10);

    let ckpt = tmp.path().join("model.lpci");
    let out = run(lpci()
        .args(["train", data.to_str().unwrap()])
        .args(["--out", ckpt.to_str().unwrap()])
        .args(["--config", cfg.to_str().unwrap()]));
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    assert!(ckpt.exists());
    assert!(tmp.path().join("model.run.json").exists(), "config echo missing");
    let losses = std::fs::read_to_string(tmp.path().join("model.loss.csv")).unwrap();
    let lines: Vec<&str> = losses.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,val_loss");
    assert_eq!(lines.len(), 3, "two epochs requested: {losses}");
    assert!(stderr_of(&out).contains("8 train / 1 val / 1 test"));

    // identical (seed, count) twice -> byte-identical artifacts
    let gen1 = tmp.path().join("gen1");
    let gen2 = tmp.path().join("gen2");
    for dir in [&gen1, &gen2] {
        let out = run(lpci()
            .args(["sample", ckpt.to_str().unwrap()])
            .args(["--count", "2", "--seed", "7"])
            .args(["--out", dir.to_str().unwrap()])
            .args(["--config", cfg.to_str().unwrap()]));
        assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
        assert!(stderr_of(&out).contains("(20 steps)"), "stderr: {}", stderr_of(&out));
    }
    for name in ["sample_0000.lpci", "sample_0001.lpci"] {
        let a = std::fs::read(gen1.join(name)).unwrap();
        let b = std::fs::read(gen2.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    assert!(gen1.join("run_config.json").exists());

    // reduced-step sampling logs its step count
    let gen3 = tmp.path().join("gen3");
    let out = run(lpci()
        .args(["sample", ckpt.to_str().unwrap()])
        .args(["--count", "1", "--seed", "7", "--sample-steps", "10"])
        .args(["--out", gen3.to_str().unwrap()])
        .args(["--config", cfg.to_str().unwrap()]));
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("(10 steps)"), "stderr: {}", stderr_of(&out));

    // evaluation: self-comparison pins the lower bound
    let report_path = tmp.path().join("self.json");
    let out = run(lpci()
        .args(["eval", data.to_str().unwrap(), data.to_str().unwrap()])
        .args(["--out", report_path.to_str().unwrap()])
        .args(["--config", cfg.to_str().unwrap()]));
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["jsd"], 0.0);
    assert!(report["frechet"].as_f64().unwrap() < 1e-6);
    assert!(report["mmd"].as_f64().unwrap().abs() < 1e-9);
    assert_eq!(report["n_generated"], 10);
    assert!(report["run_config"].is_object(), "config echo missing from report");

    // generated-vs-reference also runs clean end to end
    let report2 = tmp.path().join("gen.json");
    let out = run(lpci()
        .args(["eval", gen1.to_str().unwrap(), data.to_str().unwrap()])
        .args(["--out", report2.to_str().unwrap()])
        .args(["--config", cfg.to_str().unwrap()]));
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
}

#[test]
fn sample_rejects_count_zero_and_schedule_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    write_toy_images(&data, 5);
    let ckpt = tmp.path().join("model.lpci");
    let out = run(lpci()
        .args(["train", data.to_str().unwrap(), "--epochs", "1"])
        .args(["--out", ckpt.to_str().unwrap()])
        .args(["--config", cfg.to_str().unwrap()]));
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));

    let out = run(lpci()
        .args(["sample", ckpt.to_str().unwrap(), "--count", "0"])
        .args(["--out", tmp.path().join("g").to_str().unwrap()])
        .args(["--config", cfg.to_str().unwrap()]));
    assert_eq!(code(&out), 2);

    // config with a different step count than the checkpoint trained with
    let out = run(lpci()
        .args(["sample", ckpt.to_str().unwrap(), "--count", "1"])
        .args(["--set", "schedule.params.steps=30"])
        .args(["--out", tmp.path().join("g2").to_str().unwrap()])
        .args(["--config", cfg.to_str().unwrap()]));
    assert_eq!(code(&out), 2);
    let err = stderr_of(&out);
    assert!(err.contains("checkpoint") && err.contains("20") && err.contains("30"), "{err}");
}

#[test]
fn train_rejects_an_empty_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("empty");
    std::fs::create_dir_all(&data).unwrap();
    let out = run(lpci()
        .args(["train", data.to_str().unwrap()])
        .args(["--out", tmp.path().join("m.lpci").to_str().unwrap()]));
    assert_eq!(code(&out), 2);
}

#[test]
fn resume_continues_the_optimizer_step_count() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    write_toy_images(&data, 6);
    let first = tmp.path().join("first.lpci");
    let out = run(lpci()
        .args(["train", data.to_str().unwrap(), "--epochs", "1"])
        .args(["--out", first.to_str().unwrap()])
        .args(["--config", cfg.to_str().unwrap()]));
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    let (_, opt1, _) = lpci::checkpoint::load_checkpoint(&first).unwrap();
    assert!(opt1.step > 0);

    let second = tmp.path().join("second.lpci");
    let out = run(lpci()
        .args(["train", data.to_str().unwrap(), "--epochs", "1"])
        .args(["--resume", first.to_str().unwrap()])
        .args(["--out", second.to_str().unwrap()])
        .args(["--config", cfg.to_str().unwrap()]));
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    let (_, opt2, _) = lpci::checkpoint::load_checkpoint(&second).unwrap();
    assert!(opt2.step > opt1.step, "{} -> {}", opt1.step, opt2.step);
}

#[test]
fn eval_rejects_empty_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_toy_images(&data, 3);
    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = run(lpci()
        .args(["eval", empty.to_str().unwrap(), data.to_str().unwrap()])
        .args(["--out", tmp.path().join("r.json").to_str().unwrap()]));
    assert_eq!(code(&out), 2);
}

#[test]
fn backproject_contracts_zero_image_bev_and_missing_meta() {
    let tmp = tempfile::tempdir().unwrap();
    let meta = small_meta();

    // all-zero image: exit 0, warning, empty output
    let zero = RangeImage::new(ndarray::Array2::zeros((8, 16)), ImageKind::Equirect, meta).unwrap();
    let zero_path = tmp.path().join("zero.lpci");
    zero.to_tensor().write(&zero_path).unwrap();
    let out_bin = tmp.path().join("zero.bin");
    let out = run(lpci()
        .args(["backproject", zero_path.to_str().unwrap()])
        .args(["--out", out_bin.to_str().unwrap()]));
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
    assert!(stderr_of(&out).contains("warning"), "stderr: {}", stderr_of(&out));
    assert_eq!(std::fs::metadata(&out_bin).unwrap().len(), 0);

    // bird's-eye input is the wrong kind
    let mut data = ndarray::Array2::zeros((8, 16));
    data[[2, 3]] = 0.5f32;
    let bev = RangeImage::new(data, ImageKind::Bev, meta).unwrap();
    let bev_path = tmp.path().join("bev.lpci");
    bev.to_tensor().write(&bev_path).unwrap();
    let out = run(lpci()
        .args(["backproject", bev_path.to_str().unwrap()])
        .args(["--out", tmp.path().join("b.bin").to_str().unwrap()]));
    assert_eq!(code(&out), 2);

    // a bare tensor without projection attributes is a format error
    let bare_path = tmp.path().join("bare.lpci");
    Tensor::new(vec![8, 16], vec![0.1; 128]).unwrap().write(&bare_path).unwrap();
    let out = run(lpci()
        .args(["backproject", bare_path.to_str().unwrap()])
        .args(["--out", tmp.path().join("c.bin").to_str().unwrap()]));
    assert_eq!(code(&out), 2);
}

#[test]
fn thread_cap_env_is_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(lpci()
        .env("LPCI_THREADS", "banana")
        .args(["schedules", "--kinds", "linear"])
        .args(["--out", tmp.path().join("s").to_str().unwrap()]));
    assert_eq!(code(&out), 2);
    let out = run(lpci()
        .env("LPCI_THREADS", "2")
        .args(["schedules", "--kinds", "linear"])
        .args(["--out", tmp.path().join("s2").to_str().unwrap()]));
    assert_eq!(code(&out), 0, "stderr: {}", stderr_of(&out));
}

#[test]
fn unknown_config_keys_fail_before_any_work() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(lpci()
        .args(["--set", "banana=1"])
        .args(["schedules", "--kinds", "linear"])
        .args(["--out", tmp.path().join("s").to_str().unwrap()]));
    assert_eq!(code(&out), 2);
    assert!(!tmp.path().join("s").exists(), "failed run must not leave artifacts");
}
