//! Drives the C ABI from Rust: handle lifecycles, status codes, the
//! thread-local error channel, and value agreement with the core library.

use std::ffi::{CStr, CString};

use lpci_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(lpci_last_error()).to_string_lossy().into_owned() }
}

#[test]
fn schedule_tables_match_the_core_library() {
    let kind = CString::new("linear").unwrap();
    let s = unsafe { lpci_schedule_new(kind.as_ptr(), 100, 1e-4, 0.02) };
    assert!(!s.is_null(), "{}", last_error());
    assert_eq!(unsafe { lpci_schedule_steps(s) }, 100);

    let mut betas = vec![0.0f64; 100];
    let mut alphas = vec![0.0f64; 100];
    let mut alpha_bars = vec![0.0f64; 100];
    let st = unsafe {
        lpci_schedule_tables(s, betas.as_mut_ptr(), alphas.as_mut_ptr(), alpha_bars.as_mut_ptr())
    };
    assert_eq!(st, LpciStatus::LpciOk);

    let core = lpci::schedule::make_schedule(
        lpci::schedule::ScheduleKind::Linear,
        &lpci::schedule::ScheduleParams {
            steps: 100,
            ..lpci::schedule::ScheduleParams::default()
        },
    )
    .unwrap();
    assert_eq!(betas, core.betas());
    assert_eq!(alphas, core.alphas());
    assert_eq!(alpha_bars, core.alpha_bars());

    // skipping buffers is allowed
    let st = unsafe {
        lpci_schedule_tables(s, std::ptr::null_mut(), std::ptr::null_mut(), std::ptr::null_mut())
    };
    assert_eq!(st, LpciStatus::LpciOk);
    unsafe { lpci_schedule_free(s) };
}

#[test]
fn bad_schedule_inputs_return_null_with_a_message() {
    let kind = CString::new("banana").unwrap();
    let s = unsafe { lpci_schedule_new(kind.as_ptr(), 100, 1e-4, 0.02) };
    assert!(s.is_null());
    assert!(last_error().contains("banana"), "{}", last_error());

    let kind = CString::new("linear").unwrap();
    let s = unsafe { lpci_schedule_new(kind.as_ptr(), 100, 0.5, 0.1) };
    assert!(s.is_null(), "descending endpoints must fail");
    assert!(!last_error().is_empty());

    let s = unsafe { lpci_schedule_new(std::ptr::null(), 100, 1e-4, 0.02) };
    assert!(s.is_null());

    assert_eq!(
        unsafe { lpci_schedule_tables(std::ptr::null(), std::ptr::null_mut(), std::ptr::null_mut(), std::ptr::null_mut()) },
        LpciStatus::LpciErr
    );
    assert_eq!(unsafe { lpci_schedule_steps(std::ptr::null()) }, 0);
}

#[test]
fn cloud_roundtrip_preserves_records() {
    let pts: Vec<f32> = vec![
        1.0, 2.0, 3.0, 0.5, //
        -4.0, 0.1, 2.0, 1.0, //
        10.0, -10.0, 0.5, 0.0,
    ];
    let c = unsafe { lpci_cloud_create(pts.as_ptr(), 3) };
    assert!(!c.is_null(), "{}", last_error());
    assert_eq!(unsafe { lpci_cloud_len(c) }, 3);
    let mut out = vec![0.0f32; 12];
    assert_eq!(unsafe { lpci_cloud_points(c, out.as_mut_ptr()) }, LpciStatus::LpciOk);
    assert_eq!(out, pts);
    unsafe { lpci_cloud_free(c) };

    // empty clouds are legal, NULL data with points is not
    let empty = unsafe { lpci_cloud_create(std::ptr::null(), 0) };
    assert!(!empty.is_null());
    assert_eq!(unsafe { lpci_cloud_len(empty) }, 0);
    unsafe { lpci_cloud_free(empty) };
    assert!(unsafe { lpci_cloud_create(std::ptr::null(), 2) }.is_null());

    let nan = vec![f32::NAN, 0.0, 0.0, 0.0];
    assert!(unsafe { lpci_cloud_create(nan.as_ptr(), 1) }.is_null());
}

#[test]
fn cloud_load_reads_bin_scans_and_reports_missing_files() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("scan.bin");
    let cloud = lpci::pointcloud::PointCloud::new(vec![
        lpci::pointcloud::Point::new(1.0, 2.0, 3.0, 0.25),
        lpci::pointcloud::Point::new(-1.0, 0.5, 2.0, 0.75),
    ]);
    lpci::pointcloud::save_scan_bin(&path, &cloud).unwrap();

    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let c = unsafe { lpci_cloud_load(cpath.as_ptr()) };
    assert!(!c.is_null(), "{}", last_error());
    assert_eq!(unsafe { lpci_cloud_len(c) }, 2);
    unsafe { lpci_cloud_free(c) };

    let missing = CString::new("/nonexistent/scan.bin").unwrap();
    assert!(unsafe { lpci_cloud_load(missing.as_ptr()) }.is_null());
    assert!(last_error().contains("scan.bin"), "{}", last_error());
}

#[test]
fn projection_pair_agrees_with_the_core_functions() {
    let meta = lpci_projection_default();
    let mut small = meta;
    small.height = 16;
    small.width = 64;

    // a ring of points inside the field of view
    let mut pts = Vec::new();
    for i in 0..200 {
        let phi = i as f64 / 200.0 * std::f64::consts::TAU - std::f64::consts::PI;
        let theta = std::f64::consts::FRAC_PI_2 + 0.2;
        let d = 10.0 + (i % 7) as f64;
        pts.extend_from_slice(&[
            (d * theta.sin() * phi.cos()) as f32,
            (d * theta.sin() * phi.sin()) as f32,
            (d * theta.cos()) as f32,
            1.0,
        ]);
    }
    let c = unsafe { lpci_cloud_create(pts.as_ptr(), 200) };
    assert!(!c.is_null());

    let mut pixels = vec![0.0f32; 16 * 64];
    let st = unsafe { lpci_project_equirect(c, &small, pixels.as_mut_ptr()) };
    assert_eq!(st, LpciStatus::LpciOk, "{}", last_error());

    // same answer as calling the library directly
    let core_meta = lpci::projection::ProjectionMeta {
        height: 16,
        width: 64,
        ..lpci::projection::ProjectionMeta::equirect_default()
    };
    let core_cloud = lpci::pointcloud::PointCloud::new(
        pts.chunks_exact(4)
            .map(|r| lpci::pointcloud::Point::new(r[0] as f64, r[1] as f64, r[2] as f64, r[3] as f64))
            .collect(),
    );
    let core_img = lpci::projection::project_equirect(&core_cloud, &core_meta).unwrap();
    assert_eq!(pixels, core_img.data.as_slice().unwrap());

    // back-projection returns one point per nonzero pixel
    let back = unsafe { lpci_backproject_equirect(pixels.as_ptr(), &small) };
    assert!(!back.is_null(), "{}", last_error());
    let nonzero = pixels.iter().filter(|v| **v != 0.0).count();
    assert_eq!(unsafe { lpci_cloud_len(back) }, nonzero);

    unsafe {
        lpci_cloud_free(back);
        lpci_cloud_free(c);
    }

    // an empty cloud cannot be projected
    let empty = unsafe { lpci_cloud_create(std::ptr::null(), 0) };
    let st = unsafe { lpci_project_equirect(empty, &small, pixels.as_mut_ptr()) };
    assert_eq!(st, LpciStatus::LpciErr);
    unsafe { lpci_cloud_free(empty) };
}

#[test]
fn sampler_generates_deterministic_images_from_a_real_checkpoint() {
    use lpci::denoiser::{build_reference_unet, DenoiserConfig};
    use lpci::denoiser::optim::{AdamW, OptimizerConfig};
    use lpci::embedding::EmbeddingSpec;
    use lpci::schedule::{ScheduleKind, ScheduleParams};

    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("model.lpci");

    let dcfg = DenoiserConfig {
        base_channels: 4,
        depth: 1,
        embed_dim: 8,
        dropout_rate: 0.0,
        ..DenoiserConfig::default()
    };
    let mut model = build_reference_unet::<f32>(&dcfg, 11).unwrap();
    let opt = AdamW::<f32>::new(OptimizerConfig::default()).unwrap();
    let params = ScheduleParams { steps: 12, ..ScheduleParams::default() };
    let embedding = EmbeddingSpec { dim: 8, harmonics: 2, ..EmbeddingSpec::default() };
    let meta = lpci::checkpoint::CheckpointMeta {
        schedule_kind: ScheduleKind::Linear,
        schedule_params: params,
        embedding,
        epoch: 0,
        val_loss: f64::NAN,
    };
    lpci::checkpoint::save_checkpoint(&ckpt, &mut model, &opt, &meta).unwrap();

    let cpath = CString::new(ckpt.to_str().unwrap()).unwrap();
    let sampler = unsafe { lpci_sampler_load(cpath.as_ptr()) };
    assert!(!sampler.is_null(), "{}", last_error());

    let (h, w) = (8usize, 16usize);
    let mut img1 = vec![0.0f32; h * w];
    let mut img2 = vec![0.0f32; h * w];
    let st = unsafe { lpci_sampler_generate(sampler, 9, 0, h, w, img1.as_mut_ptr()) };
    assert_eq!(st, LpciStatus::LpciOk, "{}", last_error());
    let st = unsafe { lpci_sampler_generate(sampler, 9, 0, h, w, img2.as_mut_ptr()) };
    assert_eq!(st, LpciStatus::LpciOk);
    assert_eq!(img1, img2, "same seed, same image");
    assert!(img1.iter().all(|v| (0.0..=1.0).contains(v)));

    let st = unsafe { lpci_sampler_generate(sampler, 10, 0, h, w, img2.as_mut_ptr()) };
    assert_eq!(st, LpciStatus::LpciOk);
    assert_ne!(img1, img2, "different seeds diverge");

    // reduced-step sampling and the invalid-step error path
    let st = unsafe { lpci_sampler_generate(sampler, 9, 6, h, w, img2.as_mut_ptr()) };
    assert_eq!(st, LpciStatus::LpciOk, "{}", last_error());
    let st = unsafe { lpci_sampler_generate(sampler, 9, 13, h, w, img2.as_mut_ptr()) };
    assert_eq!(st, LpciStatus::LpciErr, "more steps than the schedule has");

    // shape not divisible by the downsampling stride
    let st = unsafe { lpci_sampler_generate(sampler, 9, 0, 7, 16, img2.as_mut_ptr()) };
    assert_eq!(st, LpciStatus::LpciErr);

    unsafe { lpci_sampler_free(sampler) };

    let missing = CString::new("/nonexistent/model.lpci").unwrap();
    assert!(unsafe { lpci_sampler_load(missing.as_ptr()) }.is_null());
}

#[test]
fn error_messages_are_per_thread() {
    let kind = CString::new("banana").unwrap();
    let s = unsafe { lpci_schedule_new(kind.as_ptr(), 10, 1e-4, 0.02) };
    assert!(s.is_null());
    assert!(last_error().contains("banana"));

    std::thread::spawn(|| {
        assert!(
            last_error().is_empty(),
            "a fresh thread must start with no error, got '{}'",
            last_error()
        );
        let kind = CString::new("kiwi").unwrap();
        let s = unsafe { lpci_schedule_new(kind.as_ptr(), 10, 1e-4, 0.02) };
        assert!(s.is_null());
        assert!(last_error().contains("kiwi"));
    })
    .join()
    .unwrap();

    // the spawned thread's failure did not clobber this thread's message
    assert!(last_error().contains("banana"), "{}", last_error());
}

#[test]
fn generated_header_declares_the_public_surface() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/lpci.h"))
        .expect("build.rs regenerates the header");
    for symbol in [
        "lpci_last_error",
        "lpci_schedule_new",
        "lpci_schedule_tables",
        "lpci_cloud_create",
        "lpci_cloud_load",
        "lpci_cloud_points",
        "lpci_project_equirect",
        "lpci_backproject_equirect",
        "lpci_sampler_load",
        "lpci_sampler_generate",
        "LpciProjectionMeta",
        "LPCI_ERR_NUMERICAL",
    ] {
        assert!(header.contains(symbol), "header is missing {symbol}");
    }
}
