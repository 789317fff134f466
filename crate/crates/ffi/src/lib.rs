//! C ABI over the core pipeline: schedules, point clouds, the equirect
//! projection pair, and checkpoint-driven sampling.
//!
//! Conventions: handles are opaque pointers owned by the library and
//! released with their `_free` function; constructors return NULL on
//! failure; fallible calls return a status code. The failure message is
//! kept per thread and read back with `lpci_last_error`, which stays
//! valid until the next failing call on the same thread. Buffers are
//! caller-allocated, float32, row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use lpci::checkpoint::load_checkpoint;
use lpci::denoiser::UNet;
use lpci::diffusion::{sample, DiffusionConfig};
use lpci::pointcloud::{self, Point, PointCloud};
use lpci::projection::{
    backproject_equirect, project_equirect, ImageKind, ProjectionMeta, RangeImage,
};
use lpci::schedule::{make_schedule, Schedule, ScheduleParams};
use lpci::Error;

/// Call outcome. Mirrors the CLI exit codes, plus a code for caught
/// panics so the boundary never unwinds into C.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpciStatus {
    LpciOk = 0,
    LpciErr = 2,
    LpciErrNumerical = 3,
    LpciErrInternal = 70,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).expect("no interior NUL"));
}

fn fail(e: &Error) -> LpciStatus {
    set_error(&e.to_string());
    match e.exit_code() {
        3 => LpciStatus::LpciErrNumerical,
        _ => LpciStatus::LpciErr,
    }
}

fn fail_param(msg: &str) -> LpciStatus {
    set_error(msg);
    LpciStatus::LpciErr
}

/// Message for the most recent failure on this thread; empty string when
/// nothing failed yet. The pointer stays valid until the next failure on
/// the same thread.
#[no_mangle]
pub extern "C" fn lpci_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Runs a closure, converting panics into LpciErrInternal.
fn guarded(f: impl FnOnce() -> LpciStatus) -> LpciStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            LpciStatus::LpciErrInternal
        }
    }
}

fn guarded_ptr<T>(f: impl FnOnce() -> *mut T) -> *mut T {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(p) => p,
        Err(_) => {
            set_error("internal panic");
            std::ptr::null_mut()
        }
    }
}

unsafe fn cstr<'a>(p: *const c_char) -> Option<&'a str> {
    if p.is_null() {
        return None;
    }
    CStr::from_ptr(p).to_str().ok()
}

// ---------------------------------------------------------------- schedule

/// Materialized noise schedule.
pub struct LpciSchedule(Schedule);

/// Build a schedule. `kind` is one of: constant, linear, quadratic,
/// cosine2, sigmoid, hyperbolic, time-dependent, ramp. Families that
/// ignore the beta endpoints still validate them; pass the defaults
/// 1e-4 and 0.02 when unsure. Returns NULL on error.
#[no_mangle]
pub unsafe extern "C" fn lpci_schedule_new(
    kind: *const c_char,
    steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> *mut LpciSchedule {
    guarded_ptr(|| {
        let Some(kind) = cstr(kind) else {
            fail_param("kind must be a valid UTF-8 string");
            return std::ptr::null_mut();
        };
        let parsed = match kind.parse() {
            Ok(k) => k,
            Err(e) => {
                fail(&e);
                return std::ptr::null_mut();
            }
        };
        let params = ScheduleParams { steps, beta_start, beta_end, ..ScheduleParams::default() };
        match make_schedule(parsed, &params) {
            Ok(s) => Box::into_raw(Box::new(LpciSchedule(s))),
            Err(e) => {
                fail(&e);
                std::ptr::null_mut()
            }
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn lpci_schedule_free(s: *mut LpciSchedule) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Number of steps, or 0 for a NULL handle.
#[no_mangle]
pub unsafe extern "C" fn lpci_schedule_steps(s: *const LpciSchedule) -> usize {
    if s.is_null() {
        return 0;
    }
    (*s).0.steps()
}

/// Copy the per-step tables into caller buffers of length `steps`.
/// Any output pointer may be NULL to skip that table.
#[no_mangle]
pub unsafe extern "C" fn lpci_schedule_tables(
    s: *const LpciSchedule,
    betas: *mut f64,
    alphas: *mut f64,
    alpha_bars: *mut f64,
) -> LpciStatus {
    guarded(|| {
        if s.is_null() {
            return fail_param("schedule handle is NULL");
        }
        let sched = &(*s).0;
        let n = sched.steps();
        if !betas.is_null() {
            std::ptr::copy_nonoverlapping(sched.betas().as_ptr(), betas, n);
        }
        if !alphas.is_null() {
            std::ptr::copy_nonoverlapping(sched.alphas().as_ptr(), alphas, n);
        }
        if !alpha_bars.is_null() {
            std::ptr::copy_nonoverlapping(sched.alpha_bars().as_ptr(), alpha_bars, n);
        }
        LpciStatus::LpciOk
    })
}

// ------------------------------------------------------------- point cloud

/// Point cloud handle; points are (x, y, z, intensity).
pub struct LpciCloud(PointCloud);

/// Wrap `n` packed (x, y, z, intensity) float32 records. Non-finite
/// coordinates are rejected. Returns NULL on error.
#[no_mangle]
pub unsafe extern "C" fn lpci_cloud_create(xyzi: *const f32, n: usize) -> *mut LpciCloud {
    guarded_ptr(|| {
        if n == 0 {
            return Box::into_raw(Box::new(LpciCloud(PointCloud::new(Vec::new()))));
        }
        if xyzi.is_null() {
            fail_param("xyzi must not be NULL");
            return std::ptr::null_mut();
        }
        let flat = std::slice::from_raw_parts(xyzi, n * 4);
        let mut points = Vec::with_capacity(n);
        for rec in flat.chunks_exact(4) {
            let p = Point::new(rec[0] as f64, rec[1] as f64, rec[2] as f64, rec[3] as f64);
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                fail_param("points must have finite coordinates");
                return std::ptr::null_mut();
            }
            points.push(p);
        }
        Box::into_raw(Box::new(LpciCloud(PointCloud::new(points))))
    })
}

/// Load a scan from disk: `.bin` packed records or `.lpci` N×4 tensor.
#[no_mangle]
pub unsafe extern "C" fn lpci_cloud_load(path: *const c_char) -> *mut LpciCloud {
    guarded_ptr(|| {
        let Some(path) = cstr(path) else {
            fail_param("path must be a valid UTF-8 string");
            return std::ptr::null_mut();
        };
        match pointcloud::load_scan(Path::new(path)) {
            Ok(c) => Box::into_raw(Box::new(LpciCloud(c))),
            Err(e) => {
                fail(&e);
                std::ptr::null_mut()
            }
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn lpci_cloud_free(c: *mut LpciCloud) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}

/// Point count, or 0 for a NULL handle.
#[no_mangle]
pub unsafe extern "C" fn lpci_cloud_len(c: *const LpciCloud) -> usize {
    if c.is_null() {
        return 0;
    }
    (*c).0.len()
}

/// Copy the points into a caller buffer of `4 * len` float32 values.
#[no_mangle]
pub unsafe extern "C" fn lpci_cloud_points(c: *const LpciCloud, out: *mut f32) -> LpciStatus {
    guarded(|| {
        if c.is_null() {
            return fail_param("cloud handle is NULL");
        }
        if out.is_null() {
            return fail_param("out must not be NULL");
        }
        let cloud = &(*c).0;
        let dst = std::slice::from_raw_parts_mut(out, cloud.len() * 4);
        for (slot, p) in dst.chunks_exact_mut(4).zip(cloud.iter()) {
            slot[0] = p.x as f32;
            slot[1] = p.y as f32;
            slot[2] = p.z as f32;
            slot[3] = p.intensity as f32;
        }
        LpciStatus::LpciOk
    })
}

// -------------------------------------------------------------- projection

/// Angular/range geometry of the equirect grid, plus the bird's-eye
/// footprint. Field meanings match the library's projection config.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct LpciProjectionMeta {
    pub d_max: f64,
    pub theta_min: f64,
    pub theta_max: f64,
    pub bev_extent: f64,
    pub height: usize,
    pub width: usize,
}

impl LpciProjectionMeta {
    fn to_meta(self) -> ProjectionMeta {
        ProjectionMeta {
            d_max: self.d_max,
            theta_min: self.theta_min,
            theta_max: self.theta_max,
            bev_extent: self.bev_extent,
            height: self.height,
            width: self.width,
        }
    }
}

/// The default 64×1024 sensor geometry.
#[no_mangle]
pub extern "C" fn lpci_projection_default() -> LpciProjectionMeta {
    let m = ProjectionMeta::equirect_default();
    LpciProjectionMeta {
        d_max: m.d_max,
        theta_min: m.theta_min,
        theta_max: m.theta_max,
        bev_extent: m.bev_extent,
        height: m.height,
        width: m.width,
    }
}

/// Rasterize a cloud onto the equirect grid; writes height×width pixels
/// (range / d_max, 0 = no return) into the caller buffer.
#[no_mangle]
pub unsafe extern "C" fn lpci_project_equirect(
    cloud: *const LpciCloud,
    meta: *const LpciProjectionMeta,
    out_pixels: *mut f32,
) -> LpciStatus {
    guarded(|| {
        if cloud.is_null() || meta.is_null() || out_pixels.is_null() {
            return fail_param("cloud, meta and out_pixels must not be NULL");
        }
        let m = (*meta).to_meta();
        match project_equirect(&(*cloud).0, &m) {
            Ok(img) => {
                let flat = img.data.as_slice().expect("projection output is contiguous");
                std::ptr::copy_nonoverlapping(flat.as_ptr(), out_pixels, flat.len());
                LpciStatus::LpciOk
            }
            Err(e) => fail(&e),
        }
    })
}

/// Lift height×width equirect pixels back to a point cloud (one point per
/// nonzero pixel, on the pixel-center ray). Returns NULL on error.
#[no_mangle]
pub unsafe extern "C" fn lpci_backproject_equirect(
    pixels: *const f32,
    meta: *const LpciProjectionMeta,
) -> *mut LpciCloud {
    guarded_ptr(|| {
        if pixels.is_null() || meta.is_null() {
            fail_param("pixels and meta must not be NULL");
            return std::ptr::null_mut();
        }
        let m = (*meta).to_meta();
        let flat = std::slice::from_raw_parts(pixels, m.height * m.width);
        let data = match ndarray::Array2::from_shape_vec((m.height, m.width), flat.to_vec()) {
            Ok(d) => d,
            Err(_) => {
                fail_param("pixel buffer does not match height*width");
                return std::ptr::null_mut();
            }
        };
        let img = match RangeImage::new(data, ImageKind::Equirect, m) {
            Ok(i) => i,
            Err(e) => {
                fail(&e);
                return std::ptr::null_mut();
            }
        };
        match backproject_equirect(&img) {
            Ok(c) => Box::into_raw(Box::new(LpciCloud(c))),
            Err(e) => {
                fail(&e);
                std::ptr::null_mut()
            }
        }
    })
}

// ----------------------------------------------------------------- sampler

/// A trained denoiser plus the schedule and embedding it was trained
/// with, ready to generate images.
pub struct LpciSampler {
    model: UNet<f32>,
    schedule: Schedule,
    embedding: lpci::embedding::EmbeddingSpec,
}

/// Load a training checkpoint. Returns NULL on error.
#[no_mangle]
pub unsafe extern "C" fn lpci_sampler_load(path: *const c_char) -> *mut LpciSampler {
    guarded_ptr(|| {
        let Some(path) = cstr(path) else {
            fail_param("path must be a valid UTF-8 string");
            return std::ptr::null_mut();
        };
        match load_checkpoint(Path::new(path)) {
            Ok((model, _opt, meta)) => {
                let schedule =
                    match make_schedule(meta.schedule_kind, &meta.schedule_params) {
                        Ok(s) => s,
                        Err(e) => {
                            fail(&e);
                            return std::ptr::null_mut();
                        }
                    };
                Box::into_raw(Box::new(LpciSampler {
                    model,
                    schedule,
                    embedding: meta.embedding,
                }))
            }
            Err(e) => {
                fail(&e);
                std::ptr::null_mut()
            }
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn lpci_sampler_free(s: *mut LpciSampler) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Generate one height×width image in [0,1] into the caller buffer.
/// `steps` = 0 walks the full schedule; smaller values run the evenly
/// strided reduction. The same (seed, steps, shape) triple always
/// produces the same image.
#[no_mangle]
pub unsafe extern "C" fn lpci_sampler_generate(
    s: *mut LpciSampler,
    seed: u64,
    steps: usize,
    height: usize,
    width: usize,
    out_pixels: *mut f32,
) -> LpciStatus {
    guarded(|| {
        if s.is_null() || out_pixels.is_null() {
            return fail_param("sampler and out_pixels must not be NULL");
        }
        let sampler = &mut *s;
        let t_sample = if steps == 0 { sampler.schedule.steps() } else { steps };
        let cfg = match DiffusionConfig::new(
            sampler.schedule.clone(),
            t_sample,
            sampler.embedding,
            seed,
        ) {
            Ok(c) => c,
            Err(e) => return fail(&e),
        };
        match sample(&mut sampler.model, &cfg, (1, 1, height, width)) {
            Ok(batch) => {
                let flat = batch.as_slice().expect("sample output is contiguous");
                std::ptr::copy_nonoverlapping(flat.as_ptr(), out_pixels, height * width);
                LpciStatus::LpciOk
            }
            Err(e) => fail(&e),
        }
    })
}
