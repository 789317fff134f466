//! Implementations behind the CLI subcommands. Each function returns the
//! library's Result; the binary maps errors to exit codes (2 for
//! usage/config/data problems, 3 for numerical failures) and prints them.
//!
//! Every artifact-producing command drops a `run_config.json` (or a
//! sibling `.run.json`) with the fully resolved configuration next to its
//! outputs, so any artifact can be traced back to the exact settings that
//! made it.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::denoiser::build_reference_unet;
use crate::denoiser::optim::AdamW;
use crate::diffusion::{sample, DiffusionConfig, EpochStats};
use crate::metrics::{evaluate, MetricReport, PatchStatsExtractor};
use crate::pointcloud::{knn_density, load_scan, save_scan_bin, smooth_depths, cloud_to_tensor};
use crate::projection::{
    backproject_equirect, project_bev, project_equirect, ImageKind, RangeImage,
};
use crate::schedule::{make_schedule, ScheduleKind};
use crate::tensorfile::Tensor;
use crate::{Error, Result};

fn write_run_config(dir_or_file: &Path, cfg: &RunConfig, as_sibling: bool) -> Result<()> {
    let path = if as_sibling {
        dir_or_file.with_extension("run.json")
    } else {
        dir_or_file.join("run_config.json")
    };
    std::fs::write(&path, cfg.to_pretty_json()).map_err(|e| Error::io(&path, e))
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// 16-bit grayscale PNG; the extra depth keeps range quantization below
/// the d_max/2¹⁶ reconstruction bound.
fn write_png(path: &Path, img: &RangeImage) -> Result<()> {
    let (h, w) = img.data.dim();
    let buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(
        w as u32,
        h as u32,
        |x, y| {
            let v = img.data[[y as usize, x as usize]].clamp(0.0, 1.0);
            image::Luma([(v as f64 * 65535.0).round() as u16])
        },
    );
    buf.save(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Equirect,
    Bev,
}

impl View {
    fn name(self) -> &'static str {
        match self {
            View::Equirect => "equirect",
            View::Bev => "bev",
        }
    }
}

/// Parse `--views equirect,bev`; order is kept, duplicates collapse.
pub fn parse_views(s: &str) -> Result<Vec<View>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let v = match part.trim() {
            "equirect" => View::Equirect,
            "bev" => View::Bev,
            other => return Err(Error::Param(format!("unknown view '{other}'"))),
        };
        if !out.contains(&v) {
            out.push(v);
        }
    }
    if out.is_empty() {
        return Err(Error::Param("no views requested".into()));
    }
    Ok(out)
}

/// Project scans onto the requested views. Files fail independently: every
/// failure is logged to stderr and the command errors at the end if any
/// scan failed.
pub fn cmd_project(
    cfg: &RunConfig,
    inputs: &[PathBuf],
    out: &Path,
    views: &[View],
    png: bool,
) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::EmptyInput("no input scans"));
    }
    ensure_dir(out)?;
    write_run_config(out, cfg, false)?;

    let results: Vec<(PathBuf, Result<()>)> = inputs
        .par_iter()
        .map(|input| {
            let r = project_one(cfg, input, out, views, png);
            (input.clone(), r)
        })
        .collect();
    let mut failed = 0usize;
    for (path, r) in &results {
        match r {
            Ok(()) => {}
            Err(e) => {
                failed += 1;
                eprintln!("error: {}: {e}", path.display());
            }
        }
    }
    if failed > 0 {
        return Err(Error::Format(format!("{failed} of {} scans failed", inputs.len())));
    }
    Ok(())
}

fn project_one(
    cfg: &RunConfig,
    input: &Path,
    out: &Path,
    views: &[View],
    png: bool,
) -> Result<()> {
    let mut cloud = load_scan(input)?;
    if let Some(sm) = &cfg.smoothing {
        let density = knn_density(&cloud, sm.k)?;
        cloud = smooth_depths(&cloud, &density, sm)?;
    }
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Format(format!("unusable file name {}", input.display())))?;
    for &view in views {
        let img = match view {
            View::Equirect => project_equirect(&cloud, &cfg.projection)?,
            View::Bev => project_bev(&cloud, &cfg.projection)?,
        };
        // the view tag is part of the stem, so the extension is appended
        // rather than substituted
        img.to_tensor().write(out.join(format!("{stem}.{}.lpci", view.name())))?;
        if png {
            write_png(&out.join(format!("{stem}.{}.png", view.name())), &img)?;
        }
    }
    Ok(())
}

/// Parse `--kinds linear,ramp` or `--kinds all`.
pub fn parse_kinds(s: &str) -> Result<Vec<ScheduleKind>> {
    if s.trim() == "all" {
        return Ok(ScheduleKind::ALL.to_vec());
    }
    let mut out = Vec::new();
    for part in s.split(',') {
        let k: ScheduleKind = part.trim().parse()?;
        if !out.contains(&k) {
            out.push(k);
        }
    }
    if out.is_empty() {
        return Err(Error::Param("no schedule kinds requested".into()));
    }
    Ok(out)
}

/// One CSV per kind: step,beta,alpha,alpha_bar,snr with 1-based steps.
pub fn cmd_schedules(cfg: &RunConfig, kinds: &[ScheduleKind], out: &Path) -> Result<()> {
    ensure_dir(out)?;
    write_run_config(out, cfg, false)?;
    for &kind in kinds {
        let sched = make_schedule(kind, &cfg.schedule.params)?;
        let snr = sched.snr();
        let mut csv = String::from("step,beta,alpha,alpha_bar,snr\n");
        for t in 1..=sched.steps() {
            csv.push_str(&format!(
                "{t},{},{},{},{}\n",
                sched.beta(t),
                sched.alpha(t),
                sched.alpha_bar(t),
                snr[t - 1]
            ));
        }
        let path = out.join(format!("{}.csv", kind.name()));
        std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
        eprintln!("schedules: wrote {} ({} steps)", path.display(), sched.steps());
    }
    Ok(())
}

/// Deterministic 80/10/10 split by sorted file name: the last ⌊n/10⌋ are
/// test, the ⌊n/10⌋ before them validation, the rest training.
pub fn split_dataset<T>(items: Vec<T>) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = items.len();
    let n_val = n / 10;
    let n_test = n / 10;
    let n_train = n - n_val - n_test;
    let mut items = items;
    let test = items.split_off(n_train + n_val);
    let val = items.split_off(n_train);
    (items, val, test)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("lpci"))
        .collect();
    paths.sort_by_key(|p| p.file_name().map(|s| s.to_os_string()));
    if paths.is_empty() {
        return Err(Error::EmptyInput("no .lpci images in the directory"));
    }
    Ok(paths)
}

fn load_images(paths: &[PathBuf]) -> Result<Vec<RangeImage>> {
    paths
        .par_iter()
        .map(|p| RangeImage::from_tensor(&Tensor::read(p)?))
        .collect()
}

fn schedule_mismatch(meta: &CheckpointMeta, cfg: &RunConfig) -> Option<String> {
    if meta.schedule_kind == cfg.schedule.kind && meta.schedule_params == cfg.schedule.params {
        return None;
    }
    Some(format!(
        "checkpoint schedule differs from the config:\n  checkpoint: {} {:?}\n  config:     {} {:?}",
        meta.schedule_kind, meta.schedule_params, cfg.schedule.kind, cfg.schedule.params
    ))
}

/// Train on a directory of range images; writes the best-validation
/// checkpoint, a per-epoch loss CSV, and the resolved config.
pub fn cmd_train(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    let paths = list_images(data)?;
    let images = load_images(&paths)?;
    let (h, w) = images[0].data.dim();
    for (img, path) in images.iter().zip(&paths) {
        if img.data.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "{} is {:?}, first image is {h}x{w}",
                path.display(),
                img.data.dim()
            )));
        }
    }
    let stride = 1usize << cfg.denoiser.depth;
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::Shape(format!(
            "{h}x{w} images are not divisible by 2^depth = {stride}"
        )));
    }

    let arrays: Vec<Array2<f32>> = images.into_iter().map(|im| im.data).collect();
    let (train, val, test) = split_dataset(arrays);
    eprintln!(
        "train: {} train / {} val / {} test images ({h}x{w})",
        train.len(),
        val.len(),
        test.len()
    );

    let schedule = cfg.schedule.build()?;
    let dcfg = DiffusionConfig::new(schedule, cfg.schedule.params.steps, cfg.embedding, cfg.seed)?;

    let (mut model, mut opt) = match resume {
        Some(ckpt_path) => {
            let (model, opt, meta) = load_checkpoint(ckpt_path)?;
            if let Some(diff) = schedule_mismatch(&meta, cfg) {
                return Err(Error::Config(diff));
            }
            eprintln!(
                "train: resumed from {} (epoch {}, {} optimizer steps)",
                ckpt_path.display(),
                meta.epoch,
                opt.step
            );
            (model, opt)
        }
        None => (
            build_reference_unet::<f32>(&cfg.denoiser, cfg.seed)?,
            AdamW::new(cfg.optimizer)?,
        ),
    };

    let report = crate::diffusion::train_loop(
        &mut model,
        &mut opt,
        &train,
        &val,
        &dcfg,
        &cfg.training,
    )?;

    let mut csv = String::from(EpochStats::CSV_HEADER);
    csv.push('\n');
    for row in &report.history {
        csv.push_str(&row.csv_row());
        csv.push('\n');
    }
    let csv_path = out.with_extension("loss.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    let (best_epoch, best_val) = match report.best_epoch {
        Some(e) => (e, report.history[e - 1].val_loss),
        None => (report.history.len(), f64::NAN),
    };
    let meta = CheckpointMeta {
        schedule_kind: cfg.schedule.kind,
        schedule_params: cfg.schedule.params,
        embedding: cfg.embedding,
        epoch: best_epoch,
        val_loss: best_val,
    };
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    save_checkpoint(out, &mut model, &opt, &meta)?;
    write_run_config(out, cfg, true)?;
    eprintln!(
        "train: {} epochs ({}), checkpoint at epoch {} (val {:.6}), wrote {}",
        report.history.len(),
        if report.stopped_early { "stopped early" } else { "ran to the limit" },
        best_epoch,
        best_val,
        out.display()
    );
    Ok(())
}

/// Generate images from a checkpoint. Image `i` runs its own reverse chain
/// seeded with seed+i, so a given (seed, count, steps) triple is
/// bit-reproducible regardless of batching or interruption.
pub fn cmd_sample(cfg: &RunConfig, ckpt_path: &Path, out: &Path, png: bool) -> Result<()> {
    if cfg.sampling.count == 0 {
        return Err(Error::Param("--count 0: nothing to generate".into()));
    }
    let (mut model, _opt, meta) = load_checkpoint(ckpt_path)?;
    if let Some(diff) = schedule_mismatch(&meta, cfg) {
        return Err(Error::Config(diff));
    }
    let schedule = cfg.schedule.build()?;
    let t_sample = cfg.sampling.steps.unwrap_or(schedule.steps());
    let (h, w) = (cfg.projection.height, cfg.projection.width);
    let stride = 1usize << model.config().depth;
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::Shape(format!(
            "projection {h}x{w} is not divisible by the model's 2^depth = {stride}"
        )));
    }
    ensure_dir(out)?;
    write_run_config(out, cfg, false)?;

    for i in 0..cfg.sampling.count {
        let dcfg = DiffusionConfig::new(
            schedule.clone(),
            t_sample,
            meta.embedding,
            cfg.seed.wrapping_add(i as u64),
        )?;
        let started = Instant::now();
        let batch = sample(&mut model, &dcfg, (1, 1, h, w))?;
        let ms = started.elapsed().as_millis();
        let data = batch.index_axis(ndarray::Axis(0), 0).index_axis(ndarray::Axis(0), 0).to_owned();
        let img = RangeImage::new(data, ImageKind::Equirect, cfg.projection)?;
        let base = out.join(format!("sample_{i:04}"));
        img.to_tensor().write(base.with_extension("lpci"))?;
        if png {
            write_png(&base.with_extension("png"), &img)?;
        }
        eprintln!("sample {i}: {ms} ms ({t_sample} steps)");
    }
    Ok(())
}

/// Reconstruct a point cloud from an equirect range image. `.bin` output
/// is packed x,y,z,intensity float32; anything else writes an N×4 tensor.
pub fn cmd_backproject(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    let img = RangeImage::from_tensor(&Tensor::read(input)?)?;
    let cloud = backproject_equirect(&img)?;
    if cloud.is_empty() {
        eprintln!("warning: {} has no returns; writing an empty cloud", input.display());
    }
    match out.extension().and_then(|e| e.to_str()) {
        Some("bin") => save_scan_bin(out, &cloud)?,
        _ => cloud_to_tensor(&cloud).write(out)?,
    }
    write_run_config(out, cfg, true)?;
    eprintln!("backproject: {} points -> {}", cloud.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    #[serde(flatten)]
    report: &'a MetricReport,
    run_config: &'a RunConfig,
}

/// Score a directory of generated images against a reference directory;
/// writes and prints the metric report.
pub fn cmd_eval(cfg: &RunConfig, generated: &Path, reference: &Path, out: &Path) -> Result<()> {
    let gen_imgs = load_images(&list_images(generated)?)?;
    let ref_imgs = load_images(&list_images(reference)?)?;
    let report = evaluate(&gen_imgs, &ref_imgs, &PatchStatsExtractor, &cfg.metrics)?;
    let doc = serde_json::to_string_pretty(&EvalOutput { report: &report, run_config: cfg })
        .expect("report serializes");
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    std::fs::write(out, &doc).map_err(|e| Error::io(out, e))?;
    println!("{doc}");
    Ok(())
}
