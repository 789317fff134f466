//! Model persistence.
//!
//! A checkpoint is one lpci tensor file: the payload concatenates every
//! parameter tensor in visit order, followed by the optimizer's first and
//! second moments in the same order; the attributes carry the configs
//! needed to rebuild the model and the training provenance (epoch,
//! validation loss, schedule, embedding). Loading reconstructs an
//! identical model — dropout RNG state aside, which is reseeded — and an
//! optimizer that resumes where it stopped.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use crate::denoiser::optim::{AdamW, OptimizerConfig};
use crate::denoiser::{build_reference_unet, Denoiser, DenoiserConfig, UNet};
use crate::embedding::EmbeddingSpec;
use crate::schedule::{ScheduleKind, ScheduleParams};
use crate::tensorfile::Tensor;
use crate::{Error, Result};

/// Training provenance stored alongside the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub schedule_kind: ScheduleKind,
    pub schedule_params: ScheduleParams,
    pub embedding: EmbeddingSpec,
    pub epoch: usize,
    /// NaN when the run had no validation set.
    pub val_loss: f64,
}

fn attr_as<T: DeserializeOwned>(t: &Tensor, key: &str) -> Result<T> {
    let v = t
        .attr(key)
        .ok_or_else(|| Error::Format(format!("checkpoint missing `{key}`")))?;
    serde_json::from_value(v.clone())
        .map_err(|e| Error::Format(format!("checkpoint `{key}`: {e}")))
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &mut UNet<f32>,
    opt: &AdamW<f32>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut layout = Vec::new();
    let mut data = Vec::new();
    model.for_each_param(&mut |name, p| {
        layout.push(json!({ "name": name, "shape": p.v.shape() }));
        data.extend(p.v.iter().copied());
    });
    let n_params = data.len();
    for m in &opt.m {
        data.extend(m.iter().copied());
    }
    for v in &opt.v {
        data.extend(v.iter().copied());
    }
    if !opt.m.is_empty() && data.len() != 3 * n_params {
        return Err(Error::Shape(format!(
            "optimizer state holds {} values for {n_params} parameters",
            data.len() - n_params
        )));
    }

    let total = data.len();
    let mut t = Tensor::new(vec![total], data)?
        .with_attr("kind", json!("checkpoint"))
        .with_attr("layout", Value::Array(layout))
        .with_attr("denoiser", json!(model.config()))
        .with_attr("init_seed", json!(model.init_seed()))
        .with_attr("optimizer", json!(opt.cfg))
        .with_attr("optimizer_steps", json!(opt.step))
        .with_attr("has_moments", json!(!opt.m.is_empty()))
        .with_attr(
            "schedule",
            json!({ "kind": meta.schedule_kind, "params": meta.schedule_params }),
        )
        .with_attr("embedding", json!(meta.embedding))
        .with_attr("epoch", json!(meta.epoch));
    if meta.val_loss.is_finite() {
        t = t.with_attr("val_loss", json!(meta.val_loss));
    }
    t.write(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(UNet<f32>, AdamW<f32>, CheckpointMeta)> {
    let t = Tensor::read(path)?;
    if t.str_attr("kind")? != "checkpoint" {
        return Err(Error::KindMismatch {
            expected: "checkpoint",
            got: t.str_attr("kind")?.to_string(),
        });
    }
    let dcfg: DenoiserConfig = attr_as(&t, "denoiser")?;
    let init_seed: u64 = attr_as(&t, "init_seed")?;
    let ocfg: OptimizerConfig = attr_as(&t, "optimizer")?;
    let steps: u64 = attr_as(&t, "optimizer_steps")?;
    let has_moments: bool = attr_as(&t, "has_moments")?;
    let layout: Vec<Value> = attr_as(&t, "layout")?;

    let schedule_obj = t
        .attr("schedule")
        .ok_or_else(|| Error::Format("checkpoint missing `schedule`".into()))?;
    let schedule_kind: ScheduleKind =
        serde_json::from_value(schedule_obj["kind"].clone())
            .map_err(|e| Error::Format(format!("checkpoint schedule kind: {e}")))?;
    let schedule_params: ScheduleParams =
        serde_json::from_value(schedule_obj["params"].clone())
            .map_err(|e| Error::Format(format!("checkpoint schedule params: {e}")))?;
    let meta = CheckpointMeta {
        schedule_kind,
        schedule_params,
        embedding: attr_as(&t, "embedding")?,
        epoch: attr_as(&t, "epoch")?,
        val_loss: t.f64_attr("val_loss").unwrap_or(f64::NAN),
    };

    let mut model = build_reference_unet::<f32>(&dcfg, init_seed)?;

    // walk the rebuilt model against the stored layout and payload
    let mut offset = 0usize;
    let mut cursor = 0usize;
    let mut mismatch: Option<String> = None;
    let mut shapes: Vec<Vec<usize>> = Vec::new();
    model.for_each_param(&mut |name, p| {
        if mismatch.is_some() {
            return;
        }
        let Some(entry) = layout.get(cursor) else {
            mismatch = Some(format!("no layout entry for parameter {name}"));
            return;
        };
        let ename = entry["name"].as_str().unwrap_or_default();
        let eshape: Vec<usize> = entry["shape"]
            .as_array()
            .map(|a| a.iter().filter_map(|v| v.as_u64()).map(|v| v as usize).collect())
            .unwrap_or_default();
        if ename != name || eshape != p.v.shape() {
            mismatch = Some(format!(
                "layout entry {cursor} is {ename} {eshape:?}, model expects {name} {:?}",
                p.v.shape()
            ));
            return;
        }
        let len = p.v.len();
        if offset + len > t.data.len() {
            mismatch = Some("payload shorter than the layout".into());
            return;
        }
        for (slot, &v) in p.v.iter_mut().zip(&t.data[offset..offset + len]) {
            *slot = v;
        }
        shapes.push(p.v.shape().to_vec());
        offset += len;
        cursor += 1;
    });
    if let Some(why) = mismatch {
        return Err(Error::Format(format!("checkpoint does not fit its model: {why}")));
    }
    if cursor != layout.len() {
        return Err(Error::Format(format!(
            "layout lists {} tensors, model has {cursor}",
            layout.len()
        )));
    }

    let mut opt = AdamW::new(ocfg)?;
    opt.step = steps;
    if has_moments {
        let n_params = offset;
        if t.data.len() != 3 * n_params {
            return Err(Error::Format(format!(
                "expected {} payload values (parameters plus two moment sets), found {}",
                3 * n_params,
                t.data.len()
            )));
        }
        for source in 0..2 {
            let mut pos = n_params * (1 + source);
            for shape in &shapes {
                let len: usize = shape.iter().product();
                let arr = ndarray::ArrayD::from_shape_vec(
                    shape.clone(),
                    t.data[pos..pos + len].to_vec(),
                )
                .expect("shape/len agree by construction");
                if source == 0 {
                    opt.m.push(arr);
                } else {
                    opt.v.push(arr);
                }
                pos += len;
            }
        }
    } else if t.data.len() != offset {
        return Err(Error::Format(format!(
            "expected {offset} payload values, found {}",
            t.data.len()
        )));
    }

    Ok((model, opt, meta))
}
