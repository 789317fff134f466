//! One JSON document configures a whole run. Every section mirrors a
//! module's own config type, unknown keys are rejected everywhere, and
//! dotted `--set section.key=value` overrides patch the document before
//! it is re-validated.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::denoiser::DenoiserConfig;
use crate::denoiser::optim::OptimizerConfig;
use crate::diffusion::TrainOptions;
use crate::embedding::EmbeddingSpec;
use crate::metrics::MetricConfig;
use crate::pointcloud::SmoothingConfig;
use crate::projection::ProjectionMeta;
use crate::schedule::{make_schedule, Schedule, ScheduleKind, ScheduleParams};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub params: ScheduleParams,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection { kind: ScheduleKind::Linear, params: ScheduleParams::default() }
    }
}

impl ScheduleSection {
    pub fn build(&self) -> Result<Schedule> {
        make_schedule(self.kind, &self.params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    /// Reverse-process step count; None walks the full schedule.
    pub steps: Option<usize>,
    pub count: usize,
}

impl Default for SamplingSection {
    fn default() -> Self {
        SamplingSection { steps: None, count: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub projection: ProjectionMeta,
    /// Depth smoothing for projected scans; absent means off.
    pub smoothing: Option<SmoothingConfig>,
    pub schedule: ScheduleSection,
    pub embedding: EmbeddingSpec,
    pub denoiser: DenoiserConfig,
    pub optimizer: OptimizerConfig,
    pub training: TrainOptions,
    pub sampling: SamplingSection,
    pub metrics: MetricConfig,
}

impl RunConfig {
    /// Read a config file, or start from defaults when `path` is None,
    /// then apply `--set` overrides and validate the result.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut doc: Value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::to_value(RunConfig::default()).expect("defaults serialize"),
        };
        for spec in overrides {
            apply_override(&mut doc, spec)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc)
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.projection.validate()?;
        self.embedding.validate()?;
        self.denoiser.validate()?;
        self.optimizer.validate()?;
        let schedule = self.schedule.build()?;
        if self.embedding.dim != self.denoiser.embed_dim {
            return Err(Error::Config(format!(
                "embedding.dim = {} but denoiser.embed_dim = {}; the denoiser consumes the embedding directly",
                self.embedding.dim, self.denoiser.embed_dim
            )));
        }
        if let Some(steps) = self.sampling.steps {
            if steps == 0 || steps > schedule.steps() {
                return Err(Error::Config(format!(
                    "sampling.steps = {steps} outside 1..={}",
                    schedule.steps()
                )));
            }
        }
        if self.training.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be nonzero".into()));
        }
        if self.training.epochs == 0 {
            return Err(Error::Config("training.epochs must be nonzero".into()));
        }
        if self.metrics.bins < 2 {
            return Err(Error::Config(format!(
                "metrics.bins must be at least 2, got {}",
                self.metrics.bins
            )));
        }
        if self.metrics.pool == 0 {
            return Err(Error::Config("metrics.pool must be nonzero".into()));
        }
        if let Some(b) = self.metrics.bandwidth {
            if !(b > 0.0) {
                return Err(Error::Config(format!("metrics.bandwidth must be positive, got {b}")));
            }
        }
        Ok(())
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Patch one `path.to.key=value` into the JSON document. The value parses
/// as JSON when it can (numbers, booleans, quoted strings, null) and falls
/// back to a bare string, so `--set schedule.kind=ramp` works unquoted.
/// Intermediate nulls and missing keys become objects, which is how
/// `--set smoothing.k=12` switches smoothing on from the command line.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is missing '='")))?;
    if path.is_empty() {
        return Err(Error::Config(format!("override '{spec}' has an empty path")));
    }
    let value: Value =
        serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cursor = doc;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        if seg.is_empty() {
            return Err(Error::Config(format!("override '{spec}' has an empty path segment")));
        }
        if cursor.is_null() {
            *cursor = Value::Object(serde_json::Map::new());
        }
        let obj = cursor.as_object_mut().ok_or_else(|| {
            Error::Config(format!(
                "override '{spec}': '{}' is not an object",
                segments[..i].join(".")
            ))
        })?;
        if i == segments.len() - 1 {
            obj.insert(seg.to_string(), value);
            return Ok(());
        }
        cursor = obj.entry(seg.to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last segment");
}
