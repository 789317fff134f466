//! Forward-process noise schedules.
//!
//! A schedule fixes, per step t in [1, T], the variance β_t of the noise
//! injected by the forward corruption, with α_t = 1 − β_t and
//! ᾱ_t = ∏_{i=1..t} α_i. ᾱ is always materialized as a running product so
//! downstream code sees exactly the values the recurrence yields; no closed
//! forms are substituted even where one exists.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Constant,
    Linear,
    Quadratic,
    Cosine2,
    Sigmoid,
    Hyperbolic,
    TimeDependent,
    Ramp,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 8] = [
        ScheduleKind::Constant,
        ScheduleKind::Linear,
        ScheduleKind::Quadratic,
        ScheduleKind::Cosine2,
        ScheduleKind::Sigmoid,
        ScheduleKind::Hyperbolic,
        ScheduleKind::TimeDependent,
        ScheduleKind::Ramp,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ScheduleKind::Constant => "constant",
            ScheduleKind::Linear => "linear",
            ScheduleKind::Quadratic => "quadratic",
            ScheduleKind::Cosine2 => "cosine2",
            ScheduleKind::Sigmoid => "sigmoid",
            ScheduleKind::Hyperbolic => "hyperbolic",
            ScheduleKind::TimeDependent => "time-dependent",
            ScheduleKind::Ramp => "ramp",
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScheduleKind::ALL
            .iter()
            .find(|k| k.name() == s)
            .copied()
            .ok_or_else(|| Error::UnknownSchedule(s.to_string()))
    }
}

/// Parameters shared by every schedule family. The `cosine_offset`,
/// `sigmoid_lo`/`sigmoid_hi` and `ramp_segment` fields only affect the
/// families that read them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub cosine_offset: f64,
    pub sigmoid_lo: f64,
    pub sigmoid_hi: f64,
    pub ramp_segment: usize,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        ScheduleParams {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            cosine_offset: 0.008,
            sigmoid_lo: -6.0,
            sigmoid_hi: 6.0,
            ramp_segment: 10,
        }
    }
}

/// A fully materialized schedule. Tables are indexed 0-based; the step
/// accessors take the 1-based t used throughout the diffusion code.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    kind: ScheduleKind,
    params: ScheduleParams,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Schedule {
    /// Build a schedule directly from a β table. Meant for tests and
    /// externally computed tables; `make_schedule` is the normal entry point.
    pub fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::EmptyInput("beta table"));
        }
        for (i, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Param(format!("beta[{i}] = {b} outside (0, 1)")));
            }
        }
        let (alphas, alpha_bars) = accumulate(&betas);
        let params = ScheduleParams { steps: betas.len(), ..ScheduleParams::default() };
        Ok(Schedule { kind, params, betas, alphas, alpha_bars })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    /// Number of steps T.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// β_t for 1-based t.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// Signal-to-noise ratio ᾱ_t / (1 − ᾱ_t) per step.
    pub fn snr(&self) -> Vec<f64> {
        self.alpha_bars.iter().map(|&a| a / (1.0 - a)).collect()
    }
}

/// Index of the first entry of `snr` strictly below `threshold`, or
/// `snr.len()` when the curve never crosses it.
pub fn snr_crossing_step(snr: &[f64], threshold: f64) -> usize {
    snr.iter().position(|&s| s < threshold).unwrap_or(snr.len())
}

pub fn make_schedule(kind: ScheduleKind, params: &ScheduleParams) -> Result<Schedule> {
    let p = *params;
    if p.steps < 2 {
        return Err(Error::Param(format!("schedule needs at least 2 steps, got {}", p.steps)));
    }
    if !(p.beta_start > 0.0 && p.beta_start <= p.beta_end && p.beta_end < 1.0) {
        return Err(Error::Param(format!(
            "beta endpoints must satisfy 0 < start <= end < 1, got [{}, {}]",
            p.beta_start, p.beta_end
        )));
    }
    let betas = match kind {
        ScheduleKind::Constant => vec![p.beta_end; p.steps],
        ScheduleKind::Linear => linear_betas(p.steps, p.beta_start, p.beta_end),
        ScheduleKind::Quadratic => quadratic_betas(p.steps, p.beta_start, p.beta_end),
        ScheduleKind::Cosine2 => cosine2_betas(p.steps, p.cosine_offset)?,
        ScheduleKind::Sigmoid => sigmoid_betas(p.steps, p.beta_start, p.beta_end, p.sigmoid_lo, p.sigmoid_hi)?,
        ScheduleKind::Hyperbolic => hyperbolic_betas(p.steps),
        ScheduleKind::TimeDependent => time_dependent_betas(p.steps, p.beta_start, p.beta_end)?,
        ScheduleKind::Ramp => ramp_betas(p.steps, p.beta_start, p.beta_end, p.ramp_segment)?,
    };
    debug_assert!(betas.len() == p.steps);
    debug_assert!(betas.iter().all(|&b| b > 0.0 && b < 1.0));
    let (alphas, alpha_bars) = accumulate(&betas);
    Ok(Schedule { kind, params: p, betas, alphas, alpha_bars })
}

fn accumulate(betas: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(alphas.len());
    let mut prod = 1.0;
    for &a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    (alphas, alpha_bars)
}

/// Straight line from `beta_start` to `beta_end` inclusive; the endpoints
/// are written literally so they survive float rounding.
fn linear_betas(steps: usize, beta_start: f64, beta_end: f64) -> Vec<f64> {
    let mut betas = Vec::with_capacity(steps);
    betas.push(beta_start);
    let scale = (beta_end - beta_start) / (steps - 1) as f64;
    for t in 1..steps - 1 {
        betas.push(beta_start + scale * t as f64);
    }
    betas.push(beta_end);
    betas
}

/// Interpolates √β linearly, then squares.
fn quadratic_betas(steps: usize, beta_start: f64, beta_end: f64) -> Vec<f64> {
    let (rs, re) = (beta_start.sqrt(), beta_end.sqrt());
    let scale = (re - rs) / (steps - 1) as f64;
    let mut betas = Vec::with_capacity(steps);
    betas.push(beta_start);
    for t in 1..steps - 1 {
        let r = rs + scale * t as f64;
        betas.push(r * r);
    }
    betas.push(beta_end);
    betas
}

/// β back-solved from a squared-cosine ᾱ target:
/// ᾱ(u) ∝ cos²((u + s) / (1 + s) · π/2) with u = t / T.
fn cosine2_betas(steps: usize, offset: f64) -> Result<Vec<f64>> {
    if !(offset > 0.0) {
        return Err(Error::Param(format!("cosine offset must be positive, got {offset}")));
    }
    let f = |u: f64| {
        let c = ((u + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2).cos();
        c * c
    };
    let t_max = steps as f64;
    let mut betas = Vec::with_capacity(steps);
    for i in 0..steps {
        let ratio = f((i + 1) as f64 / t_max) / f(i as f64 / t_max);
        // floor guards against the ratio rounding to exactly 1 for huge T
        betas.push((1.0 - ratio).clamp(1e-12, 0.999));
    }
    Ok(betas)
}

/// β runs along a logistic curve evaluated over [lo, hi].
fn sigmoid_betas(steps: usize, beta_start: f64, beta_end: f64, lo: f64, hi: f64) -> Result<Vec<f64>> {
    if !(lo < hi) {
        return Err(Error::Param(format!("sigmoid span [{lo}, {hi}] is empty")));
    }
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let span = beta_end - beta_start;
    Ok((0..steps)
        .map(|t| {
            let x = lo + (hi - lo) * t as f64 / (steps - 1) as f64;
            beta_start + span * sig(x)
        })
        .collect())
}

/// β back-solved from a linearly diminishing ᾱ target, ᾱ_t = 1 − t/T.
/// The final ratio degenerates to β = 1 and is clamped to 0.999, so the
/// realized ᾱ_T is small but positive.
fn hyperbolic_betas(steps: usize) -> Vec<f64> {
    let t_max = steps as f64;
    (1..=steps)
        .map(|t| {
            let cur = 1.0 - t as f64 / t_max;
            let prev = 1.0 - (t - 1) as f64 / t_max;
            (1.0 - cur / prev).min(0.999)
        })
        .collect()
}

/// Geometric interpolation between the endpoints: β is log-linear in t.
pub fn time_dependent_betas(steps: usize, beta_start: f64, beta_end: f64) -> Result<Vec<f64>> {
    if steps < 2 {
        return Err(Error::Param(format!("need at least 2 steps, got {steps}")));
    }
    if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::Param(format!(
            "geometric interpolation needs 0 < start < end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let ratio = beta_end / beta_start;
    let mut betas = Vec::with_capacity(steps);
    betas.push(beta_start);
    for t in 1..steps - 1 {
        let timing = t as f64 / (steps - 1) as f64;
        betas.push(beta_start * ratio.powf(timing));
    }
    betas.push(beta_end);
    Ok(betas)
}

/// Hold-then-ramp construction over the linear base trajectory b of
/// `linear_betas`. With segment length n the output is T/(2n) shapes; shape
/// k holds b[2nk] for n steps, then replays b[2nk .. 2nk+n]. The output is
/// non-decreasing and every value it takes appears in the base trajectory.
pub fn ramp_betas(steps: usize, beta_start: f64, beta_end: f64, segment: usize) -> Result<Vec<f64>> {
    if segment == 0 {
        return Err(Error::Param("ramp segment must be positive".into()));
    }
    if steps < 2 || steps % (2 * segment) != 0 {
        return Err(Error::Param(format!(
            "ramp needs steps divisible by 2*segment = {}, got {steps}",
            2 * segment
        )));
    }
    let base = linear_betas(steps, beta_start, beta_end);
    let shapes = steps / (2 * segment);
    let mut out = Vec::with_capacity(steps);
    for k in 0..shapes {
        let start = 2 * segment * k;
        for _ in 0..segment {
            out.push(base[start]);
        }
        out.extend_from_slice(&base[start..start + segment]);
    }
    Ok(out)
}
