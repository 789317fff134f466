//! Scalar time-step embeddings for the denoiser.
//!
//! Two families share the same frequency ladder 10000^(2i/d) over component
//! pairs i = 0 .. d/2: the classic interleaved sine/cosine embedding, and a
//! harmonic-sum variant that superimposes N scaled harmonics of each base
//! frequency. The harmonic variant keeps the paired slot layout; both slots
//! of a pair carry the per-pair sum (the written order of the sine and
//! cosine terms differs, which leaves the value unchanged), so at t = 0
//! every component equals the harmonic number H_N = Σ_{n=1..N} 1/n.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    Sinusoidal,
    Fourier,
}

impl EmbeddingKind {
    pub fn name(&self) -> &'static str {
        match self {
            EmbeddingKind::Sinusoidal => "sinusoidal",
            EmbeddingKind::Fourier => "fourier",
        }
    }
}

impl std::str::FromStr for EmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinusoidal" => Ok(EmbeddingKind::Sinusoidal),
            "fourier" => Ok(EmbeddingKind::Fourier),
            other => Err(Error::Param(format!("unknown embedding kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSpec {
    pub kind: EmbeddingKind,
    /// Output dimension d; must be even.
    pub dim: usize,
    /// Harmonic count N; read by the fourier family only.
    pub harmonics: usize,
}

impl Default for EmbeddingSpec {
    fn default() -> Self {
        EmbeddingSpec { kind: EmbeddingKind::Fourier, dim: 128, harmonics: 4 }
    }
}

impl EmbeddingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.dim % 2 != 0 {
            return Err(Error::Param(format!(
                "embedding dim must be even and >= 2, got {}",
                self.dim
            )));
        }
        if self.harmonics == 0 {
            return Err(Error::Param("harmonic count must be >= 1".into()));
        }
        Ok(())
    }
}

/// Component 2i = sin(t / 10000^(2i/d)), component 2i+1 = cos of the same
/// argument.
pub fn sinusoidal_embed(t: f64, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let x = t * inv_frequency(i, dim);
        out[2 * i] = x.sin();
        out[2 * i + 1] = x.cos();
    }
    out
}

/// Both slots of pair i carry Σ_{n=1..N} (sin(n·x) + cos(n·x)) / n with
/// x = t / 10000^(2i/d). With N = 1 this reduces to sin(x) + cos(x); every
/// component is bounded by √2·H_N in magnitude.
pub fn fourier_embed(t: f64, dim: usize, harmonics: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let x = t * inv_frequency(i, dim);
        let mut sum = 0.0;
        for n in 1..=harmonics {
            let nx = n as f64 * x;
            sum += (nx.sin() + nx.cos()) / n as f64;
        }
        out[2 * i] = sum;
        out[2 * i + 1] = sum;
    }
    out
}

/// 10000^(-2i/d), the reciprocal of the pair's wavelength scale.
fn inv_frequency(pair: usize, dim: usize) -> f64 {
    10000f64.powf(-2.0 * pair as f64 / dim as f64)
}

pub fn embed(spec: &EmbeddingSpec, t: f64) -> Result<Vec<f64>> {
    spec.validate()?;
    Ok(match spec.kind {
        EmbeddingKind::Sinusoidal => sinusoidal_embed(t, spec.dim),
        EmbeddingKind::Fourier => fourier_embed(t, spec.dim, spec.harmonics),
    })
}

/// Row b holds the embedding of ts[b].
pub fn embed_batch(spec: &EmbeddingSpec, ts: &[f64]) -> Result<Array2<f64>> {
    spec.validate()?;
    let mut out = Array2::zeros((ts.len(), spec.dim));
    for (b, &t) in ts.iter().enumerate() {
        let row = match spec.kind {
            EmbeddingKind::Sinusoidal => sinusoidal_embed(t, spec.dim),
            EmbeddingKind::Fourier => fourier_embed(t, spec.dim, spec.harmonics),
        };
        for (c, v) in row.into_iter().enumerate() {
            out[[b, c]] = v;
        }
    }
    Ok(out)
}
