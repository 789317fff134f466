//! Forward corruption, the training loop, and ancestral reverse sampling.
//!
//! Images live in [0,1] at rest and in [−1,1] inside the process. The
//! forward map is x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε; the model learns to predict
//! ε from (x_t, embed(t)); the sampler runs the learned chain backwards
//! from pure noise, optionally over a strided subset of the trained steps.

use ndarray::{Array2, Array4, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::denoiser::optim::AdamW;
use crate::denoiser::{Denoiser, Scalar};
use crate::embedding::{embed, embed_batch, EmbeddingSpec};
use crate::schedule::Schedule;
use crate::{Error, Result};

/// Everything the process needs besides the model: the trained schedule,
/// how many of its steps to use at sampling time, and the time embedding.
#[derive(Debug, Clone)]
pub struct DiffusionConfig {
    pub schedule: Schedule,
    pub t_sample: usize,
    pub embedding: EmbeddingSpec,
    pub rng_seed: u64,
}

impl DiffusionConfig {
    pub fn new(
        schedule: Schedule,
        t_sample: usize,
        embedding: EmbeddingSpec,
        rng_seed: u64,
    ) -> Result<Self> {
        if t_sample == 0 || t_sample > schedule.steps() {
            return Err(Error::Param(format!(
                "t_sample must lie in [1, {}], got {t_sample}",
                schedule.steps()
            )));
        }
        embedding.validate()?;
        Ok(DiffusionConfig { schedule, t_sample, embedding, rng_seed })
    }

    pub fn t_train(&self) -> usize {
        self.schedule.steps()
    }
}

/// One training batch: clean images already rescaled to [−1,1], one step
/// index per item, and the noise that will corrupt them.
pub struct TrainingBatch<T> {
    pub x0: Array4<T>,
    pub t: Vec<usize>,
    pub eps: Array4<T>,
}

impl<T: Scalar> TrainingBatch<T> {
    pub fn validate(&self, schedule: &Schedule) -> Result<()> {
        if self.x0.dim() != self.eps.dim() {
            return Err(Error::Shape(format!(
                "x0 {:?} and eps {:?} disagree",
                self.x0.dim(),
                self.eps.dim()
            )));
        }
        if self.t.len() != self.x0.dim().0 {
            return Err(Error::Shape(format!(
                "{} step indices for a batch of {}",
                self.t.len(),
                self.x0.dim().0
            )));
        }
        for &t in &self.t {
            if t == 0 || t > schedule.steps() {
                return Err(Error::Step { t, max: schedule.steps() });
            }
        }
        Ok(())
    }
}

/// x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε for one step index applied to the whole
/// tensor.
pub fn forward_sample<T: Scalar>(
    x0: &Array4<T>,
    t: usize,
    eps: &Array4<T>,
    schedule: &Schedule,
) -> Result<Array4<T>> {
    if x0.dim() != eps.dim() {
        return Err(Error::Shape(format!(
            "x0 {:?} and eps {:?} disagree",
            x0.dim(),
            eps.dim()
        )));
    }
    if t == 0 || t > schedule.steps() {
        return Err(Error::Step { t, max: schedule.steps() });
    }
    let ab = schedule.alpha_bar(t);
    let sa = T::from(ab.sqrt()).unwrap();
    let sn = T::from((1.0 - ab).sqrt()).unwrap();
    let mut out = x0.clone();
    Zip::from(&mut out).and(eps).for_each(|o, &e| *o = sa * *o + sn * e);
    Ok(out)
}

/// Per-item forward corruption for a batch with mixed step indices.
fn corrupt_batch<T: Scalar>(batch: &TrainingBatch<T>, schedule: &Schedule) -> Array4<T> {
    let mut xt = batch.x0.clone();
    for (bi, &t) in batch.t.iter().enumerate() {
        let ab = schedule.alpha_bar(t);
        let sa = T::from(ab.sqrt()).unwrap();
        let sn = T::from((1.0 - ab).sqrt()).unwrap();
        let eps = batch.eps.index_axis(Axis(0), bi);
        let mut dst = xt.index_axis_mut(Axis(0), bi);
        Zip::from(&mut dst).and(&eps).for_each(|d, &e| *d = sa * *d + sn * e);
    }
    xt
}

fn embed_steps<T: Scalar>(spec: &EmbeddingSpec, ts: &[usize]) -> Result<Array2<T>> {
    let tf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
    Ok(embed_batch(spec, &tf)?.mapv(|v| T::from(v).unwrap()))
}

/// Mean squared error between the drawn noise and the model's prediction.
/// Pure evaluation: no gradients move.
pub fn training_loss<T: Scalar>(
    model: &mut dyn Denoiser<T>,
    batch: &TrainingBatch<T>,
    cfg: &DiffusionConfig,
) -> Result<T> {
    batch.validate(&cfg.schedule)?;
    let xt = corrupt_batch(batch, &cfg.schedule);
    let emb = embed_steps(&cfg.embedding, &batch.t)?;
    let pred = model.predict(&xt, &emb)?;
    let n = T::from(pred.len()).unwrap();
    let mut acc = T::zero();
    Zip::from(&pred).and(&batch.eps).for_each(|&p, &e| {
        let d = p - e;
        acc = acc + d * d;
    });
    Ok(acc / n)
}

/// One optimizer update on `batch`. Puts the model in train mode, runs
/// forward/backward, steps, and returns the batch loss.
pub fn training_step<T: Scalar>(
    model: &mut dyn Denoiser<T>,
    opt: &mut AdamW<T>,
    batch: &TrainingBatch<T>,
    cfg: &DiffusionConfig,
) -> Result<T> {
    batch.validate(&cfg.schedule)?;
    model.set_train(true);
    let xt = corrupt_batch(batch, &cfg.schedule);
    let emb = embed_steps(&cfg.embedding, &batch.t)?;
    let pred = model.predict(&xt, &emb)?;
    let n = T::from(pred.len()).unwrap();
    let mut acc = T::zero();
    let mut dloss = pred.clone();
    Zip::from(&mut dloss).and(&batch.eps).for_each(|p, &e| {
        let d = *p - e;
        acc = acc + d * d;
        *p = (d + d) / n;
    });
    model.zero_grads();
    model.backward(&dloss);
    opt.step(model)?;
    Ok(acc / n)
}

/// The reverse chain's per-step tables. For n < T this is an evenly
/// strided truncation of the trained schedule: selected original indices
/// ts[k] = ⌊(k+1)·T/n⌋, per-step α′ the product of the skipped window's α,
/// and ᾱ looked up at the selected index so the marginals stay those of
/// the trained process. n = T reproduces the original tables bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePlan {
    pub ts: Vec<usize>,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl SamplePlan {
    pub fn new(schedule: &Schedule, n: usize) -> Result<Self> {
        let t = schedule.steps();
        if n == 0 || n > t {
            return Err(Error::Param(format!(
                "sampling steps must lie in [1, {t}], got {n}"
            )));
        }
        if n == t {
            return Ok(SamplePlan {
                ts: (1..=t).collect(),
                betas: schedule.betas().to_vec(),
                alphas: schedule.alphas().to_vec(),
                alpha_bars: schedule.alpha_bars().to_vec(),
            });
        }
        let mut ts = Vec::with_capacity(n);
        let mut alphas = Vec::with_capacity(n);
        let mut prev = 0usize;
        for k in 0..n {
            let sel = (k + 1) * t / n;
            let alpha: f64 = ((prev + 1)..=sel).map(|j| schedule.alpha(j)).product();
            ts.push(sel);
            alphas.push(alpha);
            prev = sel;
        }
        let betas = alphas.iter().map(|a| 1.0 - a).collect();
        let alpha_bars = ts.iter().map(|&s| schedule.alpha_bar(s)).collect();
        Ok(SamplePlan { ts, betas, alphas, alpha_bars })
    }

    pub fn len(&self) -> usize {
        self.ts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ts.is_empty()
    }
}

/// Deterministic part of one reverse step. The prediction implies a clean
/// image x̂0 = (x_t − √(1−ᾱ)·ε̂)/√ᾱ; that estimate is pinned to the [−1,1]
/// working range before stepping to the posterior mean
///   μ = (√ᾱ_prev·β/(1−ᾱ))·x̂0 + (√α·(1−ᾱ_prev)/(1−ᾱ))·x_t.
/// While x̂0 is in range this is algebraically the plain
/// (x_t − (β/√(1−ᾱ))·ε̂)/√α update; the pin engages only when an imperfect
/// model drifts off the data support, and is what keeps long chains from
/// wandering.
fn reverse_mean<T: Scalar>(
    xt: &Array4<T>,
    eps_hat: &Array4<T>,
    alpha: f64,
    beta: f64,
    alpha_bar: f64,
    alpha_bar_prev: f64,
) -> Array4<T> {
    let noise_w = T::from((1.0 - alpha_bar).sqrt()).unwrap();
    let inv_root_ab = T::from(1.0 / alpha_bar.sqrt()).unwrap();
    let c0 = T::from(alpha_bar_prev.sqrt() * beta / (1.0 - alpha_bar)).unwrap();
    let ct = T::from(alpha.sqrt() * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)).unwrap();
    let one = T::one();
    let mut out = xt.clone();
    Zip::from(&mut out).and(eps_hat).for_each(|o, &e| {
        let x0 = ((*o - noise_w * e) * inv_root_ab).max(-one).min(one);
        *o = c0 * x0 + ct * *o;
    });
    out
}

fn normal4<T: Scalar>(shape: (usize, usize, usize, usize), rng: &mut ChaCha12Rng) -> Array4<T> {
    Array4::from_shape_simple_fn(shape, || T::from(rng.sample::<f64, _>(StandardNormal)).unwrap())
}

/// Run the reverse chain from pure noise. The output stays in the model's
/// [−1,1] working range. The model is put in eval mode; one predict per
/// plan step. Non-finite values abort with the original step index.
pub fn sample_latent<T: Scalar>(
    model: &mut dyn Denoiser<T>,
    cfg: &DiffusionConfig,
    shape: (usize, usize, usize, usize),
    rng: &mut ChaCha12Rng,
) -> Result<Array4<T>> {
    let plan = SamplePlan::new(&cfg.schedule, cfg.t_sample)?;
    model.set_train(false);
    let b = shape.0;
    let mut x = normal4::<T>(shape, rng);
    for k in (0..plan.len()).rev() {
        let step = plan.ts[k];
        let row = embed(&cfg.embedding, step as f64)?;
        let mut emb = Array2::<T>::zeros((b, row.len()));
        for mut r in emb.rows_mut() {
            for (slot, &v) in r.iter_mut().zip(&row) {
                *slot = T::from(v).unwrap();
            }
        }
        let eps_hat = model.predict(&x, &emb)?;
        let ab_prev = if k > 0 { plan.alpha_bars[k - 1] } else { 1.0 };
        x = reverse_mean(&x, &eps_hat, plan.alphas[k], plan.betas[k], plan.alpha_bars[k], ab_prev);
        if k > 0 {
            let sigma = T::from(plan.betas[k].sqrt()).unwrap();
            let z = normal4::<T>(shape, rng);
            Zip::from(&mut x).and(&z).for_each(|xv, &zv| *xv = *xv + sigma * zv);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                step,
                what: "non-finite values in the reverse chain".into(),
            });
        }
    }
    Ok(x)
}

/// Generate images in [0,1]: reverse chain seeded from `cfg.rng_seed`,
/// then (x+1)/2 with clamping.
pub fn sample<T: Scalar>(
    model: &mut dyn Denoiser<T>,
    cfg: &DiffusionConfig,
    shape: (usize, usize, usize, usize),
) -> Result<Array4<T>> {
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.rng_seed);
    let x = sample_latent(model, cfg, shape, &mut rng)?;
    let half = T::from(0.5).unwrap();
    Ok(x.mapv(|v| ((v + T::one()) * half).max(T::zero()).min(T::one())))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

impl EpochStats {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss";

    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.epoch, self.train_loss, self.val_loss)
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochStats>,
    /// Epoch whose weights the model now carries (best validation loss),
    /// if a validation set was given.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many epochs without validation improvement;
    /// 0 disables early stopping.
    pub patience: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { epochs: 1, batch_size: 4, patience: 5 }
    }
}

struct Snapshot<T> {
    params: Vec<ndarray::ArrayD<T>>,
    m: Vec<ndarray::ArrayD<T>>,
    v: Vec<ndarray::ArrayD<T>>,
    step: u64,
    epoch: usize,
}

fn take_snapshot<T: Scalar>(model: &mut dyn Denoiser<T>, opt: &AdamW<T>, epoch: usize) -> Snapshot<T> {
    let mut params = Vec::new();
    model.for_each_param(&mut |_, p| params.push(p.v.clone()));
    Snapshot { params, m: opt.m.clone(), v: opt.v.clone(), step: opt.step, epoch }
}

fn restore_snapshot<T: Scalar>(model: &mut dyn Denoiser<T>, opt: &mut AdamW<T>, snap: &Snapshot<T>) {
    let mut i = 0;
    model.for_each_param(&mut |_, p| {
        p.v.assign(&snap.params[i]);
        i += 1;
    });
    opt.m = snap.m.clone();
    opt.v = snap.v.clone();
    opt.step = snap.step;
}

/// Epoch-driven training over `train` with per-epoch validation on `val`.
///
/// Each epoch shuffles the training set, draws (t, ε) fresh per batch, and
/// steps the optimizer once per batch. Validation corruption is drawn once
/// up front so its loss is comparable across epochs. The model is left
/// holding the weights of the best validation epoch (final weights if
/// `val` is empty, in which case early stopping is inactive and val_loss
/// is recorded as NaN).
pub fn train_loop<T: Scalar>(
    model: &mut dyn Denoiser<T>,
    opt: &mut AdamW<T>,
    train: &[Array2<T>],
    val: &[Array2<T>],
    cfg: &DiffusionConfig,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    if opts.batch_size == 0 {
        return Err(Error::Param("batch_size must be at least 1".into()));
    }
    let t_max = cfg.schedule.steps();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.rng_seed);

    // fixed validation corruption: same (t, ε) every epoch
    let mut val_rng = ChaCha12Rng::seed_from_u64(cfg.rng_seed ^ 0x76616c);
    let val_batches: Vec<TrainingBatch<T>> = val
        .chunks(opts.batch_size)
        .map(|chunk| assemble_batch(chunk, t_max, &mut val_rng))
        .collect();

    let mut history = Vec::new();
    let mut best: Option<Snapshot<T>> = None;
    let mut best_val = f64::INFINITY;
    let mut bad_epochs = 0usize;
    let mut stopped_early = false;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=opts.epochs {
        // Fisher–Yates driven by the run rng
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut loss_sum = 0.0f64;
        let mut n_samples = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            let images: Vec<Array2<T>> = chunk.iter().map(|&i| train[i].clone()).collect();
            let batch = assemble_batch(&images, t_max, &mut rng);
            let loss = training_step(model, opt, &batch, cfg)?;
            loss_sum += loss.to_f64().unwrap() * chunk.len() as f64;
            n_samples += chunk.len();
        }
        let train_loss = loss_sum / n_samples as f64;

        let val_loss = if val_batches.is_empty() {
            f64::NAN
        } else {
            model.set_train(false);
            let mut sum = 0.0;
            let mut n = 0usize;
            for vb in &val_batches {
                sum += training_loss(model, vb, cfg)?.to_f64().unwrap() * vb.t.len() as f64;
                n += vb.t.len();
            }
            sum / n as f64
        };
        history.push(EpochStats { epoch, train_loss, val_loss });

        if !val_batches.is_empty() {
            if val_loss < best_val {
                best_val = val_loss;
                best = Some(take_snapshot(model, opt, epoch));
                bad_epochs = 0;
            } else {
                bad_epochs += 1;
                if opts.patience > 0 && bad_epochs >= opts.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }

    let best_epoch = best.as_ref().map(|s| s.epoch);
    if let Some(snap) = &best {
        restore_snapshot(model, opt, snap);
    }
    model.set_train(false);
    Ok(TrainReport { history, best_epoch, stopped_early })
}

/// Rescale [0,1] images to [−1,1] and pair them with fresh (t, ε) draws.
fn assemble_batch<T: Scalar>(
    images: &[Array2<T>],
    t_max: usize,
    rng: &mut ChaCha12Rng,
) -> TrainingBatch<T> {
    let b = images.len();
    let (h, w) = images[0].dim();
    let two = T::from(2.0).unwrap();
    let mut x0 = Array4::<T>::zeros((b, 1, h, w));
    for (bi, img) in images.iter().enumerate() {
        x0.index_axis_mut(Axis(0), bi)
            .index_axis_mut(Axis(0), 0)
            .assign(&img.mapv(|v| two * v - T::one()));
    }
    let t: Vec<usize> = (0..b).map(|_| rng.random_range(1..=t_max)).collect();
    let eps = normal4::<T>((b, 1, h, w), rng);
    TrainingBatch { x0, t, eps }
}
