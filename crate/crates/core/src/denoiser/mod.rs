//! Trainable noise predictor ε(x_t, t-embedding).
//!
//! The reference model is a small convolutional encoder–decoder with skip
//! connections, written directly against ndarray with hand-derived
//! backward passes — no autograd. Anything that implements [`Denoiser`]
//! can replace it; training, sampling, and checkpointing only use the
//! trait surface.
//!
//! Built generic over f32/f64: training runs in f32 for speed, gradient
//! verification runs in f64 where finite differences are trustworthy.

mod ops;
pub mod optim;

use ndarray::{Array2, Array4, Axis};
use num_traits::FromPrimitive;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use ops::{ParamVisitor, PTensor};
use ops::{
    concat_channels, split_channels, upsample2, upsample2_backward, Conv2d, Dropout, GroupNorm,
    Linear, SiLu,
};

/// Element types the model can run in. Only f32 and f64 qualify.
pub trait Scalar: ndarray::NdFloat + FromPrimitive {}
impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    /// Number of 2× downsampling levels; inputs must divide by 2^depth.
    pub depth: usize,
    pub dropout_rate: f64,
    /// Width of the time embedding fed to `predict`.
    pub embed_dim: usize,
    pub in_channels: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            base_channels: 32,
            depth: 3,
            dropout_rate: 0.1,
            embed_dim: 128,
            in_channels: 1,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Shape("model depth must be at least 1".into()));
        }
        if self.base_channels == 0 || self.embed_dim == 0 || self.in_channels == 0 {
            return Err(Error::Param("channel and embedding widths must be nonzero".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Param(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// The noise-prediction contract. `predict` maps a noisy image batch plus
/// per-item time embeddings to a same-shape noise estimate; `backward`
/// accumulates parameter gradients of a scalar loss given ∂loss/∂output
/// from the most recent train-mode `predict`.
pub trait Denoiser<T: Scalar> {
    fn predict(&mut self, x: &Array4<T>, emb: &Array2<T>) -> Result<Array4<T>>;
    fn backward(&mut self, dout: &Array4<T>);
    fn set_train(&mut self, train: bool);
    fn is_train(&self) -> bool;
    /// Visit every parameter tensor in a fixed order. Optimizer state and
    /// checkpoint layout are both keyed to this order.
    fn for_each_param(&mut self, f: &mut ParamVisitor<'_, T>);

    fn zero_grads(&mut self) {
        self.for_each_param(&mut |_, p| p.g.fill(T::zero()));
    }

    fn num_parameters(&mut self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, p| n += p.len());
        n
    }
}

/// Two conv→norm→SiLU blocks with the time embedding lifted to the stage
/// width and added channel-wise between them; dropout closes the stage.
struct Stage<T> {
    conv1: Conv2d<T>,
    gn1: GroupNorm<T>,
    act1: SiLu<T>,
    lift: Linear<T>,
    conv2: Conv2d<T>,
    gn2: GroupNorm<T>,
    act2: SiLu<T>,
    drop: Dropout<T>,
}

impl<T: Scalar> Stage<T> {
    fn new(
        c_in: usize,
        c_out: usize,
        embed_dim: usize,
        dropout: f64,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        Stage {
            conv1: Conv2d::new(c_in, c_out, 3, 1, 1, rng),
            gn1: GroupNorm::new(c_out),
            act1: SiLu::new(),
            lift: Linear::new(embed_dim, c_out, rng),
            conv2: Conv2d::new(c_out, c_out, 3, 1, 1, rng),
            gn2: GroupNorm::new(c_out),
            act2: SiLu::new(),
            drop: Dropout::new(dropout),
        }
    }

    fn forward(
        &mut self,
        x: &Array4<T>,
        emb: &Array2<T>,
        rng: &mut ChaCha12Rng,
        train: bool,
        record: bool,
    ) -> Array4<T> {
        let h = self.conv1.forward(x, record);
        let h = self.gn1.forward(&h, record);
        let mut h = self.act1.forward(&h, record);
        let lift = self.lift.forward(emb, record);
        for (mut hb, lb) in h.outer_iter_mut().zip(lift.outer_iter()) {
            for (mut hc, &l) in hb.outer_iter_mut().zip(lb.iter()) {
                hc += l;
            }
        }
        let h = self.conv2.forward(&h, record);
        let h = self.gn2.forward(&h, record);
        let h = self.act2.forward(&h, record);
        self.drop.forward(&h, rng, train, record)
    }

    fn backward(&mut self, dout: &Array4<T>) -> Array4<T> {
        let d = self.drop.backward(dout);
        let d = self.act2.backward(&d);
        let d = self.gn2.backward(&d);
        let d = self.conv2.backward(&d);
        // the embedding add fans the gradient out to both branches
        let dl = d.sum_axis(Axis(3)).sum_axis(Axis(2));
        self.lift.backward(&dl);
        let d = self.act1.backward(&d);
        let d = self.gn1.backward(&d);
        self.conv1.backward(&d)
    }

    fn params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.conv1.params(&format!("{prefix}.conv1"), f);
        self.gn1.params(&format!("{prefix}.gn1"), f);
        self.lift.params(&format!("{prefix}.lift"), f);
        self.conv2.params(&format!("{prefix}.conv2"), f);
        self.gn2.params(&format!("{prefix}.gn2"), f);
    }
}

/// The reference encoder–decoder. Channel width doubles at every
/// downsampling; the decoder mirrors the encoder and concatenates skip
/// features before each stage. The prediction head starts zeroed so an
/// untrained model predicts zero noise.
pub struct UNet<T> {
    cfg: DenoiserConfig,
    init_seed: u64,
    stem: Conv2d<T>,
    enc: Vec<Stage<T>>,
    down: Vec<Conv2d<T>>,
    mid: Stage<T>,
    up: Vec<Conv2d<T>>,
    dec: Vec<Stage<T>>,
    head_gn: GroupNorm<T>,
    head_act: SiLu<T>,
    head_conv: Conv2d<T>,
    train: bool,
    rng: ChaCha12Rng,
}

pub fn build_reference_unet<T: Scalar>(cfg: &DenoiserConfig, seed: u64) -> Result<UNet<T>> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let f = cfg.base_channels;
    let d = cfg.embed_dim;
    let stem = Conv2d::new(cfg.in_channels, f, 3, 1, 1, &mut rng);
    let mut enc = Vec::with_capacity(cfg.depth);
    let mut down = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let ch = f << i;
        enc.push(Stage::new(ch, ch, d, cfg.dropout_rate, &mut rng));
        down.push(Conv2d::new(ch, ch << 1, 3, 2, 1, &mut rng));
    }
    let mid = Stage::new(f << cfg.depth, f << cfg.depth, d, cfg.dropout_rate, &mut rng);
    let mut up = Vec::with_capacity(cfg.depth);
    let mut dec = Vec::with_capacity(cfg.depth);
    for i in 0..cfg.depth {
        let ch = f << i;
        up.push(Conv2d::new(ch << 1, ch, 3, 1, 1, &mut rng));
        dec.push(Stage::new(2 * ch, ch, d, cfg.dropout_rate, &mut rng));
    }
    Ok(UNet {
        cfg: *cfg,
        init_seed: seed,
        stem,
        enc,
        down,
        mid,
        up,
        dec,
        head_gn: GroupNorm::new(f),
        head_act: SiLu::new(),
        head_conv: Conv2d::zeroed(f, cfg.in_channels, 1, 1, 0),
        train: false,
        rng,
    })
}

impl<T: Scalar> UNet<T> {
    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    /// Reseed the dropout stream; training does this per run for
    /// reproducibility independent of how often the model was used before.
    pub fn reseed_dropout(&mut self, seed: u64) {
        self.rng = ChaCha12Rng::seed_from_u64(seed);
    }

    fn check_input(&self, x: &Array4<T>, emb: &Array2<T>) -> Result<()> {
        let (b, c, h, w) = x.dim();
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "expected {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        let div = 1usize << self.cfg.depth;
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} must be divisible by 2^depth = {div}"
            )));
        }
        if emb.dim() != (b, self.cfg.embed_dim) {
            return Err(Error::Shape(format!(
                "expected a {b}x{} embedding batch, got {:?}",
                self.cfg.embed_dim,
                emb.dim()
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> Denoiser<T> for UNet<T> {
    fn predict(&mut self, x: &Array4<T>, emb: &Array2<T>) -> Result<Array4<T>> {
        self.check_input(x, emb)?;
        let record = self.train;
        let mut h = self.stem.forward(x, record);
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for i in 0..self.cfg.depth {
            h = self.enc[i].forward(&h, emb, &mut self.rng, self.train, record);
            skips.push(h.clone());
            h = self.down[i].forward(&h, record);
        }
        h = self.mid.forward(&h, emb, &mut self.rng, self.train, record);
        for i in (0..self.cfg.depth).rev() {
            h = upsample2(&h);
            h = self.up[i].forward(&h, record);
            h = concat_channels(&h, &skips[i]);
            h = self.dec[i].forward(&h, emb, &mut self.rng, self.train, record);
        }
        let h = self.head_gn.forward(&h, record);
        let h = self.head_act.forward(&h, record);
        Ok(self.head_conv.forward(&h, record))
    }

    fn backward(&mut self, dout: &Array4<T>) {
        let d = self.head_conv.backward(dout);
        let d = self.head_act.backward(&d);
        let mut d = self.head_gn.backward(&d);
        let mut dskips: Vec<Option<Array4<T>>> = (0..self.cfg.depth).map(|_| None).collect();
        for i in 0..self.cfg.depth {
            d = self.dec[i].backward(&d);
            let (d_up, d_skip) = split_channels(&d, self.cfg.base_channels << i);
            dskips[i] = Some(d_skip);
            let d_pre = self.up[i].backward(&d_up);
            d = upsample2_backward(&d_pre);
        }
        d = self.mid.backward(&d);
        for i in (0..self.cfg.depth).rev() {
            d = self.down[i].backward(&d);
            d += &dskips[i].take().expect("skip gradient recorded above");
            d = self.enc[i].backward(&d);
        }
        let _ = self.stem.backward(&d);
    }

    fn set_train(&mut self, train: bool) {
        self.train = train;
    }

    fn is_train(&self) -> bool {
        self.train
    }

    fn for_each_param(&mut self, f: &mut ParamVisitor<'_, T>) {
        self.stem.params("stem", f);
        for (i, stage) in self.enc.iter_mut().enumerate() {
            stage.params(&format!("enc{i}"), f);
        }
        for (i, conv) in self.down.iter_mut().enumerate() {
            conv.params(&format!("down{i}"), f);
        }
        self.mid.params("mid", f);
        for (i, conv) in self.up.iter_mut().enumerate() {
            conv.params(&format!("up{i}"), f);
        }
        for (i, stage) in self.dec.iter_mut().enumerate() {
            stage.params(&format!("dec{i}"), f);
        }
        self.head_gn.params("head.gn", f);
        self.head_conv.params("head.conv", f);
    }
}
