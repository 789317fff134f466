//! Layer primitives with hand-written backward passes.
//!
//! Every layer caches what its backward pass needs when `record` is true
//! and skips the bookkeeping entirely in inference calls. Convolution runs
//! as im2col + GEMM, which is where essentially all training time goes;
//! the other layers are cheap elementwise or reduction work.

use ndarray::{s, Array2, Array4, ArrayD, Axis, Ix1, Ix2};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::Scalar;

/// A trainable array and its gradient accumulator.
#[derive(Debug, Clone)]
pub struct PTensor<T> {
    pub v: ArrayD<T>,
    pub g: ArrayD<T>,
}

impl<T: Scalar> PTensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        PTensor { v: ArrayD::zeros(shape), g: ArrayD::zeros(shape) }
    }

    /// Uniform init in ±1/√fan_in, the usual default for conv/linear maps.
    fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha12Rng) -> Self {
        let bound = (1.0 / fan_in as f64).sqrt();
        let v = ArrayD::from_shape_simple_fn(shape, || {
            T::from(rng.random_range(-bound..bound)).unwrap()
        });
        let g = ArrayD::zeros(v.raw_dim());
        PTensor { v, g }
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }
}

/// Visitor over a layer's named parameter tensors, depth-first in a fixed
/// order; optimizer state and checkpoints both key off this order.
pub type ParamVisitor<'a, T> = dyn FnMut(&str, &mut PTensor<T>) + 'a;

pub(crate) struct Conv2d<T> {
    /// [out_ch, in_ch·k·k], the GEMM-ready layout.
    pub w: PTensor<T>,
    pub b: PTensor<T>,
    pub in_ch: usize,
    pub out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cache: Option<ConvCache<T>>,
}

struct ConvCache<T> {
    cols: Array2<T>,
    in_dim: (usize, usize, usize, usize),
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let w = PTensor::fan_in_uniform(&[out_ch, in_ch * k * k], in_ch * k * k, rng);
        let b = PTensor::zeros(&[out_ch]);
        Conv2d { w, b, in_ch, out_ch, k, stride, pad, cache: None }
    }

    /// All-zero weights and bias: the output is zero for any input, which
    /// is what the prediction head wants at initialization.
    pub fn zeroed(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize) -> Self {
        let w = PTensor::zeros(&[out_ch, in_ch * k * k]);
        let b = PTensor::zeros(&[out_ch]);
        Conv2d { w, b, in_ch, out_ch, k, stride, pad, cache: None }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 * self.pad - self.k) / self.stride + 1, (w + 2 * self.pad - self.k) / self.stride + 1)
    }

    pub fn forward(&mut self, x: &Array4<T>, record: bool) -> Array4<T> {
        let (b, c, h, w) = x.dim();
        debug_assert_eq!(c, self.in_ch);
        let (oh, ow) = self.out_hw(h, w);
        let cols = im2col(x, self.k, self.stride, self.pad);
        let w2 = self.w.v.view().into_dimensionality::<Ix2>().unwrap();
        let out2 = w2.dot(&cols); // [oc, b·oh·ow]
        let mut out = out2
            .into_shape_with_order((self.out_ch, b, oh, ow))
            .unwrap()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned();
        for (o, mut ch) in out.axis_iter_mut(Axis(1)).enumerate() {
            ch += self.b.v[o];
        }
        if record {
            self.cache = Some(ConvCache { cols, in_dim: (b, c, h, w) });
        }
        out
    }

    pub fn backward(&mut self, dout: &Array4<T>) -> Array4<T> {
        let cache = self.cache.take().expect("conv backward without a recorded forward");
        let (b, _, oh, ow) = dout.dim();
        let g2 = dout
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_shape_with_order((self.out_ch, b * oh * ow))
            .unwrap()
            .into_owned();
        {
            let mut dw = self.w.g.view_mut().into_dimensionality::<Ix2>().unwrap();
            dw += &g2.dot(&cache.cols.t());
            let mut db = self.b.g.view_mut().into_dimensionality::<Ix1>().unwrap();
            db += &g2.sum_axis(Axis(1));
        }
        let w2 = self.w.v.view().into_dimensionality::<Ix2>().unwrap();
        let dcols = w2.t().dot(&g2);
        col2im(&dcols, cache.in_dim, self.k, self.stride, self.pad)
    }

    pub fn params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

/// Unroll convolution windows into a [c·k·k, b·oh·ow] matrix. Out-of-image
/// taps stay zero (zero padding).
fn im2col<T: Scalar>(x: &Array4<T>, k: usize, stride: usize, pad: usize) -> Array2<T> {
    let (b, c, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let xs = x.as_slice().expect("activations are standard layout");
    let mut cols = Array2::<T>::zeros((c * k * k, b * oh * ow));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row_idx = (ci * k + ky) * k + kx;
                let mut row = cols.row_mut(row_idx);
                let dst = row.as_slice_mut().unwrap();
                // valid output columns: 0 <= ox·s + kx − pad < w
                let ox0 = if pad > kx { (pad - kx).div_ceil(stride) } else { 0 };
                let ox1 = ((w - 1 + pad - kx) / stride + 1).min(ow); // exclusive
                for bi in 0..b {
                    let src_base = ((bi * c + ci) * h) as isize;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = ((src_base + iy) * w as isize) as usize;
                        let dst_row = ((bi * oh + oy) * ow) as usize;
                        if stride == 1 {
                            let ix0 = ox0 + kx - pad;
                            dst[dst_row + ox0..dst_row + ox1]
                                .copy_from_slice(&xs[src_row + ix0..src_row + ix0 + (ox1 - ox0)]);
                        } else {
                            for ox in ox0..ox1 {
                                let ix = ox * stride + kx - pad;
                                dst[dst_row + ox] = xs[src_row + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`: scatter-add column gradients back onto the input
/// grid. Windows overlap, so this accumulates.
fn col2im<T: Scalar>(
    dcols: &Array2<T>,
    in_dim: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<T> {
    let (b, c, h, w) = in_dim;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut dx = Array4::<T>::zeros((b, c, h, w));
    let dxs = dx.as_slice_mut().unwrap();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row_idx = (ci * k + ky) * k + kx;
                let row = dcols.row(row_idx);
                let src = row.as_slice().unwrap();
                let ox0 = if pad > kx { (pad - kx).div_ceil(stride) } else { 0 };
                let ox1 = ((w - 1 + pad - kx) / stride + 1).min(ow);
                for bi in 0..b {
                    let dst_base = ((bi * c + ci) * h) as isize;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = ((dst_base + iy) * w as isize) as usize;
                        let src_row = ((bi * oh + oy) * ow) as usize;
                        for ox in ox0..ox1 {
                            let ix = ox * stride + kx - pad;
                            dxs[dst_row + ix] += src[src_row + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

pub(crate) struct GroupNorm<T> {
    pub gamma: PTensor<T>,
    pub beta: PTensor<T>,
    pub groups: usize,
    channels: usize,
    eps: f64,
    cache: Option<GnCache<T>>,
}

struct GnCache<T> {
    xhat: Array4<T>,
    inv_std: Array2<T>, // [b, groups]
}

/// Largest of 8/4/2/1 that divides the channel count.
pub(crate) fn auto_groups(channels: usize) -> usize {
    [8usize, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap()
}

impl<T: Scalar> GroupNorm<T> {
    pub fn new(channels: usize) -> Self {
        let mut gamma = PTensor::zeros(&[channels]);
        gamma.v.fill(T::one());
        GroupNorm {
            gamma,
            beta: PTensor::zeros(&[channels]),
            groups: auto_groups(channels),
            channels,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<T>, record: bool) -> Array4<T> {
        let (b, c, h, w) = x.dim();
        debug_assert_eq!(c, self.channels);
        let cs = c / self.groups;
        let m = T::from(cs * h * w).unwrap();
        let mut xhat = Array4::<T>::zeros((b, c, h, w));
        let mut inv_std = Array2::<T>::zeros((b, self.groups));
        for bi in 0..b {
            for g in 0..self.groups {
                let sl = s![bi, g * cs..(g + 1) * cs, .., ..];
                let xg = x.slice(sl);
                let mean = xg.sum() / m;
                let var = xg.fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / m;
                let inv = T::one() / (var + T::from(self.eps).unwrap()).sqrt();
                inv_std[[bi, g]] = inv;
                let mut out = xhat.slice_mut(sl);
                out.assign(&xg);
                out.mapv_inplace(|v| (v - mean) * inv);
            }
        }
        let mut out = xhat.clone();
        for ci in 0..c {
            let mut ch = out.slice_mut(s![.., ci, .., ..]);
            ch.mapv_inplace(|v| v * self.gamma.v[ci] + self.beta.v[ci]);
        }
        if record {
            self.cache = Some(GnCache { xhat, inv_std });
        }
        out
    }

    pub fn backward(&mut self, dout: &Array4<T>) -> Array4<T> {
        let GnCache { xhat, inv_std } =
            self.cache.take().expect("norm backward without a recorded forward");
        let (b, c, h, w) = dout.dim();
        let cs = c / self.groups;
        let m = T::from(cs * h * w).unwrap();

        for ci in 0..c {
            let d = dout.slice(s![.., ci, .., ..]);
            let xh = xhat.slice(s![.., ci, .., ..]);
            self.gamma.g[ci] += (&d * &xh).sum();
            self.beta.g[ci] += d.sum();
        }

        // dxhat = dout·γ; then per group:
        // dx = inv_std·(dxhat − mean(dxhat) − xhat·mean(dxhat∘xhat))
        let mut dxhat = dout.clone();
        for ci in 0..c {
            let mut d = dxhat.slice_mut(s![.., ci, .., ..]);
            let g = self.gamma.v[ci];
            d.mapv_inplace(|v| v * g);
        }
        let mut dx = Array4::<T>::zeros((b, c, h, w));
        for bi in 0..b {
            for g in 0..self.groups {
                let sl = s![bi, g * cs..(g + 1) * cs, .., ..];
                let dh = dxhat.slice(sl);
                let xh = xhat.slice(sl);
                let m1 = dh.sum() / m;
                let m2 = (&dh * &xh).sum() / m;
                let inv = inv_std[[bi, g]];
                let mut out = dx.slice_mut(sl);
                ndarray::Zip::from(&mut out).and(&dh).and(&xh).for_each(|o, &d, &x| {
                    *o = inv * (d - m1 - x * m2);
                });
            }
        }
        dx
    }

    pub fn params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

pub(crate) struct SiLu<T> {
    cache: Option<Array4<T>>,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> SiLu<T> {
    pub fn new() -> Self {
        SiLu { cache: None }
    }

    pub fn forward(&mut self, x: &Array4<T>, record: bool) -> Array4<T> {
        if record {
            self.cache = Some(x.clone());
        }
        x.mapv(|v| v * sigmoid(v))
    }

    pub fn backward(&mut self, dout: &Array4<T>) -> Array4<T> {
        let x = self.cache.take().expect("activation backward without a recorded forward");
        let mut dx = dout.clone();
        ndarray::Zip::from(&mut dx).and(&x).for_each(|d, &v| {
            let s = sigmoid(v);
            *d = *d * s * (T::one() + v * (T::one() - s));
        });
        dx
    }
}

/// Inverted dropout: surviving activations are scaled by 1/(1−rate) so the
/// expected forward signal matches eval mode.
pub(crate) struct Dropout<T> {
    pub rate: f64,
    mask: Option<Array4<T>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(rate: f64) -> Self {
        Dropout { rate, mask: None }
    }

    pub fn forward(
        &mut self,
        x: &Array4<T>,
        rng: &mut ChaCha12Rng,
        train: bool,
        record: bool,
    ) -> Array4<T> {
        if !train || self.rate == 0.0 {
            self.mask = None;
            return x.clone();
        }
        let keep = 1.0 - self.rate;
        let scale = T::from(1.0 / keep).unwrap();
        let mask = Array4::from_shape_simple_fn(x.dim(), || {
            if rng.random::<f64>() < keep {
                scale
            } else {
                T::zero()
            }
        });
        let out = x * &mask;
        if record {
            self.mask = Some(mask);
        }
        out
    }

    pub fn backward(&mut self, dout: &Array4<T>) -> Array4<T> {
        match self.mask.take() {
            Some(mask) => dout * &mask,
            None => dout.clone(),
        }
    }
}

pub(crate) struct Linear<T> {
    pub w: PTensor<T>, // [out, in]
    pub b: PTensor<T>,
    cache: Option<Array2<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        Linear {
            w: PTensor::fan_in_uniform(&[out_dim, in_dim], in_dim, rng),
            b: PTensor::zeros(&[out_dim]),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<T>, record: bool) -> Array2<T> {
        let w2 = self.w.v.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = x.dot(&w2.t());
        let b1 = self.b.v.view().into_dimensionality::<Ix1>().unwrap();
        out += &b1;
        if record {
            self.cache = Some(x.clone());
        }
        out
    }

    /// Accumulates weight/bias gradients. The input here is a fixed time
    /// embedding, not a trainable tensor, so no input gradient is returned.
    pub fn backward(&mut self, dout: &Array2<T>) {
        let x = self.cache.take().expect("linear backward without a recorded forward");
        let mut dw = self.w.g.view_mut().into_dimensionality::<Ix2>().unwrap();
        dw += &dout.t().dot(&x);
        let mut db = self.b.g.view_mut().into_dimensionality::<Ix1>().unwrap();
        db += &dout.sum_axis(Axis(0));
    }

    pub fn params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

/// Nearest-neighbor 2× upsampling.
pub(crate) fn upsample2<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    let (b, c, h, w) = x.dim();
    let mut out = Array4::<T>::zeros((b, c, 2 * h, 2 * w));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = x[[bi, ci, y, xx]];
                    out[[bi, ci, 2 * y, 2 * xx]] = v;
                    out[[bi, ci, 2 * y, 2 * xx + 1]] = v;
                    out[[bi, ci, 2 * y + 1, 2 * xx]] = v;
                    out[[bi, ci, 2 * y + 1, 2 * xx + 1]] = v;
                }
            }
        }
    }
    out
}

/// Adjoint of `upsample2`: each source cell collects its 2×2 block.
pub(crate) fn upsample2_backward<T: Scalar>(d: &Array4<T>) -> Array4<T> {
    let (b, c, h2, w2) = d.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Array4::<T>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[[bi, ci, y, xx]] = d[[bi, ci, 2 * y, 2 * xx]]
                        + d[[bi, ci, 2 * y, 2 * xx + 1]]
                        + d[[bi, ci, 2 * y + 1, 2 * xx]]
                        + d[[bi, ci, 2 * y + 1, 2 * xx + 1]];
                }
            }
        }
    }
    out
}

/// Channel concatenation [a | b]. Built by slice assignment so the result
/// is standard layout, which the conv that consumes it requires.
pub(crate) fn concat_channels<T: Scalar>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    let (ba, ca, h, w) = a.dim();
    let (bb, cb, hb, wb) = b.dim();
    debug_assert_eq!((ba, h, w), (bb, hb, wb));
    let mut out = Array4::<T>::zeros((ba, ca + cb, h, w));
    out.slice_mut(s![.., ..ca, .., ..]).assign(a);
    out.slice_mut(s![.., ca.., .., ..]).assign(b);
    out
}

/// Split a channel-concatenated gradient back into its two parts.
pub(crate) fn split_channels<T: Scalar>(d: &Array4<T>, c_first: usize) -> (Array4<T>, Array4<T>) {
    let first = d.slice(s![.., ..c_first, .., ..]).to_owned();
    let second = d.slice(s![.., c_first.., .., ..]).to_owned();
    (first, second)
}
