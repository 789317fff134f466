//! AdamW with decoupled weight decay.
//!
//! Decay multiplies the weights *before* the adaptive update, so it
//! regularizes toward zero at a rate lr·λ independent of the gradient
//! moments — unlike L2-in-the-gradient, which Adam would rescale.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::{Denoiser, Scalar};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 2e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Param(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Param(format!(
                "betas must lie in [0, 1), got {} / {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Param(format!(
                "weight_decay must be nonnegative, got {}",
                self.weight_decay
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Param(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First/second gradient-moment state, one pair per parameter tensor in the
/// model's visit order. State allocates lazily on the first step; every
/// later step must see the same tensor count and shapes.
pub struct AdamW<T> {
    pub cfg: OptimizerConfig,
    pub step: u64,
    pub m: Vec<ArrayD<T>>,
    pub v: Vec<ArrayD<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AdamW { cfg, step: 0, m: Vec::new(), v: Vec::new() })
    }

    /// Apply one update from the gradients accumulated in `model`.
    pub fn step(&mut self, model: &mut dyn Denoiser<T>) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let lr = T::from(self.cfg.learning_rate).unwrap();
        let b1 = T::from(self.cfg.beta1).unwrap();
        let b2 = T::from(self.cfg.beta2).unwrap();
        let eps = T::from(self.cfg.eps).unwrap();
        let one = T::one();
        let decay = one - lr * T::from(self.cfg.weight_decay).unwrap();
        let bc1 = T::from(1.0 - self.cfg.beta1.powf(t)).unwrap();
        let bc2 = T::from(1.0 - self.cfg.beta2.powf(t)).unwrap();

        let m = &mut self.m;
        let v = &mut self.v;
        let lazy_init = m.is_empty();
        let mut idx = 0usize;
        let mut err: Option<Error> = None;
        model.for_each_param(&mut |name, p| {
            if err.is_some() {
                return;
            }
            if lazy_init && idx == m.len() {
                m.push(ArrayD::zeros(p.v.raw_dim()));
                v.push(ArrayD::zeros(p.v.raw_dim()));
            }
            let (mi, vi) = match (m.get_mut(idx), v.get_mut(idx)) {
                (Some(mi), Some(vi)) if mi.shape() == p.v.shape() => (mi, vi),
                _ => {
                    err = Some(Error::Shape(format!(
                        "optimizer state does not match parameter {name} (shape {:?})",
                        p.v.shape()
                    )));
                    return;
                }
            };
            let w = &mut p.v;
            let g = &p.g;
            ndarray::Zip::from(w).and(g).and(mi).and(vi).for_each(|w, &g, m, v| {
                *w = *w * decay;
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            });
            idx += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if idx != m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors but the model exposes {idx}",
                m.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::{build_reference_unet, DenoiserConfig, PTensor};
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array2, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    /// Bare parameter holder for exercising the update rule in isolation.
    struct Bag {
        ps: Vec<(String, PTensor<f64>)>,
    }

    impl Denoiser<f64> for Bag {
        fn predict(&mut self, x: &Array4<f64>, _: &Array2<f64>) -> crate::Result<Array4<f64>> {
            Ok(x.clone())
        }
        fn backward(&mut self, _: &Array4<f64>) {}
        fn set_train(&mut self, _: bool) {}
        fn is_train(&self) -> bool {
            false
        }
        fn for_each_param(&mut self, f: &mut super::super::ParamVisitor<'_, f64>) {
            for (n, p) in &mut self.ps {
                f(n, p);
            }
        }
    }

    fn bag(values: &[f64]) -> Bag {
        let mut p = PTensor::zeros(&[values.len()]);
        for (slot, &v) in p.v.iter_mut().zip(values) {
            *slot = v;
        }
        Bag { ps: vec![("w".into(), p)] }
    }

    fn cfg(lr: f64, wd: f64) -> OptimizerConfig {
        OptimizerConfig { learning_rate: lr, weight_decay: wd, ..OptimizerConfig::default() }
    }

    #[test]
    fn first_step_closed_form() {
        // w=1, g=1, lr=0.1, no decay: bias correction makes the first step
        // exactly lr/(1+eps), so w ≈ 0.9.
        let mut model = bag(&[1.0]);
        model.ps[0].1.g.fill(1.0);
        let mut opt = AdamW::new(cfg(0.1, 0.0)).unwrap();
        opt.step(&mut model).unwrap();
        assert_abs_diff_eq!(model.ps[0].1.v[0], 0.9, epsilon = 1e-8);
    }

    #[test]
    fn constant_gradient_steps_are_exactly_lr() {
        // With g constant and no decay the bias-corrected moments cancel:
        // every step moves w by lr/(1 + eps·tiny), so n steps ≈ n·lr.
        let mut model = bag(&[1.0]);
        let mut opt = AdamW::new(cfg(0.1, 0.0)).unwrap();
        for _ in 0..3 {
            model.ps[0].1.g.fill(1.0);
            opt.step(&mut model).unwrap();
        }
        assert_abs_diff_eq!(model.ps[0].1.v[0], 0.7, epsilon = 1e-6);
    }

    #[test]
    fn decay_is_decoupled_from_the_moments() {
        // Zero gradient: the adaptive term is 0/(0+eps) = 0 and only the
        // multiplicative decay acts.
        let mut model = bag(&[2.0]);
        let mut opt = AdamW::new(cfg(0.1, 0.01)).unwrap();
        opt.step(&mut model).unwrap();
        assert_abs_diff_eq!(model.ps[0].1.v[0], 2.0 * (1.0 - 0.1 * 0.01), epsilon = 1e-15);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_noop() {
        let mut model = bag(&[1.5, -0.25]);
        let mut opt = AdamW::new(cfg(0.1, 0.0)).unwrap();
        opt.step(&mut model).unwrap();
        assert_eq!(model.ps[0].1.v[0], 1.5);
        assert_eq!(model.ps[0].1.v[1], -0.25);
    }

    #[test]
    fn state_mismatch_is_an_error() {
        let mut a = bag(&[1.0, 2.0]);
        let mut opt = AdamW::new(cfg(0.1, 0.0)).unwrap();
        opt.step(&mut a).unwrap();
        let mut b = bag(&[1.0, 2.0, 3.0]);
        assert!(matches!(opt.step(&mut b), Err(Error::Shape(_))));
        // fewer tensors than tracked is also a mismatch
        let mut opt2 = AdamW::new(cfg(0.1, 0.0)).unwrap();
        let mut two = Bag {
            ps: vec![("a".into(), PTensor::zeros(&[2])), ("b".into(), PTensor::zeros(&[2]))],
        };
        opt2.step(&mut two).unwrap();
        let mut one = Bag { ps: vec![("a".into(), PTensor::zeros(&[2]))] };
        assert!(matches!(opt2.step(&mut one), Err(Error::Shape(_))));
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        assert!(AdamW::<f64>::new(cfg(0.0, 0.0)).is_err());
        assert!(AdamW::<f64>::new(cfg(0.1, -1.0)).is_err());
        assert!(AdamW::<f64>::new(OptimizerConfig { beta1: 1.0, ..cfg(0.1, 0.0) }).is_err());
        assert!(AdamW::<f64>::new(OptimizerConfig { eps: 0.0, ..cfg(0.1, 0.0) }).is_err());
    }

    #[test]
    fn fifty_steps_monotonically_overfit_one_batch() {
        let dcfg = DenoiserConfig {
            base_channels: 8,
            depth: 1,
            dropout_rate: 0.0,
            embed_dim: 8,
            in_channels: 1,
        };
        let mut net = build_reference_unet::<f32>(&dcfg, 21).unwrap();
        net.set_train(true);
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        let x = Array4::from_shape_simple_fn((1, 1, 8, 16), || rng.random_range(-1.0f32..1.0));
        let emb = Array2::from_shape_simple_fn((1, 8), || rng.random_range(-1.0f32..1.0));
        let target = Array4::from_shape_simple_fn((1, 1, 8, 16), || rng.random_range(-1.0f32..1.0));

        let mut opt = AdamW::new(OptimizerConfig {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        })
        .unwrap();

        let mut losses = Vec::with_capacity(51);
        for _ in 0..50 {
            let pred = net.predict(&x, &emb).unwrap();
            let diff = &pred - &target;
            losses.push(diff.mapv(|v| v * v).mean().unwrap());
            let n = diff.len() as f32;
            let dloss = diff.mapv(|v| 2.0 * v / n);
            net.zero_grads();
            net.backward(&dloss);
            opt.step(&mut net).unwrap();
        }
        net.set_train(false);
        let pred = net.predict(&x, &emb).unwrap();
        losses.push((&pred - &target).mapv(|v| v * v).mean().unwrap());

        for w in losses.windows(2) {
            assert!(w[1] < w[0], "loss went {} -> {}", w[0], w[1]);
        }
    }
}
