//! Adam with coupled L2 weight decay and the step-decay learning-rate
//! schedule used for training.

use crate::error::{Error, Result};
use crate::tensor::Scalar;
use crate::unet::UNetModel;

/// Piecewise-constant schedule: the rate is multiplied by `gamma` at each
/// milestone iteration (the new rate takes effect at the milestone itself).
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial_lr: f64,
    pub milestones: Vec<u64>,
    pub gamma: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { initial_lr: 2e-4, milestones: vec![600, 1000, 1400], gamma: 0.5 }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!(
                "milestones must be strictly increasing, got {:?}",
                self.milestones
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        if self.initial_lr <= 0.0 {
            return Err(Error::Config(format!("initial_lr must be positive, got {}", self.initial_lr)));
        }
        Ok(())
    }
}

/// `initial_lr * gamma^(number of milestones <= iter)`.
pub fn lr_at(iter: u64, sched: &LrSchedule) -> f64 {
    let decays = sched.milestones.iter().filter(|&&m| m <= iter).count();
    sched.initial_lr * sched.gamma.powi(decays as i32)
}

/// Training hyperparameters. The patch/stride defaults are desk scale; the
/// full-scale runs use 128^3 patches.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainHyper {
    pub weight_decay: f64,
    pub total_iters: u64,
    pub batch_size: usize,
    pub patch: [usize; 3],
    pub stride: [usize; 3],
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            weight_decay: 1e-4,
            total_iters: 2000,
            batch_size: 1,
            patch: [32, 32, 32],
            stride: [32, 32, 32],
        }
    }
}

/// The core Adam update on one parameter slice. `t` is the already
/// incremented step counter; weight decay is a coupled L2 term added to the
/// gradient before the moment updates. Gradients are cleared afterwards.
#[allow(clippy::too_many_arguments)]
pub fn adam_step_slice<T: Scalar>(
    value: &mut [T],
    grad: &mut [T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let b1 = T::from_f64_c(beta1);
    let b2 = T::from_f64_c(beta2);
    let one = T::one();
    let lr_t = T::from_f64_c(lr);
    let wd = T::from_f64_c(weight_decay);
    let eps_t = T::from_f64_c(eps);
    let bc1 = T::from_f64_c(1.0 - beta1.powi(t as i32));
    let bc2 = T::from_f64_c(1.0 - beta2.powi(t as i32));
    for i in 0..value.len() {
        let g = grad[i] + wd * value[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        value[i] = value[i] - lr_t * mhat / (vhat.sqrt() + eps_t);
        grad[i] = T::zero();
    }
}

/// Adam state for one model: first/second moments per learnable parameter in
/// registry order, plus the shared step counter. One optimizer owns one
/// model's state; steps are strictly sequential.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    /// Kingma-Ba defaults: beta1 0.9, beta2 0.999, eps 1e-8.
    pub fn new(model: &mut UNetModel<T>) -> Self {
        Self::with_betas(model, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(model: &mut UNetModel<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let mut m = Vec::new();
        model.for_each_tensor(&mut |e| {
            if e.grad.is_some() {
                m.push(vec![T::zero(); e.value.len()]);
            }
        });
        let v = m.clone();
        Self { beta1, beta2, eps, t: 0, m, v }
    }

    /// One optimizer step over every learnable parameter. A non-finite
    /// gradient aborts before anything is mutated, naming the offending
    /// parameter. Weight decay is skipped for biases and normalization
    /// parameters (their registry entries are marked no-decay).
    pub fn step(&mut self, model: &mut UNetModel<T>, lr: f64, weight_decay: f64) -> Result<()> {
        let mut bad: Option<String> = None;
        model.for_each_tensor(&mut |e| {
            if let Some(g) = e.grad {
                if bad.is_none() && g.iter().any(|v| !v.is_finite()) {
                    bad = Some(e.name.clone());
                }
            }
        });
        if let Some(name) = bad {
            return Err(Error::Numeric(format!("non-finite gradient in parameter '{}'", name)));
        }
        self.t += 1;
        let (t, b1, b2, eps) = (self.t, self.beta1, self.beta2, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        model.for_each_tensor(&mut |e| {
            if let Some(grad) = e.grad {
                let wd = if e.decay { weight_decay } else { 0.0 };
                adam_step_slice(e.value, grad, &mut m[idx], &mut v[idx], t, lr, wd, b1, b2, eps);
                idx += 1;
            }
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::{build_model, UNetConfig, VariantKind};

    #[test]
    fn schedule_matches_published_plateaus() {
        let s = LrSchedule::default();
        assert_eq!(lr_at(0, &s), 2e-4);
        assert_eq!(lr_at(599, &s), 2e-4);
        assert_eq!(lr_at(600, &s), 1e-4);
        assert_eq!(lr_at(999, &s), 1e-4);
        assert_eq!(lr_at(1000, &s), 5e-5);
        assert_eq!(lr_at(1400, &s), 2.5e-5);
        assert_eq!(lr_at(5000, &s), 2.5e-5);
    }

    #[test]
    fn schedule_is_non_increasing_with_four_plateaus() {
        let s = LrSchedule::default();
        let mut last = f64::INFINITY;
        let mut plateaus = std::collections::BTreeSet::new();
        for it in 0..2000 {
            let lr = lr_at(it, &s);
            assert!(lr <= last);
            plateaus.insert(lr.to_bits());
            last = lr;
        }
        assert_eq!(plateaus.len(), s.milestones.len() + 1);
    }

    #[test]
    fn milestones_must_increase() {
        let s = LrSchedule { milestones: vec![600, 600], ..Default::default() };
        assert!(s.validate().is_err());
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_params_unchanged() {
        let mut value = vec![1.25f64, -0.5];
        let mut grad = vec![0.0; 2];
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        adam_step_slice(&mut value, &mut grad, &mut m, &mut v, 1, 0.1, 0.0, 0.9, 0.999, 1e-8);
        assert_eq!(value, vec![1.25, -0.5]);
    }

    #[test]
    fn first_step_magnitude_is_roughly_lr() {
        // Bias correction at t=1 makes mhat=g, vhat=g^2.
        for &g0 in &[0.3f64, -2.0, 1e-3] {
            let mut value = vec![0.0f64];
            let mut grad = vec![g0];
            let mut m = vec![0.0];
            let mut v = vec![0.0];
            let lr = 0.01;
            adam_step_slice(&mut value, &mut grad, &mut m, &mut v, 1, lr, 0.0, 0.9, 0.999, 1e-8);
            let want = lr * g0.abs() / (g0.abs() + 1e-8);
            assert!((value[0].abs() - want).abs() < 1e-12, "g0={g0}");
            assert_eq!(grad[0], 0.0, "gradient cleared");
        }
    }

    #[test]
    fn adam_converges_on_square() {
        // f(x) = x^2 from x = 1 with lr = 0.1.
        let mut value = vec![1.0f64];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        for t in 1..=100 {
            let mut grad = vec![2.0 * value[0]];
            adam_step_slice(&mut value, &mut grad, &mut m, &mut v, t, 0.1, 0.0, 0.9, 0.999, 1e-8);
        }
        assert!(value[0].abs() < 0.1, "x after 100 steps: {}", value[0]);
    }

    #[test]
    fn lr_zero_changes_nothing_and_nonfinite_grad_aborts() {
        let cfg = UNetConfig {
            levels: 2,
            base_channels: 2,
            variant: VariantKind::ConvBnRelu,
            ..Default::default()
        };
        let mut model = build_model::<f32>(&cfg, 7).unwrap();
        let mut opt = Adam::new(&mut model);

        let mut before = Vec::new();
        model.for_each_tensor(&mut |e| before.push(e.value.to_vec()));
        opt.step(&mut model, 0.0, 0.0).unwrap();
        let mut after = Vec::new();
        model.for_each_tensor(&mut |e| after.push(e.value.to_vec()));
        assert_eq!(before, after);

        // Poison one gradient; the step must abort naming the parameter.
        let mut poisoned = false;
        model.for_each_tensor(&mut |e| {
            if let Some(g) = e.grad {
                if !poisoned && !g.is_empty() {
                    g[0] = f32::NAN;
                    poisoned = true;
                }
            }
        });
        let err = opt.step(&mut model, 1e-3, 0.0).unwrap_err();
        assert!(err.to_string().contains("enc0.m1.conv.weight"), "{err}");
        // Aborted before mutating: t unchanged, params unchanged.
        assert_eq!(opt.t, 1);
        let mut after2 = Vec::new();
        model.for_each_tensor(&mut |e| after2.push(e.value.to_vec()));
        assert_eq!(before, after2);
    }
}
