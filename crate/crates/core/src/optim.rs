//! Adam, the learning-rate schedule and global-norm gradient clipping.

use crate::error::{ensure, Result};
use crate::params::{Kind, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

/// Bias-corrected Adam with one state slot per parameter. A parameter's
/// timestep only advances on steps where it received a gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    state: Vec<Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let state = params
            .iter()
            .map(|(_, p)| Moments {
                m: vec![0.0; p.value.numel()],
                v: vec![0.0; p.value.numel()],
                t: 0,
            })
            .collect();
        Self { config, state }
    }

    /// Applies one update with learning rate `lr`; `None` gradients leave
    /// the parameter and its moments untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Vec<f64>>], lr: f64) -> Result<()> {
        ensure!(
            grads.len() == self.state.len() && params.len() == self.state.len(),
            "adam_step",
            "expected {} gradient slots, got {}",
            self.state.len(),
            grads.len()
        );
        let AdamConfig { beta1, beta2, eps } = self.config;
        let ids: Vec<_> = params.iter().map(|(id, p)| (id, p.kind)).collect();
        for ((id, kind), (grad, st)) in ids.into_iter().zip(grads.iter().zip(&mut self.state)) {
            let Some(grad) = grad else { continue };
            if kind != Kind::Weight {
                continue;
            }
            let value = params.value_mut(id);
            ensure!(
                grad.len() == value.numel(),
                "adam_step",
                "gradient has {} values, parameter {}",
                grad.len(),
                value.numel()
            );
            st.t += 1;
            let c1 = 1.0 - beta1.powi(st.t as i32);
            let c2 = 1.0 - beta2.powi(st.t as i32);
            for (((x, &g), m), v) in value.data_mut().iter_mut().zip(grad).zip(&mut st.m).zip(&mut st.v) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *x -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// `lr * min(1, step / warmup)^2`, divided by ten once `step >= decay_at * total`.
pub fn lr_schedule(step: usize, lr: f64, warmup: usize, total: usize, decay_at: f64) -> f64 {
    let ramp = if warmup == 0 {
        1.0
    } else {
        (step as f64 / warmup as f64).min(1.0).powi(2)
    };
    let decay = if step as f64 >= decay_at * total as f64 { 0.1 } else { 1.0 };
    lr * ramp * decay
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|x| *x *= s));
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn single(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(value), Kind::Weight).unwrap();
        s
    }

    const CFG: AdamConfig = AdamConfig {
        beta1: 0.9,
        beta2: 0.98,
        eps: 1e-9,
    };

    #[test]
    fn first_step_closed_form() {
        let mut s = single(1.0);
        let mut adam = Adam::new(CFG, &s);
        adam.step(&mut s, &[Some(vec![0.3])], 0.01).unwrap();
        let expect = 1.0 - 0.01 * 0.3 / (0.3 + 1e-9);
        assert!((s.iter().next().unwrap().1.value.item() - expect).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_keeps_value() {
        let mut s = single(2.5);
        let mut adam = Adam::new(CFG, &s);
        for _ in 0..5 {
            adam.step(&mut s, &[Some(vec![0.0])], 0.1).unwrap();
        }
        assert_eq!(s.iter().next().unwrap().1.value.item(), 2.5);
    }

    #[test]
    fn constant_gradient_moves_at_lr() {
        let mut s = single(0.0);
        let mut adam = Adam::new(CFG, &s);
        let mut prev = 0.0;
        let mut last = 0.0;
        for _ in 0..200 {
            adam.step(&mut s, &[Some(vec![-4.0])], 0.01).unwrap();
            let now = s.iter().next().unwrap().1.value.item();
            last = now - prev;
            prev = now;
        }
        assert!(last > 0.0 && (last - 0.01).abs() < 1e-6);
    }

    #[test]
    fn schedule_points() {
        assert_eq!(lr_schedule(400, 1e-3, 400, 8000, 0.9), 1e-3);
        assert_eq!(lr_schedule(200, 1e-3, 400, 8000, 0.9), 0.25e-3);
        assert!((lr_schedule(7600, 1e-3, 400, 8000, 0.9) - 1e-4).abs() < 1e-18);
        assert_eq!(lr_schedule(0, 1e-3, 400, 8000, 0.9), 0.0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Some(vec![3.0]), None, Some(vec![4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].as_ref().unwrap()[0] - 0.6).abs() < 1e-15);
        assert!((g[2].as_ref().unwrap()[0] - 0.8).abs() < 1e-15);
    }
}
