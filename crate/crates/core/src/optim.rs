//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments for an ordered list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
}

impl AdamWState {
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let (first, second) = params
            .into_iter()
            .map(|p| (vec![0.0; p.numel()], vec![0.0; p.numel()]))
            .unzip();
        Self {
            config,
            step: 0,
            first,
            second,
        }
    }

    /// One decoupled-weight-decay update over `params`, which must be given
    /// in the same order as at construction. Tensors that are frozen or hold
    /// no gradient are left untouched, moments included.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        lr: f32,
    ) -> Result<()> {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != self.first.len() {
            return Err(Error::shape(
                "adamw_step",
                format!("{} parameters for {} moment slots", params.len(), self.first.len()),
            ));
        }
        for (i, p) in params.iter().enumerate() {
            if p.numel() != self.first[i].len() {
                return Err(Error::shape(
                    "adamw_step",
                    format!("parameter {i} has {} elements, moments {}", p.numel(), self.first[i].len()),
                ));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.into_iter().enumerate() {
            if !p.requires_grad() {
                continue;
            }
            let Some(grad) = p.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * weight_decay * *w;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup from zero followed by cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f32,
    pub total_steps: usize,
    pub warmup_ratio: f32,
}

impl Schedule {
    pub fn new(base_lr: f32, total_steps: usize, warmup_ratio: f32) -> Result<Self> {
        let s = Self {
            base_lr,
            total_steps,
            warmup_ratio,
        };
        if total_steps == 0 {
            return Err(Error::InvalidSchedule("total_steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&warmup_ratio) {
            return Err(Error::InvalidSchedule(format!(
                "warmup_ratio {warmup_ratio} outside [0, 1)"
            )));
        }
        if s.warmup_steps() >= total_steps {
            return Err(Error::InvalidSchedule(format!(
                "{} warmup steps leave no decay span in {total_steps}",
                s.warmup_steps()
            )));
        }
        Ok(s)
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio as f64 * self.total_steps as f64).round() as usize
    }

    pub fn lr(&self, step: usize) -> Result<f32> {
        cosine_warmup_lr(step, self)
    }
}

pub fn cosine_warmup_lr(step: usize, s: &Schedule) -> Result<f32> {
    if step > s.total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: s.total_steps,
        });
    }
    let w = s.warmup_steps();
    if step < w {
        return Ok(s.base_lr * step as f32 / w as f32);
    }
    let progress = (step - w) as f64 / (s.total_steps - w) as f64;
    Ok((s.base_lr as f64 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trainable(data: Vec<f32>) -> Tensor {
        let n = data.len();
        Tensor::new(vec![n], data).unwrap().with_requires_grad(true)
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut p = trainable(vec![0.5, -1.0, 2.0]);
        let mut st = AdamWState::new(AdamWConfig::default(), [&p]);
        for _ in 0..5 {
            p.zero_grad();
            p.accumulate_grad(&[0.0; 3]).unwrap();
            st.step([&mut p], 0.1).unwrap();
        }
        assert_eq!(p.data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = trainable(vec![1.0]);
        let mut st = AdamWState::new(AdamWConfig::default(), [&p]);
        p.accumulate_grad(&[1.0]).unwrap();
        st.step([&mut p], 0.1).unwrap();
        // m̂ = 1, v̂ = 1 → Δ = -0.1 / (1 + 1e-8)
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay_shrinks_geometrically() {
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut p = trainable(vec![2.0, -4.0]);
        let mut st = AdamWState::new(cfg, [&p]);
        p.accumulate_grad(&[0.0, 0.0]).unwrap();
        st.step([&mut p], 0.5).unwrap();
        assert_eq!(p.data(), &[2.0 * (1.0 - 0.05), -4.0 * (1.0 - 0.05)]);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut frozen = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut live = trainable(vec![1.0, 2.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        let mut st = AdamWState::new(cfg, [&frozen, &live]);
        for _ in 0..10 {
            live.zero_grad();
            live.accumulate_grad(&[0.3, -0.3]).unwrap();
            st.step([&mut frozen, &mut live], 0.01).unwrap();
        }
        assert_eq!(frozen.data(), &[1.0, 2.0]);
        assert_ne!(live.data(), &[1.0, 2.0]);
        assert!(st.first[0].iter().all(|&m| m == 0.0));
        assert_eq!(st.step, 10);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = trainable(vec![1.0, 2.0]);
        let mut st = AdamWState::new(AdamWConfig::default(), [&p]);
        let mut other = trainable(vec![1.0]);
        assert!(st.step([&mut other], 0.1).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let s = Schedule::new(1e-3, 100, 0.03).unwrap();
        assert_eq!(s.warmup_steps(), 3);
        assert_eq!(s.lr(0).unwrap(), 0.0);
        assert_eq!(s.lr(3).unwrap(), 1e-3);
        assert!(s.lr(100).unwrap().abs() < 1e-12);
        // decay span 3..100, midpoint at 51.5 is not integral; pick a span that is
        let s = Schedule::new(2.0, 202, 0.01).unwrap();
        assert_eq!(s.warmup_steps(), 2);
        assert!((s.lr(102).unwrap() - 1.0).abs() < 1e-6);
        assert!(matches!(s.lr(203), Err(Error::StepOutOfRange { .. })));
    }

    #[test]
    fn warmup_is_linear_and_decay_monotone() {
        let s = Schedule::new(0.5, 1000, 0.1).unwrap();
        for step in 0..100 {
            let expected = 0.5 * step as f32 / 100.0;
            assert!((s.lr(step).unwrap() - expected).abs() < 1e-7);
        }
        let mut prev = f32::INFINITY;
        for step in 100..=1000 {
            let lr = s.lr(step).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn degenerate_schedules_are_rejected() {
        assert!(Schedule::new(1.0, 0, 0.0).is_err());
        assert!(Schedule::new(1.0, 10, 1.0).is_err());
        assert!(Schedule::new(1.0, 1, 0.6).is_err());
        let s = Schedule::new(1.0, 1, 0.0).unwrap();
        assert_eq!(s.lr(0).unwrap(), 1.0);
    }
}
