//! Adam with linear warmup followed by polynomial decay.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub end_lr: f64,
    pub power: f64,
}

impl LrSchedule {
    pub fn new(peak: f64, total_steps: usize, warmup_ratio: f64) -> Self {
        Self {
            peak,
            warmup_steps: (warmup_ratio * total_steps as f64).round() as usize,
            total_steps: total_steps.max(1),
            end_lr: 0.0,
            power: 1.0,
        }
    }

    /// Rate for the zero-based `step`.
    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps.saturating_sub(self.warmup_steps)).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        (self.peak - self.end_lr) * (1.0 - progress).powf(self.power) + self.end_lr
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

impl Adam {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a Array2<f64>>) -> Self {
        let m: Vec<Array2<f64>> = shapes.into_iter().map(|p| Array2::zeros(p.raw_dim())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Array2<f64>>, grads: &[Array2<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            m.zip_mut_with(g, |mi, &gi| *mi = b1 * *mi + (1.0 - b1) * gi);
            v.zip_mut_with(g, |vi, &gi| *vi = b2 * *vi + (1.0 - b2) * gi * gi);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|pi, &mi, &vi| {
                *pi -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = LrSchedule::new(1.0, 100, 0.1);
        assert_eq!(s.warmup_steps, 10);
        assert!((s.at(0) - 0.1).abs() < 1e-15);
        assert_eq!(s.at(9), 1.0);
        assert_eq!(s.at(10), 1.0);
        assert!((s.at(55) - 0.5).abs() < 1e-12);
        assert_eq!(s.at(100), 0.0);
        assert_eq!(s.at(500), 0.0);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = Array2::from_elem((1, 2), 1.0);
        let mut adam = Adam::new([&p]);
        let g = Array2::from_shape_vec((1, 2), vec![3.0, -0.5]).unwrap();
        adam.step([&mut p], &[g], 0.1);
        assert!((p[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[[0, 1]] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = Array2::from_elem((1, 1), 5.0);
        let mut adam = Adam::new([&p]);
        for _ in 0..2000 {
            let g = p.mapv(|x| 2.0 * (x - 1.5));
            adam.step([&mut p], &[g], 0.05);
        }
        assert!((p[[0, 0]] - 1.5).abs() < 1e-3);
    }
}
