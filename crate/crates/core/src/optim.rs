//! AdamW with a linear warm-up / linear decay schedule.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    /// Peak learning rate.
    pub lr: f64,
    pub epochs: usize,
    pub warmup_frac: f64,
    /// Calibration samples per mini-batch.
    pub batch_size: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            epochs: 10,
            warmup_frac: 0.1,
            batch_size: 2,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Linear warm-up to the peak over `warmup` steps, then linear decay to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LinearSchedule {
    pub fn new(peak: f64, total: usize, warmup_frac: f64) -> Self {
        let warmup = math::ceil(total as f64 * warmup_frac) as usize;
        Self {
            peak,
            warmup: warmup.min(total),
            total,
        }
    }

    /// Learning rate of the zero-based step `step`.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let decay = self.total - self.warmup;
        if decay == 0 {
            return self.peak;
        }
        let left = decay.saturating_sub(step - self.warmup);
        self.peak * left as f64 / decay as f64
    }
}

/// Per-tensor AdamW moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn from_config(c: &OptimConfig) -> Self {
        Self {
            betas: c.betas,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }

    /// One decoupled-weight-decay Adam step.
    pub fn step(&self, param: &mut [f64], grad: &[f64], state: &mut AdamState, lr: f64) {
        let (b1, b2) = self.betas;
        state.t += 1;
        let c1 = 1.0 - math::powi(b1, state.t as i32);
        let c2 = 1.0 - math::powi(b2, state.t as i32);
        for (((p, &g), m), v) in param
            .iter_mut()
            .zip(grad)
            .zip(&mut state.m)
            .zip(&mut state.v)
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let update = (*m / c1) / (math::sqrt(*v / c2) + self.eps);
            *p -= lr * (update + self.weight_decay * *p);
        }
    }
}
