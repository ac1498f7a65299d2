use crate::diffmath::{Scalar, Tensor};

/// Hyperparameters of the adaptive-moment update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: u64,
    pub clip_norm: f64,
}

/// Linear warmup to `lr` over `warmup` updates, then `lr · sqrt(warmup / t)`.
/// `warmup = 0` keeps the rate constant. `t` counts from 1.
pub fn learning_rate(lr: f64, warmup: u64, t: u64) -> f64 {
    if warmup == 0 {
        return lr;
    }
    let (t, w) = (t as f64, warmup as f64);
    if t <= w {
        lr * t / w
    } else {
        lr * (w / t).sqrt()
    }
}

/// Moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// What one call to [`AdamState::step`] did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Applied { grad_norm: f64, lr: f64 },
    /// A gradient entry was NaN or infinite; nothing changed.
    SkippedNonFinite,
}

pub fn global_norm<S: Scalar>(grads: &[Tensor<S>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

impl AdamState {
    pub fn new<S: Scalar>(params: &[Tensor<S>]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// Clips `grads` to global norm `clip_norm`, then applies one
    /// bias-corrected adaptive-moment update at the scheduled rate.
    pub fn step<S: Scalar>(&mut self, params: &mut [Tensor<S>], grads: &[Tensor<S>], hp: &AdamParams) -> StepOutcome {
        let norm = global_norm(grads);
        if !norm.is_finite() {
            return StepOutcome::SkippedNonFinite;
        }
        let clip = if norm > hp.clip_norm { hp.clip_norm / norm } else { 1.0 };
        self.step += 1;
        let t = self.step;
        let lr = learning_rate(hp.lr, hp.warmup, t);
        let c1 = 1.0 - hp.beta1.powi(t as i32);
        let c2 = 1.0 - hp.beta2.powi(t as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi.as_f64() * clip;
                m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * gi;
                v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * gi * gi;
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + hp.eps);
                *w = S::of(w.as_f64() - update);
            }
        }
        StepOutcome::Applied { grad_norm: norm, lr }
    }
}
