//! AdamW and the EMA shadow weights.

use crate::error::{Error, Result};
use crate::prior::ParamInfo;

/// Adam with decoupled weight decay. Decay applies only to parameters whose
/// layout entry is marked `decay` (matrices, not biases or norm gains).
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u64,
    decay_mask: Vec<bool>,
}

impl AdamW {
    pub fn new(infos: &[ParamInfo], lr: f64, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        let n = infos.iter().map(|p| p.range.end).max().unwrap_or(0);
        let mut decay_mask = vec![false; n];
        for p in infos.iter().filter(|p| p.decay) {
            decay_mask[p.range.clone()].iter_mut().for_each(|d| *d = true);
        }
        AdamW { lr, beta1: betas.0, beta2: betas.1, eps, weight_decay, m: vec![0.0; n], v: vec![0.0; n], steps: 0, decay_mask }
    }

    pub fn restore(&mut self, m: Vec<f64>, v: Vec<f64>, steps: u64) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::invalid("optimizer state does not match the parameter count"));
        }
        self.m = m;
        self.v = v;
        self.steps = steps;
        Ok(())
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        let shrink = 1.0 - self.lr * self.weight_decay;
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            if self.decay_mask[i] {
                params[i] *= shrink;
            }
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Exponential moving average of the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub shadow: Vec<f64>,
    pub beta: f64,
    pub update_every: u64,
    pub updates_applied: u64,
}

impl EmaState {
    pub fn new(params: &[f64], beta: f64, update_every: u64) -> Self {
        EmaState { shadow: params.to_vec(), beta, update_every: update_every.max(1), updates_applied: 0 }
    }
}

/// Applies `shadow ← β·shadow + (1−β)·current` when `step` is a multiple of
/// `update_every`. Returns whether an update happened.
pub fn ema_update(ema: &mut EmaState, params: &[f64], step: u64) -> Result<bool> {
    if step == 0 {
        return Err(Error::invalid("EMA steps are counted from 1"));
    }
    if params.len() != ema.shadow.len() {
        return Err(Error::invalid("EMA shadow does not match the network"));
    }
    if step % ema.update_every != 0 {
        return Ok(false);
    }
    let b = ema.beta;
    for (s, p) in ema.shadow.iter_mut().zip(params) {
        *s = b * *s + (1.0 - b) * p;
    }
    ema.updates_applied += 1;
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn info(n: usize, decay: bool) -> Vec<ParamInfo> {
        vec![ParamInfo { name: "w".into(), shape: vec![n], range: 0..n, decay }]
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut opt = AdamW::new(&info(3, false), 0.1, (0.9, 0.999), 1e-12, 0.5);
        let mut p = vec![1.0, 1.0, 1.0];
        opt.step(&mut p, &[2.0, -0.5, 0.0]);
        assert!((p[0] - 0.9).abs() < 1e-9);
        assert!((p[1] - 1.1).abs() < 1e-9);
        assert_eq!(p[2], 1.0);
    }

    #[test]
    fn decay_is_decoupled_and_masked() {
        let mut opt = AdamW::new(&info(2, true), 0.1, (0.9, 0.999), 1e-8, 0.5);
        let mut p = vec![2.0, -4.0];
        opt.step(&mut p, &[0.0, 0.0]);
        assert!((p[0] - 1.9).abs() < 1e-12 && (p[1] + 3.8).abs() < 1e-12);
    }

    #[test]
    fn adam_matches_scalar_recursion() {
        let (lr, b1, b2, eps) = (0.01, 0.8, 0.95, 1e-8);
        let mut opt = AdamW::new(&info(1, false), lr, (b1, b2), eps, 0.0);
        let mut p = vec![0.5];
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.5f64);
        for k in 1..=20 {
            let g = (k as f64 * 0.7).sin();
            opt.step(&mut p, &[g]);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x -= lr * (m / (1.0 - b1.powi(k))) / ((v / (1.0 - b2.powi(k))).sqrt() + eps);
        }
        assert!((p[0] - x).abs() < 1e-12);
    }

    #[test]
    fn ema_extremes() {
        let mut e = EmaState::new(&[1.0, 2.0], 0.0, 1);
        ema_update(&mut e, &[5.0, 6.0], 1).unwrap();
        assert_eq!(e.shadow, vec![5.0, 6.0]);
        let mut e = EmaState::new(&[1.0, 2.0], 1.0, 1);
        for s in 1..10 {
            ema_update(&mut e, &[5.0, 6.0], s).unwrap();
        }
        assert_eq!(e.shadow, vec![1.0, 2.0]);
    }

    #[test]
    fn ema_gap_shrinks_geometrically_at_update_steps() {
        let beta = 0.9;
        let mut e = EmaState::new(&[0.0], beta, 10);
        for step in 1..=100u64 {
            let updated = ema_update(&mut e, &[1.0], step).unwrap();
            assert_eq!(updated, step % 10 == 0);
        }
        assert_eq!(e.updates_applied, 10);
        assert!((1.0 - e.shadow[0] - beta.powi(10)).abs() < 1e-12);
    }

    #[test]
    fn ema_matches_closed_form_weighted_history() {
        let beta: f64 = 0.7;
        let history = [0.3, -1.2, 2.5, 0.0, 4.0];
        let mut e = EmaState::new(&[1.0], beta, 1);
        for (i, p) in history.iter().enumerate() {
            ema_update(&mut e, &[*p], i as u64 + 1).unwrap();
        }
        let n = history.len() as i32;
        let mut expect = beta.powi(n) * 1.0;
        for (k, p) in history.iter().enumerate() {
            expect += (1.0 - beta) * beta.powi(n - 1 - k as i32) * p;
        }
        assert!((e.shadow[0] - expect).abs() < 1e-12);
        assert!(ema_update(&mut e, &[1.0], 0).is_err());
    }
}
