//! Plain SGD and Adam with decoupled weight decay.

use crate::error::{Error, Result};

fn check_shapes(params: &[f64], grads: &[f64]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::param(format!(
            "gradient length {} does not match parameter length {}",
            grads.len(),
            params.len()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Self { lr }
    }

    /// `θ ← θ − lr·g`
    pub fn step(&self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_shapes(params, grads)?;
        for (p, g) in params.iter_mut().zip(grads) {
            *p -= self.lr * g;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Adam state for one flat parameter vector. Weight decay is decoupled:
/// `θ ← θ − lr·wd·θ` is applied before the moment-based step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_shapes(params, grads)?;
        if params.len() != self.m.len() {
            return Err(Error::param(format!(
                "Adam state sized for {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            params[i] -= c.lr * c.weight_decay * params[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            params[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_null_update_and_arithmetic() {
        let sgd = Sgd::new(0.1);
        let mut p = vec![1.0, -2.0];
        sgd.step(&mut p, &[0.0, 0.0]).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        let mut p = vec![1.0];
        sgd.step(&mut p, &[2.0]).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
        assert!(sgd.step(&mut p, &[1.0, 2.0]).is_err());
    }

    /// Textbook bias-corrected Adam step with decoupled decay, one scalar.
    fn adam_oracle(theta: f64, g: f64, t: i32, m0: f64, v0: f64, c: AdamConfig) -> (f64, f64, f64) {
        let decayed = theta - c.lr * c.weight_decay * theta;
        let m = c.beta1 * m0 + (1.0 - c.beta1) * g;
        let v = c.beta2 * v0 + (1.0 - c.beta2) * g * g;
        let mh = m / (1.0 - c.beta1.powi(t));
        let vh = v / (1.0 - c.beta2.powi(t));
        (decayed - c.lr * mh / (vh.sqrt() + c.eps), m, v)
    }

    #[test]
    fn adam_first_steps_match_scalar_oracle() {
        let c = AdamConfig::default();
        let mut state = AdamState::new(c, 2);
        let mut p = vec![0.5, -1.5];
        let grads = [[0.2, -0.03], [0.1, 0.4]];
        let mut expect = [(0.5, 0.0, 0.0), (-1.5, 0.0, 0.0)];
        for (t, g) in grads.iter().enumerate() {
            state.step(&mut p, g).unwrap();
            for k in 0..2 {
                let (th, m, v) = expect[k];
                expect[k] = adam_oracle(th, g[k], t as i32 + 1, m, v, c);
                assert!((p[k] - expect[k].0).abs() < 1e-15, "{} vs {}", p[k], expect[k].0);
            }
        }
        assert_eq!(state.steps(), 2);
        // first step from zero moments moves by ~lr·sign(g) beyond decay
        let first = adam_oracle(0.5, 0.2, 1, 0.0, 0.0, c).0;
        assert!((first - (0.5 - 1e-3 * 0.05 * 0.5 - 1e-3 * 0.2 / (0.2 + 1e-8))).abs() < 1e-16);
    }

    #[test]
    fn adam_is_deterministic() {
        let c = AdamConfig::default();
        let run = || {
            let mut s = AdamState::new(c, 3);
            let mut p = vec![0.1, 0.2, 0.3];
            for i in 0..5 {
                let g = [0.01 * i as f64, -0.3, 0.7];
                s.step(&mut p, &g).unwrap();
            }
            p
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }
}
