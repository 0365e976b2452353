use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::checkpoint::Section;
use crate::error::{Result, ShtError};

/// Adam over a fixed set of named variables. Variables absent from a
/// gradient store are left untouched, moments included.
#[derive(Debug)]
pub struct Adam {
    vars: Vec<(String, Var)>,
    betas: [f64; 2],
    eps: f64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    steps: BTreeMap<String, u64>,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, betas: [f64; 2], eps: f64) -> Self {
        Self { vars, betas, eps, m: BTreeMap::new(), v: BTreeMap::new(), steps: BTreeMap::new() }
    }

    pub fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    /// Applies one update with learning rate `lr`; returns how many variables moved.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<usize> {
        let [b1, b2] = self.betas;
        let mut n = 0;
        for (name, var) in &self.vars {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = g.detach();
            let m = match self.m.get(name) {
                Some(m) => ((m * b1)? + (&g * (1.0 - b1))?)?,
                None => (&g * (1.0 - b1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * b2)? + (g.sqr()? * (1.0 - b2))?)?,
                None => (g.sqr()? * (1.0 - b2))?,
            };
            let t = self.steps.get(name).copied().unwrap_or(0) + 1;
            let m_hat = (&m / (1.0 - b1.powi(t as i32)))?;
            let v_hat = (&v / (1.0 - b2.powi(t as i32)))?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
            self.steps.insert(name.clone(), t);
            n += 1;
        }
        Ok(n)
    }

    /// Moments as a checkpoint section (`m.<name>`, `v.<name>`, `t.<name>`).
    pub fn state(&self) -> Result<Section> {
        let mut out = Section::new();
        for (name, m) in &self.m {
            out.insert(format!("m.{name}"), m.clone());
            out.insert(format!("v.{name}"), self.v[name].clone());
            let t = self.steps[name] as f32;
            out.insert(format!("t.{name}"), Tensor::new(&[t], m.device())?);
        }
        Ok(out)
    }

    pub fn load_state(&mut self, section: &Section) -> Result<()> {
        self.m.clear();
        self.v.clear();
        self.steps.clear();
        for (key, t) in section {
            let (kind, name) = key.split_once('.').ok_or_else(|| ShtError::Checkpoint(format!("bad optimizer key `{key}`")))?;
            if !self.vars.iter().any(|(n, _)| n == name) {
                return Err(ShtError::Checkpoint(format!("optimizer state for unknown parameter `{name}`")));
            }
            match kind {
                "m" => {
                    self.m.insert(name.to_string(), t.clone());
                }
                "v" => {
                    self.v.insert(name.to_string(), t.clone());
                }
                "t" => {
                    self.steps.insert(name.to_string(), t.to_vec1::<f32>()?[0] as u64);
                }
                _ => return Err(ShtError::Checkpoint(format!("bad optimizer key `{key}`"))),
            }
        }
        Ok(())
    }
}

/// Base rate halved at each fraction of the phase in `decay_at`.
pub fn scheduled_lr(base: f64, step: usize, total: usize, decay_at: &[f64]) -> f64 {
    let progress = step as f64 / total.max(1) as f64;
    let halvings = decay_at.iter().filter(|&&f| progress >= f).count();
    base * 0.5f64.powi(halvings as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn minimizes_a_quadratic() {
        let x = Var::new(&[3.0f32, -2.0], &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![("x".into(), x.clone())], [0.9, 0.999], 1e-8);
        for _ in 0..400 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap(), 0.05).unwrap();
        }
        let v: Vec<f32> = x.as_tensor().to_vec1().unwrap();
        assert!(v.iter().all(|a| a.abs() < 1e-2), "{v:?}");
    }

    #[test]
    fn first_step_moves_by_lr() {
        let x = Var::new(&[1.0f32], &Device::Cpu).unwrap();
        let mut opt = Adam::new(vec![("x".into(), x.clone())], [0.9, 0.999], 1e-8);
        let loss = (x.as_tensor() * 5.0).unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap(), 0.1).unwrap();
        let v: f32 = x.as_tensor().to_vec1::<f32>().unwrap()[0];
        assert!((v - 0.9).abs() < 1e-6);
    }

    #[test]
    fn schedule_halves() {
        let d = [0.6, 0.85];
        assert_eq!(scheduled_lr(1.0, 0, 100, &d), 1.0);
        assert_eq!(scheduled_lr(1.0, 59, 100, &d), 1.0);
        assert_eq!(scheduled_lr(1.0, 60, 100, &d), 0.5);
        assert_eq!(scheduled_lr(1.0, 85, 100, &d), 0.25);
    }
}
