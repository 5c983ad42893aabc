//! AdamW with decoupled weight decay, and learning-rate schedules.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig, params: &ParamSet<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![T::zero(); t.numel()]).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// `p ← p·(1 − lr·wd)`, then the bias-corrected Adam update.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Vec<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Dimension {
                op: "adamw",
                left: vec![params.len()],
                right: vec![grads.len()],
            });
        }
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let decay = T::of(1.0 - lr * weight_decay);
        let (lr_t, eps_t, c1, c2) = (T::of(lr), T::of(eps), T::of(c1), T::of(c2));

        for (i, g) in grads.iter().enumerate() {
            let p = &params.tensors()[i];
            if g.len() != p.numel() {
                return Err(Error::Dimension {
                    op: "adamw",
                    left: p.shape().to_vec(),
                    right: vec![g.len()],
                });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data: Vec<T> = p
                .data()
                .iter()
                .zip(g)
                .enumerate()
                .map(|(j, (&w, &gj))| {
                    m[j] = b1 * m[j] + (T::one() - b1) * gj;
                    v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                    let mhat = m[j] / c1;
                    let vhat = v[j] / c2;
                    w * decay - lr_t * mhat / (vhat.sqrt() + eps_t)
                })
                .collect();
            params.set_data(i, data)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Plateau,
    Constant,
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Plateau => "plateau",
            ScheduleKind::Constant => "constant",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "plateau" => Ok(ScheduleKind::Plateau),
            "constant" => Ok(ScheduleKind::Constant),
            other => Err(param_err(format!("unknown schedule `{other}`"))),
        }
    }
}

pub const PLATEAU_PATIENCE: usize = 5;
pub const PLATEAU_THRESHOLD: f64 = 1e-4;
pub const PLATEAU_FACTOR: f64 = 0.5;

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·epoch/epochs))`
pub fn cosine_lr(epoch: usize, epochs: usize, lr_max: f64, lr_min: f64) -> f64 {
    let frac = epoch as f64 / epochs.max(1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * frac).cos())
}

/// Per-epoch learning rate; plateau state advances through [`Self::observe`].
#[derive(Clone, Debug)]
pub struct Scheduler {
    kind: ScheduleKind,
    lr_max: f64,
    lr_min: f64,
    epochs: usize,
    lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl Scheduler {
    pub fn new(kind: ScheduleKind, lr_max: f64, lr_min: f64, epochs: usize) -> Result<Self> {
        if !(lr_max > 0.0) || lr_min < 0.0 || lr_min > lr_max {
            return Err(param_err(format!("invalid learning rates max={lr_max} min={lr_min}")));
        }
        Ok(Self {
            kind,
            lr_max,
            lr_min,
            epochs,
            lr: lr_max,
            best: f64::INFINITY,
            bad_epochs: 0,
        })
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        match self.kind {
            ScheduleKind::Cosine => cosine_lr(epoch, self.epochs, self.lr_max, self.lr_min),
            ScheduleKind::Plateau => self.lr,
            ScheduleKind::Constant => self.lr_max,
        }
    }

    /// Halves the plateau rate once validation loss has failed to improve by
    /// [`PLATEAU_THRESHOLD`] for [`PLATEAU_PATIENCE`] consecutive epochs.
    pub fn observe(&mut self, val_loss: f64) {
        if val_loss < self.best - PLATEAU_THRESHOLD {
            self.best = val_loss;
            self.bad_epochs = 0;
            return;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= PLATEAU_PATIENCE {
            self.lr = (self.lr * PLATEAU_FACTOR).max(self.lr_min);
            self.bad_epochs = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(p: f64) -> ParamSet<f64> {
        let mut s = ParamSet::new();
        s.push("p", Tensor::new(vec![1], vec![p]).unwrap());
        s
    }

    #[test]
    fn decoupled_decay_only() {
        let mut p = single(2.0);
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[vec![0.0]], 0.5).unwrap();
        assert_eq!(p.tensors()[0].data()[0], 2.0 * (1.0 - 0.5 * 0.1));

        let mut p = single(2.0);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..cfg }, &p);
        opt.step(&mut p, &[vec![0.0]], 0.5).unwrap();
        assert_eq!(p.tensors()[0].data()[0], 2.0);
    }

    #[test]
    fn first_step_on_square() {
        // f(p) = p², p = 1: g = 2, m̂ = 2, v̂ = 4, p' = 1 − 0.1·2/(2 + 1e-8)
        let mut p = single(1.0);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[vec![2.0]], 0.1).unwrap();
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p.tensors()[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = single(1.0);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        assert!(opt.step(&mut p, &[vec![1.0, 2.0]], 0.1).is_err());
        assert!(opt.step(&mut p, &[], 0.1).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 10, 1e-3, 1e-5), 1e-3);
        assert!((cosine_lr(10, 10, 1e-3, 1e-5) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn plateau() {
        let mut s = Scheduler::new(ScheduleKind::Plateau, 1.0, 0.0, 100).unwrap();
        for e in 0..20 {
            s.observe(10.0 - e as f64);
            assert_eq!(s.lr(e + 1), 1.0);
        }
        for _ in 0..PLATEAU_PATIENCE {
            s.observe(100.0);
        }
        assert_eq!(s.lr(0), 0.5);
        assert!("linear".parse::<ScheduleKind>().is_err());
    }
}
