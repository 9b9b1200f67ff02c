//! Bias-corrected Adam over flat parameter blocks.

use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.0025,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Parameter storage types Adam can update; arithmetic is always f64.
pub trait Param: Copy {
    fn get(self) -> f64;
    fn put(v: f64) -> Self;
}

impl Param for f32 {
    fn get(self) -> f64 {
        self as f64
    }
    fn put(v: f64) -> Self {
        v as f32
    }
}

impl Param for f64 {
    fn get(self) -> f64 {
        self
    }
    fn put(v: f64) -> Self {
        v
    }
}

/// Moments and step counter for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step<P: Param>(&mut self, params: &mut [P], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "Adam block of {} entries got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            if self.m[i] == 0.0 {
                continue;
            }
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] = P::put(params[i].get() - c.lr * mhat / (vhat.sqrt() + c.eps));
        }
        Ok(())
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.u32(self.m.len() as u32);
        w.u32((self.step >> 32) as u32);
        w.u32(self.step as u32);
        w.f64s(&[self.config.lr, self.config.beta1, self.config.beta2, self.config.eps]);
        w.f64s(&self.m);
        w.f64s(&self.v);
    }

    pub(crate) fn read(r: &mut Reader) -> Result<Self> {
        let len = r.u32()? as usize;
        let step = ((r.u32()? as u64) << 32) | r.u32()? as u64;
        let c = r.f64s(4)?;
        Ok(Self {
            config: AdamConfig {
                lr: c[0],
                beta1: c[1],
                beta2: c[2],
                eps: c[3],
            },
            step,
            m: r.f64s(len)?,
            v: r.f64s(len)?,
        })
    }
}
