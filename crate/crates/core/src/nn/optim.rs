use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdCosineConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdCosineConfig {
    fn default() -> Self {
        SgdCosineConfig {
            lr_max: 0.1,
            lr_min: 0.0,
            total_steps: 1,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl SgdCosineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max >= self.lr_min && self.lr_min >= 0.0) {
            return Err(Error::Config(format!(
                "need lr_max >= lr_min >= 0, got {} and {}",
                self.lr_max, self.lr_min
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!("negative weight decay {}", self.weight_decay)));
        }
        Ok(())
    }

    /// Cosine-annealed learning rate for `step` in `[0, total_steps)`.
    pub fn lr(&self, step: usize) -> Result<f64> {
        if step >= self.total_steps {
            return Err(Error::ScheduleExhausted {
                step,
                total: self.total_steps,
            });
        }
        let progress = step as f64 / self.total_steps as f64;
        Ok(self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (PI * progress).cos()))
    }
}

/// SGD with momentum, coupled weight decay and a cosine schedule.
#[derive(Clone, Debug)]
pub struct SgdCosine<T: Element = f32> {
    cfg: SgdCosineConfig,
    velocity: HashMap<String, Vec<T>>,
}

impl<T: Element> SgdCosine<T> {
    pub fn new(cfg: SgdCosineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(SgdCosine {
            cfg,
            velocity: HashMap::new(),
        })
    }

    pub fn config(&self) -> &SgdCosineConfig {
        &self.cfg
    }

    /// Applies one update to every parameter that has a gradient and returns
    /// the learning rate used. Parameters without a gradient are left alone.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<T>>,
        grads: &HashMap<String, Tensor<T>>,
        step: usize,
    ) -> Result<f64> {
        let lr = self.cfg.lr(step)?;
        let (lr_t, mom, wd) = (T::of(lr), T::of(self.cfg.momentum), T::of(self.cfg.weight_decay));
        for (name, param) in params.iter_mut() {
            let Some(grad) = grads.get(name) else { continue };
            if grad.shape() != param.shape() {
                return Err(Error::InvalidShape(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    grad.shape(),
                    param.shape()
                )));
            }
            let buf = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![T::zero(); param.numel()]);
            let updated: Vec<T> = param
                .data()
                .iter()
                .zip(grad.data())
                .zip(buf.iter_mut())
                .map(|((&p, &g), v)| {
                    *v = mom * *v + (g + wd * p);
                    p - lr_t * *v
                })
                .collect();
            *param = Tensor::from_vec(param.shape().to_vec(), updated)?;
        }
        Ok(lr)
    }
}

/// Functional form of one optimizer step over freshly zeroed momentum.
pub fn sgd_cosine_step<T: Element>(
    params: &BTreeMap<String, Tensor<T>>,
    grads: &HashMap<String, Tensor<T>>,
    step: usize,
    cfg: &SgdCosineConfig,
) -> Result<BTreeMap<String, Tensor<T>>> {
    let mut opt = SgdCosine::new(cfg.clone())?;
    let mut out = params.clone();
    opt.step(&mut out, grads, step)?;
    Ok(out)
}
