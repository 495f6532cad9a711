//! Plain SGD and AdamW (decoupled weight decay) over a [`ParamRegistry`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::ParamRegistry;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adamw {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    /// AdamW without weight decay; the learning rate is scaled up for toy models.
    fn default() -> Self {
        OptimizerConfig::Adamw {
            lr: 3e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(
                    format!("optimizer.{field}"),
                    format!("must be positive, got {v}"),
                ))
            }
        };
        match *self {
            OptimizerConfig::Sgd { lr } => positive("lr", lr),
            OptimizerConfig::Adamw {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                positive("lr", lr)?;
                positive("eps", eps)?;
                for (field, b) in [("beta1", beta1), ("beta2", beta2)] {
                    if !(0.0..1.0).contains(&b) {
                        return Err(Error::config(
                            format!("optimizer.{field}"),
                            format!("must lie in [0, 1), got {b}"),
                        ));
                    }
                }
                if !(weight_decay.is_finite() && weight_decay >= 0.0) {
                    return Err(Error::config(
                        "optimizer.weight_decay",
                        format!("must be nonnegative, got {weight_decay}"),
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn build(&self) -> Result<Optimizer> {
        self.validate()?;
        Ok(match *self {
            OptimizerConfig::Sgd { lr } => Optimizer::Sgd(Sgd { lr }),
            OptimizerConfig::Adamw {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => Optimizer::AdamW(AdamW::new(lr, beta1, beta2, eps, weight_decay)),
        })
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd(Sgd),
    AdamW(AdamW),
}

impl Optimizer {
    pub fn step(&mut self, registry: &mut ParamRegistry) -> Result<()> {
        match self {
            Optimizer::Sgd(o) => o.step(registry),
            Optimizer::AdamW(o) => o.step(registry),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step(&mut self, registry: &mut ParamRegistry) -> Result<()> {
        for p in registry.params_mut() {
            let grad = p
                .grad
                .as_ref()
                .ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
            for (w, g) in p.values.iter_mut().zip(grad) {
                *w -= self.lr * g;
            }
        }
        Ok(())
    }
}

/// Adam with weight decay applied directly to the weights:
///
/// ```text
/// w <- w - lr * wd * w
/// m <- b1 m + (1 - b1) g,   v <- b2 v + (1 - b2) g^2
/// w <- w - lr * m_hat / (sqrt(v_hat) + eps)
/// ```
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, registry: &mut ParamRegistry) -> Result<()> {
        if self.m.is_empty() {
            self.m = registry
                .params()
                .iter()
                .map(|p| vec![0.0; p.numel()])
                .collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((p, m), v) in registry
            .params_mut()
            .iter_mut()
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let grad = p
                .grad
                .as_ref()
                .ok_or_else(|| Error::MissingGradient(p.name.clone()))?;
            for (((w, g), m), v) in p
                .values
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *w -= self.lr * self.weight_decay * *w;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
