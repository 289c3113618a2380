use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A named tensor that an optimizer may update unless `frozen`.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor, frozen: bool) -> Self {
        Self {
            name: name.into(),
            tensor,
            frozen,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!(
                "unknown optimizer '{other}' (expected sgd or adam)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    Cosine,
}

impl LrSchedule {
    /// Learning rate for 0-based `step` out of `total` steps.
    pub fn lr_at(self, base: f64, step: u64, total: u64) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let frac = if total == 0 {
                    0.0
                } else {
                    step.min(total) as f64 / total as f64
                };
                0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        })
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            other => Err(Error::Config(format!(
                "unknown lr schedule '{other}' (expected constant or cosine)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::sgd(lr)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    first: Vec<f64>,
    second: Vec<f64>,
}

/// Plain gradient descent or Adam, with state that can be exported into a
/// checkpoint and restored bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    moments: BTreeMap<String, Moments>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Apply one update. Frozen parameters are skipped regardless of their
    /// gradient; every other parameter must come with a same-shape gradient.
    pub fn step<'a>(
        &mut self,
        items: impl IntoIterator<Item = (&'a mut Parameter, Option<&'a Tensor>)>,
    ) -> Result<()> {
        let items: Vec<_> = items.into_iter().collect();
        for (p, g) in &items {
            if p.frozen {
                continue;
            }
            let g = g.ok_or_else(|| {
                Error::Contract(format!("missing gradient for trainable parameter '{}'", p.name))
            })?;
            if g.shape() != p.tensor.shape() {
                return Err(Error::shape("optimizer_step", p.tensor.shape(), g.shape()));
            }
        }
        self.steps += 1;
        let OptimizerConfig {
            kind,
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        for (p, g) in items {
            if p.frozen {
                continue;
            }
            let g = g.expect("checked above").data();
            match kind {
                OptimizerKind::Sgd => {
                    for (w, dw) in p.tensor.data_mut().iter_mut().zip(g) {
                        *w -= lr * dw;
                    }
                }
                OptimizerKind::Adam => {
                    let n = g.len();
                    let mom = self.moments.entry(p.name.clone()).or_insert_with(|| Moments {
                        first: vec![0.0; n],
                        second: vec![0.0; n],
                    });
                    let t = self.steps as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (i, w) in p.tensor.data_mut().iter_mut().enumerate() {
                        mom.first[i] = beta1 * mom.first[i] + (1.0 - beta1) * g[i];
                        mom.second[i] = beta2 * mom.second[i] + (1.0 - beta2) * g[i] * g[i];
                        let mhat = mom.first[i] / c1;
                        let vhat = mom.second[i] / c2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Moment buffers as `("m/<name>", tensor)` and `("v/<name>", tensor)` records.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (name, m) in &self.moments {
            let n = m.first.len();
            out.push((
                format!("m/{name}"),
                Tensor::new(vec![n], m.first.clone()).expect("moment length"),
            ));
            out.push((
                format!("v/{name}"),
                Tensor::new(vec![n], m.second.clone()).expect("moment length"),
            ));
        }
        out
    }

    pub fn restore(config: OptimizerConfig, steps: u64, records: &[(String, Tensor)]) -> Result<Self> {
        let mut firsts = BTreeMap::new();
        let mut seconds = BTreeMap::new();
        for (key, t) in records {
            if let Some(name) = key.strip_prefix("m/") {
                firsts.insert(name.to_string(), t.data().to_vec());
            } else if let Some(name) = key.strip_prefix("v/") {
                seconds.insert(name.to_string(), t.data().to_vec());
            } else {
                return Err(Error::Integrity {
                    record: key.clone(),
                    msg: "unknown optimizer state record".into(),
                });
            }
        }
        let mut moments = BTreeMap::new();
        for (name, first) in firsts {
            let second = seconds.remove(&name).ok_or_else(|| Error::Integrity {
                record: format!("v/{name}"),
                msg: "missing second-moment record".into(),
            })?;
            if second.len() != first.len() {
                return Err(Error::Integrity {
                    record: format!("v/{name}"),
                    msg: "moment lengths differ".into(),
                });
            }
            moments.insert(name, Moments { first, second });
        }
        if let Some(name) = seconds.keys().next() {
            return Err(Error::Integrity {
                record: format!("m/{name}"),
                msg: "missing first-moment record".into(),
            });
        }
        Ok(Self {
            config,
            steps,
            moments,
        })
    }
}
