//! `key = value` run configuration. Blank lines and `#` comments are
//! ignored. Values resolve as command-line flag, then config file, then the
//! built-in default.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{CzslSetting, Phase, SynthConfig};
use crate::error::{Error, Result};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub data_dir: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub setting: CzslSetting,
    pub phase: Phase,
    pub feasibility_threshold: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            data_dir: None,
            features: None,
            out: None,
            checkpoint: None,
            setting: CzslSetting::Generalized,
            phase: Phase::Test,
            feasibility_threshold: None,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

/// Parse `key = value` lines, keeping order.
pub fn parse_pairs(text: &str, file: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("{file}:{}: expected 'key = value', got '{line}'", i + 1))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("{file}:{}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl RunConfig {
    /// Apply one setting; unknown keys are a configuration error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.train.set(key, value)? {
            if key == "seed" {
                self.synth.seed = self.train.seed;
            }
            return Ok(());
        }
        let path = || Some(PathBuf::from(value));
        match key {
            "data_dir" => self.data_dir = path(),
            "features" => self.features = path(),
            "out" => self.out = path(),
            "checkpoint" => self.checkpoint = path(),
            "setting" => self.setting = value.parse()?,
            "phase" => self.phase = value.parse()?,
            "feasibility_threshold" => {
                self.feasibility_threshold = match value {
                    "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            "attrs" => self.synth.n_attrs = num(key, value)?,
            "objs" => self.synth.n_objs = num(key, value)?,
            "d_img" => self.synth.d_img = num(key, value)?,
            "noise" => self.synth.noise = num(key, value)?,
            "images_per_pair" => self.synth.images_per_pair = num(key, value)?,
            "unseen_frac" => self.synth.unseen_frac = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key '{key}'"))),
        }
        Ok(())
    }

    /// Defaults, then `file`, then `overrides` in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut c = Self {
            synth: SynthConfig {
                seed: TrainConfig::default().seed,
                ..SynthConfig::default()
            },
            ..Self::default()
        };
        if let Some(p) = file {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            for (k, v) in parse_pairs(&text, &p.display().to_string())? {
                c.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        Ok(c)
    }

    /// Keys echoed into checkpoints and reports. Paths are left out so the
    /// bytes do not depend on where a run reads or writes.
    pub fn echo(&self) -> Vec<(String, String)> {
        let mut v = self.train.entries();
        v.push(("setting".into(), self.setting.to_string()));
        v.push(("phase".into(), self.phase.to_string()));
        v.push((
            "feasibility_threshold".into(),
            self.feasibility_threshold.map_or("none".into(), |t| t.to_string()),
        ));
        v
    }
}
