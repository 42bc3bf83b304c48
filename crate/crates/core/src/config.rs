//! Run configuration. Every field can come from a JSON file and be
//! overridden on the command line.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::read_file;
use crate::error::{Error, Result};
use crate::losses::WgForm;
use crate::net::{Activation, OptimizerConfig};

/// Which loss terms participate. Turning `self_training` off skips stage two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Switches {
    pub kd: bool,
    pub mix: bool,
    pub im: bool,
    pub sr: bool,
    #[serde(rename = "self")]
    pub self_training: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Self {
            kd: true,
            mix: true,
            im: true,
            sr: true,
            self_training: true,
        }
    }
}

impl Switches {
    pub const NAMES: [&'static str; 5] = ["kd", "mix", "im", "sr", "self"];

    pub fn set(&mut self, name: &str, on: bool) -> Result<()> {
        match name {
            "kd" => self.kd = on,
            "mix" => self.mix = on,
            "im" => self.im = on,
            "sr" => self.sr = on,
            "self" => self.self_training = on,
            other => {
                return Err(Error::Config(format!(
                    "unknown loss `{other}` (expected one of kd, mix, im, sr, self)"
                )))
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionSchedule {
    /// Fuse at epoch 1 and again after every prompt refresh.
    #[default]
    OnPromptRefresh,
    /// Re-fuse at the start of every stage-one epoch.
    EveryEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrototypeMode {
    /// Every sample contributes to every prototype with its soft probability.
    #[default]
    Soft,
    /// Only samples predicted as class `c` contribute to prototype `c`.
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageSelection {
    #[default]
    Full,
    OneOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Total epochs `T`.
    pub epochs: usize,
    /// Stage-one epochs `T1`.
    pub stage_one_epochs: usize,
    pub batch_size: usize,
    pub epsilon: f64,
    pub zeta: f64,
    pub beta: f64,
    pub gamma: f64,
    pub gu_threshold: f64,
    /// Replace adaptive fusion with a constant weight on the ViL teacher.
    pub clip_weight: Option<f64>,
    pub prompt_period: usize,
    pub prompt_steps: usize,
    pub prompt_lr: f64,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub fusion_schedule: FusionSchedule,
    pub wg_form: WgForm,
    pub prototype_mode: PrototypeMode,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub switches: Switches,
    pub stage: StageSelection,
    pub threads: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            epochs: 35,
            stage_one_epochs: 25,
            batch_size: 64,
            epsilon: 0.6,
            zeta: 0.3,
            beta: 0.9,
            gamma: 0.84,
            gu_threshold: 0.05,
            clip_weight: None,
            prompt_period: 5,
            prompt_steps: 50,
            prompt_lr: 0.01,
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 1e-3,
            seed: 0,
            fusion_schedule: FusionSchedule::OnPromptRefresh,
            wg_form: WgForm::Cosine,
            prototype_mode: PrototypeMode::Soft,
            hidden: vec![64, 32],
            activation: Activation::Relu,
            switches: Switches::default(),
            stage: StageSelection::Full,
            threads: 1,
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_file(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr0: self.lr0,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.stage_one_epochs == 0 || self.stage_one_epochs >= self.epochs {
            return fail("need 0 < stage_one_epochs < epochs");
        }
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return fail("beta must lie in [0, 1]");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail("gamma must lie in (0, 1]");
        }
        if let Some(w) = self.clip_weight {
            if !(0.0..=1.0).contains(&w) {
                return fail("clip_weight must lie in [0, 1]");
            }
        }
        if self.prompt_period == 0 {
            return fail("prompt_period must be at least 1");
        }
        if self.threads == 0 {
            return fail("threads must be at least 1");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return fail("hidden layers must be non-empty with positive widths");
        }
        for (name, v) in [
            ("epsilon", self.epsilon),
            ("zeta", self.zeta),
            ("gu_threshold", self.gu_threshold),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite")));
            }
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return fail("lr0 must be positive");
        }
        if !(self.prompt_lr >= 0.0 && self.prompt_lr.is_finite()) {
            return fail("prompt_lr must be non-negative");
        }
        Ok(())
    }
}
