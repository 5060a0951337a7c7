use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::RobustError;

/// Direction of the iterated sign step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// `x ← x + α·sign(∇ₓJ(x, y))`
    AscendTrueLabel,
    /// `x ← x − α·sign(∇ₓJ(x, 1−y))`, a targeted step toward the other class.
    #[default]
    DescendAdverseLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FgsmConfig {
    pub alpha: f64,
    pub epsilon: f64,
    pub steps: usize,
    pub target_mode: TargetMode,
}

impl FgsmConfig {
    pub fn validate(&self) -> Result<(), RobustError> {
        // alpha = 0 is allowed: it is the identity attack.
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(RobustError::config("alpha", "must be finite and >= 0"));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(RobustError::config("epsilon", "must be finite and > 0"));
        }
        if self.steps == 0 {
            return Err(RobustError::config("steps", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyConfig {
    pub lambda: f64,
}

impl ConsistencyConfig {
    pub fn validate(&self) -> Result<(), RobustError> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(RobustError::config("lambda", "must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub block_edge: usize,
    /// Percent of blocks, inclusive range.
    pub p_range: (f64, f64),
    /// Probability of the random branch; the greedy branch has `1 − tau`.
    pub tau: f64,
    pub activation_epoch_fraction: f64,
    pub fill_value: f32,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            block_edge: 6,
            p_range: (10.0, 40.0),
            tau: 0.5,
            activation_epoch_fraction: 0.5,
            fill_value: 0.0,
        }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<(), RobustError> {
        let (lo, hi) = self.p_range;
        if !(lo > 0.0 && lo <= hi && hi <= 100.0) {
            return Err(RobustError::config("p_range", "need 0 < p_min <= p_max <= 100"));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(RobustError::config("tau", "must lie in [0, 1]"));
        }
        if self.block_edge == 0 {
            return Err(RobustError::config("block_edge", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.activation_epoch_fraction) {
            return Err(RobustError::config("activation_epoch_fraction", "must lie in [0, 1]"));
        }
        if !self.fill_value.is_finite() {
            return Err(RobustError::config("fill_value", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "fgsm")]
    Fgsm,
    #[serde(rename = "fgsm+mask")]
    FgsmMask,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Base, Strategy::Fgsm, Strategy::FgsmMask];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Base => "base",
            Strategy::Fgsm => "fgsm",
            Strategy::FgsmMask => "fgsm+mask",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "base" => Ok(Strategy::Base),
            "fgsm" => Ok(Strategy::Fgsm),
            "fgsm+mask" | "mask" => Ok(Strategy::FgsmMask),
            other => Err(format!("unknown strategy {other:?}, expected base, fgsm or fgsm+mask")),
        }
    }
}

/// Per-epoch learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// `lr · (1 + cos(π·e/epochs)) / 2` in epoch `e`, so the last epochs take
    /// small steps and the final model does not land on an oscillation.
    #[default]
    Cosine,
}

impl LrSchedule {
    pub fn lr(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => base * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos()),
        }
    }
}

/// Flat training configuration, readable from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    /// Global gradient-norm cap per step; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    pub alpha: f64,
    pub epsilon: f64,
    pub steps: usize,
    pub target_mode: TargetMode,
    pub lambda: f64,
    /// ε, α and λ ramp linearly from 0 over this fraction of the epochs; see
    /// [`TrainConfig::robust_weight`].
    pub robust_warmup_fraction: f64,
    pub tau: f64,
    pub p_range: (f64, f64),
    pub block_edge: usize,
    pub activation_epoch_fraction: f64,
    pub fill_value: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let mask = MaskSpec::default();
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            lr: 1e-3,
            lr_schedule: LrSchedule::default(),
            momentum: 0.9,
            grad_clip: 5.0,
            seed: 0,
            alpha: 0.005,
            epsilon: 0.01,
            steps: 2,
            target_mode: TargetMode::default(),
            lambda: 1.0,
            robust_warmup_fraction: 0.25,
            tau: mask.tau,
            p_range: mask.p_range,
            block_edge: mask.block_edge,
            activation_epoch_fraction: mask.activation_epoch_fraction,
            fill_value: mask.fill_value,
        }
    }
}

impl TrainConfig {
    pub fn fgsm(&self) -> FgsmConfig {
        FgsmConfig {
            alpha: self.alpha,
            epsilon: self.epsilon,
            steps: self.steps,
            target_mode: self.target_mode,
        }
    }

    pub fn consistency(&self) -> ConsistencyConfig {
        ConsistencyConfig { lambda: self.lambda }
    }

    /// Scale `min(1, e / (fraction · epochs))` applied to ε, α and λ in epoch
    /// `e`. An untrained network is so sensitive that the full attack makes
    /// going flat (constant output, zero input gradient) the cheapest way down;
    /// the ramp lets the classifier find real features first.
    pub fn robust_weight(&self, epoch: usize) -> f64 {
        let ramp = self.robust_warmup_fraction * self.epochs as f64;
        if ramp <= 0.0 {
            1.0
        } else {
            (epoch as f64 / ramp).min(1.0)
        }
    }

    pub fn mask(&self) -> MaskSpec {
        MaskSpec {
            block_edge: self.block_edge,
            p_range: self.p_range,
            tau: self.tau,
            activation_epoch_fraction: self.activation_epoch_fraction,
            fill_value: self.fill_value,
        }
    }

    pub fn validate(&self) -> Result<(), RobustError> {
        if self.batch_size == 0 {
            return Err(RobustError::config("batch_size", "must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(RobustError::config("lr", "must be finite and > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(RobustError::config("momentum", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.robust_warmup_fraction) {
            return Err(RobustError::config("robust_warmup_fraction", "must lie in [0, 1]"));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(RobustError::config("grad_clip", "must be finite and >= 0"));
        }
        self.fgsm().validate()?;
        self.consistency().validate()?;
        self.mask().validate()
    }

    pub fn from_toml_str(s: &str) -> Result<Self, RobustError> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| RobustError::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self, RobustError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RobustError::ConfigParse(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
