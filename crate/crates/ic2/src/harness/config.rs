//! Experiment configuration: flat `key = value` text, typed parsing, a
//! canonical echo for reproducibility, and the derived training-schedule
//! constants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::motivation::RewardVector;
use crate::worlds::TwoRoomConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {0}: expected `key = value`")]
    BadLine(usize),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {msg}")]
    BadValue { key: String, msg: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnvPreset {
    Normal,
    Large,
}

impl EnvPreset {
    pub fn two_room(self) -> TwoRoomConfig {
        match self {
            EnvPreset::Normal => TwoRoomConfig::normal(),
            EnvPreset::Large => TwoRoomConfig::large(),
        }
    }
}

impl fmt::Display for EnvPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvPreset::Normal => "normal",
            EnvPreset::Large => "large",
        })
    }
}

impl FromStr for EnvPreset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "normal" => Ok(EnvPreset::Normal),
            "large" => Ok(EnvPreset::Large),
            other => Err(format!("unknown environment preset `{other}`")),
        }
    }
}

/// Which reward drives the control policy (or which scripted policy
/// replaces it). `Exact*` variants read the exact-belief filter instead
/// of the learned model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    Ic2,
    Nc,
    Certainty,
    Infogain,
    Nci,
    SmirlObs,
    Random,
    Oracle,
    ExactIc2,
    ExactNc,
    ExactCertainty,
    ExactInfogain,
    ExactNci,
}

impl Objective {
    pub const ALL: [Objective; 13] = [
        Objective::Ic2,
        Objective::Nc,
        Objective::Certainty,
        Objective::Infogain,
        Objective::Nci,
        Objective::SmirlObs,
        Objective::Random,
        Objective::Oracle,
        Objective::ExactIc2,
        Objective::ExactNc,
        Objective::ExactCertainty,
        Objective::ExactInfogain,
        Objective::ExactNci,
    ];

    pub fn is_scripted(self) -> bool {
        matches!(self, Objective::Random | Objective::Oracle)
    }

    pub fn needs_exact_belief(self) -> bool {
        matches!(
            self,
            Objective::ExactIc2
                | Objective::ExactNc
                | Objective::ExactCertainty
                | Objective::ExactInfogain
                | Objective::ExactNci
        )
    }

    /// The scalar the control policy is trained on.
    pub fn reward_of(self, r: &RewardVector) -> f64 {
        match self {
            Objective::Ic2 | Objective::ExactIc2 => r.ne,
            Objective::Nc | Objective::ExactNc => r.nc,
            Objective::Certainty | Objective::ExactCertainty => r.c,
            Objective::Infogain | Objective::ExactInfogain => r.i,
            Objective::Nci | Objective::ExactNci => r.nci,
            Objective::SmirlObs => r.smirl,
            Objective::Random | Objective::Oracle => 0.0,
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Ic2 => "ic2",
            Objective::Nc => "nc",
            Objective::Certainty => "certainty",
            Objective::Infogain => "infogain",
            Objective::Nci => "nci",
            Objective::SmirlObs => "smirl_obs",
            Objective::Random => "random",
            Objective::Oracle => "oracle",
            Objective::ExactIc2 => "exact_ic2",
            Objective::ExactNc => "exact_nc",
            Objective::ExactCertainty => "exact_certainty",
            Objective::ExactInfogain => "exact_infogain",
            Objective::ExactNci => "exact_nci",
        })
    }
}

impl FromStr for Objective {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Objective::ALL
            .iter()
            .find(|o| o.to_string() == s)
            .copied()
            .ok_or_else(|| format!("unknown objective `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BeliefSource {
    Lssm,
    Exact,
}

impl fmt::Display for BeliefSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BeliefSource::Lssm => "lssm",
            BeliefSource::Exact => "exact",
        })
    }
}

impl FromStr for BeliefSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lssm" => Ok(BeliefSource::Lssm),
            "exact" => Ok(BeliefSource::Exact),
            other => Err(format!("unknown belief source `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LssmScale {
    Desk,
    Full,
}

impl fmt::Display for LssmScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LssmScale::Desk => "desk",
            LssmScale::Full => "full",
        })
    }
}

impl FromStr for LssmScale {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "desk" => Ok(LssmScale::Desk),
            "full" => Ok(LssmScale::Full),
            other => Err(format!("unknown lssm scale `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub env: EnvPreset,
    pub objective: Objective,
    pub belief: BeliefSource,
    /// Ensemble size K.
    pub ensemble: usize,
    /// Episodes collected per policy per round, N.
    pub episodes_per_policy: usize,
    /// Model minibatch size B.
    pub minibatch: usize,
    /// Model learning rate α0.
    pub model_lr: f64,
    /// PPO learning rate α1.
    pub ppo_lr: f64,
    /// Total environment-step budget.
    pub budget: u64,
    pub lssm_scale: LssmScale,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvPreset::Normal,
            objective: Objective::Ic2,
            belief: BeliefSource::Lssm,
            ensemble: 7,
            episodes_per_policy: 20,
            minibatch: 32,
            model_lr: 0.5e-4,
            ppo_lr: 1.0e-4,
            budget: 300_000,
            lssm_scale: LssmScale::Desk,
        }
    }
}

impl ExperimentConfig {
    /// Parse flat `key = value` text; `#` starts a comment. Unset keys
    /// keep their defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::BadLine(lineno + 1))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |msg: String| ConfigError::BadValue {
                key: key.to_string(),
                msg,
            };
            match key {
                "env" => cfg.env = value.parse().map_err(bad)?,
                "objective" => cfg.objective = value.parse().map_err(bad)?,
                "belief" => cfg.belief = value.parse().map_err(bad)?,
                "ensemble" => cfg.ensemble = value.parse().map_err(|e| bad(format!("{e}")))?,
                "episodes_per_policy" => {
                    cfg.episodes_per_policy =
                        value.parse().map_err(|e| bad(format!("{e}")))?
                }
                "minibatch" => cfg.minibatch = value.parse().map_err(|e| bad(format!("{e}")))?,
                "model_lr" => cfg.model_lr = value.parse().map_err(|e| bad(format!("{e}")))?,
                "ppo_lr" => cfg.ppo_lr = value.parse().map_err(|e| bad(format!("{e}")))?,
                "budget" => cfg.budget = value.parse().map_err(|e| bad(format!("{e}")))?,
                "lssm_scale" => cfg.lssm_scale = value.parse().map_err(bad)?,
                other => return Err(ConfigError::UnknownKey(other.to_string())),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.ensemble == 0
            || self.episodes_per_policy == 0
            || self.minibatch == 0
            || self.budget == 0
        {
            return Err(ConfigError::Invalid(
                "all schedule constants must be positive".into(),
            ));
        }
        if self.model_lr <= 0.0 || self.ppo_lr <= 0.0 {
            return Err(ConfigError::Invalid("learning rates must be positive".into()));
        }
        let wants_exact = self.objective.needs_exact_belief();
        let has_exact = self.belief == BeliefSource::Exact;
        if wants_exact != has_exact && !self.objective.is_scripted() {
            return Err(ConfigError::Invalid(format!(
                "objective `{}` is incompatible with belief source `{}`",
                self.objective, self.belief
            )));
        }
        Ok(())
    }

    /// Canonical echo: every key, fixed order.
    pub fn canonical(&self) -> String {
        format!(
            "belief = {}\nbudget = {}\nensemble = {}\nenv = {}\nepisodes_per_policy = {}\nlssm_scale = {}\nminibatch = {}\nmodel_lr = {}\nobjective = {}\nppo_lr = {}\n",
            self.belief,
            self.budget,
            self.ensemble,
            self.env,
            self.episodes_per_policy,
            self.lssm_scale,
            self.minibatch,
            self.model_lr,
            self.objective,
            self.ppo_lr,
        )
    }

    /// FNV-1a over the canonical echo, hex.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.canonical().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }

    /// Episode length T of the configured environment.
    pub fn episode_len(&self) -> usize {
        self.env.two_room().episode_len
    }

    /// Round count M = ⌈budget / (2·N·T)⌉.
    pub fn rounds(&self) -> usize {
        let per_round = 2 * self.episodes_per_policy as u64 * self.episode_len() as u64;
        self.budget.div_ceil(per_round) as usize
    }

    /// Model minibatches per round, L = ⌈0.05·|D| / B⌉ for a dataset of
    /// `episodes` episodes.
    pub fn model_batches(&self, episodes: usize) -> usize {
        ((0.05 * episodes as f64) / self.minibatch as f64).ceil().max(1.0) as usize
    }
}
