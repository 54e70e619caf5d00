//! Hyperparameters, loadable from a TOML file.
//!
//! Every section has defaults, so a config file only needs the keys it changes:
//!
//! ```toml
//! [sfr]
//! channels = 32
//!
//! [train]
//! steps = 500
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SfrConfig {
    pub num_dense_groups: usize,
    pub blocks_per_group: usize,
    pub channels: usize,
    pub expansion: usize,
    pub se_reduction: usize,
    pub num_experts: usize,
    pub recursion_depth: usize,
    /// Scale-aware adaption after every dense group.
    pub use_sfa: bool,
    /// Dense concatenation inside groups; plain chaining when off.
    pub use_dense: bool,
}

impl Default for SfrConfig {
    fn default() -> Self {
        SfrConfig {
            num_dense_groups: 3,
            blocks_per_group: 4,
            channels: 64,
            expansion: 4,
            se_reduction: 16,
            num_experts: 4,
            recursion_depth: 2,
            use_sfa: true,
            use_dense: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SfdConfig {
    /// Smallest selectable valid frequency point.
    pub action_min: usize,
    /// Largest selectable valid frequency point.
    pub action_max: usize,
    pub hidden: usize,
    /// Entropy bonus weight.
    pub beta: f64,
    /// Multiplier applied to block coefficients before they enter the state.
    pub state_scale: f64,
    /// When set, every block uses this action and the policy is bypassed.
    pub fixed_action: Option<usize>,
}

impl Default for SfdConfig {
    fn default() -> Self {
        SfdConfig {
            action_min: 1,
            action_max: 13,
            hidden: 128,
            beta: 0.01,
            state_scale: 0.125,
            fixed_action: None,
        }
    }
}

impl SfdConfig {
    pub fn num_actions(&self) -> usize {
        self.action_max + 1 - self.action_min
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    /// Crop stride when building the patch manifest.
    pub patch_stride: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Weight of the pairwise-orthogonality term of the basis loss.
    pub lambda_orth: f64,
    /// Weight of the variance-matching term of the basis loss.
    pub mu_var: f64,
    /// Weight of the actor-critic loss in the total.
    pub omega: f64,
    pub seed: u64,
    /// Batches queued ahead of the optimizer.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 16,
            patch_size: 96,
            patch_stride: 32,
            lr: 2e-4,
            lr_floor: 1e-6,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lambda_orth: 1e-3,
            mu_var: 1e-3,
            omega: 0.1,
            seed: 0,
            prefetch: 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub sfr: SfrConfig,
    pub sfd: SfdConfig,
    pub train: TrainConfig,
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(Error::Config(format!("{name} must be positive")))
    } else {
        Ok(())
    }
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.sfr;
        positive("sfr.num_dense_groups", s.num_dense_groups)?;
        positive("sfr.blocks_per_group", s.blocks_per_group)?;
        positive("sfr.channels", s.channels)?;
        positive("sfr.expansion", s.expansion)?;
        positive("sfr.se_reduction", s.se_reduction)?;
        positive("sfr.num_experts", s.num_experts)?;
        positive("sfr.recursion_depth", s.recursion_depth)?;
        if s.channels % s.se_reduction != 0 {
            return Err(Error::Config(format!(
                "sfr.channels ({}) must be divisible by sfr.se_reduction ({})",
                s.channels, s.se_reduction
            )));
        }
        let d = &self.sfd;
        if d.action_min == 0 || d.action_min > d.action_max || d.action_max > 64 {
            return Err(Error::Config(format!(
                "action range [{}, {}] must satisfy 1 <= min <= max <= 64",
                d.action_min, d.action_max
            )));
        }
        if let Some(a) = d.fixed_action {
            if a == 0 || a > 64 {
                return Err(Error::Config(format!("fixed_action {a} outside [1, 64]")));
            }
        }
        positive("sfd.hidden", d.hidden)?;
        if !(d.beta >= 0.0 && d.beta.is_finite()) {
            return Err(Error::Config(
                "sfd.beta must be a finite nonnegative number".into(),
            ));
        }
        let t = &self.train;
        positive("train.batch_size", t.batch_size)?;
        positive("train.patch_stride", t.patch_stride)?;
        if t.patch_size == 0 || t.patch_size % 8 != 0 {
            return Err(Error::Config(
                "train.patch_size must be a positive multiple of 8".into(),
            ));
        }
        if !(t.lr > 0.0 && t.lr_floor >= 0.0 && t.lr_floor <= t.lr) {
            return Err(Error::Config(
                "need 0 <= train.lr_floor <= train.lr and lr > 0".into(),
            ));
        }
        for (name, v) in [
            ("train.lambda_orth", t.lambda_orth),
            ("train.mu_var", t.mu_var),
            ("train.omega", t.omega),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and nonnegative"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = Config::from_toml_str("[sfr]\nchannels = 32\n[train]\nsteps = 7\n").unwrap();
        assert_eq!(cfg.sfr.channels, 32);
        assert_eq!(cfg.sfr.num_dense_groups, 3);
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.sfd.action_max, 13);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = Config::default();
        cfg.sfd.fixed_action = Some(3);
        let back = Config::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(
            Config::from_toml_str("[sfr]\nchannels = 30\n"),
            Err(Error::Config(_))
        ));
        assert!(Config::from_toml_str("[sfd]\naction_min = 0\n").is_err());
        assert!(Config::from_toml_str("[train]\nbogus = 1\n").is_err());
        assert!(Config::from_toml_str("[train]\npatch_size = 90\n").is_err());
    }
}
