//! Run configuration. Every command snapshots the exact config it used
//! into its output directory.

use std::fs;
use std::path::{Path, PathBuf};

use avalign::clustering::Stiffness;
use avalign::counting::CounterConfig;
use avalign::rng::derive_seed;
use avalign::separation::{GuidanceKind, SeparatorConfig, SeparatorTrainConfig};
use avalign::trainer::{StageConfig, DEFAULT_BASE_LR};
use serde::{Deserialize, Serialize};

use crate::error::{validation, CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Scene archive written by `synth`.
    pub archive: Option<PathBuf>,
    /// Share of each stage held out for evaluation.
    pub eval_fraction: f64,
    /// Caps the scenes taken from each stage, before the split.
    pub max_scenes_per_stage: Option<usize>,
    pub model: ModelKind,
    pub cavl: CavlConfig,
    pub counter: CountConfig,
    pub separator: SeparateConfig,
    pub localize: LocalizeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            archive: None,
            eval_fraction: 0.2,
            max_scenes_per_stage: None,
            model: ModelKind::Cavl,
            cavl: CavlConfig::default(),
            counter: CountConfig::default(),
            separator: SeparateConfig::default(),
            localize: LocalizeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Cavl,
    Separator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CavlConfig {
    pub stages: Vec<usize>,
    pub base_lr: f64,
    /// Divide the rate by ten at each later stage.
    pub stage_decay: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub margin: f64,
    pub beta: Stiffness,
    pub em_iters: usize,
    pub negatives_per_positive: usize,
    pub momentum: f64,
    pub grad_clip: Option<f64>,
    pub stop_at: Option<f64>,
}

impl Default for CavlConfig {
    fn default() -> Self {
        let s = StageConfig::new(1);
        Self {
            stages: vec![1, 2, 3],
            base_lr: DEFAULT_BASE_LR,
            stage_decay: true,
            epochs: s.epochs,
            batch_size: s.batch_size,
            margin: s.margin,
            beta: s.beta,
            em_iters: s.em_iters,
            negatives_per_positive: s.negatives_per_positive,
            momentum: s.momentum,
            grad_clip: s.grad_clip,
            stop_at: s.stop_at,
        }
    }
}

impl CavlConfig {
    pub fn stage(&self, j: usize, seed: u64) -> StageConfig {
        StageConfig {
            stage: j,
            lr: if self.stage_decay { avalign::trainer::stage_lr(self.base_lr, j) } else { self.base_lr },
            epochs: self.epochs,
            batch_size: self.batch_size,
            margin: self.margin,
            beta: self.beta,
            em_iters: self.em_iters,
            seed: derive_seed(seed, &[0x57A6E, j as u64]),
            negatives_per_positive: self.negatives_per_positive,
            momentum: self.momentum,
            grad_clip: self.grad_clip,
            stop_at: self.stop_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CountConfig {
    /// Stages whose scenes are used; counts equal the stage number.
    pub stages: Vec<usize>,
    pub train: CounterConfig,
}

impl Default for CountConfig {
    fn default() -> Self {
        Self { stages: vec![1, 2, 3, 4], train: CounterConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeparateConfig {
    /// Stage whose mixtures are separated.
    pub stage: usize,
    pub guidance: GuidanceKind,
    pub network: SeparatorConfig,
    pub train: SeparatorTrainConfig,
    /// WAV and mask files written for this many samples at eval time.
    pub examples: usize,
}

impl Default for SeparateConfig {
    fn default() -> Self {
        Self {
            stage: 2,
            guidance: GuidanceKind::MaskPooled,
            network: SeparatorConfig::desk(),
            train: SeparatorTrainConfig::default(),
            examples: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizeConfig {
    pub stage: usize,
    /// Heatmap images written for this many scenes.
    pub heatmaps: usize,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self { stage: 1, heatmaps: 8 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        serde_json::from_str(&text).map_err(|source| CliError::Config { path: path.to_path_buf(), source })
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return validation("eval_fraction must lie in [0, 1)");
        }
        if self.cavl.stages.is_empty() || self.cavl.stages.contains(&0) {
            return validation("stages are numbered from 1");
        }
        if self.cavl.stages.windows(2).any(|w| w[0] >= w[1]) {
            return validation("stages must be strictly increasing");
        }
        for &j in &self.cavl.stages {
            self.cavl.stage(j, self.seed).validate()?;
        }
        if self.counter.stages.is_empty() || self.counter.stages.iter().any(|&j| j == 0 || j > self.counter.train.y_max) {
            return validation(format!("counter stages must lie in 1..={}", self.counter.train.y_max));
        }
        self.separator.network.validate()?;
        if self.separator.stage < 2 {
            return validation("separation needs mixtures of at least two sources");
        }
        if self.localize.stage == 0 {
            return validation("stages are numbered from 1");
        }
        Ok(())
    }

    pub fn archive(&self) -> Result<&Path> {
        match &self.archive {
            Some(p) => Ok(p),
            None => validation("no scene archive configured (set \"archive\" in the config)"),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(CliError::io(path))
    }
}

/// Parses `1,2,3` into a stage list.
pub fn parse_stages(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Validation(format!("bad stage list {s:?}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"seed": 1, "sede": 2}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"cavl": {"epochz": 2}}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"seed": 5, "cavl": {"epochs": 2}}"#).unwrap();
        assert_eq!((c.seed, c.cavl.epochs, c.cavl.batch_size), (5, 2, 16));
    }

    #[test]
    fn snapshot_round_trips() {
        let c = RunConfig { seed: 9, archive: Some("a".into()), ..RunConfig::default() };
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        c.validate().unwrap();
    }

    #[test]
    fn stage_lists() {
        assert_eq!(parse_stages("1, 2,3").unwrap(), vec![1, 2, 3]);
        assert!(parse_stages("1,x").is_err());
        let mut c = RunConfig::default();
        c.cavl.stages = vec![2, 1];
        assert!(c.validate().is_err());
    }
}
