use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Optimization and batching settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: usize,
    pub rays: usize,
    pub samples: usize,
    pub lr: f64,
    pub seed: u64,
    /// Memory frames are `t − Δ` and `t + Δ`.
    pub memory_offset: usize,
    /// Share of rays drawn from the dilated body mask.
    pub foreground_fraction: f64,
    /// Dilation of the body mask used for ray sampling, pixels.
    pub mask_dilation: usize,
    pub precision: Precision,
    /// Log the running loss every this many steps (0 disables).
    pub log_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            steps: 2000,
            rays: 1024,
            samples: 64,
            lr: 5e-4,
            seed: 0,
            memory_offset: 5,
            foreground_fraction: 0.8,
            mask_dilation: 2,
            precision: Precision::F32,
            log_every: 50,
        }
    }
}

/// Which subjects, frames and cameras each protocol uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    /// Half-open `[start, end)` frame ranges.
    pub train_frames: [usize; 2],
    pub test_frames: [usize; 2],
    /// Cameras whose images the field is conditioned on.
    pub input_views: Vec<usize>,
    /// Input views a training step may hold out as its query; empty means
    /// all of them.
    pub query_views: Vec<usize>,
    /// Cameras rendered and scored at evaluation.
    pub eval_views: Vec<usize>,
    /// Evaluate every n-th frame of a range.
    pub eval_frame_stride: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_subjects: (0..6).map(crate::synth::subject_name).collect(),
            test_subjects: (6..8).map(crate::synth::subject_name).collect(),
            train_frames: [0, 20],
            test_frames: [20, 30],
            input_views: vec![0, 1, 2],
            query_views: Vec::new(),
            eval_views: vec![3],
            eval_frame_stride: 1,
        }
    }
}

/// Everything a training run is defined by; embedded in checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub split: SplitConfig,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.steps == 0 || t.rays == 0 || t.samples == 0 || t.memory_offset == 0 {
            return Err(Error::invalid("steps, rays, samples and memory_offset must be at least 1"));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", t.lr)));
        }
        if !(0.0..=1.0).contains(&t.foreground_fraction) {
            return Err(Error::invalid("foreground_fraction must lie in [0, 1]"));
        }
        let s = &self.split;
        for (name, r) in [("train_frames", s.train_frames), ("test_frames", s.test_frames)] {
            if r[0] >= r[1] {
                return Err(Error::invalid(format!("{name} range {r:?} is empty")));
            }
        }
        if s.input_views.len() < 2 {
            return Err(Error::invalid(
                "need at least two input views (one is held out as the training query)",
            ));
        }
        if let Some(q) = s.query_views.iter().find(|q| !s.input_views.contains(q)) {
            return Err(Error::invalid(format!("query view {q} is not an input view")));
        }
        if s.eval_views.iter().any(|v| s.input_views.contains(v)) {
            return Err(Error::invalid("evaluation views must not be input views"));
        }
        if s.eval_frame_stride == 0 {
            return Err(Error::invalid("eval_frame_stride must be at least 1"));
        }
        if s.train_subjects.is_empty() {
            return Err(Error::invalid("no training subjects"));
        }
        Ok(())
    }

    pub fn memory_offsets(&self) -> [isize; 2] {
        let d = self.train.memory_offset as isize;
        [-d, d]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_defaults() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = TrainConfig::from_toml("[model]\nablation = \"Sk+Px\"\n[train]\nsteps = 7\n").unwrap();
        assert_eq!(partial.train.steps, 7);
        assert_eq!(partial.train.rays, 1024);
        assert!(!partial.model.ablation.temporal);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(TrainConfig::from_toml("[train]\nstepz = 3\n").is_err());
        assert!(TrainConfig::from_toml("[train]\nrays = 0\n").is_err());
        assert!(TrainConfig::from_toml("[model]\nablation = \"Px+T\"\n").is_err());
        assert!(TrainConfig::from_toml("[split]\ninput_views = [0, 1]\neval_views = [1]\n").is_err());
        assert!(TrainConfig::from_toml("[split]\nquery_views = [3]\n").is_err());
        assert!(TrainConfig::from_toml("[split]\ntrain_frames = [5, 5]\n").is_err());
    }
}
