//! The run configuration: one JSON document, unknown keys rejected.

use anyhow::{bail, Context, Result};
use klgrade::classify::{ClassifierConfig, InputMode};
use klgrade::curate::DEFAULT_SPLIT_FRACTIONS;
use klgrade::detect::DetectorConfig;
use klgrade::phantom::PhantomConfig;
use klgrade::rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub phantom: PhantomConfig,
    #[serde(default)]
    pub curate: CurateSection,
    #[serde(default)]
    pub detect: DetectSection,
    #[serde(default)]
    pub classify: ClassifySection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub seeds: SeedsSection,
    pub output_dir: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurateSection {
    pub split_fractions: [f64; 3],
}

impl Default for CurateSection {
    fn default() -> Self {
        CurateSection {
            split_fractions: DEFAULT_SPLIT_FRACTIONS,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectSection {
    pub model: DetectorConfig,
    /// Annotated knees per (view, side), drawn from the train, validation
    /// and test splits respectively.
    pub train_knees: usize,
    pub val_knees: usize,
    pub test_knees: usize,
    /// One model per view; left images are mirrored.
    pub shared_across_sides: bool,
}

impl Default for DetectSection {
    fn default() -> Self {
        DetectSection {
            model: DetectorConfig::default(),
            train_knees: 210,
            val_knees: 45,
            test_knees: 45,
            shared_across_sides: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMode {
    Detector,
    GroundTruth,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifySection {
    pub model: ClassifierConfig,
    pub modes: Vec<InputMode>,
    pub center_source: CenterMode,
}

impl Default for ClassifySection {
    fn default() -> Self {
        ClassifySection {
            model: ClassifierConfig::default(),
            modes: InputMode::ALL.to_vec(),
            center_source: CenterMode::Detector,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub reader_cases: usize,
    /// When false every simulated reader returns the reference grade.
    pub reader_noise: bool,
    /// Side of one heat-map cell in the PGM renderings.
    pub heatmap_cell_px: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            reader_cases: 204,
            reader_noise: true,
            heatmap_cell_px: 48,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedsSection {
    pub base: u64,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg = Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))?;
        Ok((cfg, text))
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.detect.model.validate()?;
        self.classify.model.validate()?;
        if self.classify.modes.is_empty() {
            bail!("classify.modes must name at least one of lat, pa, multi");
        }
        let mut seen = self.classify.modes.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.classify.modes.len() {
            bail!("classify.modes lists a mode twice");
        }
        if self.detect.train_knees == 0 || self.detect.val_knees == 0 || self.detect.test_knees == 0 {
            bail!("detect.train_knees, val_knees and test_knees must be positive");
        }
        if self.eval.reader_cases == 0 || self.eval.heatmap_cell_px == 0 {
            bail!("eval.reader_cases and eval.heatmap_cell_px must be positive");
        }
        Ok(())
    }

    /// Seed of one pipeline stage, derived from the base seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        rng::mix(self.seeds.base, &[rng::hash_str(stage)])
    }

    /// The phantom generator's seed mixes the base seed with `phantom.seed`.
    pub fn phantom_seed(&self) -> u64 {
        rng::mix(self.seeds.base, &[rng::hash_str("phantom"), self.phantom.seed])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = RunConfig::parse(r#"{"output_dir": "out"}"#).unwrap();
        assert_eq!(cfg.detect.train_knees, 210);
        assert_eq!(cfg.eval.reader_cases, 204);
        assert_eq!(cfg.classify.modes.len(), 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse(r#"{"output_dir": "o", "extra": 1}"#).is_err());
        assert!(RunConfig::parse(r#"{"output_dir": "o", "detect": {"model": {"lr": 1}}}"#).is_err());
        assert!(RunConfig::parse(r#"{"output_dir": "o", "phantom": {"canvaz": 10}}"#).is_err());
    }

    #[test]
    fn stage_seeds_differ() {
        let cfg = RunConfig::parse(r#"{"output_dir": "o"}"#).unwrap();
        assert_ne!(cfg.stage_seed("detect"), cfg.stage_seed("classify"));
    }
}
