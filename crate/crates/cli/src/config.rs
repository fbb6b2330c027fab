//! The TOML run configuration shared by all subcommands.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Deserialize;

use glitchsim_core::dataset::{GenConfig, Split};
use glitchsim_core::defense::DefensePolicy;
use glitchsim_core::fault::{GlitchConfig, SusceptibilityProfile};
use glitchsim_core::model::NUM_CLASSES;
use glitchsim_core::search::{AdaptiveConfig, ObjectiveSpec, SearchSpace, Strategy};
use glitchsim_core::trace::{CostModel, Layer};
use glitchsim_core::train::TrainConfig;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub data: GenConfig,
    pub train: TrainConfig,
    pub trace: TraceSection,
    pub protocol: Protocol,
    pub glitch: Option<GlitchConfig>,
    pub search: SearchSection,
    pub analysis: AnalysisSection,
    pub defense: Vec<DefensePolicy>,
}

/// Relative paths resolve against the config file's directory.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding `train.csv` and `test.csv`.
    pub dataset: Option<PathBuf>,
    pub weights: Option<PathBuf>,
    pub profile: Option<PathBuf>,
    /// Campaign log read by `analyze`.
    pub log: Option<PathBuf>,
    /// Search report (JSON) read by `analyze`.
    pub report: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostPreset {
    #[default]
    Bench,
    Unit,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSection {
    pub cost: CostPreset,
}

impl TraceSection {
    pub fn cost_model(&self) -> CostModel {
        match self.cost {
            CostPreset::Bench => CostModel::bench_calibrated(),
            CostPreset::Unit => CostModel::unit(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Protocol {
    /// Classes fed per campaign; all 32 (the reference protocol) when absent.
    pub classes: Option<Vec<usize>>,
    pub reps: usize,
    pub seed: Option<u64>,
    /// Dataset split the campaign inputs are drawn from.
    pub split: Split,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            classes: None,
            reps: glitchsim_core::campaign::DEFAULT_REPS,
            seed: None,
            split: Split::Test,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub strategy: Strategy,
    pub budget: usize,
    pub objective: ObjectiveSpec,
    /// Restricts the external offset to one layer's window.
    pub layer: Option<Layer>,
    /// Replaces the default space entirely.
    pub space: Option<SearchSpace>,
    pub adaptive: AdaptiveConfig,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection {
            strategy: Strategy::Adaptive,
            budget: 200,
            objective: ObjectiveSpec::default(),
            layer: None,
            space: None,
            adaptive: AdaptiveConfig::default(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub top_k: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection { top_k: 5 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.paths.dataset,
            &mut cfg.paths.weights,
            &mut cfg.paths.profile,
            &mut cfg.paths.log,
            &mut cfg.paths.report,
            &mut cfg.paths.out_dir,
        ] {
            if let Some(rel) = p.as_mut() {
                if rel.is_relative() {
                    *rel = base.join(&*rel);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> anyhow::Result<()> {
        self.data.validate()?;
        if self.protocol.reps == 0 {
            bail!("protocol.reps must be >= 1");
        }
        if let Some(classes) = &self.protocol.classes {
            if classes.is_empty() {
                bail!("protocol.classes must not be empty");
            }
            if let Some(c) = classes.iter().find(|&&c| c >= NUM_CLASSES) {
                bail!("protocol.classes: class {c} out of range");
            }
        }
        if let Some(g) = &self.glitch {
            g.validate()?;
        }
        if self.search.budget == 0 {
            bail!("search.budget must be >= 1");
        }
        if self.analysis.top_k == 0 {
            bail!("analysis.top_k must be >= 1");
        }
        self.search.objective.validate()?;
        if let Some(space) = &self.search.space {
            space.validate()?;
        }
        for p in &self.defense {
            p.validate()?;
        }
        Ok(())
    }

    /// An input path that must already exist.
    pub fn input(&self, field: &str, path: &Option<PathBuf>) -> anyhow::Result<PathBuf> {
        let p = path
            .clone()
            .with_context(|| format!("paths.{field} is required for this subcommand"))?;
        if !p.exists() {
            bail!("paths.{field}: {} does not exist", p.display());
        }
        Ok(p)
    }

    pub fn profile(&self) -> anyhow::Result<SusceptibilityProfile> {
        match &self.paths.profile {
            None => Ok(SusceptibilityProfile::default()),
            Some(_) => {
                let p = self.input("profile", &self.paths.profile)?;
                let text = std::fs::read_to_string(&p)?;
                let prof = SusceptibilityProfile::from_toml(&text)
                    .with_context(|| format!("profile {}", p.display()))?;
                prof.validate()?;
                Ok(prof)
            }
        }
    }
}
