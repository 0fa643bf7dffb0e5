//! Study configuration, read from TOML.
//!
//! Every key is optional; an empty file describes the full 60-face,
//! 50-stories-per-face temperature sweep run against the simulator.
//!
//! ```toml
//! [design]
//! sets_per_gender = 15          # ignored when [[design.stimuli]] is given
//! stories_per_stimulus = 50
//! max_tokens = 150
//!
//! [sweep]
//! knob = "top_p"                # or "temperature"
//! values = [0.2, 0.4, 0.6, 0.8, 1.0]
//!
//! [generation]
//! backend = "sim"               # or "live"
//! seed = 7
//!
//! [embed]
//! provider = "gaussian"         # "hash", "gaussian" or "remote"
//! dim = 64
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::design::{
    validate_design, DesignErrors, Gender, Knob, Race, Stimulus, StudyDesign, StudyPlan, SweepSpec,
    DEFAULT_MAX_TOKENS, DEFAULT_SETS_PER_GENDER, DEFAULT_STORIES_PER_STIMULUS, DEFAULT_SYSTEM_PROMPT,
    DEFAULT_USER_PROMPT, TEMPERATURE_GRID, TOP_P_GRID,
};
use crate::embed::{GaussianConfig, RemoteConfig, SpreadCurve, DEFAULT_TEST_DIM};
use crate::genclient::{
    BackendKind, DegeneratePolicy, HomogeneityCurve, HomogeneityTable, LiveConfig, SimulatorConfig,
    DEFAULT_MAX_IN_FLIGHT,
};
use crate::http::RetryPolicy;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Design(#[from] DesignErrors),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub design: DesignSection,
    pub sweep: SweepSection,
    pub generation: GenerationSection,
    pub simulator: SimulatorSection,
    pub embed: EmbedSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignSection {
    pub sets_per_gender: u32,
    pub stories_per_stimulus: u32,
    pub max_tokens: u32,
    pub system_prompt: String,
    pub user_prompt: String,
    /// Explicit stimulus table; overrides `sets_per_gender`.
    pub stimuli: Option<Vec<Stimulus>>,
}

impl Default for DesignSection {
    fn default() -> Self {
        DesignSection {
            sets_per_gender: DEFAULT_SETS_PER_GENDER,
            stories_per_stimulus: DEFAULT_STORIES_PER_STIMULUS,
            max_tokens: DEFAULT_MAX_TOKENS,
            system_prompt: DEFAULT_SYSTEM_PROMPT.to_string(),
            user_prompt: DEFAULT_USER_PROMPT.to_string(),
            stimuli: None,
        }
    }
}

impl DesignSection {
    pub fn study_design(&self) -> StudyDesign {
        let mut d = StudyDesign::balanced(self.sets_per_gender, self.stories_per_stimulus);
        if let Some(stimuli) = &self.stimuli {
            d.stimuli = stimuli.clone();
        }
        d.max_tokens = self.max_tokens;
        d.system_prompt = self.system_prompt.clone();
        d.user_prompt = self.user_prompt.clone();
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub knob: Knob,
    /// Defaults to the standard grid of `knob`.
    pub values: Option<Vec<f64>>,
    pub fixed_other: Option<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection { knob: Knob::Temperature, values: None, fixed_other: None }
    }
}

impl SweepSection {
    pub fn sweep(&self) -> SweepSpec {
        let grid = match self.knob {
            Knob::Temperature => TEMPERATURE_GRID.to_vec(),
            Knob::TopP => TOP_P_GRID.to_vec(),
        };
        let mut s = SweepSpec::new(self.knob, self.values.clone().unwrap_or(grid));
        if let Some(v) = self.fixed_other {
            s.fixed_other = v;
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    Sim,
    Live,
}

impl BackendChoice {
    pub fn kind(self) -> BackendKind {
        match self {
            BackendChoice::Sim => BackendKind::Simulated,
            BackendChoice::Live => BackendKind::Live,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSection {
    pub backend: BackendChoice,
    pub seed: u64,
    pub max_in_flight: usize,
    pub max_attempts: u32,
    /// Word count the prompt asks for.
    pub max_words: usize,
    /// Stories over `degenerate_factor * max_words` words are flagged.
    pub degenerate_factor: usize,
    pub live: LiveConfig,
}

impl Default for GenerationSection {
    fn default() -> Self {
        let policy = DegeneratePolicy::default();
        GenerationSection {
            backend: BackendChoice::Sim,
            seed: 0,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            max_attempts: RetryPolicy::default().max_attempts,
            max_words: policy.max_words,
            degenerate_factor: policy.factor,
            live: LiveConfig::default(),
        }
    }
}

impl GenerationSection {
    pub fn policy(&self) -> DegeneratePolicy {
        DegeneratePolicy { max_words: self.max_words, factor: self.degenerate_factor }
    }

    pub fn retry(&self) -> RetryPolicy {
        RetryPolicy { max_attempts: self.max_attempts, ..RetryPolicy::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorSection {
    pub target_words: usize,
    /// Empty means the built-in reference table.
    pub homogeneity: Vec<HomogeneityCurve>,
}

impl Default for SimulatorSection {
    fn default() -> Self {
        SimulatorSection { target_words: SimulatorConfig::default().target_words, homogeneity: Vec::new() }
    }
}

impl SimulatorSection {
    pub fn simulator(&self) -> Result<SimulatorConfig, ConfigError> {
        let homogeneity = if self.homogeneity.is_empty() {
            HomogeneityTable::reference()
        } else {
            HomogeneityTable::new(self.homogeneity.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?
        };
        Ok(SimulatorConfig { homogeneity, target_words: self.target_words })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderChoice {
    Hash,
    Gaussian,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSection {
    pub provider: ProviderChoice,
    pub dim: usize,
    pub batch_size: usize,
    /// Defaults to the generation seed.
    pub seed: Option<u64>,
    pub gaussian: GaussianSection,
    pub remote: RemoteConfig,
}

impl Default for EmbedSection {
    fn default() -> Self {
        EmbedSection {
            provider: ProviderChoice::Hash,
            dim: DEFAULT_TEST_DIM,
            batch_size: 64,
            seed: None,
            gaussian: GaussianSection::default(),
            remote: RemoteConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianSection {
    pub mean_norm: f64,
    pub stimulus_spread: f64,
    /// Per-coordinate σ curves; empty means Black 0.22, White 0.25 at
    /// every setting.
    pub spread: Vec<SpreadCurve>,
}

impl Default for GaussianSection {
    fn default() -> Self {
        GaussianSection { mean_norm: 1.0, stimulus_spread: 0.3, spread: Vec::new() }
    }
}

impl GaussianSection {
    pub fn config(&self, dim: usize) -> GaussianConfig {
        let spread = if self.spread.is_empty() {
            Race::ALL
                .into_iter()
                .flat_map(|r| {
                    let s = if r == Race::Black { 0.22 } else { 0.25 };
                    Gender::ALL.into_iter().map(move |g| SpreadCurve::constant(r, g, s))
                })
                .collect()
        } else {
            self.spread.clone()
        };
        GaussianConfig { dim, mean_norm: self.mean_norm, stimulus_spread: self.stimulus_spread, spread }
    }
}

/// A parsed config together with the hash of its source bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: StudyConfig,
    pub hash: String,
}

impl StudyConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: StudyConfig = toml::from_str(text)?;
        config.check()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<LoadedConfig, ConfigError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let text = String::from_utf8(bytes.clone()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(LoadedConfig { config: Self::from_toml_str(&text)?, hash: config_hash(&bytes) })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn embed_seed(&self) -> u64 {
        self.embed.seed.unwrap_or(self.generation.seed)
    }

    pub fn plan(&self) -> Result<StudyPlan, ConfigError> {
        Ok(validate_design(&self.design.study_design(), &self.sweep.sweep())?)
    }

    fn check(&self) -> Result<(), ConfigError> {
        self.plan()?;
        self.simulator.simulator()?;
        let g = &self.generation;
        if g.max_in_flight == 0 {
            return Err(ConfigError::Invalid("generation.max_in_flight must be at least 1".into()));
        }
        if g.max_attempts == 0 {
            return Err(ConfigError::Invalid("generation.max_attempts must be at least 1".into()));
        }
        if g.max_words == 0 || g.degenerate_factor == 0 {
            return Err(ConfigError::Invalid("generation.max_words and degenerate_factor must be positive".into()));
        }
        if self.embed.dim == 0 || self.embed.batch_size == 0 {
            return Err(ConfigError::Invalid("embed.dim and embed.batch_size must be positive".into()));
        }
        if self.embed.provider == ProviderChoice::Gaussian {
            let gc = self.embed.gaussian.config(self.embed.dim);
            for c in &gc.spread {
                if c.points.is_empty() || c.points.iter().any(|&(x, s)| !x.is_finite() || !(s >= 0.0)) {
                    return Err(ConfigError::Invalid(format!("embed.gaussian.spread for {} {} is invalid", c.race, c.gender)));
                }
            }
        }
        Ok(())
    }
}

/// SHA-256 of the raw config bytes, lowercase hex.
pub fn config_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default_protocol() {
        let c = StudyConfig::from_toml_str("").unwrap();
        let plan = c.plan().unwrap();
        assert_eq!(plan.len(), 60 * 50 * 5);
        assert_eq!(c.design.max_tokens, 150);
        assert_eq!(c.sweep.sweep().values, TEMPERATURE_GRID);
        assert_eq!(c.generation.backend, BackendChoice::Sim);
    }

    #[test]
    fn top_p_grid_by_default() {
        let c = StudyConfig::from_toml_str("[sweep]\nknob = \"top_p\"\n").unwrap();
        assert_eq!(c.sweep.sweep().values, TOP_P_GRID);
        assert_eq!(c.sweep.sweep().fixed_other, 1.0);
    }

    #[test]
    fn explicit_stimuli_and_curves() {
        let text = r#"
[design]
stories_per_stimulus = 3
[[design.stimuli]]
set_id = 1
race = "Black"
gender = "Man"
[[design.stimuli]]
set_id = 1
race = "White"
gender = "Man"

[[simulator.homogeneity]]
race = "Black"
gender = "Man"
points = [[0.0, 0.9], [2.0, 0.5]]
"#;
        let c = StudyConfig::from_toml_str(text).unwrap();
        assert_eq!(c.plan().unwrap().len(), 2 * 3 * 5);
        let sim = c.simulator.simulator().unwrap();
        assert_eq!(sim.homogeneity.curves.len(), 1);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(StudyConfig::from_toml_str("[sweep]\nvalues = [0.0, 3.0]\n"), Err(ConfigError::Design(_))));
        assert!(matches!(StudyConfig::from_toml_str("[design]\nstoris = 3\n"), Err(ConfigError::Parse(_))));
        assert!(matches!(
            StudyConfig::from_toml_str("[generation]\nmax_in_flight = 0\n"),
            Err(ConfigError::Invalid(_))
        ));
        let bad_curve = "[[simulator.homogeneity]]\nrace = \"Black\"\ngender = \"Man\"\npoints = [[0.0, 1.5]]\n";
        assert!(matches!(StudyConfig::from_toml_str(bad_curve), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn round_trips_through_toml() {
        let c = StudyConfig::default();
        assert_eq!(StudyConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }

    #[test]
    fn hash_tracks_every_byte() {
        let a = config_hash(b"[generation]\nseed = 1\n");
        assert_eq!(a.len(), 64);
        assert_eq!(a, config_hash(b"[generation]\nseed = 1\n"));
        assert_ne!(a, config_hash(b"[generation]\nseed = 1 \n"));
        assert_eq!(config_hash(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }
}
