//! Pipeline configuration: one TOML file with a section per stage.
//!
//! Every stage field is optional. Missing fields take the desk-scale
//! defaults, or the paper-scale ones when `--paper-scale` is given.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stratpred_core::harness::{Ablation, ExperimentConfig, SamplingMethod};
use stratpred_core::hdp::RefinementConfig;
use stratpred_core::mastery::MasteryModelConfig;
use stratpred_core::mvec::WalkConfig;
use stratpred_core::predictor::PredictorConfig;
use stratpred_core::synthetic::SyntheticWorldConfig;
use thiserror::Error;

use crate::transactions::ColumnMap;

/// Environment variable that overrides `paths.reports_dir`.
pub const REPORTS_DIR_ENV: &str = "STRATPRED_REPORTS_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("config: {0}")]
    Invalid(String),
}

/// Generates an all-optional mirror of a core config struct that can be
/// laid over a base value.
macro_rules! overlay {
    ($name:ident => $core:ty { $($field:ident : $ty:ty),* $(,)? }) => {
        #[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields)]
        pub struct $name {
            $(#[serde(skip_serializing_if = "Option::is_none")] pub $field: Option<$ty>,)*
        }

        impl $name {
            pub fn apply(&self, base: &mut $core) {
                $(if let Some(v) = &self.$field { base.$field = v.clone().into(); })*
            }
        }
    };
}

overlay!(WorldSection => SyntheticWorldConfig {
    n_students: usize,
    n_problems: usize,
    n_kcs: usize,
    n_archetypes: usize,
    strategies_per_section: usize,
    mastery_noise: f64,
    problems_per_section: usize,
    sections_per_unit: usize,
    attempts_per_section: usize,
    section_pool: usize,
    style_share: f64,
    style_focus: f64,
    progress_spread: f64,
    archetype_skew: f64,
});

overlay!(MasterySection => MasteryModelConfig {
    model_dim: usize,
    n_layers: usize,
    n_heads: usize,
    head_dim: usize,
    ff_dim: usize,
    max_seq_len: usize,
    dropout_rate: f64,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
});

overlay!(EmbedSection => WalkConfig {
    n_walks: usize,
    embed_dim: usize,
    window: usize,
    negatives: usize,
    sg_epochs: usize,
    learning_rate: f64,
});

overlay!(ClusterSection => RefinementConfig {
    lambda_local: f64,
    lambda_global: f64,
    epsilon: f64,
    max_iterations: usize,
    pair_cap: usize,
});

overlay!(PredictorSection => PredictorConfig {
    latent_dim: usize,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    dropout_rate: f64,
    max_decode_len: usize,
});

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Transactions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    pub world: WorldSection,
    pub columns: ColumnMap,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { source: DataSource::Synthetic, world: WorldSection::default(), columns: ColumnMap::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub out_dir: PathBuf,
    /// Transaction log read by `ingest`.
    pub transactions: Option<PathBuf>,
    /// Defaults to `<out_dir>/reports`.
    pub reports_dir: Option<PathBuf>,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection { out_dir: PathBuf::from("out"), transactions: None, reports_dir: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub test_fraction: f64,
    pub method: String,
    pub ablation: String,
    /// Training budget as a fraction of the training split.
    pub budget: f64,
    pub sweep_budgets: Vec<f64>,
    pub sweep_seeds: Vec<u64>,
    /// `method/ablation` pairs, e.g. `as/ssms`.
    pub sweep_cells: Vec<String>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            test_fraction: 0.2,
            method: "as".into(),
            ablation: "ssms".into(),
            budget: 0.1,
            sweep_budgets: vec![0.1],
            sweep_seeds: vec![0, 1, 2],
            sweep_cells: ["as/ssms", "as/ss", "as/ns", "rs/ssms", "gs/ssms"].map(String::from).to_vec(),
        }
    }
}

/// The file as written by the user.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: u64,
    pub paths: PathsSection,
    pub data: DataSection,
    pub mastery: MasterySection,
    pub embed: EmbedSection,
    pub cluster: ClusterSection,
    pub predictor: PredictorSection,
    pub experiment: ExperimentSection,
}

/// Fully resolved configuration handed to the stages.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paper_scale: bool,
    pub paths: PathsSection,
    pub source: DataSource,
    pub columns: ColumnMap,
    pub world: SyntheticWorldConfig,
    pub experiment: ExperimentConfig,
    pub method: SamplingMethod,
    pub ablation: Ablation,
    pub budget: f64,
    pub sweep_budgets: Vec<f64>,
    pub sweep_seeds: Vec<u64>,
    pub sweep_cells: Vec<(SamplingMethod, Ablation)>,
    /// Hex digest of the resolved settings.
    pub hash: String,
}

/// Desk-scale synthetic world used when the file does not describe one.
pub fn default_world() -> SyntheticWorldConfig {
    SyntheticWorldConfig::new(500, 300, 30, 5)
}

pub fn parse_method(s: &str) -> Result<SamplingMethod, ConfigError> {
    SamplingMethod::parse(s).ok_or_else(|| ConfigError::Invalid(format!("unknown sampling method `{s}` (expected as, gs, rs or ns)")))
}

pub fn parse_ablation(s: &str) -> Result<Ablation, ConfigError> {
    Ablation::parse(s).ok_or_else(|| ConfigError::Invalid(format!("unknown ablation `{s}` (expected ns, ss or ssms)")))
}

fn parse_cell(s: &str) -> Result<(SamplingMethod, Ablation), ConfigError> {
    let (m, a) = s.split_once('/').ok_or_else(|| ConfigError::Invalid(format!("sweep cell `{s}` is not `method/ablation`")))?;
    Ok((parse_method(m)?, parse_ablation(a)?))
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        Self::parse(&text).map_err(|msg| ConfigError::Parse { path: path.into(), msg })
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string().trim_end().replace('\n', " "))
    }

    pub fn resolve(&self, paper_scale: bool) -> Result<PipelineConfig, ConfigError> {
        let mut world = default_world();
        self.data.world.apply(&mut world);
        world.strategies_per_section = self.data.world.strategies_per_section.unwrap_or(world.n_archetypes);
        world.seed = self.seed;

        let mut experiment = if paper_scale {
            ExperimentConfig {
                mastery: MasteryModelConfig::paper_scale(),
                walk: WalkConfig::paper_scale(),
                refine: RefinementConfig::default(),
                predictor: PredictorConfig::paper_scale(),
                test_fraction: 0.2,
            }
        } else {
            ExperimentConfig::default()
        };
        self.mastery.apply(&mut experiment.mastery);
        self.embed.apply(&mut experiment.walk);
        self.cluster.apply(&mut experiment.refine);
        self.predictor.apply(&mut experiment.predictor);
        experiment.test_fraction = self.experiment.test_fraction;
        experiment.mastery.validate().map_err(|e| ConfigError::Invalid(format!("[mastery] {e}")))?;
        experiment.walk.validate().map_err(|e| ConfigError::Invalid(format!("[embed] {e}")))?;
        experiment.predictor.validate().map_err(|e| ConfigError::Invalid(format!("[predictor] {e}")))?;

        let e = &self.experiment;
        if !(e.budget > 0.0 && e.budget <= 1.0) || e.sweep_budgets.iter().any(|&b| !(b > 0.0 && b <= 1.0)) {
            return Err(ConfigError::Invalid("budgets are fractions of the training split in (0, 1]".into()));
        }
        let hash = self.digest(paper_scale);
        Ok(PipelineConfig {
            seed: self.seed,
            paper_scale,
            paths: self.paths.clone(),
            source: self.data.source.clone(),
            columns: self.data.columns.clone(),
            world,
            experiment,
            method: parse_method(&e.method)?,
            ablation: parse_ablation(&e.ablation)?,
            budget: e.budget,
            sweep_budgets: e.sweep_budgets.clone(),
            sweep_seeds: e.sweep_seeds.clone(),
            sweep_cells: e.sweep_cells.iter().map(|c| parse_cell(c)).collect::<Result<_, _>>()?,
            hash,
        })
    }

    /// Digest of the settings that affect results. Paths and the seed are
    /// left out; the seed is recorded separately in every artifact.
    fn digest(&self, paper_scale: bool) -> String {
        let mut stripped = self.clone();
        stripped.paths = PathsSection::default();
        stripped.seed = 0;
        // the cell selectors are recorded on the artifacts they affect
        let defaults = ExperimentSection::default();
        stripped.experiment.method = defaults.method;
        stripped.experiment.ablation = defaults.ablation;
        stripped.experiment.budget = defaults.budget;
        let json = serde_json::to_string(&(stripped, paper_scale)).expect("config serializes");
        let d = Sha256::digest(json.as_bytes());
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

impl PipelineConfig {
    pub fn reports_dir(&self) -> PathBuf {
        if let Some(dir) = std::env::var_os(REPORTS_DIR_ENV).filter(|d| !d.is_empty()) {
            return PathBuf::from(dir);
        }
        self.paths.reports_dir.clone().unwrap_or_else(|| self.paths.out_dir.join("reports"))
    }

    /// Number of training traces a budget fraction selects.
    pub fn budget_count(fraction: f64, train: usize) -> usize {
        ((fraction * train as f64).round() as usize).clamp(1, train.max(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_desk_defaults() {
        let c = ConfigFile::parse("").unwrap().resolve(false).unwrap();
        assert_eq!(c.experiment, ExperimentConfig::default());
        assert_eq!(c.method, SamplingMethod::As);
        assert_eq!(c.ablation, Ablation::SsMs);
        assert_eq!(c.world.n_students, 500);
    }

    #[test]
    fn paper_scale_switches_defaults_but_keeps_overrides() {
        let c = ConfigFile::parse("[predictor]\nepochs = 3\n").unwrap().resolve(true).unwrap();
        assert_eq!(c.experiment.mastery.model_dim, 512);
        assert_eq!(c.experiment.walk.embed_dim, 300);
        assert_eq!(c.experiment.predictor.latent_dim, 200);
        assert_eq!(c.experiment.predictor.epochs, 3);
        assert_eq!(c.experiment.refine.lambda_local, 7.0);
        assert_eq!(c.experiment.refine.lambda_global, 9.0);
    }

    #[test]
    fn sections_override_fields() {
        let text = "seed = 4\n[data.world]\nn_students = 30\nn_archetypes = 3\n[cluster]\nlambda_global = 2.5\n[experiment]\nmethod = \"rs\"\nablation = \"ss\"\n";
        let c = ConfigFile::parse(text).unwrap().resolve(false).unwrap();
        assert_eq!((c.world.n_students, c.world.strategies_per_section, c.world.seed), (30, 3, 4));
        assert_eq!(c.experiment.refine.lambda_global, 2.5);
        assert_eq!((c.method, c.ablation), (SamplingMethod::Rs, Ablation::Ss));
    }

    #[test]
    fn parse_errors_name_the_line_and_field() {
        let err = ConfigFile::parse("[mastery]\nepochs = \"x\"\n").unwrap_err();
        assert!(err.contains("line 2") && err.contains("epochs"), "{err}");
        let err = ConfigFile::parse("[mastery]\nepoch = 1\n").unwrap_err();
        assert!(err.contains("epoch"), "{err}");
    }

    #[test]
    fn hash_ignores_paths_seed_and_cell_selectors() {
        let a = ConfigFile::parse("seed = 1\n[paths]\nout_dir = \"a\"\n").unwrap().resolve(false).unwrap();
        let b = ConfigFile::parse("seed = 2\n[paths]\nout_dir = \"b\"\n").unwrap().resolve(false).unwrap();
        let c = ConfigFile::parse("[predictor]\nepochs = 1\n").unwrap().resolve(false).unwrap();
        assert_eq!(a.hash, b.hash);
        assert_ne!(a.hash, c.hash);
        let d = ConfigFile::parse("[experiment]\nmethod = \"rs\"\nablation = \"ss\"\nbudget = 0.3\n").unwrap().resolve(false).unwrap();
        assert_eq!(a.hash, d.hash);
        assert_ne!(a.hash, ConfigFile::default().resolve(true).unwrap().hash);
    }

    #[test]
    fn bad_values_are_reported() {
        assert!(ConfigFile::parse("[experiment]\nmethod = \"xs\"\n").unwrap().resolve(false).is_err());
        assert!(ConfigFile::parse("[experiment]\nbudget = 2.0\n").unwrap().resolve(false).is_err());
        assert!(ConfigFile::parse("[mastery]\nmodel_dim = 10\n").unwrap().resolve(false).is_err());
    }

    #[test]
    fn budget_counts_round_and_clamp() {
        assert_eq!(PipelineConfig::budget_count(0.1, 95), 10);
        assert_eq!(PipelineConfig::budget_count(0.001, 10), 1);
        assert_eq!(PipelineConfig::budget_count(1.0, 10), 10);
    }
}
