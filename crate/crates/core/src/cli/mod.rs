//! Experiment configuration, run manifests and the subcommands behind the
//! `mcpo` binary.

mod commands;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::eval::MatchSettings;
use crate::fixtures::{self, Fixture, ReferenceSpec};
use crate::losses::LossName;
use crate::partition::Proposal;
use crate::samplers::Strategy;
use crate::training::{Judge, NoiseSpec, TrainConfig};
use crate::verify::VerifySettings;

pub use commands::{
    cmd_ablate, cmd_eval, cmd_gen_data, cmd_train, cmd_verify, AblationRow, TrainOutcome, ABLATION_HEADER,
};

/// Overrides the root that relative `output_dir` values resolve against.
pub const OUTPUT_ROOT_VAR: &str = "MCPO_OUTPUT_ROOT";
pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_DIVERGENCE: u8 = 2;
pub const EXIT_VERIFICATION: u8 = 3;

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::DivergenceDetected { .. } => EXIT_DIVERGENCE,
        _ => EXIT_CONFIG,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProposalSpec {
    #[default]
    Reference,
    Uniform,
    /// `w · π_ref + (1 − w) · uniform`.
    Mixture { reference_weight: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    /// Candidates per record beyond the preferred one (`L`).
    pub candidates: usize,
    pub n_records: usize,
    pub noise: NoiseSpec,
    pub judge: Judge,
    pub seed: u64,
    /// Relative paths resolve inside the output directory.
    pub file: PathBuf,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            candidates: fixtures::STANDARD_CANDIDATES,
            n_records: fixtures::STANDARD_RECORDS,
            noise: NoiseSpec::default(),
            judge: Judge::default(),
            seed: 0,
            file: PathBuf::from("dataset.jsonl"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSpec {
    pub seeds: usize,
    pub strategies: Vec<Strategy>,
    #[serde(rename = "M_values", alias = "m_values")]
    pub m_values: Vec<usize>,
    /// Also run the injected-noise comparison.
    pub noise: bool,
}

impl Default for AblateSpec {
    fn default() -> Self {
        Self {
            seeds: 5,
            strategies: vec![Strategy::Mc, Strategy::Max, Strategy::Min, Strategy::Random],
            m_values: vec![1, 3],
            noise: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointFormat {
    #[default]
    Json,
    Binary,
}

impl CheckpointFormat {
    pub fn extension(self) -> &'static str {
        match self {
            CheckpointFormat::Json => "json",
            CheckpointFormat::Binary => "bin",
        }
    }
}

/// One experiment: everything a subcommand needs besides its positional
/// arguments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    #[serde(default)]
    pub reference: ReferenceSpec,
    #[serde(default)]
    pub proposal: ProposalSpec,
    /// Temperature of the target policy `π* ∝ π_ref exp(r / β*)`.
    #[serde(default = "one")]
    pub beta_star: f64,
    #[serde(default)]
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: MatchSettings,
    #[serde(default)]
    pub verify: VerifySettings,
    #[serde(default)]
    pub ablate: AblateSpec,
    #[serde(default)]
    pub checkpoint_format: CheckpointFormat,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn one() -> f64 {
    1.0
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Command-line overrides applied after loading.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub lr: Option<f64>,
    pub loss: Option<LossName>,
    pub strategy: Option<Strategy>,
    pub m: Option<usize>,
    /// Replaces every seed in the config.
    pub seed: Option<u64>,
}

impl ExperimentConfig {
    /// The standard fixture with trend-experiment training settings.
    pub fn standard() -> Self {
        Self {
            env: fixtures::standard_spec(),
            reference: ReferenceSpec::default(),
            proposal: ProposalSpec::default(),
            beta_star: 1.0,
            dataset: DatasetSpec::default(),
            train: fixtures::trend_config(LossName::Mcpo, Strategy::Mc, 1, 0),
            eval: MatchSettings::default(),
            verify: VerifySettings::default(),
            ablate: AblateSpec::default(),
            checkpoint_format: CheckpointFormat::default(),
            output_dir: default_output_dir(),
        }
    }

    /// Reads TOML or JSON by extension and validates the result.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let cfg: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).map_err(|e| Error::ConfigInvalid(e.to_string()))?,
            Some("json") => serde_json::from_str(&text).map_err(|e| Error::ConfigInvalid(e.to_string()))?,
            _ => {
                return Err(Error::ConfigInvalid(format!(
                    "{}: config must be .toml or .json",
                    path.display()
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.beta_star > 0.0 && self.beta_star.is_finite()) {
            return Err(Error::ConfigInvalid("beta_star must be positive".into()));
        }
        if self.dataset.candidates == 0 {
            return Err(Error::ConfigInvalid("dataset.candidates must be at least 1".into()));
        }
        if let ProposalSpec::Mixture { reference_weight } = self.proposal {
            if !(0.0..=1.0).contains(&reference_weight) {
                return Err(Error::ConfigInvalid("mixture reference_weight must lie in [0, 1]".into()));
            }
        }
        if self.ablate.m_values.contains(&0) {
            return Err(Error::ConfigInvalid("ablate.M_values must be positive".into()));
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(lr) = o.lr {
            self.train.lr = lr;
        }
        if let Some(loss) = o.loss {
            self.train.loss.name = loss;
        }
        if let Some(s) = o.strategy {
            self.train.sampler.strategy = s;
        }
        if let Some(m) = o.m {
            self.train.loss.m = m;
        }
        if let Some(seed) = o.seed {
            self.dataset.seed = seed;
            self.train.seed = seed;
            self.train.sampler.rng_seed = seed;
            self.eval.seed = seed;
            self.verify.seed = seed;
        }
    }

    /// Builds the environment, reference and proposal.
    pub fn fixture(&self) -> Result<Fixture> {
        let mut f = Fixture::new(self.env.clone(), self.reference, self.beta_star)?;
        let (rows, cols) = f.env.shape();
        f.proposal = match self.proposal {
            ProposalSpec::Reference => f.proposal,
            ProposalSpec::Uniform => Proposal::uniform(rows, cols),
            ProposalSpec::Mixture { reference_weight } => Proposal::mixture(
                &[Proposal::reference(&f.reference)?, Proposal::uniform(rows, cols)],
                &[reference_weight, 1.0 - reference_weight],
            )?,
        };
        Ok(f)
    }

    /// `output_dir`, under `$MCPO_OUTPUT_ROOT` when that is set and the
    /// path is relative.
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_VAR) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.output_dir().join(&self.dataset.file)
    }

    /// SHA-256 of the canonical JSON encoding, ignoring `output_dir`.
    pub fn content_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Provenance written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub version: String,
    pub config_hash: String,
    pub env_hash: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_count: Option<usize>,
    /// File name to SHA-256 of its contents.
    pub files: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(kind: &str, cfg: &ExperimentConfig, seed: u64) -> Self {
        Self {
            kind: kind.into(),
            version: VERSION.into(),
            config_hash: cfg.content_hash(),
            env_hash: cfg.env.content_hash(),
            seed,
            record_count: None,
            files: BTreeMap::new(),
        }
    }

    /// Records the hash of a file already written.
    pub fn add_file(&mut self, path: &Path) -> Result<()> {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        self.files.insert(name, sha256_hex(&std::fs::read(path)?));
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_config_round_trips_through_toml_and_json() {
        let c = ExperimentConfig::standard();
        let t: ExperimentConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(t, c);
        let j: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(j, c);
    }

    #[test]
    fn overrides() {
        let mut c = ExperimentConfig::standard();
        c.apply(&Overrides {
            lr: Some(0.25),
            loss: Some(LossName::Dpo),
            strategy: Some(Strategy::Random),
            m: Some(3),
            seed: Some(42),
        });
        assert_eq!(c.train.lr, 0.25);
        assert_eq!(c.train.loss.name, LossName::Dpo);
        assert_eq!(c.train.sampler.strategy, Strategy::Random);
        assert_eq!(c.train.loss.m, 3);
        assert_eq!((c.dataset.seed, c.train.seed, c.eval.seed, c.verify.seed), (42, 42, 42, 42));
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::standard();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.content_hash(), b.content_hash());
        b.train.lr = 0.5;
        assert_ne!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::ConfigInvalid("x".into())), EXIT_CONFIG);
        let div = Error::DivergenceDetected {
            step: 1,
            reason: "x".into(),
            trace: Box::default(),
        };
        assert_eq!(exit_code(&div), EXIT_DIVERGENCE);
    }
}
