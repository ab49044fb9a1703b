//! Run configuration: TOML documents, dotted-path overrides, digests and
//! labeled sub-seeds.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{SplitSizes, SyntheticSpec};
use crate::error::{Error, Result};
use crate::evaluator::{EvalSettings, EvolutionConfig};
use crate::ranking::OracleConfig;
use crate::space::{SearchSpaceDef, SpaceName, DEFAULT_TRAVERSAL_CAP};
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    Synthetic,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: SourceKind,
    /// Images generated for the synthetic source.
    pub synthetic_count: usize,
    pub synthetic: SyntheticSpec,
    pub cifar10_paths: Vec<PathBuf>,
    pub splits: SplitSizes,
}

impl Default for DataConfig {
    fn default() -> Self {
        let splits = SplitSizes::default();
        DataConfig {
            source: SourceKind::Synthetic,
            synthetic_count: splits.total(),
            synthetic: SyntheticSpec::default(),
            cifar10_paths: Vec::new(),
            splits,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMethod {
    Traversal,
    Evolution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluatorConfig {
    /// Overrides the seed derived from the global seed.
    pub view_seed: Option<u64>,
    pub lambda: Vec<f64>,
    pub val_subset: usize,
    pub chunk: usize,
    pub traversal_cap: usize,
    pub method: SearchMethod,
    pub pop_size: usize,
    pub generations: usize,
    pub mutation_rate: f64,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        let evo = EvolutionConfig::default();
        EvaluatorConfig {
            view_seed: None,
            lambda: Vec::new(),
            val_subset: 512,
            chunk: 128,
            traversal_cap: DEFAULT_TRAVERSAL_CAP,
            method: SearchMethod::Traversal,
            pop_size: evo.pop_size,
            generations: evo.generations,
            mutation_rate: evo.mutation_rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub space: SpaceName,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses the available parallelism.
    pub workers: usize,
    pub data: DataConfig,
    pub trainer: TrainConfig,
    pub evaluator: EvaluatorConfig,
    pub oracle: OracleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            space: SpaceName::MbconvMini,
            seed: 0,
            output_dir: PathBuf::from("runs"),
            workers: 0,
            data: DataConfig::default(),
            trainer: TrainConfig::default(),
            evaluator: EvaluatorConfig::default(),
            oracle: OracleConfig::default(),
        }
    }
}

fn config_error(path: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        reason: reason.into(),
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `dotted.key` inside `root`, creating intermediate tables.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_error(assignment, "override must look like dotted.key=value"))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_error(key, "empty path segment"));
    }
    let mut table = root;
    for (i, p) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| config_error(parts[..=i].join("."), "is not a table"))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parses a TOML document and applies `dotted.key=value` overrides in order.
    pub fn parse(document: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table =
            toml::from_str(document).map_err(|e| config_error("<document>", e.message()))?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let config: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(root))
            .map_err(|e| {
                let path = e.path().to_string();
                config_error(
                    if path == "." {
                        "<root>".to_string()
                    } else {
                        path
                    },
                    e.into_inner().message(),
                )
            })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path, overrides: &[String]) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::parse(&std::fs::read_to_string(path)?, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_error("<root>", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(config_error("seed", "must fit in a signed 64-bit integer"));
        }
        self.trainer.validate()?;
        self.oracle.validate()?;
        self.eval_settings()?.evolution.validate()?;
        self.eval_settings()?
            .lambda_for(self.space_def().block_count())?;
        let d = &self.data;
        match d.source {
            SourceKind::Synthetic => {
                d.synthetic
                    .validate()
                    .map_err(|e| config_error("data.synthetic", e.to_string()))?;
                if d.synthetic_count < d.splits.total() {
                    return Err(config_error(
                        "data.synthetic_count",
                        format!(
                            "{} images cannot fill splits totalling {}",
                            d.synthetic_count,
                            d.splits.total()
                        ),
                    ));
                }
            }
            SourceKind::Cifar10 if d.cifar10_paths.is_empty() => {
                return Err(config_error("data.cifar10_paths", "no files listed"));
            }
            SourceKind::Cifar10 => {}
        }
        if self.evaluator.val_subset == 0 || self.evaluator.chunk == 0 {
            return Err(config_error(
                "evaluator",
                "val_subset and chunk must be positive",
            ));
        }
        Ok(())
    }

    pub fn space_def(&self) -> SearchSpaceDef {
        let mut s = SearchSpaceDef::named(self.space);
        s.traversal_cap = self.evaluator.traversal_cap;
        s
    }

    /// Seed for one named stage, independent of every other stage's seed.
    pub fn sub_seed(&self, label: &str) -> u64 {
        sub_seed(self.seed, label)
    }

    pub fn eval_settings(&self) -> Result<EvalSettings> {
        let e = &self.evaluator;
        Ok(EvalSettings {
            view_seed: e.view_seed.unwrap_or_else(|| self.sub_seed("views")),
            lambda: e.lambda.clone(),
            val_subset: e.val_subset,
            chunk: e.chunk,
            augment: self.trainer.augment,
            evolution: EvolutionConfig {
                pop_size: e.pop_size,
                generations: e.generations,
                mutation_rate: e.mutation_rate,
                seed: self.sub_seed("evolution"),
            },
        })
    }

    /// Digest of the whole configuration.
    /// Digest of every setting that affects results; the output location
    /// and worker count are excluded.
    pub fn digest(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.workers = 0;
        Ok(digest_str(&c.to_toml()?))
    }

    /// Digest of the settings that determine the trained supernet.
    pub fn train_digest(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Part<'a> {
            space: SpaceName,
            seed: u64,
            data: &'a DataConfig,
            trainer: &'a TrainConfig,
        }
        self.part_digest(&Part {
            space: self.space,
            seed: self.seed,
            data: &self.data,
            trainer: &self.trainer,
        })
    }

    /// Digest of the settings that determine oracle records.
    pub fn oracle_digest(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Part<'a> {
            space: SpaceName,
            seed: u64,
            data: &'a DataConfig,
            oracle: &'a OracleConfig,
        }
        self.part_digest(&Part {
            space: self.space,
            seed: self.seed,
            data: &self.data,
            oracle: &self.oracle,
        })
    }

    fn part_digest<T: Serialize>(&self, part: &T) -> Result<String> {
        let text = toml::to_string(part).map_err(|e| config_error("<root>", e.to_string()))?;
        Ok(digest_str(&text))
    }
}

/// First 16 hex characters of the SHA-256 of `text`.
pub fn digest_str(text: &str) -> String {
    let hash = Sha256::digest(text.as_bytes());
    hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Derives a stage seed from the global seed and a label.
pub fn sub_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::parse("", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.trainer.paths_per_step, 4);
    }

    #[test]
    fn single_override_changes_one_field() {
        let c = RunConfig::parse("", &["trainer.epochs=30".into()]).unwrap();
        assert_eq!(c.trainer.epochs, 30);
        let mut d = RunConfig::default();
        d.trainer.epochs = 30;
        assert_eq!(c, d);
    }

    #[test]
    fn overrides_beat_the_document() {
        let c = RunConfig::parse("[trainer]\nepochs = 3\n", &["trainer.epochs=5".into()]).unwrap();
        assert_eq!(c.trainer.epochs, 5);
    }

    #[test]
    fn unknown_key_names_the_path() {
        let err = RunConfig::parse("", &["trianer.epochs=30".into()]).unwrap_err();
        assert!(err.to_string().contains("trianer"), "{err}");
        let err = RunConfig::parse("[trainer]\nepoks = 3\n", &[]).unwrap_err();
        assert!(err.to_string().contains("trainer.epoks"), "{err}");
    }

    #[test]
    fn type_and_enum_errors_name_the_path() {
        let err = RunConfig::parse("[trainer]\nepochs = \"many\"\n", &[]).unwrap_err();
        assert!(err.to_string().contains("trainer.epochs"), "{err}");
        let err = RunConfig::parse("space = \"huge\"\n", &[]).unwrap_err();
        assert!(err.to_string().contains("space"), "{err}");
    }

    #[test]
    fn string_overrides_need_no_quotes() {
        let c = RunConfig::parse("", &["space=nats-size-mini".into()]).unwrap();
        assert_eq!(c.space, SpaceName::NatsSizeMini);
    }

    #[test]
    fn serialization_round_trips() {
        let mut c = RunConfig::default();
        c.evaluator.lambda = vec![1.0, 0.5, 2.0];
        c.evaluator.view_seed = Some(9);
        c.data.cifar10_paths = vec!["a.bin".into()];
        let back = RunConfig::parse(&c.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn digest_tracks_content() {
        let a = RunConfig::default();
        let b = RunConfig::default();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        assert_eq!(a.digest().unwrap().len(), 16);
        let mut c = RunConfig::default();
        c.trainer.tau = 0.98;
        assert_ne!(a.digest().unwrap(), c.digest().unwrap());
        let mut e = RunConfig::default();
        e.evaluator.val_subset = 256;
        assert_eq!(a.train_digest().unwrap(), e.train_digest().unwrap());
        let w = RunConfig {
            output_dir: "elsewhere".into(),
            workers: 3,
            ..RunConfig::default()
        };
        assert_eq!(a.digest().unwrap(), w.digest().unwrap());
        assert_ne!(a.digest().unwrap(), e.digest().unwrap());
    }

    #[test]
    fn sub_seeds_are_independent_per_label() {
        assert_ne!(sub_seed(1, "views"), sub_seed(1, "oracle"));
        assert_eq!(sub_seed(1, "views"), sub_seed(1, "views"));
        assert_ne!(sub_seed(1, "views"), sub_seed(2, "views"));
    }
}
