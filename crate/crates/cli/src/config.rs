//! Layered configuration: built-in defaults, a TOML file, `GT360_*`
//! environment overrides and command-line flags, later layers winning.
//!
//! Environment variables map onto key paths by stripping the `GT360_` prefix,
//! lowercasing and splitting on `__`, so `GT360_PIPELINE__SIGMA=0.9` sets
//! `pipeline.sigma` and `GT360_MODELS__GAZENET__EMBED_DIM=32` sets
//! `models.gazenet.embed_dim`. Values are parsed as TOML literals and fall
//! back to plain strings.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use gt360_core::detect::DetectorConfig;
use gt360_core::eval::EvalOptions;
use gt360_core::eyecontact::EcConfig;
use gt360_core::gazenet::GazeNetConfig;
use gt360_core::train::{Stage, TrainConfig};
use gt360_core::PipelineConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

pub const ENV_PREFIX: &str = "GT360_";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    /// Seed for model initialization and every randomized step.
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub detector: DetectorConfig,
    pub models: ModelsConfig,
    pub train: TrainSection,
    pub eval: EvalOptions,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsConfig {
    /// Eye-contact weights (safetensors). The untrained stand-in is used when absent.
    pub ec_weights: Option<PathBuf>,
    /// Gaze checkpoint directory. A freshly initialized model is used when absent.
    pub gaze_weights: Option<PathBuf>,
    pub ec: EcConfig,
    pub gazenet: GazeNetConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            pretrain: TrainConfig::pretrain(),
            finetune: TrainConfig::finetune(),
        }
    }
}

impl TrainSection {
    pub fn for_stage(&self, stage: Stage) -> Result<TrainConfig> {
        let cfg = match stage {
            Stage::Pretrain => &self.pretrain,
            Stage::Finetune => &self.finetune,
        };
        if cfg.stage != stage {
            bail!(
                "train.{} has stage = {:?}",
                stage.as_str().to_lowercase(),
                cfg.stage
            );
        }
        Ok(cfg.clone())
    }
}

/// Inputs to [`resolve`], one per layer.
#[derive(Debug, Clone, Default)]
pub struct Layers {
    /// Contents of the config file and where it came from.
    pub file: Option<(PathBuf, String)>,
    /// Environment variables; only those with the `GT360_` prefix are used.
    pub env: Vec<(String, String)>,
    /// Flag overrides as dotted key paths.
    pub flags: Vec<(String, Value)>,
}

impl Layers {
    pub fn from_process(config: Option<&Path>, flags: Vec<(String, Value)>) -> Result<Self> {
        let file = match config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                Some((p.to_path_buf(), text))
            }
            None => None,
        };
        Ok(Layers {
            file,
            env: std::env::vars().collect(),
            flags,
        })
    }
}

fn set_path(table: &mut Table, path: &[String], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().ok_or_else(|| anyhow!("empty key path"))?;
    let mut cur = table;
    for (i, key) in parents.iter().enumerate() {
        let entry = cur
            .entry(key.clone())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("`{}` is not a table", path[..=i].join(".")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Deep merge: tables merge key by key, anything else replaces.
fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_env_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

fn env_table(env: &[(String, String)]) -> Result<Table> {
    let mut vars: Vec<_> = env
        .iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX))
        .collect();
    vars.sort();
    let mut table = Table::new();
    for (k, v) in vars {
        let path: Vec<String> = k[ENV_PREFIX.len()..]
            .split("__")
            .map(str::to_lowercase)
            .collect();
        if path.iter().any(String::is_empty) {
            bail!("malformed environment override {k}");
        }
        set_path(&mut table, &path, parse_env_value(v))
            .with_context(|| format!("environment override {k}"))?;
    }
    Ok(table)
}

fn deserialize(table: Table, origin: &str) -> Result<CliConfig> {
    serde_path_to_error::deserialize::<_, CliConfig>(Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        anyhow!(
            "{origin}: invalid configuration at `{path}`: {}",
            e.into_inner()
        )
    })
}

/// Merges all layers over the defaults. Unknown keys and ill-typed values
/// are rejected with their key path.
pub fn resolve(layers: &Layers) -> Result<CliConfig> {
    let mut merged = Table::try_from(CliConfig::default()).context("serializing defaults")?;
    if let Some((path, text)) = &layers.file {
        let origin = path.display().to_string();
        let file: Table = text.parse().with_context(|| format!("parsing {origin}"))?;
        // validate the file on its own so its errors point at the file
        let mut alone = merged.clone();
        merge(&mut alone, file.clone());
        deserialize(alone, &origin)?;
        merge(&mut merged, file);
    }
    let env = env_table(&layers.env)?;
    if !env.is_empty() {
        let mut alone = merged.clone();
        merge(&mut alone, env.clone());
        deserialize(alone, "environment")?;
        merge(&mut merged, env);
    }
    for (key, value) in &layers.flags {
        let path: Vec<String> = key.split('.').map(String::from).collect();
        set_path(&mut merged, &path, value.clone())?;
    }
    deserialize(merged, "command line")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file(text: &str) -> Layers {
        Layers {
            file: Some(("gt360.toml".into(), text.into())),
            ..Default::default()
        }
    }

    #[test]
    fn defaults_round_trip() {
        assert_eq!(resolve(&Layers::default()).unwrap(), CliConfig::default());
    }

    #[test]
    fn unknown_key_names_its_path() {
        let err = resolve(&file("[pipeline]\nsigmaa = 0.9\n"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("pipeline"), "{err}");
        assert!(err.contains("sigmaa"), "{err}");
        let err = resolve(&file("[models.gazenet]\nembed = 3\n"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("models.gazenet"), "{err}");
        let err = resolve(&file("[nope]\n")).unwrap_err().to_string();
        assert!(err.contains("nope"), "{err}");
    }

    #[test]
    fn env_paths_and_types() {
        let layers = Layers {
            env: vec![
                ("GT360_PIPELINE__SIGMA".into(), "0.9".into()),
                ("GT360_MODELS__GAZENET__EMBED_DIM".into(), "12".into()),
                ("GT360_DETECTOR__BACKEND".into(), "external".into()),
                ("GT360_SEED".into(), "7".into()),
                ("HOME".into(), "/root".into()),
            ],
            ..Default::default()
        };
        let cfg = resolve(&layers).unwrap();
        assert_eq!(cfg.pipeline.sigma, 0.9);
        assert_eq!(cfg.models.gazenet.embed_dim, 12);
        assert_eq!(cfg.detector.backend, "external");
        assert_eq!(cfg.seed, 7);
        let bad = Layers {
            env: vec![("GT360_PIPELINE__SIGMAA".into(), "1".into())],
            ..Default::default()
        };
        let err = resolve(&bad).unwrap_err().to_string();
        assert!(
            err.contains("environment") && err.contains("sigmaa"),
            "{err}"
        );
    }

    #[test]
    fn integer_literal_fills_float_field() {
        let cfg = resolve(&file("[train.finetune]\nlr = 1\n")).unwrap();
        assert_eq!(cfg.train.finetune.lr, 1.0);
        assert_eq!(cfg.train.finetune.epochs, 10);
    }

    #[test]
    fn stage_section_must_match() {
        let cfg = resolve(&file("[train.pretrain]\nstage = \"finetune\"\n")).unwrap();
        assert!(cfg.train.for_stage(Stage::Pretrain).is_err());
        assert!(cfg.train.for_stage(Stage::Finetune).is_ok());
    }

    proptest::proptest! {
        #[test]
        fn flags_beat_env_beat_file_beat_defaults(
            file in proptest::option::of(0.05f64..0.95),
            env in proptest::option::of(0.05f64..0.95),
            flag in proptest::option::of(0.05f64..0.95),
            file_seed in proptest::option::of(0u32..1000),
            env_seed in proptest::option::of(0u32..1000),
            flag_seed in proptest::option::of(0u32..1000),
        ) {
            let mut text = String::new();
            if let Some(s) = file_seed {
                text += &format!("seed = {s}\n");
            }
            if let Some(v) = file {
                text += &format!("[pipeline]\nsigma = {v:?}\n");
            }
            let mut layers = Layers {
                file: Some(("gt360.toml".into(), text)),
                ..Default::default()
            };
            if let Some(v) = env {
                layers.env.push(("GT360_PIPELINE__SIGMA".into(), format!("{v:?}")));
            }
            if let Some(s) = env_seed {
                layers.env.push(("GT360_SEED".into(), s.to_string()));
            }
            if let Some(v) = flag {
                layers.flags.push(("pipeline.sigma".into(), Value::Float(v)));
            }
            if let Some(s) = flag_seed {
                layers.flags.push(("seed".into(), Value::Integer(s as i64)));
            }
            let cfg = resolve(&layers).unwrap();
            let want_sigma = flag.or(env).or(file).unwrap_or(PipelineConfig::default().sigma);
            let want_seed = flag_seed.or(env_seed).or(file_seed).map_or(0, u64::from);
            proptest::prop_assert_eq!(cfg.pipeline.sigma, want_sigma);
            proptest::prop_assert_eq!(cfg.seed, want_seed);
        }
    }
}
