//! Run configuration: a TOML file plus `--set key=value` overrides.

use std::path::{Path, PathBuf};

use mli_core::augment::AugmentationPolicy;
use mli_core::dataset::CorpusOptions;
use mli_core::eval::MhConfig;
use mli_core::infer::SviConfig;
use mli_core::nn::ModelConfig;
use mli_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub generate: GenerateConfig,
    pub corpus: CorpusOptions,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub svi: SviConfig,
    pub eval: EvalConfig,
    pub mh: MhConfig,
    pub attn: AttnConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Corpus directory (written by `generate`, read by `train` and `eval`).
    pub corpus: Option<PathBuf>,
    /// Checkpoint used by `infer`, `finetune`, `mh` and `attn`.
    pub checkpoint: Option<PathBuf>,
    /// Checkpoints scored by `eval`; defaults to `checkpoint`.
    pub checkpoints: Vec<PathBuf>,
    /// Annotated program text: `<mask>` marks latents.
    pub query: Option<PathBuf>,
    /// Program files for `generate` and `augment` (built-in names also accepted).
    pub programs: Vec<String>,
    /// Training log read by `report`.
    pub log: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    /// Augment every training program instance with `[augment]`'s policy.
    pub augment: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub count: usize,
    pub policy: AugmentationPolicy,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            count: 10,
            policy: AugmentationPolicy::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferMode {
    #[default]
    ZeroShot,
    Autoregressive,
    Product,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub mode: InferMode,
    /// Autoregressive decoding samples each latent instead of taking its point value.
    pub sample: bool,
    /// Autoregressive decoding order: `given` or `random`.
    pub order: String,
    /// Plate minibatch size for `product`.
    pub k: usize,
    /// Number of minibatches combined by `product`.
    pub resamples: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            mode: InferMode::ZeroShot,
            sample: false,
            order: "given".into(),
            k: 2,
            resamples: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iw_samples: usize,
    /// Score only the first `limit` test instances (0 = all).
    pub limit: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { iw_samples: 64, limit: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttnConfig {
    /// Row patterns; empty masks each assignment in turn.
    pub observed: Vec<Vec<String>>,
    /// Slot whose attention row is reported for `observed` patterns.
    pub focus: Option<String>,
}

/// Keys whose value comes from the top-level seed instead.
const DERIVED_SEEDS: [&str; 3] = ["train.seed", "svi.seed", "mh.seed"];

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::validation(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| CliError::validation(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        for key in DERIVED_SEEDS {
            let (section, field) = key.split_once('.').unwrap();
            if table.get(section).and_then(|s| s.get(field)).is_some() {
                return Err(CliError::validation(format!("`{key}` is derived from the top-level `seed`; set that instead")));
            }
        }
        let mut cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::validation(e.to_string()))?;
        cfg.train.seed = mli_core::rng::derive(cfg.seed, "train", 0);
        cfg.svi.seed = mli_core::rng::derive(cfg.seed, "svi", 0);
        cfg.mh.seed = mli_core::rng::derive(cfg.seed, "mh", 0);
        Ok(cfg)
    }

    /// SHA-256 of the resolved configuration's canonical JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("--set expects key=value, got `{assignment}`")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::usage(format!("bad key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| CliError::validation(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// A TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
