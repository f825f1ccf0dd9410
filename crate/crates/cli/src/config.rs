//! Layered configuration: file, then `FAVAE_*` environment variables, then
//! command-line flags.
//!
//! Environment keys are the variable name after the prefix, lower-cased,
//! with `__` separating nested tables: `FAVAE_TRAIN__MAX_OUTER_ITERS=20`
//! sets `train.max_outer_iters`. Values are parsed as TOML literals and fall
//! back to plain strings.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use favae::fa::Hyperparams;
use favae::model::VaeSettings;
use favae::neural::VaeArchitecture;
use favae::trainer::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

pub const ENV_PREFIX: &str = "FAVAE_";

/// Name of the echoed configuration in every output directory.
pub const RESOLVED_FILE: &str = "config.resolved.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Outer iterations between checkpoint writes; 0 writes only at the end.
    pub checkpoint_every: usize,
    /// Drop irrelevant factors once training stops.
    pub prune: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            checkpoint_every: 10,
            prune: false,
        }
    }
}

/// Network weights taken from another run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pretrained {
    pub checkpoint: PathBuf,
    /// View of that checkpoint; defaults to the same name.
    #[serde(default)]
    pub view: Option<String>,
}

/// Settings for one VAE view.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewConfig {
    pub architecture: VaeArchitecture,
    pub settings: VaeSettings,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<Pretrained>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    /// Root seed for initialisation, training and generation.
    pub seed: u64,
    pub log_level: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub model: Hyperparams,
    pub train: TrainConfig,
    pub run: RunConfig,
    pub views: BTreeMap<String, ViewConfig>,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            seed: 0,
            log_level: "info".into(),
            out: None,
            data: DataConfig::default(),
            model: Hyperparams::default(),
            train: TrainConfig::default(),
            run: RunConfig::default(),
            views: BTreeMap::new(),
        }
    }
}

/// A dotted key path and its value.
pub type Override = (Vec<String>, Value);

/// The merged raw table and the typed config built from it.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub raw: Table,
    pub config: CliConfig,
}

impl Resolved {
    pub fn has(&self, path: &[&str]) -> bool {
        let mut t = &self.raw;
        for (i, key) in path.iter().enumerate() {
            match t.get(*key) {
                Some(Value::Table(next)) if i + 1 < path.len() => t = next,
                Some(_) if i + 1 == path.len() => return true,
                _ => return false,
            }
        }
        false
    }

    pub fn out_dir(&self) -> CliResult<PathBuf> {
        self.config
            .out
            .clone()
            .ok_or_else(|| CliError::invalid("out: an output directory is required (--out)"))
    }
}

pub fn read_table(path: &Path) -> CliResult<Table> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.parse::<Table>()
        .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

/// Parses an environment value as a TOML literal, or keeps it as a string.
pub fn parse_literal(s: &str) -> Value {
    format!("v = {s}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(s.to_string()))
}

pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<Override> {
    let mut out: Vec<Override> = vars
        .into_iter()
        .filter_map(|(k, v)| {
            let rest = k.strip_prefix(ENV_PREFIX)?;
            if rest.is_empty() {
                return None;
            }
            let path = rest
                .to_lowercase()
                .split("__")
                .map(str::to_string)
                .collect();
            Some((path, parse_literal(&v)))
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

pub fn set_path(table: &mut Table, path: &[String], value: Value) -> CliResult<()> {
    let (last, parents) = path
        .split_last()
        .ok_or_else(|| CliError::invalid("empty configuration key"))?;
    let mut t = table;
    for (i, key) in parents.iter().enumerate() {
        let entry = t
            .entry(key.clone())
            .or_insert_with(|| Value::Table(Table::new()));
        t = match entry {
            Value::Table(next) => next,
            _ => {
                return Err(CliError::invalid(format!(
                    "{}: not a table",
                    parents[..=i].join(".")
                )))
            }
        };
    }
    t.insert(last.clone(), value);
    Ok(())
}

/// Deserialises `table`, reporting the key path of the first problem.
pub fn from_table<T: DeserializeOwned>(table: Table, what: &str) -> CliResult<T> {
    serde_path_to_error::deserialize(Value::Table(table)).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().to_string();
        let inner = inner.lines().next().unwrap_or_default();
        if path == "." {
            CliError::invalid(format!("{what}: {inner}"))
        } else {
            CliError::invalid(format!("{what}: {path}: {inner}"))
        }
    })
}

/// Merges `base`, environment overrides and flag overrides, in increasing
/// precedence.
pub fn resolve(base: Table, env: Vec<Override>, flags: Vec<Override>) -> CliResult<Resolved> {
    let mut raw = base;
    for (path, value) in env.into_iter().chain(flags) {
        set_path(&mut raw, &path, value)?;
    }
    if let Some(Value::Table(t)) = raw.get("train") {
        if t.contains_key("seed") {
            return Err(CliError::invalid(
                "config: train.seed: set the top-level `seed` instead",
            ));
        }
    }
    let mut config: CliConfig = from_table(raw.clone(), "config")?;
    config.train.seed = config.seed;
    if config.log_level.parse::<log::LevelFilter>().is_err() {
        return Err(CliError::invalid(format!(
            "config: log_level: unknown level `{}`",
            config.log_level
        )));
    }
    Ok(Resolved { raw, config })
}

pub fn to_toml<T: Serialize>(value: &T, what: &str) -> CliResult<String> {
    toml::to_string(value).map_err(|e| CliError::invalid(format!("{what}: {e}")))
}

/// The resolved config as TOML. `train.seed` is left out because it always
/// equals the top-level seed.
pub fn config_text(config: &CliConfig) -> CliResult<String> {
    let mut v = Value::try_from(config).map_err(|e| CliError::invalid(format!("config: {e}")))?;
    if let Some(Value::Table(t)) = v.get_mut("train") {
        t.remove("seed");
    }
    to_toml(&v, "config")
}

/// Writes `text` as the resolved configuration of `dir`.
pub fn echo(dir: &Path, text: &str) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join(RESOLVED_FILE);
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(s: &str) -> Vec<String> {
        s.split('.').map(str::to_string).collect()
    }

    #[test]
    fn flags_beat_env_beat_file() {
        let base: Table = "seed = 1\nlog_level = \"warn\"\n[train]\ninner_epochs = 3\n"
            .parse()
            .unwrap();
        let env = env_overrides([
            ("FAVAE_SEED".to_string(), "2".to_string()),
            ("FAVAE_TRAIN__INNER_EPOCHS".to_string(), "4".to_string()),
            ("OTHER".to_string(), "x".to_string()),
        ]);
        let r = resolve(base, env, vec![(key("seed"), Value::Integer(3))]).unwrap();
        assert_eq!(r.config.seed, 3);
        assert_eq!(r.config.train.seed, 3);
        assert_eq!(r.config.train.inner_epochs, 4);
        assert_eq!(r.config.log_level, "warn");
        assert!(r.has(&["train", "inner_epochs"]));
        assert!(!r.has(&["train", "batch_size"]));
    }

    #[test]
    fn unknown_keys_report_their_path() {
        let base: Table = "[train]\nbogus = 1\n".parse().unwrap();
        let err = resolve(base, vec![], vec![]).unwrap_err().to_string();
        assert!(err.contains("train"), "{err}");
        assert!(err.contains("bogus"), "{err}");
        let base: Table = "[views.img.architecture]\nlatent = 3\n".parse().unwrap();
        let err = resolve(base, vec![], vec![]).unwrap_err().to_string();
        assert!(err.contains("views.img.architecture"), "{err}");
    }

    #[test]
    fn literals_fall_back_to_strings() {
        assert_eq!(parse_literal("12"), Value::Integer(12));
        assert_eq!(parse_literal("true"), Value::Boolean(true));
        assert_eq!(parse_literal("debug"), Value::String("debug".into()));
    }

    #[test]
    fn resolved_config_round_trips() {
        let r = resolve(Table::new(), vec![], vec![]).unwrap();
        let text = config_text(&r.config).unwrap();
        let back = resolve(text.parse().unwrap(), vec![], vec![]).unwrap();
        assert_eq!(back.config, r.config);
    }

    #[test]
    fn documented_schema_parses() {
        let doc = include_str!("../../../docs/config.md");
        let block = doc
            .split("```toml\n")
            .nth(1)
            .and_then(|b| b.split("```").next())
            .unwrap();
        let r = resolve(block.parse().unwrap(), vec![], vec![]).unwrap();
        assert!(r.config.train.per_view["img"].frozen.unwrap());
        assert_eq!(r.config.views["img"].architecture.latent_dim, 8);
    }
}
