//! Experiment configuration in TOML, with presets and dotted overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::suite::SyntheticSuiteSpec;
use crate::backends::{CostModel, RemoteConfig};
use crate::chunking::{ChunkingConfig, ChunkingStrategy, FeatureMode};
use crate::compilation::{CompilationConfig, Weighting};
use crate::decoding::DecodeConfig;
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_BETA;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Chunked contexts fused per step.
    #[default]
    Parallel,
    /// All selected shots in one context.
    FullContext,
}

/// How the `shots` demonstrations are drawn from the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Seeded uniform subset, kept in dataset order.
    #[default]
    Random,
    /// Farthest-point max-min selection.
    Diversity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Synthetic,
    Remote,
}

/// Named starting points, one per ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// k-means chunking with similarity weights.
    #[default]
    ParallelIcl,
    RandomChunking,
    UniformCompilation,
    TextOnly,
    ImageOnly,
    FullContext,
    /// Full context over a diversity-selected subset.
    Divprune,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::ParallelIcl,
        Preset::RandomChunking,
        Preset::UniformCompilation,
        Preset::TextOnly,
        Preset::ImageOnly,
        Preset::FullContext,
        Preset::Divprune,
    ];

    pub fn config(self) -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            preset: Some(self),
            ..ExperimentConfig::default()
        };
        match self {
            Preset::ParallelIcl => {}
            Preset::RandomChunking => cfg.chunking.strategy = ChunkingStrategy::Random,
            Preset::UniformCompilation => cfg.compilation.weighting = Weighting::Uniform,
            Preset::TextOnly | Preset::ImageOnly => {
                let mode = if self == Preset::TextOnly {
                    FeatureMode::TextOnly
                } else {
                    FeatureMode::ImageOnly
                };
                cfg.chunking.feature_mode = mode;
                cfg.compilation.feature_mode = mode;
            }
            Preset::FullContext => cfg.method = Method::FullContext,
            Preset::Divprune => {
                cfg.method = Method::FullContext;
                cfg.selection = Selection::Diversity;
            }
        }
        cfg.name = serde_json::to_value(self)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default();
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// JSONL dataset.
    pub path: Option<PathBuf>,
    /// Synthetic model spec (JSON) used with `path` and the synthetic backend.
    pub model: Option<PathBuf>,
    /// Generate the data in memory instead of reading `path`.
    pub synthetic: Option<SyntheticSuiteSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Charge simulated latency through `[cost]`.
    pub metered: bool,
    pub remote: RemoteConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Synthetic,
            metered: true,
            remote: RemoteConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Applied before every other key.
    pub preset: Option<Preset>,
    pub seed: u64,
    /// `N`; all demonstrations when absent.
    pub shots: Option<usize>,
    pub method: Method,
    pub selection: Selection,
    /// Also decode with the full context to get relevance and a speedup.
    pub reference: bool,
    pub beta: f64,
    /// Report path, relative to the working directory.
    pub output: PathBuf,
    pub data: DataConfig,
    pub chunking: ChunkingConfig,
    pub compilation: CompilationConfig,
    pub decode: DecodeConfig,
    pub backend: BackendConfig,
    pub cost: CostModel,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "parallel_icl".into(),
            preset: None,
            seed: 0,
            shots: None,
            method: Method::Parallel,
            selection: Selection::Random,
            reference: true,
            beta: DEFAULT_BETA,
            output: PathBuf::from("report.json"),
            data: DataConfig::default(),
            chunking: ChunkingConfig::default(),
            compilation: CompilationConfig::default(),
            decode: DecodeConfig::default(),
            backend: BackendConfig::default(),
            cost: CostModel::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Sets `key` (dot-separated) to `raw`, parsed as a TOML value when possible
/// and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key {key:?}")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part:?} is not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Splits `key=value`.
pub fn parse_override(text: &str) -> Result<(&str, &str)> {
    text.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| Error::Config(format!("override {text:?} is not key=value")))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl ExperimentConfig {
    /// Builds a config from a TOML table: the preset named in it (or the
    /// default) is laid down first, then the table on top.
    pub fn from_table(table: toml::Table) -> Result<Self> {
        let preset = match table.get("preset") {
            None => None,
            Some(v) => Some(Preset::deserialize(v.clone()).map_err(config_err)?),
        };
        let base_cfg = preset.map(Preset::config).unwrap_or_default();
        let mut base = toml::Table::try_from(&base_cfg).map_err(config_err)?;
        merge(&mut base, table);
        let cfg = ExperimentConfig::deserialize(base).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(config_err)?;
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        Self::from_table(table)
    }

    /// Reads a config file. Data paths are resolved against its directory.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.path, &mut cfg.data.model].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        match (&d.path, &d.synthetic) {
            (Some(_), Some(_)) => return Err(Error::Config("data.path and data.synthetic are exclusive".into())),
            (None, None) => return Err(Error::Config("one of data.path or data.synthetic is required".into())),
            _ => {}
        }
        if self.backend.kind == BackendKind::Synthetic && d.path.is_some() && d.model.is_none() {
            return Err(Error::Config(
                "the synthetic backend with data.path needs data.model".into(),
            ));
        }
        if let Some(spec) = &d.synthetic {
            spec.validate().map_err(config_err)?;
        }
        if self.shots == Some(0) {
            return Err(Error::Config("shots must be positive".into()));
        }
        if let Some(n) = self.shots {
            if self.method == Method::Parallel {
                self.chunking.validate(n).map_err(config_err)?;
            }
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("beta must be positive".into()));
        }
        self.compilation.validate().map_err(config_err)?;
        self.decode.validate().map_err(config_err)?;
        if self.backend.metered {
            self.cost.validate().map_err(config_err)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = "[data.synthetic]\ntasks = 2\n";

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_and_overrides() {
        let cfg = ExperimentConfig::from_toml(BASE, &[]).unwrap();
        assert_eq!(cfg.chunking.k, 1);
        assert_eq!(cfg.cost, CostModel::default());
        let cfg = ExperimentConfig::from_toml(
            BASE,
            &ov(&[
                ("chunking.k", "2"),
                ("chunking.strategy", "random"),
                ("cost.parallel_lanes", "8"),
            ]),
        )
        .unwrap();
        assert_eq!(cfg.chunking.k, 2);
        assert_eq!(cfg.chunking.strategy, ChunkingStrategy::Random);
        assert_eq!(cfg.cost.parallel_lanes, 8);
    }

    #[test]
    fn presets_underlie_explicit_keys() {
        let text = format!("preset = \"text_only\"\n[compilation]\nfeature_mode = \"image_only\"\n{BASE}");
        let cfg = ExperimentConfig::from_toml(&text, &[]).unwrap();
        assert_eq!(cfg.chunking.feature_mode, FeatureMode::TextOnly);
        assert_eq!(cfg.compilation.feature_mode, FeatureMode::ImageOnly);
        let cfg = ExperimentConfig::from_toml(BASE, &ov(&[("preset", "divprune")])).unwrap();
        assert_eq!((cfg.method, cfg.selection), (Method::FullContext, Selection::Diversity));
    }

    #[test]
    fn every_preset_round_trips() {
        for p in Preset::ALL {
            let mut cfg = p.config();
            cfg.data.synthetic = Some(SyntheticSuiteSpec::default());
            let back = ExperimentConfig::from_toml(&cfg.to_toml(), &[]).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        for (text, o) in [
            ("", vec![]),
            (BASE, ov(&[("chunking.bogus", "1")])),
            (BASE, ov(&[("shots", "2"), ("chunking.k", "3")])),
            (BASE, ov(&[("decode.max_new_tokens", "0")])),
            (BASE, ov(&[("preset", "nope")])),
            (BASE, ov(&[("beta", "-1")])),
            ("[data]\npath = \"x.jsonl\"\n", vec![]),
        ] {
            let err = ExperimentConfig::from_toml(text, &o).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{err}");
        }
        assert!(parse_override("novalue").is_err());
        assert_eq!(parse_override("a.b = 3").unwrap(), ("a.b", "3"));
    }
}
