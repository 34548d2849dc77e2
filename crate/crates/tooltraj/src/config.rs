//! Run configuration: a TOML file, `key=value` overrides and a stable hash.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tooltraj_core::grounding::JudgePolicy;
use tooltraj_core::mock::{Defect, FaultConfig};
use tooltraj_core::prompts::PromptSet;
use tooltraj_core::Stage;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid override `{0}`: expected key=value")]
    OverrideSyntax(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub endpoint_url: String,
    /// Name of the environment variable holding the API key. Empty means
    /// no authorization header.
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub max_concurrency: usize,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
}

impl Default for BackendSection {
    fn default() -> Self {
        BackendSection {
            kind: BackendKind::Mock,
            endpoint_url: "http://localhost:8000/v1/chat/completions".into(),
            api_key_env: "TOOLTRAJ_API_KEY".into(),
            timeout_secs: 120,
            max_retries: 3,
            max_concurrency: 4,
            backoff_base_ms: 500,
            backoff_max_ms: 30_000,
        }
    }
}

/// Model id per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsSection {
    pub annotate: String,
    pub extract: String,
    pub generate: String,
    pub refine: String,
    pub judge: String,
}

impl Default for ModelsSection {
    fn default() -> Self {
        let m = String::from("mock-model");
        ModelsSection {
            annotate: m.clone(),
            extract: m.clone(),
            generate: m.clone(),
            refine: m.clone(),
            judge: m,
        }
    }
}

impl ModelsSection {
    pub fn for_stage(&self, stage: Stage) -> &str {
        match stage {
            Stage::Annotate => &self.annotate,
            Stage::Extract => &self.extract,
            Stage::Generate => &self.generate,
            Stage::Refine => &self.refine,
            Stage::Judge => &self.judge,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    pub temperature: f64,
    pub judge_temperature: f64,
    pub max_tokens: u32,
}

impl Default for SamplingSection {
    fn default() -> Self {
        SamplingSection {
            temperature: 0.7,
            judge_temperature: 0.0,
            max_tokens: 8192,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockSection {
    pub fault_rate: f64,
    /// Stages eligible for faults; empty means all.
    pub fault_stages: Vec<Stage>,
    /// Defect classes to draw from; empty means all.
    pub defects: Vec<Defect>,
}

impl MockSection {
    pub fn faults(&self) -> FaultConfig {
        FaultConfig {
            rate: self.fault_rate,
            stages: self.fault_stages.clone(),
            defects: self.defects.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub concurrency: usize,
    /// Extra attempts per record per stage after an unparseable output.
    pub stage_retries: u32,
    /// Extra attempts for an unparseable annotation.
    pub annotate_retries: u32,
    pub judge: bool,
    pub ground_check: bool,
    pub judge_policy: JudgePolicy,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            concurrency: 4,
            stage_retries: 2,
            annotate_retries: 1,
            judge: true,
            ground_check: true,
            judge_policy: JudgePolicy::RequireAll,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportSection {
    pub inline_markup: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsSection {
    pub bin_width: usize,
    pub count_system: bool,
}

impl Default for StatsSection {
    fn default() -> Self {
        StatsSection {
            bin_width: 5,
            count_system: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Field of each input line holding the text.
    pub text_field: String,
    /// Field holding a record id, if any.
    pub id_field: String,
    pub limit: Option<usize>,
    /// Directory with `<stage>.txt` templates replacing the built-in ones.
    pub prompts_dir: Option<String>,
    pub backend: BackendSection,
    pub models: ModelsSection,
    pub sampling: SamplingSection,
    pub mock: MockSection,
    pub pipeline: PipelineSection,
    pub export: ExportSection,
    pub stats: StatsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            text_field: "content".into(),
            id_field: "id".into(),
            limit: None,
            prompts_dir: None,
            backend: BackendSection::default(),
            models: ModelsSection::default(),
            sampling: SamplingSection::default(),
            mock: MockSection::default(),
            pipeline: PipelineSection::default(),
            export: ExportSection::default(),
            stats: StatsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.backend.max_concurrency == 0 {
            return bad("backend.max_concurrency must be at least 1");
        }
        if self.pipeline.concurrency == 0 {
            return bad("pipeline.concurrency must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.mock.fault_rate) {
            return bad("mock.fault_rate must lie in [0, 1]");
        }
        if self.sampling.temperature < 0.0 || self.sampling.judge_temperature < 0.0 {
            return bad("temperatures must be non-negative");
        }
        if self.sampling.max_tokens == 0 {
            return bad("sampling.max_tokens must be positive");
        }
        if self.text_field.is_empty() {
            return bad("text_field must not be empty");
        }
        if self.stats.bin_width == 0 {
            return bad("stats.bin_width must be positive");
        }
        Ok(())
    }

    /// Applies `a.b.c=value` overrides. Values are read as TOML literals
    /// and fall back to plain strings; unknown keys are rejected.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, ConfigError> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut tree = toml::Value::try_from(self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| ConfigError::OverrideSyntax(item.clone()))?;
            let value = parse_literal(raw.trim());
            set_path(&mut tree, key.trim(), value)?;
        }
        let cfg: RunConfig = tree
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn prompts(&self) -> Result<PromptSet, ConfigError> {
        let mut set = PromptSet::default();
        if let Some(dir) = &self.prompts_dir {
            for stage in Stage::ALL {
                let path = Path::new(dir).join(format!("{stage}.txt"));
                if path.exists() {
                    *set.template_mut(stage) = std::fs::read_to_string(&path).map_err(|source| ConfigError::Read {
                        path: path.display().to_string(),
                        source,
                    })?;
                }
            }
        }
        Ok(set)
    }

    /// SHA-256 over every setting that can change outputs, plus the prompt
    /// texts. Worker and in-flight limits are left out.
    pub fn hash(&self, prompts: &PromptSet) -> String {
        let mut normalized = self.clone();
        normalized.pipeline.concurrency = 0;
        normalized.backend.max_concurrency = 0;
        normalized.limit = None;
        let mut material = BTreeMap::new();
        material.insert("config", serde_json::to_value(&normalized).expect("config serializes"));
        material.insert("prompts", serde_json::to_value(prompts).expect("prompts serialize"));
        let bytes = serde_json::to_vec(&material).expect("json");
        hex::encode(Sha256::digest(bytes))
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Probe {
        v: toml::Value,
    }
    toml::from_str::<Probe>(&format!("v = {raw}"))
        .map(|p| p.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

fn set_path(tree: &mut toml::Value, key: &str, value: toml::Value) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut node = tree;
    for part in parents {
        node = node
            .as_table_mut()
            .and_then(|t| t.get_mut(*part))
            .ok_or_else(|| ConfigError::Invalid(format!("unknown key `{key}`")))?;
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| ConfigError::Invalid(format!("unknown key `{key}`")))?;
    // Optional fields serialize as absent, so a missing leaf is accepted
    // here and left to deserialization to reject.
    table.insert((*last).to_string(), value);
    Ok(())
}
