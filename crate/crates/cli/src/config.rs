//! The JSON run configuration and its validation. Everything here runs
//! before any network call.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use folklore_core::lean::LeanServerConfig;
use folklore_core::llm::EndpointConfig;
use folklore_core::model::{Domain, ModelProfile, ReasoningEffort, SeedContext, StageConfig, StageKind};
use folklore_core::pipeline::StageSet;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError { path: path.into(), message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() || self.path == "." {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedSpec {
    pub path: PathBuf,
    pub domain: Domain,
    #[serde(default)]
    pub topic: Option<String>,
    #[serde(default)]
    pub seed_id: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointSpec {
    pub url: String,
    pub model: String,
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default)]
    pub auth_env_var: Option<String>,
    #[serde(default)]
    pub auth_header: Option<String>,
    #[serde(default)]
    pub request_timeout_s: Option<u64>,
    /// Profile name: a key of `profiles` or a built-in preset.
    #[serde(default)]
    pub profile: Option<String>,
    /// Cap on in-flight requests to this endpoint.
    #[serde(default)]
    pub max_concurrent: Option<usize>,
}

impl EndpointSpec {
    pub fn endpoint(&self) -> EndpointConfig {
        let mut e: EndpointConfig = serde_json::from_value(serde_json::json!({ "url": self.url })).expect("defaults");
        if let Some(p) = &self.path {
            e.path = p.clone();
        }
        e.auth_env_var = self.auth_env_var.clone();
        if let Some(h) = &self.auth_header {
            e.auth_header = h.clone();
        }
        if let Some(t) = self.request_timeout_s {
            e.request_timeout_s = t;
        }
        e
    }
}

/// Per-stage (or per-evaluated-model) settings; unset fields fall back to
/// the endpoint's profile and the stage defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub profile: Option<String>,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub top_p: Option<f64>,
    #[serde(default)]
    pub max_completion_tokens: Option<u32>,
    #[serde(default)]
    pub reasoning_effort: Option<ReasoningEffort>,
    #[serde(default)]
    pub concurrency: Option<usize>,
    #[serde(default)]
    pub injection_preamble: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpecs {
    #[serde(default)]
    pub discovery: StageSpec,
    #[serde(default)]
    pub judge: StageSpec,
    #[serde(default)]
    pub formalize: StageSpec,
    #[serde(default)]
    pub prove: StageSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalModelSpec {
    pub name: String,
    pub endpoint: String,
    #[serde(default)]
    pub profile: Option<String>,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub top_p: Option<f64>,
    #[serde(default)]
    pub max_completion_tokens: Option<u32>,
    #[serde(default)]
    pub reasoning_effort: Option<ReasoningEffort>,
    #[serde(default)]
    pub concurrency: Option<usize>,
    #[serde(default)]
    pub injection_preamble: Option<Vec<String>>,
}

impl EvalModelSpec {
    fn as_stage(&self) -> StageSpec {
        StageSpec {
            endpoint: Some(self.endpoint.clone()),
            profile: self.profile.clone(),
            temperature: self.temperature,
            top_p: self.top_p,
            max_completion_tokens: self.max_completion_tokens,
            reasoning_effort: self.reasoning_effort,
            concurrency: self.concurrency,
            injection_preamble: self.injection_preamble.clone(),
        }
    }
}

fn default_k() -> u32 {
    folklore_core::model::DEFAULT_K_REPAIRS
}

fn default_t() -> u32 {
    folklore_core::model::DEFAULT_T_REPAIR
}

fn default_lease() -> u64 {
    folklore_core::store::DEFAULT_LEASE_S
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub workdir: Option<PathBuf>,
    #[serde(default)]
    pub seeds: Vec<SeedSpec>,
    #[serde(default)]
    pub profiles: BTreeMap<String, ModelProfile>,
    #[serde(default)]
    pub llm_endpoints: BTreeMap<String, EndpointSpec>,
    #[serde(default)]
    pub lean_server: Option<LeanServerConfig>,
    #[serde(default)]
    pub stages: StageSpecs,
    #[serde(default = "default_k", rename = "K_repairs", alias = "k_repairs")]
    pub k_repairs: u32,
    #[serde(default = "default_t", rename = "T_repair", alias = "t_repair")]
    pub t_repair: u32,
    #[serde(default)]
    pub prng_seed: u64,
    #[serde(default = "default_lease")]
    pub lease_s: u64,
    #[serde(default)]
    pub prompt_dir: Option<PathBuf>,
    #[serde(default)]
    pub eval_models: Vec<EvalModelSpec>,
}

/// A parsed config plus where it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base_dir: PathBuf,
    /// SHA-256 of the canonical JSON form.
    pub hash: String,
}

pub fn load(path: &Path) -> Result<LoadedConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::new("", format!("cannot read config {}: {e}", path.display())))?;
    parse(&text, path.parent().unwrap_or(Path::new(".")))
}

pub fn parse(text: &str, base_dir: &Path) -> Result<LoadedConfig, ConfigError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| ConfigError::new("", format!("invalid JSON: {e}")))?;
    let config: RunConfig = serde_path_to_error::deserialize(&value)
        .map_err(|e| ConfigError::new(e.path().to_string(), e.inner().to_string()))?;
    let hash = hex::encode(Sha256::digest(value.to_string().as_bytes()));
    let loaded = LoadedConfig { config, base_dir: base_dir.to_path_buf(), hash };
    loaded.validate()?;
    Ok(loaded)
}

impl LoadedConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let c = &self.config;
        for (i, s) in c.seeds.iter().enumerate() {
            if s.path.as_os_str().is_empty() {
                return Err(ConfigError::new(format!("seeds[{i}].path"), "empty path"));
            }
        }
        let mut ids = std::collections::HashSet::new();
        for (i, s) in c.seeds.iter().enumerate() {
            if !ids.insert(seed_id(s)) {
                return Err(ConfigError::new(format!("seeds[{i}]"), format!("duplicate seed id {}", seed_id(s))));
            }
        }
        for (name, e) in &c.llm_endpoints {
            if e.url.trim().is_empty() {
                return Err(ConfigError::new(format!("llm_endpoints.{name}.url"), "empty url"));
            }
            if e.model.trim().is_empty() {
                return Err(ConfigError::new(format!("llm_endpoints.{name}.model"), "empty model"));
            }
            if let Some(p) = &e.profile {
                self.profile(p).ok_or_else(|| {
                    ConfigError::new(format!("llm_endpoints.{name}.profile"), format!("unknown profile {p:?}"))
                })?;
            }
            if e.max_concurrent == Some(0) {
                return Err(ConfigError::new(format!("llm_endpoints.{name}.max_concurrent"), "must be positive"));
            }
        }
        if let Some(l) = &c.lean_server {
            if l.url.trim().is_empty() {
                return Err(ConfigError::new("lean_server.url", "empty url"));
            }
            if l.timeout_s == 0 {
                return Err(ConfigError::new("lean_server.timeout_s", "must be positive"));
            }
            if l.max_concurrent == 0 {
                return Err(ConfigError::new("lean_server.max_concurrent", "must be positive"));
            }
        }
        if c.lease_s == 0 {
            return Err(ConfigError::new("lease_s", "must be positive"));
        }
        if !c.llm_endpoints.is_empty() {
            for kind in StageKind::ALL {
                self.stage_config(kind, None)?;
            }
        }
        let mut names = std::collections::HashSet::new();
        for (i, m) in c.eval_models.iter().enumerate() {
            if !names.insert(m.name.as_str()) {
                return Err(ConfigError::new(format!("eval_models[{i}].name"), format!("duplicate name {:?}", m.name)));
            }
            self.eval_config(i)?;
        }
        Ok(())
    }

    pub fn profile(&self, name: &str) -> Option<ModelProfile> {
        self.config.profiles.get(name).cloned().or_else(|| ModelProfile::preset(name))
    }

    fn build_stage(&self, kind: StageKind, spec: &StageSpec, at: &str) -> Result<(String, StageConfig), ConfigError> {
        let c = &self.config;
        let endpoint = match &spec.endpoint {
            Some(e) => e.clone(),
            None if c.llm_endpoints.len() == 1 => c.llm_endpoints.keys().next().unwrap().clone(),
            None => {
                return Err(ConfigError::new(
                    format!("{at}.endpoint"),
                    "required unless exactly one llm endpoint is configured",
                ))
            }
        };
        let ep = c
            .llm_endpoints
            .get(&endpoint)
            .ok_or_else(|| ConfigError::new(format!("{at}.endpoint"), format!("unknown endpoint {endpoint:?}")))?;
        let mut cfg = StageConfig::default_for(kind, &ep.model);
        let profile_name = spec.profile.as_ref().or(ep.profile.as_ref());
        if let Some(p) = profile_name {
            let profile = self
                .profile(p)
                .ok_or_else(|| ConfigError::new(format!("{at}.profile"), format!("unknown profile {p:?}")))?;
            cfg = cfg.with_profile(&profile);
        }
        if let Some(v) = spec.temperature {
            cfg.temperature = v;
        }
        if let Some(v) = spec.top_p {
            cfg.top_p = v;
        }
        if let Some(v) = spec.max_completion_tokens {
            cfg.max_completion_tokens = v;
        }
        if spec.reasoning_effort.is_some() {
            cfg.reasoning_effort = spec.reasoning_effort;
        }
        if let Some(v) = spec.concurrency {
            cfg.concurrency = v;
        }
        if let Some(v) = &spec.injection_preamble {
            cfg.injection_preamble = v.clone();
        }
        match kind {
            StageKind::Formalize => cfg.trial_budget = c.t_repair,
            StageKind::Prove => cfg.trial_budget = c.k_repairs,
            _ => {}
        }
        cfg.validate().map_err(|e| ConfigError::new(at, e.to_string()))?;
        Ok((endpoint, cfg))
    }

    /// Endpoint name and resolved settings of a pipeline stage, with an
    /// optional concurrency override from the command line.
    pub fn stage_config(
        &self,
        kind: StageKind,
        concurrency: Option<usize>,
    ) -> Result<(String, StageConfig), ConfigError> {
        let spec = match kind {
            StageKind::Discovery => &self.config.stages.discovery,
            StageKind::Judge => &self.config.stages.judge,
            StageKind::Formalize => &self.config.stages.formalize,
            StageKind::Prove => &self.config.stages.prove,
        };
        let mut spec = spec.clone();
        if concurrency.is_some() {
            spec.concurrency = concurrency;
        }
        self.build_stage(kind, &spec, &format!("stages.{kind}"))
    }

    pub fn stage_configs(
        &self,
        overrides: &StageSet<Option<usize>>,
    ) -> Result<StageSet<(String, StageConfig)>, ConfigError> {
        Ok(StageSet {
            discovery: self.stage_config(StageKind::Discovery, overrides.discovery)?,
            judge: self.stage_config(StageKind::Judge, overrides.judge)?,
            formalize: self.stage_config(StageKind::Formalize, overrides.formalize)?,
            prove: self.stage_config(StageKind::Prove, overrides.prove)?,
        })
    }

    pub fn eval_config(&self, i: usize) -> Result<(String, StageConfig), ConfigError> {
        let m = &self.config.eval_models[i];
        self.build_stage(StageKind::Prove, &m.as_stage(), &format!("eval_models[{i}]"))
    }

    /// Reads every seed file. Missing or empty files are config errors.
    pub fn seeds(&self) -> Result<Vec<SeedContext>, ConfigError> {
        let mut out = Vec::new();
        for (i, s) in self.config.seeds.iter().enumerate() {
            let path = self.resolve(&s.path);
            let content = std::fs::read_to_string(&path)
                .map_err(|e| ConfigError::new(format!("seeds[{i}].path"), format!("{}: {e}", path.display())))?;
            let seed = SeedContext {
                seed_id: seed_id(s),
                path: s.path.to_string_lossy().into_owned(),
                domain: s.domain,
                topic: s.topic.clone().unwrap_or_else(|| {
                    s.path.file_stem().map(|x| x.to_string_lossy().into_owned()).unwrap_or_default()
                }),
                content,
            };
            seed.validate().map_err(|e| ConfigError::new(format!("seeds[{i}]"), e.to_string()))?;
            out.push(seed);
        }
        Ok(out)
    }
}

pub fn seed_id(s: &SeedSpec) -> String {
    s.seed_id.clone().unwrap_or_else(|| s.path.to_string_lossy().replace('\\', "/"))
}
