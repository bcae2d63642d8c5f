//! Run configuration and validation.

use std::path::{Path, PathBuf};

use medqa_core::backend::{
    Completer, DecodingParams, HttpBackend, Mode, ReplayCache, API_KEY_ENV, DEFAULT_MODEL,
};
use medqa_core::pipelines::SystemId;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    /// Exit code per the error class: configuration problems are 2.
    pub fn exit_code(&self) -> i32 {
        2
    }
}

/// Everything a run command needs; built by the CLI layer and validated
/// before any model call.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mode: Mode,
    pub model_id: String,
    pub params: DecodingParams,
    pub parallelism: usize,
    pub cache_path: Option<PathBuf>,
    /// Explicit run directory; a timestamped one is created when absent.
    pub run_dir: Option<PathBuf>,
    pub systems: Vec<SystemId>,
    pub blank_marker: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Replay,
            model_id: DEFAULT_MODEL.to_string(),
            params: DecodingParams::default(),
            parallelism: 4,
            cache_path: None,
            run_dir: None,
            systems: SystemId::ENSEMBLE.to_vec(),
            blank_marker: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.parallelism == 0 {
            return Err(CliError::config("parallelism must be at least 1"));
        }
        self.params
            .validate()
            .map_err(|e| CliError::config(e.to_string()))?;
        if self.model_id.trim().is_empty() {
            return Err(CliError::config("model id must be non-empty"));
        }
        if self.systems.is_empty() {
            return Err(CliError::config("at least one system must be selected"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for system in &self.systems {
            if !seen.insert(*system) {
                return Err(CliError::config(format!("system {system} listed twice")));
            }
        }
        match self.mode {
            Mode::Live => {}
            Mode::Record | Mode::Replay => {
                if self.cache_path.is_none() {
                    return Err(CliError::config(format!(
                        "{} mode needs --cache or MEDQA_CACHE",
                        self.mode.as_str()
                    )));
                }
            }
            Mode::ReplayStrict => {
                let Some(path) = &self.cache_path else {
                    return Err(CliError::config(
                        "replay-strict mode needs --cache or MEDQA_CACHE",
                    ));
                };
                if !path.exists() {
                    return Err(CliError::config(format!(
                        "replay-strict cache {} does not exist",
                        path.display()
                    )));
                }
            }
        }
        if self.mode.needs_provider() && std::env::var(API_KEY_ENV).unwrap_or_default().is_empty()
        {
            return Err(CliError::config(format!(
                "{} mode needs {API_KEY_ENV}",
                self.mode.as_str()
            )));
        }
        if let Ok(path) = std::env::var(medqa_core::textnorm::CHOICE_MAP_ENV) {
            if !path.is_empty() {
                medqa_core::textnorm::ChoiceMap::from_tsv_file(Path::new(&path)).map_err(|e| {
                    CliError::config(format!(
                        "{}: {e}",
                        medqa_core::textnorm::CHOICE_MAP_ENV
                    ))
                })?;
            }
        }
        Ok(())
    }

    /// The run directory to use, creating it and probing writability.
    pub fn prepare_run_dir(&self) -> Result<PathBuf, CliError> {
        let dir = match &self.run_dir {
            Some(dir) => dir.clone(),
            None => {
                let stamp = std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0);
                PathBuf::from("runs").join(format!("run-{stamp}"))
            }
        };
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::config(format!("run dir {}: {e}", dir.display())))?;
        let probe = dir.join(".write-probe");
        std::fs::write(&probe, b"")
            .map_err(|e| CliError::config(format!("run dir {} not writable: {e}", dir.display())))?;
        let _ = std::fs::remove_file(&probe);
        Ok(dir)
    }

    /// Open the cache and provider this mode needs. Returns load warnings
    /// (e.g. a truncated cache tail).
    pub fn build_completer(&self) -> Result<(Completer, Vec<String>), CliError> {
        let mut warnings = Vec::new();
        let cache = match (&self.cache_path, self.mode) {
            (_, Mode::Live) => None,
            (Some(path), _) => {
                let (cache, report) = ReplayCache::open(path)
                    .map_err(|e| CliError::config(e.to_string()))?;
                if report.truncated > 0 {
                    warnings.push(format!(
                        "cache {}: dropped {} corrupt trailing record(s)",
                        path.display(),
                        report.truncated
                    ));
                }
                Some(cache)
            }
            (None, _) => None,
        };
        let provider: Option<Box<dyn medqa_core::backend::CompletionBackend>> =
            if self.mode.needs_provider() {
                Some(Box::new(
                    HttpBackend::from_env().map_err(|e| CliError::config(e.to_string()))?,
                ))
            } else {
                None
            };
        Ok((Completer::new(self.mode, cache, provider), warnings))
    }
}

/// Parse `--systems` values: comma-separated ids or `all`.
pub fn parse_systems(values: &[String]) -> Result<Vec<SystemId>, CliError> {
    if values.is_empty() {
        return Ok(SystemId::ENSEMBLE.to_vec());
    }
    let mut systems = Vec::new();
    for value in values {
        if value == "all" {
            return Ok(SystemId::ALL.to_vec());
        }
        let system = SystemId::parse(value)
            .ok_or_else(|| CliError::config(format!("unknown system {value:?}")))?;
        systems.push(system);
    }
    Ok(systems)
}

/// Resolve the cache path: explicit flag, then `MEDQA_CACHE`.
pub fn resolve_cache_path(flag: Option<PathBuf>) -> Option<PathBuf> {
    flag.or_else(|| {
        std::env::var(medqa_core::backend::CACHE_ENV)
            .ok()
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
    })
}

pub fn require_cache_path(flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
    resolve_cache_path(flag)
        .ok_or_else(|| CliError::config("cache path required: pass --cache or set MEDQA_CACHE"))
}

/// Does `path` look like an existing file we may read?
pub fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::config(format!(
            "{what} {} is not a readable file",
            path.display()
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_config_carries_the_default_decoding_params() {
        let config = RunConfig::default();
        assert_eq!(config.params.temperature, 0.1);
        assert_eq!(config.params.top_p, 0.8);
        assert_eq!(config.params.top_k, 40);
        assert_eq!(config.mode, Mode::Replay);
        assert_eq!(config.systems, SystemId::ENSEMBLE.to_vec());
    }

    #[test]
    fn replay_without_cache_is_a_config_error() {
        let config = RunConfig::default();
        assert!(matches!(config.validate(), Err(CliError::Config(_))));
    }

    #[test]
    fn replay_strict_requires_existing_cache() {
        let config = RunConfig {
            mode: Mode::ReplayStrict,
            cache_path: Some(PathBuf::from("/nonexistent/cache.jsonl")),
            ..Default::default()
        };
        assert!(matches!(config.validate(), Err(CliError::Config(_))));
    }

    #[test]
    fn zero_parallelism_rejected() {
        let config = RunConfig {
            parallelism: 0,
            ..Default::default()
        };
        assert!(matches!(config.validate(), Err(CliError::Config(_))));
    }

    #[test]
    fn systems_parsing() {
        assert_eq!(parse_systems(&[]).unwrap(), SystemId::ENSEMBLE.to_vec());
        assert_eq!(
            parse_systems(&["afs".to_string()]).unwrap(),
            vec![SystemId::Afs]
        );
        assert_eq!(parse_systems(&["all".to_string()]).unwrap(), SystemId::ALL.to_vec());
        assert!(parse_systems(&["gpt".to_string()]).is_err());
    }
}
