//! Gateway configuration: one JSON file, with `SELFROUTE_*` environment
//! variables overriding scalar fields.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use selfroute::backend::SyntheticBackendConfig;
use selfroute::preinference::PreinferenceConfig;
use selfroute::{BackendKind, BackendSpec, RunSeed};

use crate::error::CliError;

pub const ENV_PREFIX: &str = "SELFROUTE_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    pub general: BackendSpec,
    pub reasoning: BackendSpec,
    #[serde(default = "default_router_path")]
    pub router_path: PathBuf,
    #[serde(default)]
    pub preinference: PreinferenceConfig,
    #[serde(default = "default_threshold")]
    pub route_threshold: f64,
    #[serde(default = "default_concurrency")]
    pub concurrency_limit: usize,
    #[serde(default = "default_log_level")]
    pub log_level: String,
    /// Base seed for per-request seeds.
    #[serde(default)]
    pub seed: RunSeed,
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_router_path() -> PathBuf {
    PathBuf::from("router.json")
}

fn default_threshold() -> f64 {
    0.5
}

fn default_concurrency() -> usize {
    8
}

fn default_log_level() -> String {
    "info".into()
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            listen: default_listen(),
            general: BackendSpec::synthetic("general", BackendKind::General, SyntheticBackendConfig::general_default()),
            reasoning: BackendSpec::synthetic(
                "reasoning",
                BackendKind::Reasoning,
                SyntheticBackendConfig::reasoning_default(),
            ),
            router_path: default_router_path(),
            preinference: PreinferenceConfig::default(),
            route_threshold: default_threshold(),
            concurrency_limit: default_concurrency(),
            log_level: default_log_level(),
            seed: RunSeed(0),
        }
    }
}

impl GatewayConfig {
    pub fn from_json(s: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| CliError::new("config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let s = std::fs::read_to_string(path).map_err(|e| CliError::new("config", format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }

    /// Loads `path` if given, else the defaults, then applies the process
    /// environment.
    pub fn resolve(path: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply_env(std::env::vars())?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(0.0..=1.0).contains(&self.route_threshold) {
            return Err(CliError::new("config", format!("route_threshold {} outside [0, 1]", self.route_threshold)));
        }
        if self.concurrency_limit == 0 {
            return Err(CliError::new("config", "concurrency_limit must be at least 1"));
        }
        if self.general.kind != BackendKind::General || self.reasoning.kind != BackendKind::Reasoning {
            return Err(CliError::new("config", "general and reasoning backends have the wrong kinds"));
        }
        self.preinference.validate().map_err(|e| CliError::new("config", e))?;
        Ok(())
    }

    /// Overrides scalar fields from `SELFROUTE_<FIELD>` variables.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), CliError> {
        for (key, value) in vars {
            let Some(field) = key.strip_prefix(ENV_PREFIX) else { continue };
            let bad = |e: &dyn std::fmt::Display| CliError::new("config", format!("{key}={value:?}: {e}"));
            match field {
                "LISTEN" => self.listen = value,
                "ROUTER_PATH" => self.router_path = PathBuf::from(value),
                "ROUTE_THRESHOLD" => self.route_threshold = value.parse().map_err(|e| bad(&e))?,
                "CONCURRENCY_LIMIT" => self.concurrency_limit = value.parse().map_err(|e| bad(&e))?,
                "LOG_LEVEL" => self.log_level = value,
                "SEED" => self.seed = RunSeed(value.parse().map_err(|e| bad(&e))?),
                "GENERAL_ENDPOINT" => self.general.endpoint = value,
                "REASONING_ENDPOINT" => self.reasoning.endpoint = value,
                "PREINFERENCE_BUDGET_TOKENS" => self.preinference.budget_tokens = value.parse().map_err(|e| bad(&e))?,
                _ => tracing::warn!(variable = %key, "ignoring unknown configuration variable"),
            }
        }
        self.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_field_equal() {
        let mut cfg = GatewayConfig { route_threshold: 0.1 + 0.2, seed: RunSeed(u64::MAX), ..GatewayConfig::default() };
        cfg.general.synthetic.as_mut().unwrap().class_separation = 1.0 / 3.0;
        let back = GatewayConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_json(), cfg.to_json());
    }

    #[test]
    fn env_overrides_scalars() {
        let mut cfg = GatewayConfig::default();
        let vars = [
            ("SELFROUTE_ROUTE_THRESHOLD", "0.7"),
            ("SELFROUTE_CONCURRENCY_LIMIT", "3"),
            ("SELFROUTE_LISTEN", "0.0.0.0:9000"),
            ("SELFROUTE_GENERAL_ENDPOINT", "http://10.0.0.1:7000"),
            ("PATH", "/bin"),
        ];
        cfg.apply_env(vars.iter().map(|(k, v)| (k.to_string(), v.to_string()))).unwrap();
        assert_eq!(cfg.route_threshold, 0.7);
        assert_eq!(cfg.concurrency_limit, 3);
        assert_eq!(cfg.listen, "0.0.0.0:9000");
        assert_eq!(cfg.general.endpoint, "http://10.0.0.1:7000");
        let err = cfg.apply_env([("SELFROUTE_ROUTE_THRESHOLD".to_string(), "2".to_string())]).unwrap_err();
        assert_eq!(err.stage, "config");
        assert!(cfg.apply_env([("SELFROUTE_SEED".to_string(), "x".to_string())]).is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        let mut v = serde_json::to_value(GatewayConfig::default()).unwrap();
        v["listen_addr"] = "x".into();
        assert!(GatewayConfig::from_json(&v.to_string()).is_err());
    }
}
