//! Environment provisioning through pluggable providers.
//!
//! A requirement is `provider:payload`. Each distinct requirement set gets
//! its own directory `<root>/<workspace>/envs/<hash>`, so plugins with
//! conflicting requirements never share one.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Stdio;
use std::sync::Arc;

use async_trait::async_trait;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvSpec {
    pub requirements: Vec<String>,
    pub workspace: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Outcome {
    pub requirement: String,
    pub provider: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EnvHandle {
    pub dir: PathBuf,
    pub outcomes: Vec<Outcome>,
}

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("unknown environment provider {0:?}")]
    UnknownProvider(String),
    #[error("provisioning {requirement:?} failed with exit code {code:?}: {output}")]
    ProvisionFailed { requirement: String, code: Option<i32>, output: String },
    #[error("environment i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Failure reported by a provider for one requirement.
#[derive(Debug)]
pub struct ProviderFailure {
    pub code: Option<i32>,
    pub output: String,
}

#[async_trait]
pub trait EnvProvider: Send + Sync {
    async fn provision(&self, payload: &str, env_dir: &Path) -> Result<String, ProviderFailure>;
}

/// Accepts anything and records it.
pub struct NullProvider;

#[async_trait]
impl EnvProvider for NullProvider {
    async fn provision(&self, payload: &str, _env_dir: &Path) -> Result<String, ProviderFailure> {
        Ok(format!("recorded {payload}"))
    }
}

/// Runs a command template inside the environment directory; `{payload}`
/// in any argument is replaced by the requirement payload. Exit code 0 is
/// success.
pub struct CommandProvider {
    template: Vec<String>,
}

impl CommandProvider {
    pub fn new(template: Vec<String>) -> Self {
        assert!(!template.is_empty(), "command template needs a program");
        CommandProvider { template }
    }

    pub fn shell() -> Self {
        CommandProvider::new(vec!["sh".into(), "-c".into(), "{payload}".into()])
    }
}

#[async_trait]
impl EnvProvider for CommandProvider {
    async fn provision(&self, payload: &str, env_dir: &Path) -> Result<String, ProviderFailure> {
        let args: Vec<String> = self.template.iter().map(|a| a.replace("{payload}", payload)).collect();
        let out = tokio::process::Command::new(&args[0])
            .args(&args[1..])
            .current_dir(env_dir)
            .env("PLUGIN_ENV_DIR", env_dir)
            .stdin(Stdio::null())
            .output()
            .await
            .map_err(|e| ProviderFailure { code: None, output: e.to_string() })?;
        let mut output = String::from_utf8_lossy(&out.stdout).into_owned();
        output.push_str(&String::from_utf8_lossy(&out.stderr));
        if out.status.success() {
            Ok(output)
        } else {
            Err(ProviderFailure { code: out.status.code(), output })
        }
    }
}

#[derive(Clone)]
pub struct ProviderRegistry {
    providers: BTreeMap<String, Arc<dyn EnvProvider>>,
}

impl Default for ProviderRegistry {
    /// `none` (null provider) and `cmd` (run through `sh -c`).
    fn default() -> Self {
        ProviderRegistry::empty()
            .with("none", Arc::new(NullProvider))
            .with("cmd", Arc::new(CommandProvider::shell()))
    }
}

impl ProviderRegistry {
    pub fn empty() -> Self {
        ProviderRegistry { providers: BTreeMap::new() }
    }

    pub fn with(mut self, prefix: &str, provider: Arc<dyn EnvProvider>) -> Self {
        self.providers.insert(prefix.to_string(), provider);
        self
    }

    pub fn prefixes(&self) -> Vec<String> {
        self.providers.keys().cloned().collect()
    }

    fn get(&self, prefix: &str) -> Option<&Arc<dyn EnvProvider>> {
        self.providers.get(prefix)
    }
}

fn split_requirement(req: &str) -> (&str, &str) {
    req.split_once(':').unwrap_or((req, ""))
}

pub fn env_dir(root: &Path, spec: &EnvSpec) -> PathBuf {
    let mut h = Sha256::new();
    for r in &spec.requirements {
        h.update(r.as_bytes());
        h.update([0]);
    }
    root.join(&spec.workspace).join("envs").join(&hex::encode(h.finalize())[..16])
}

pub async fn provision_env(root: &Path, spec: &EnvSpec, providers: &ProviderRegistry) -> Result<EnvHandle, EnvError> {
    for r in &spec.requirements {
        let (prefix, _) = split_requirement(r);
        if providers.get(prefix).is_none() {
            return Err(EnvError::UnknownProvider(prefix.to_string()));
        }
    }
    let dir = env_dir(root, spec);
    tokio::fs::create_dir_all(&dir)
        .await
        .map_err(|source| EnvError::Io { path: dir.clone(), source })?;
    let mut outcomes = Vec::new();
    for r in &spec.requirements {
        let (prefix, payload) = split_requirement(r);
        let provider = providers.get(prefix).expect("checked above");
        match provider.provision(payload, &dir).await {
            Ok(output) => outcomes.push(Outcome { requirement: r.clone(), provider: prefix.to_string(), output }),
            Err(f) => return Err(EnvError::ProvisionFailed { requirement: r.clone(), code: f.code, output: f.output }),
        }
    }
    Ok(EnvHandle { dir, outcomes })
}
