//! Plugin references: `owner/repo:PluginName[@pin]` or a direct file URL.

use std::fmt;
use std::str::FromStr;

use crate::names::is_valid_name;

/// File extension every plugin document carries.
pub const PLUGIN_EXTENSION: &str = ".imjoy.html";

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum PluginRef {
    Repo {
        owner: String,
        repo: String,
        plugin: String,
        pin: Option<String>,
    },
    Url(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("bad plugin reference {input:?}: {reason}")]
pub struct BadRef {
    pub input: String,
    pub reason: String,
}

fn is_repo_segment(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl PluginRef {
    pub fn parse(s: &str) -> Result<PluginRef, BadRef> {
        let bad = |reason: &str| BadRef { input: s.to_string(), reason: reason.to_string() };
        if s.contains("://") {
            if !(s.starts_with("http://") || s.starts_with("https://") || s.starts_with("file://")) {
                return Err(bad("unsupported URL scheme"));
            }
            if !s.ends_with(PLUGIN_EXTENSION) {
                return Err(bad("direct URL must name a .imjoy.html file"));
            }
            return Ok(PluginRef::Url(s.to_string()));
        }
        let (repo_part, plugin_part) = s.split_once(':').ok_or_else(|| bad("expected owner/repo:PluginName"))?;
        let (owner, repo) = repo_part.split_once('/').ok_or_else(|| bad("expected owner/repo"))?;
        if !is_repo_segment(owner) || !is_repo_segment(repo) {
            return Err(bad("owner and repo must be non-empty [A-Za-z0-9._-]"));
        }
        let (plugin, pin) = match plugin_part.split_once('@') {
            Some((p, pin)) => {
                if !is_repo_segment(pin) {
                    return Err(bad("pin must be non-empty [A-Za-z0-9._-]"));
                }
                (p, Some(pin.to_string()))
            }
            None => (plugin_part, None),
        };
        if !is_valid_name(plugin) {
            return Err(bad("illegal plugin name"));
        }
        Ok(PluginRef::Repo {
            owner: owner.to_string(),
            repo: repo.to_string(),
            plugin: plugin.to_string(),
            pin,
        })
    }

    pub fn pin(&self) -> Option<&str> {
        match self {
            PluginRef::Repo { pin, .. } => pin.as_deref(),
            PluginRef::Url(_) => None,
        }
    }
}

impl FromStr for PluginRef {
    type Err = BadRef;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PluginRef::parse(s)
    }
}

impl fmt::Display for PluginRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PluginRef::Repo { owner, repo, plugin, pin } => {
                write!(f, "{owner}/{repo}:{plugin}")?;
                if let Some(pin) = pin {
                    write!(f, "@{pin}")?;
                }
                Ok(())
            }
            PluginRef::Url(u) => f.write_str(u),
        }
    }
}
