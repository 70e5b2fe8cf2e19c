//! Link-driven installation: app URLs, repository indexes, fetchers and the
//! recursive installer.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use crate::names::is_valid_name;
use crate::plugin::{parse_plugin_bytes, ParseError, RuntimeKind};
use crate::refs::{BadRef, PluginRef};
use crate::store::{InstalledPlugin, Store, StoreError};

pub const INDEX_FILE: &str = "manifest.imjoy.json";
pub const DEFAULT_CONTENT_BASE: &str = "https://raw.githubusercontent.com";
pub const DEFAULT_BRANCH: &str = "master";
pub const DEFAULT_WORKSPACE: &str = "default";

#[derive(Debug, thiserror::Error)]
pub enum FetchError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("bad url {0:?}")]
    BadUrl(String),
    #[error("fetching {url}: {reason}")]
    Transport { url: String, reason: String },
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("not an app url: {0:?}")]
    NotAnAppUrl(String),
    #[error("app url has no plugin parameter")]
    MissingPluginParam,
    #[error(transparent)]
    BadRef(#[from] BadRef),
    #[error("illegal name {0:?} in app url")]
    IllegalName(String),
    #[error("plugin {plugin:?} is not listed in {repo}")]
    PluginNotInIndex { plugin: String, repo: String },
    #[error(transparent)]
    Fetch(#[from] FetchError),
    #[error("malformed index {url}: {reason}")]
    MalformedIndex { url: String, reason: String },
    #[error("plugin at {url} is invalid: {source}")]
    Plugin {
        url: String,
        #[source]
        source: ParseError,
    },
    #[error("reference {reference} resolved to plugin {found:?}, expected {expected:?}")]
    NameMismatch { reference: String, expected: String, found: String },
    #[error("dependency cycle: {}", .0.join(" -> "))]
    DependencyCycle(Vec<String>),
    #[error("two different sources for plugin {0:?} in one install")]
    ConflictingDependency(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("start failed: {0}")]
    Start(String),
}

/// A failed install, labelled with the step that failed.
#[derive(Debug, thiserror::Error)]
#[error("{step}: {source}")]
pub struct InstallError {
    pub step: &'static str,
    #[source]
    pub source: RegistryError,
}

fn at<T>(step: &'static str, r: Result<T, impl Into<RegistryError>>) -> Result<T, InstallError> {
    r.map_err(|e| InstallError { step, source: e.into() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstallDirective {
    pub workspace: String,
    pub plugin: PluginRef,
    pub tag: Option<String>,
    pub start: Option<String>,
    pub fullscreen: bool,
    pub engine_url: Option<String>,
}

fn truthy(v: &str) -> bool {
    matches!(v.to_ascii_lowercase().as_str(), "1" | "true" | "yes" | "on")
}

/// Reads the `#/app?...` fragment of a shareable link. Any base is accepted.
pub fn parse_app_url(url: &str) -> Result<InstallDirective, RegistryError> {
    let (_, query) = url.split_once("#/app?").ok_or_else(|| RegistryError::NotAnAppUrl(url.to_string()))?;
    let (mut w, mut plugin, mut tag, mut start, mut fullscreen, mut engine) = (None, None, None, None, false, None);
    for (k, v) in url::form_urlencoded::parse(query.as_bytes()) {
        let v = v.into_owned();
        match k.as_ref() {
            "w" => w = Some(v),
            "plugin" => plugin = Some(v),
            "tag" => tag = Some(v).filter(|s| !s.is_empty()),
            "start" => start = Some(v).filter(|s| !s.is_empty()),
            "fullscreen" => fullscreen = truthy(&v),
            "engine" => engine = Some(v).filter(|s| !s.is_empty()),
            _ => {}
        }
    }
    let plugin = PluginRef::parse(&plugin.ok_or(RegistryError::MissingPluginParam)?)?;
    let workspace = w.unwrap_or_else(|| DEFAULT_WORKSPACE.to_string());
    for name in std::iter::once(&workspace).chain(start.as_ref()) {
        if !is_valid_name(name) {
            return Err(RegistryError::IllegalName(name.clone()));
        }
    }
    Ok(InstallDirective { workspace, plugin, tag, start, fullscreen, engine_url: engine })
}

pub fn format_app_url(base: &str, d: &InstallDirective) -> String {
    let mut q = url::form_urlencoded::Serializer::new(String::new());
    q.append_pair("w", &d.workspace);
    q.append_pair("plugin", &d.plugin.to_string());
    if let Some(t) = &d.tag {
        q.append_pair("tag", t);
    }
    if let Some(s) = &d.start {
        q.append_pair("start", s);
    }
    if d.fullscreen {
        q.append_pair("fullscreen", "1");
    }
    if let Some(e) = &d.engine_url {
        q.append_pair("engine", e);
    }
    format!("{}/#/app?{}", base.trim_end_matches('/'), q.finish())
}

/// Source of raw bytes for URLs.
#[async_trait]
pub trait Fetcher: Send + Sync {
    async fn fetch(&self, url: &str) -> Result<Vec<u8>, FetchError>;
}

/// Serves every URL from `<root>/<url path>`, whatever the host. Used for
/// fixture repositories laid out as `<owner>/<repo>/<commit>/...`.
pub struct LocalDirFetcher {
    root: PathBuf,
}

impl LocalDirFetcher {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        LocalDirFetcher { root: root.into() }
    }

    fn map(&self, url: &str) -> Result<PathBuf, FetchError> {
        let parsed = url::Url::parse(url).map_err(|_| FetchError::BadUrl(url.to_string()))?;
        let mut path = self.root.clone();
        for seg in parsed.path_segments().into_iter().flatten() {
            let seg = percent_decode(seg);
            match Path::new(&seg).components().next() {
                Some(Component::Normal(_)) if !seg.contains('/') => path.push(seg),
                None => {}
                _ => return Err(FetchError::BadUrl(url.to_string())),
            }
        }
        Ok(path)
    }
}

fn percent_decode(s: &str) -> String {
    url::form_urlencoded::parse(format!("x={}", s.replace('+', "%2B")).as_bytes())
        .next()
        .map(|(_, v)| v.into_owned())
        .unwrap_or_default()
}

#[async_trait]
impl Fetcher for LocalDirFetcher {
    async fn fetch(&self, url: &str) -> Result<Vec<u8>, FetchError> {
        let path = self.map(url)?;
        match tokio::fs::read(&path).await {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(FetchError::NotFound(url.to_string())),
            Err(e) => Err(FetchError::Transport { url: url.to_string(), reason: e.to_string() }),
        }
    }
}

/// HTTP(S) fetcher; `file://` URLs are read from disk.
pub struct HttpFetcher {
    client: reqwest::Client,
}

impl HttpFetcher {
    pub fn new() -> Self {
        HttpFetcher { client: reqwest::Client::new() }
    }
}

impl Default for HttpFetcher {
    fn default() -> Self {
        Self::new()
    }
}

#[async_trait]
impl Fetcher for HttpFetcher {
    async fn fetch(&self, url: &str) -> Result<Vec<u8>, FetchError> {
        let transport = |e: &dyn fmt::Display| FetchError::Transport { url: url.to_string(), reason: e.to_string() };
        if let Some(path) = url.strip_prefix("file://") {
            return tokio::fs::read(path).await.map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => FetchError::NotFound(url.to_string()),
                _ => transport(&e),
            });
        }
        let resp = self.client.get(url).send().await.map_err(|e| transport(&e))?;
        if resp.status() == reqwest::StatusCode::NOT_FOUND {
            return Err(FetchError::NotFound(url.to_string()));
        }
        let resp = resp.error_for_status().map_err(|e| transport(&e))?;
        Ok(resp.bytes().await.map_err(|e| transport(&e))?.to_vec())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub name: String,
    pub uri: String,
    #[serde(default)]
    pub version: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepoIndex {
    /// `owner/repo`
    pub repo: String,
    /// Commit or branch the index was read at.
    pub rev: String,
    pub name: String,
    pub uri_root: Option<String>,
    pub entries: Vec<IndexEntry>,
}

#[derive(Deserialize)]
struct IndexFile {
    name: String,
    #[serde(default)]
    uri_root: Option<String>,
    plugins: Vec<IndexEntry>,
}

impl RepoIndex {
    pub fn parse(repo: &str, rev: &str, bytes: &[u8], url: &str) -> Result<RepoIndex, RegistryError> {
        let malformed = |reason: String| RegistryError::MalformedIndex { url: url.to_string(), reason };
        let file: IndexFile = serde_json::from_slice(bytes).map_err(|e| malformed(e.to_string()))?;
        let mut seen = BTreeSet::new();
        for e in &file.plugins {
            if !seen.insert(e.name.as_str()) {
                return Err(malformed(format!("plugin {:?} listed twice", e.name)));
            }
            if e.uri.is_empty() || e.uri.split('/').any(|s| s == "..") {
                return Err(malformed(format!("bad uri {:?} for {:?}", e.uri, e.name)));
            }
        }
        Ok(RepoIndex {
            repo: repo.to_string(),
            rev: rev.to_string(),
            name: file.name,
            uri_root: file.uri_root.filter(|r| !r.is_empty()),
            entries: file.plugins,
        })
    }

    pub fn entry(&self, plugin: &str) -> Option<&IndexEntry> {
        self.entries.iter().find(|e| e.name == plugin)
    }

    /// Path of the plugin file relative to the repository root.
    pub fn relative_path(&self, entry: &IndexEntry) -> String {
        match &self.uri_root {
            Some(root) => format!("{}/{}", root.trim_matches('/'), entry.uri.trim_start_matches('/')),
            None => entry.uri.trim_start_matches('/').to_string(),
        }
    }
}

/// Where raw repository files live.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContentHost {
    pub base: String,
    pub default_branch: String,
}

impl Default for ContentHost {
    fn default() -> Self {
        ContentHost { base: DEFAULT_CONTENT_BASE.to_string(), default_branch: DEFAULT_BRANCH.to_string() }
    }
}

impl ContentHost {
    pub fn file_url(&self, owner: &str, repo: &str, rev: Option<&str>, path: &str) -> String {
        let rev = rev.unwrap_or(&self.default_branch);
        format!("{}/{owner}/{repo}/{rev}/{path}", self.base.trim_end_matches('/'))
    }
}

pub async fn fetch_repo_index(
    owner: &str,
    repo: &str,
    rev: Option<&str>,
    host: &ContentHost,
    fetcher: &dyn Fetcher,
) -> Result<RepoIndex, RegistryError> {
    let url = host.file_url(owner, repo, rev, INDEX_FILE);
    let bytes = fetcher.fetch(&url).await?;
    RepoIndex::parse(&format!("{owner}/{repo}"), rev.unwrap_or(&host.default_branch), &bytes, &url)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchPlan {
    pub url: String,
    pub expected_pin: Option<String>,
}

/// Maps a reference to the URL of its source. Repository references need
/// the index read at the same revision.
pub fn resolve_ref(r: &PluginRef, index: Option<&RepoIndex>, host: &ContentHost) -> Result<FetchPlan, RegistryError> {
    match r {
        PluginRef::Url(url) => Ok(FetchPlan { url: url.clone(), expected_pin: None }),
        PluginRef::Repo { owner, repo, plugin, pin } => {
            let repo_id = format!("{owner}/{repo}");
            let not_listed = || RegistryError::PluginNotInIndex { plugin: plugin.clone(), repo: repo_id.clone() };
            let index = index.filter(|i| i.repo == repo_id).ok_or_else(not_listed)?;
            let entry = index.entry(plugin).ok_or_else(not_listed)?;
            Ok(FetchPlan {
                url: host.file_url(owner, repo, pin.as_deref(), &index.relative_path(entry)),
                expected_pin: pin.clone(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProgressEvent {
    pub step: String,
    pub fraction: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StartOutcome {
    /// A window plugin asks the client to open it.
    OpenWindow { plugin: String, fullscreen: bool },
    /// A worker ran its `run` export, or exposes none.
    Ran { plugin: String, result: Option<serde_json::Value> },
    Launched { plugin: String },
    /// Nothing available here can start this plugin.
    Deferred { plugin: String, reason: String },
}

/// Starts an installed plugin. The hub supplies one that can run workers
/// and launch native processes.
#[async_trait]
pub trait Starter: Send + Sync {
    async fn start(&self, workspace: &str, plugin: &InstalledPlugin, fullscreen: bool) -> Result<StartOutcome, String>;
}

/// Opens windows, defers everything else.
pub struct DetachedStarter;

#[async_trait]
impl Starter for DetachedStarter {
    async fn start(&self, _workspace: &str, plugin: &InstalledPlugin, fullscreen: bool) -> Result<StartOutcome, String> {
        Ok(window_or_deferred(plugin, fullscreen, "no hub attached"))
    }
}

pub fn window_or_deferred(plugin: &InstalledPlugin, fullscreen: bool, reason: &str) -> StartOutcome {
    let name = plugin.spec.name.clone();
    match plugin.spec.runtime_kind {
        RuntimeKind::Window => StartOutcome::OpenWindow { plugin: name, fullscreen },
        _ => StartOutcome::Deferred { plugin: name, reason: reason.to_string() },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportEntry {
    pub name: String,
    pub origin: String,
    pub pin: Option<String>,
    pub content_hash: String,
    pub helper: bool,
    pub chosen_tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstallReport {
    pub workspace: String,
    /// Requested plugin first, then its dependencies depth-first.
    pub plugins: Vec<ReportEntry>,
    pub start: Option<StartOutcome>,
    pub fullscreen: bool,
    pub engine_url: Option<String>,
    pub progress: Vec<ProgressEvent>,
}

type ProgressSink = Arc<dyn Fn(&ProgressEvent) + Send + Sync>;

struct Fetched {
    reference: String,
    source: String,
    name: String,
    pin: Option<String>,
    helper: bool,
    tag: Option<String>,
}

/// Drives `install_from_url`: resolve the whole dependency closure first,
/// then write it to the store.
pub struct Installer {
    store: Store,
    fetcher: Arc<dyn Fetcher>,
    host: ContentHost,
    starter: Arc<dyn Starter>,
    on_progress: Option<ProgressSink>,
}

impl Installer {
    pub fn new(store: Store, fetcher: Arc<dyn Fetcher>) -> Self {
        Installer { store, fetcher, host: ContentHost::default(), starter: Arc::new(DetachedStarter), on_progress: None }
    }

    pub fn with_content_host(mut self, host: ContentHost) -> Self {
        self.host = host;
        self
    }

    pub fn with_starter(mut self, starter: Arc<dyn Starter>) -> Self {
        self.starter = starter;
        self
    }

    pub fn on_progress(mut self, f: impl Fn(&ProgressEvent) + Send + Sync + 'static) -> Self {
        self.on_progress = Some(Arc::new(f));
        self
    }

    pub async fn install_from_url(&self, url: &str) -> Result<InstallReport, InstallError> {
        let d = at("parse", parse_app_url(url))?;
        self.install(&d).await
    }

    pub async fn install(&self, d: &InstallDirective) -> Result<InstallReport, InstallError> {
        let mut progress = Vec::new();
        let mut emit = |step: &str, fraction: f64, message: String| {
            let ev = ProgressEvent { step: step.to_string(), fraction, message };
            if let Some(f) = &self.on_progress {
                f(&ev);
            }
            progress.push(ev);
        };

        at("workspace", self.store.create_workspace(&d.workspace))?;
        emit("workspace", 0.1, format!("workspace {}", d.workspace));

        let mut fetched: Vec<Fetched> = Vec::new();
        let mut path: Vec<String> = Vec::new();
        self.resolve(&d.plugin, d.tag.clone(), false, &mut fetched, &mut path).await?;
        emit("resolve", 0.5, format!("resolved {} plugin(s)", fetched.len()));

        let mut plugins = Vec::new();
        let n = fetched.len() as f64;
        for (i, f) in fetched.iter().enumerate() {
            let rec = at(
                "install",
                self.store.install_plugin(&d.workspace, &f.source, &f.reference, f.pin.as_deref(), f.tag.as_deref(), f.helper),
            )?;
            emit("install", 0.5 + 0.4 * (i + 1) as f64 / n, format!("installed {} {}", rec.spec.name, &rec.content_hash[..12]));
            plugins.push(ReportEntry {
                name: rec.spec.name.clone(),
                origin: rec.origin,
                pin: rec.pin,
                content_hash: rec.content_hash,
                helper: rec.helper,
                chosen_tag: rec.chosen_tag,
            });
        }

        let mut start = None;
        if let Some(name) = &d.start {
            let rec = self.store.get_plugin(&d.workspace, name).ok_or_else(|| InstallError {
                step: "start",
                source: RegistryError::Start(format!("plugin {name:?} is not installed in {}", d.workspace)),
            })?;
            let outcome = at(
                "start",
                self.starter.start(&d.workspace, &rec, d.fullscreen).await.map_err(RegistryError::Start),
            )?;
            emit("start", 1.0, format!("started {name}"));
            start = Some(outcome);
        } else {
            emit("done", 1.0, "done".to_string());
        }

        Ok(InstallReport {
            workspace: d.workspace.clone(),
            plugins,
            start,
            fullscreen: d.fullscreen,
            engine_url: d.engine_url.clone(),
            progress,
        })
    }

    fn resolve<'a>(
        &'a self,
        r: &'a PluginRef,
        tag: Option<String>,
        helper: bool,
        out: &'a mut Vec<Fetched>,
        path: &'a mut Vec<String>,
    ) -> futures::future::BoxFuture<'a, Result<(), InstallError>> {
        Box::pin(async move {
            let plan = match r {
                PluginRef::Repo { owner, repo, pin, .. } => {
                    let index = at("index", fetch_repo_index(owner, repo, pin.as_deref(), &self.host, self.fetcher.as_ref()).await)?;
                    at("resolve", resolve_ref(r, Some(&index), &self.host))?
                }
                PluginRef::Url(_) => at("resolve", resolve_ref(r, None, &self.host))?,
            };
            let bytes = at("fetch", self.fetcher.fetch(&plan.url).await)?;
            let spec = at(
                "parse",
                parse_plugin_bytes(&bytes).map_err(|source| RegistryError::Plugin { url: plan.url.clone(), source }),
            )?;
            if let PluginRef::Repo { plugin, .. } = r {
                if &spec.name != plugin {
                    return Err(InstallError {
                        step: "resolve",
                        source: RegistryError::NameMismatch {
                            reference: r.to_string(),
                            expected: plugin.clone(),
                            found: spec.name.clone(),
                        },
                    });
                }
            }
            if let Some(pos) = path.iter().position(|p| *p == spec.name) {
                let mut cycle = path[pos..].to_vec();
                cycle.push(spec.name.clone());
                return Err(InstallError { step: "dependencies", source: RegistryError::DependencyCycle(cycle) });
            }
            let source = String::from_utf8(bytes).expect("parsed as UTF-8");
            if let Some(prev) = out.iter().find(|f| f.name == spec.name) {
                if prev.source != source {
                    return Err(InstallError {
                        step: "dependencies",
                        source: RegistryError::ConflictingDependency(spec.name.clone()),
                    });
                }
                return Ok(());
            }
            out.push(Fetched {
                reference: r.to_string(),
                source,
                name: spec.name.clone(),
                pin: plan.expected_pin,
                helper,
                tag,
            });
            path.push(spec.name.clone());
            for dep in &spec.dependencies {
                let dep_ref = at("dependencies", PluginRef::parse(dep))?;
                self.resolve(&dep_ref, None, true, out, path).await?;
            }
            path.pop();
            Ok(())
        })
    }
}

/// One-shot install with a detached starter and the default content host.
pub async fn install_from_url(store: &Store, url: &str, fetcher: Arc<dyn Fetcher>) -> Result<InstallReport, InstallError> {
    Installer::new(store.clone(), fetcher).install_from_url(url).await
}
