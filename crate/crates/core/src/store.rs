//! Persistent workspaces and installed plugins.
//!
//! Layout under the store root:
//!
//! ```text
//! <root>/<workspace>/workspace.json
//! <root>/<workspace>/plugins/<name>.imjoy.html
//! ```
//!
//! Every file is written to a temporary sibling and renamed into place.
//! `workspace.json` is the commit point: a plugin source staged as
//! `<name>.imjoy.html.tmp` whose hash matches the committed record is rolled
//! forward on open, any other leftover temporary is discarded.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Duration, SecondsFormat, SubsecRound, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::names::is_valid_name;
use crate::plugin::{
    parse_plugin_file, resolve_tag, validate_spec, InvariantViolation, ParseError, PluginSpec, UnknownTag,
};
use crate::refs::PLUGIN_EXTENSION;

const WORKSPACE_FILE: &str = "workspace.json";
const TMP_SUFFIX: &str = ".tmp";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt store file {file}: {reason}")]
    CorruptStore { file: PathBuf, reason: String },
    #[error("illegal workspace name {0:?}")]
    IllegalName(String),
    #[error("no such workspace {0:?}")]
    NoSuchWorkspace(String),
    #[error("no plugin {name:?} in workspace {workspace:?}")]
    NoSuchPlugin { workspace: String, name: String },
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Invalid(#[from] InvariantViolation),
    #[error(transparent)]
    UnknownTag(#[from] UnknownTag),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

pub fn content_hash(source: &str) -> String {
    hex::encode(Sha256::digest(source.as_bytes()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstalledPlugin {
    pub spec: PluginSpec,
    /// Plugin reference, direct URL or `"local"`.
    pub origin: String,
    pub pin: Option<String>,
    pub content_hash: String,
    pub helper: bool,
    pub chosen_tag: Option<String>,
    pub installed_at: DateTime<Utc>,
}

impl InstalledPlugin {
    pub fn name(&self) -> &str {
        &self.spec.name
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workspace {
    pub name: String,
    pub created_at: DateTime<Utc>,
    pub plugins: BTreeMap<String, InstalledPlugin>,
}

impl Workspace {
    /// Plugins ordered by install time, then name.
    pub fn ordered(&self) -> Vec<&InstalledPlugin> {
        let mut v: Vec<_> = self.plugins.values().collect();
        v.sort_by(|a, b| a.installed_at.cmp(&b.installed_at).then_with(|| a.spec.name.cmp(&b.spec.name)));
        v
    }
}

#[derive(Serialize, Deserialize)]
struct WorkspaceFile {
    name: String,
    created_at: String,
    plugins: Vec<PluginRecord>,
}

#[derive(Serialize, Deserialize)]
struct PluginRecord {
    name: String,
    origin: String,
    #[serde(default)]
    pin: Option<String>,
    content_hash: String,
    helper: bool,
    #[serde(default)]
    chosen_tag: Option<String>,
    installed_at: String,
}

fn rfc3339(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Micros, true)
}

/// Handle to an open store. Cheap to clone; clones share state.
#[derive(Clone)]
pub struct Store {
    inner: Arc<Inner>,
}

struct Inner {
    root: PathBuf,
    state: RwLock<BTreeMap<String, Workspace>>,
    writer: Mutex<()>,
    /// Remaining renames before an injected crash; `usize::MAX` disables.
    crash_countdown: AtomicUsize,
}

pub fn open_store(root: impl AsRef<Path>) -> Result<Store, StoreError> {
    Store::open(root)
}

impl Store {
    pub fn open(root: impl AsRef<Path>) -> Result<Store, StoreError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let mut workspaces = BTreeMap::new();
        let mut dirs: Vec<_> = fs::read_dir(&root)
            .map_err(io_err(&root))?
            .collect::<Result<Vec<_>, _>>()
            .map_err(io_err(&root))?;
        dirs.sort_by_key(|e| e.file_name());
        for entry in dirs {
            let path = entry.path();
            if !path.join(WORKSPACE_FILE).is_file() {
                continue;
            }
            let ws = load_workspace(&path)?;
            workspaces.insert(ws.name.clone(), ws);
        }
        Ok(Store {
            inner: Arc::new(Inner {
                root,
                state: RwLock::new(workspaces),
                writer: Mutex::new(()),
                crash_countdown: AtomicUsize::new(usize::MAX),
            }),
        })
    }

    pub fn root(&self) -> &Path {
        &self.inner.root
    }

    pub fn workspace_dir(&self, workspace: &str) -> PathBuf {
        self.inner.root.join(workspace)
    }

    /// Fault injection: the next mutation fails right before its
    /// `renames + 1`-th rename, leaving the temporary file behind.
    #[doc(hidden)]
    pub fn crash_before_rename(&self, renames: usize) {
        self.inner.crash_countdown.store(renames, Ordering::SeqCst);
    }

    pub fn list_workspaces(&self) -> Vec<String> {
        self.inner.state.read().unwrap().keys().cloned().collect()
    }

    pub fn workspace(&self, name: &str) -> Option<Workspace> {
        self.inner.state.read().unwrap().get(name).cloned()
    }

    pub fn get_plugin(&self, workspace: &str, name: &str) -> Option<InstalledPlugin> {
        self.inner.state.read().unwrap().get(workspace)?.plugins.get(name).cloned()
    }

    pub fn list_plugins(&self, workspace: &str) -> Result<Vec<InstalledPlugin>, StoreError> {
        let state = self.inner.state.read().unwrap();
        let ws = state.get(workspace).ok_or_else(|| StoreError::NoSuchWorkspace(workspace.to_string()))?;
        Ok(ws.ordered().into_iter().cloned().collect())
    }

    pub fn create_workspace(&self, name: &str) -> Result<Workspace, StoreError> {
        if !is_valid_name(name) {
            return Err(StoreError::IllegalName(name.to_string()));
        }
        let _w = self.inner.writer.lock().unwrap();
        if let Some(ws) = self.workspace(name) {
            return Ok(ws);
        }
        let ws = Workspace { name: name.to_string(), created_at: Utc::now().trunc_subsecs(6), plugins: BTreeMap::new() };
        let dir = self.workspace_dir(name);
        fs::create_dir_all(dir.join("plugins")).map_err(io_err(&dir))?;
        self.write_manifest(&ws)?;
        self.inner.state.write().unwrap().insert(name.to_string(), ws.clone());
        Ok(ws)
    }

    /// Installs or replaces `spec.name` in `workspace`. A plugin installed
    /// directly keeps `helper == false` even if later pulled in as a
    /// dependency.
    pub fn install_plugin(
        &self,
        workspace: &str,
        source: &str,
        origin: &str,
        pin: Option<&str>,
        chosen_tag: Option<&str>,
        as_helper: bool,
    ) -> Result<InstalledPlugin, StoreError> {
        let spec = parse_plugin_file(source)?;
        let violations = validate_spec(&spec);
        if !violations.is_empty() {
            return Err(InvariantViolation(violations).into());
        }
        let resolved = resolve_tag(&spec, chosen_tag)?;

        let _w = self.inner.writer.lock().unwrap();
        let mut ws = self.workspace(workspace).ok_or_else(|| StoreError::NoSuchWorkspace(workspace.to_string()))?;
        let previous = ws.plugins.get(&spec.name);
        let helper = as_helper && previous.is_none_or(|p| p.helper);
        let latest = ws.plugins.values().map(|p| p.installed_at).max();
        let mut installed_at = Utc::now().trunc_subsecs(6);
        if let Some(latest) = latest {
            if installed_at <= latest {
                installed_at = latest + Duration::microseconds(1);
            }
        }
        let record = InstalledPlugin {
            origin: origin.to_string(),
            pin: pin.map(str::to_string),
            content_hash: content_hash(source),
            helper,
            chosen_tag: resolved.chosen_tag,
            installed_at,
            spec,
        };
        ws.plugins.insert(record.spec.name.clone(), record.clone());

        let path = self.plugin_path(workspace, &record.spec.name);
        let staged = tmp_path(&path);
        write_synced(&staged, source.as_bytes())?;
        self.write_manifest(&ws)?;
        self.rename(&staged, &path)?;
        self.inner.state.write().unwrap().insert(workspace.to_string(), ws);
        Ok(record)
    }

    pub fn remove_plugin(&self, workspace: &str, name: &str) -> Result<(), StoreError> {
        let _w = self.inner.writer.lock().unwrap();
        let mut ws = self.workspace(workspace).ok_or_else(|| StoreError::NoSuchWorkspace(workspace.to_string()))?;
        if ws.plugins.remove(name).is_none() {
            return Err(StoreError::NoSuchPlugin { workspace: workspace.to_string(), name: name.to_string() });
        }
        self.write_manifest(&ws)?;
        let path = self.plugin_path(workspace, name);
        fs::remove_file(&path).map_err(io_err(&path))?;
        self.inner.state.write().unwrap().insert(workspace.to_string(), ws);
        Ok(())
    }

    fn plugin_path(&self, workspace: &str, name: &str) -> PathBuf {
        self.workspace_dir(workspace).join("plugins").join(format!("{name}{PLUGIN_EXTENSION}"))
    }

    fn write_manifest(&self, ws: &Workspace) -> Result<(), StoreError> {
        let file = WorkspaceFile {
            name: ws.name.clone(),
            created_at: rfc3339(&ws.created_at),
            plugins: ws
                .ordered()
                .into_iter()
                .map(|p| PluginRecord {
                    name: p.spec.name.clone(),
                    origin: p.origin.clone(),
                    pin: p.pin.clone(),
                    content_hash: p.content_hash.clone(),
                    helper: p.helper,
                    chosen_tag: p.chosen_tag.clone(),
                    installed_at: rfc3339(&p.installed_at),
                })
                .collect(),
        };
        let path = self.workspace_dir(&ws.name).join(WORKSPACE_FILE);
        let mut text = serde_json::to_string_pretty(&file).expect("manifest serializes");
        text.push('\n');
        let tmp = tmp_path(&path);
        write_synced(&tmp, text.as_bytes())?;
        self.rename(&tmp, &path)
    }

    fn rename(&self, from: &Path, to: &Path) -> Result<(), StoreError> {
        let left = self.inner.crash_countdown.load(Ordering::SeqCst);
        if left == 0 {
            self.inner.crash_countdown.store(usize::MAX, Ordering::SeqCst);
            return Err(StoreError::Io {
                path: to.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::Interrupted, "injected crash before rename"),
            });
        }
        if left != usize::MAX {
            self.inner.crash_countdown.store(left - 1, Ordering::SeqCst);
        }
        fs::rename(from, to).map_err(io_err(to))
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(TMP_SUFFIX);
    PathBuf::from(s)
}

fn write_synced(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    use std::io::Write;
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))?;
    f.sync_all().map_err(io_err(path))
}

fn parse_time(file: &Path, s: &str) -> Result<DateTime<Utc>, StoreError> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| StoreError::CorruptStore { file: file.to_path_buf(), reason: format!("bad timestamp {s:?}: {e}") })
}

fn load_workspace(dir: &Path) -> Result<Workspace, StoreError> {
    let manifest = dir.join(WORKSPACE_FILE);
    let corrupt = |file: &Path, reason: String| StoreError::CorruptStore { file: file.to_path_buf(), reason };
    let text = fs::read_to_string(&manifest).map_err(io_err(&manifest))?;
    let file: WorkspaceFile = serde_json::from_str(&text).map_err(|e| corrupt(&manifest, e.to_string()))?;
    if !is_valid_name(&file.name) || dir.file_name().and_then(|n| n.to_str()) != Some(file.name.as_str()) {
        return Err(corrupt(&manifest, format!("workspace name {:?} does not match its directory", file.name)));
    }
    let plugin_dir = dir.join("plugins");
    let mut plugins = BTreeMap::new();
    for rec in file.plugins {
        let path = plugin_dir.join(format!("{}{PLUGIN_EXTENSION}", rec.name));
        let staged = tmp_path(&path);
        if staged.is_file() {
            let pending = fs::read_to_string(&staged).map_err(io_err(&staged))?;
            if content_hash(&pending) == rec.content_hash {
                fs::rename(&staged, &path).map_err(io_err(&path))?;
            }
        }
        let source = fs::read_to_string(&path).map_err(|e| corrupt(&path, e.to_string()))?;
        let hash = content_hash(&source);
        if hash != rec.content_hash {
            return Err(corrupt(&path, format!("content hash {hash} does not match recorded {}", rec.content_hash)));
        }
        let spec = parse_plugin_file(&source).map_err(|e| corrupt(&path, e.to_string()))?;
        if spec.name != rec.name {
            return Err(corrupt(&path, format!("file declares plugin {:?}, record says {:?}", spec.name, rec.name)));
        }
        plugins.insert(
            rec.name.clone(),
            InstalledPlugin {
                spec,
                origin: rec.origin,
                pin: rec.pin,
                content_hash: rec.content_hash,
                helper: rec.helper,
                chosen_tag: rec.chosen_tag,
                installed_at: parse_time(&manifest, &rec.installed_at)?,
            },
        );
    }
    if let Ok(entries) = fs::read_dir(&plugin_dir) {
        for e in entries.flatten() {
            if e.file_name().to_string_lossy().ends_with(TMP_SUFFIX) {
                let _ = fs::remove_file(e.path());
            }
        }
    }
    let _ = fs::remove_file(tmp_path(&manifest));
    Ok(Workspace { created_at: parse_time(&manifest, &file.created_at)?, name: file.name, plugins })
}
