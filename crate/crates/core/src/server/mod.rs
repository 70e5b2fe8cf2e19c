//! The hub: one listener for framed TCP and websocket peers, the router,
//! the store, the native-plugin supervisor and links to remote engines.
//!
//! Plugin sessions are confined to their workspace and address plugins by
//! bare name. Client, hub and engine sessions are not, so they address
//! plugins as `workspace/plugin` and may call the system interfaces
//! `__hub__` and, in engine mode, `__engine__`.

mod conn;
mod system;

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock, Weak};
use std::time::Duration;

use async_trait::async_trait;
use serde::Serialize;
use tokio::sync::watch;

use crate::host::{load_worker, EventSink, LoadError};
use crate::plugin::RuntimeKind;
use crate::registry::{
    window_or_deferred, ContentHost, Fetcher, HttpFetcher, Installer, LocalDirFetcher, StartOutcome, Starter,
};
use crate::rpc::{
    CallError, HostValue, RegistrationId, Role, Router, RouterError, RpcMessage, Session, SessionConfig,
    SessionEndpoint, SessionError, Transport, Upstream, WireValue,
};
use crate::store::{open_store, InstalledPlugin, Store, StoreError};
use crate::supervisor::{LaunchError, ProviderRegistry, Supervisor, SupervisorConfig};

pub use conn::FALLBACK_PAGE;

pub const DEFAULT_LISTEN: &str = "127.0.0.1:9527";
pub const HUB_INTERFACE: &str = "__hub__";
pub const ENGINE_INTERFACE: &str = "__engine__";

#[derive(Clone)]
pub struct HubConfig {
    pub listen: String,
    pub token: Option<String>,
    pub data_dir: PathBuf,
    pub engine_mode: bool,
    /// Serve the workbench at `/`.
    pub ui: bool,
    /// Directory holding a built workbench; a placeholder page otherwise.
    pub ui_dir: Option<PathBuf>,
    /// Serve installs from a local fixture tree instead of the network.
    pub fixture: Option<PathBuf>,
    pub content_host: ContentHost,
    pub session: SessionConfig,
    pub call_timeout: Duration,
    pub supervisor: SupervisorConfig,
    pub providers: ProviderRegistry,
}

impl HubConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        let data_dir = data_dir.into();
        HubConfig {
            listen: DEFAULT_LISTEN.to_string(),
            token: None,
            supervisor: SupervisorConfig::new(&data_dir),
            data_dir,
            engine_mode: false,
            ui: false,
            ui_dir: None,
            fixture: None,
            content_host: ContentHost::default(),
            session: SessionConfig::default(),
            call_timeout: Duration::from_secs(300),
            providers: ProviderRegistry::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HubError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("no such engine {0:?}")]
    NoSuchEngine(String),
    #[error("cannot connect to {url}: {reason}")]
    ConnectFailed { url: String, reason: String },
    #[error("engine rejected the token")]
    AuthFailed,
    #[error("{0} is not an engine")]
    NotAnEngine(String),
    #[error("engine request failed: {0}")]
    Engine(CallError),
}

#[derive(Debug, thiserror::Error)]
pub enum StartError {
    #[error("plugin {plugin:?} is not installed in {workspace:?}")]
    NotInstalled { workspace: String, plugin: String },
    #[error("{0:?} is a window plugin; a client has to open it")]
    WindowPlugin(String),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Launch(#[from] LaunchError),
    #[error("no such engine {0:?}")]
    NoSuchEngine(String),
    #[error("remote launch failed: {0}")]
    Remote(CallError),
    #[error(transparent)]
    Router(#[from] RouterError),
}

impl StartError {
    pub fn into_call_error(self) -> CallError {
        match self {
            StartError::NotInstalled { plugin, .. } => CallError::NoSuchPlugin(plugin),
            StartError::Remote(e) => e,
            StartError::Launch(e) => CallError::remote(e.code(), e),
            e @ StartError::WindowPlugin(_) => CallError::remote("WindowPlugin", e),
            e @ StartError::Load(_) => CallError::remote("LoadError", e),
            e @ StartError::NoSuchEngine(_) => CallError::remote("NoSuchEngine", e),
            e @ StartError::Router(_) => CallError::remote("DuplicatePluginId", e),
        }
    }
}

/// Per-plugin log rings for in-host plugins plus fan-out of log and
/// progress messages to connected clients.
pub struct HubEvents {
    logs: Mutex<HashMap<(String, String), VecDeque<String>>>,
    capacity: usize,
    listeners: Mutex<Vec<Session>>,
}

impl HubEvents {
    fn new(capacity: usize) -> Self {
        HubEvents { logs: Mutex::new(HashMap::new()), capacity, listeners: Mutex::new(Vec::new()) }
    }

    pub fn logs(&self, workspace: &str, plugin: &str) -> Vec<String> {
        let logs = self.logs.lock().unwrap();
        logs.get(&(workspace.to_string(), plugin.to_string())).map(|r| r.iter().cloned().collect()).unwrap_or_default()
    }

    fn subscribe(&self, s: Session) {
        self.listeners.lock().unwrap().push(s);
    }

    fn broadcast(&self, msg: RpcMessage) {
        let mut listeners = self.listeners.lock().unwrap();
        listeners.retain(|s| !s.is_closed());
        for s in listeners.iter() {
            let _ = s.send(msg.clone());
        }
    }

    fn close_all(&self) {
        for s in self.listeners.lock().unwrap().drain(..) {
            s.close();
        }
    }
}

impl EventSink for HubEvents {
    fn log(&self, workspace: &str, plugin: &str, level: &str, text: &str) {
        {
            let mut logs = self.logs.lock().unwrap();
            let ring = logs.entry((workspace.to_string(), plugin.to_string())).or_default();
            if ring.len() == self.capacity {
                ring.pop_front();
            }
            ring.push_back(format!("[{level}] {text}"));
        }
        self.broadcast(RpcMessage::Log {
            plugin_id: format!("{workspace}/{plugin}"),
            level: level.to_string(),
            text: text.to_string(),
        });
    }

    fn progress(&self, workspace: &str, plugin: &str, fraction: f64) {
        let fraction = if fraction.is_nan() { 0.0 } else { fraction.clamp(0.0, 1.0) };
        self.broadcast(RpcMessage::Progress { plugin_id: format!("{workspace}/{plugin}"), fraction });
    }
}

#[derive(Clone)]
struct EngineLink {
    url: String,
    session: Session,
    providers: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EngineInfo {
    pub id: String,
    pub url: String,
    pub providers: Vec<String>,
}

enum Running {
    Worker(RegistrationId),
    Native,
    Remote { engine: String, reg: RegistrationId },
}

pub(crate) struct HubInner {
    cfg: HubConfig,
    store: Store,
    router: Arc<Router>,
    supervisor: Arc<Supervisor>,
    events: Arc<HubEvents>,
    engines: Mutex<BTreeMap<String, EngineLink>>,
    next_engine: AtomicU64,
    assignments: Mutex<HashMap<(String, String), String>>,
    running: Mutex<HashMap<(String, String), Running>>,
    sessions: Mutex<Vec<Session>>,
    start_lock: tokio::sync::Mutex<()>,
    addr: OnceLock<SocketAddr>,
    stop: watch::Sender<bool>,
}

/// Handle to a hub. Clones share one hub.
#[derive(Clone)]
pub struct Hub {
    inner: Arc<HubInner>,
}

/// Starts installed plugins on first use.
struct AutoStart {
    hub: Weak<HubInner>,
}

#[async_trait]
impl Upstream for AutoStart {
    async fn call(&self, workspace: &str, target: &str, method: &str, args: Vec<HostValue>) -> Result<HostValue, CallError> {
        let hub = Hub { inner: self.hub.upgrade().ok_or(CallError::SessionClosed)? };
        if hub.inner.store.get_plugin(workspace, target).is_none() {
            return Err(CallError::NoSuchPlugin(target.to_string()));
        }
        hub.start_plugin(workspace, target).await.map_err(StartError::into_call_error)?;
        if !hub.inner.router.is_registered(workspace, target) {
            return Err(CallError::NoSuchPlugin(target.to_string()));
        }
        hub.inner.router.call(workspace, target, method, args).await
    }
}

/// Install-time `start`: windows open in the client, workers and native
/// plugins are started and their `run` export, if any, is invoked.
struct HubStarter {
    hub: Weak<HubInner>,
}

#[async_trait]
impl Starter for HubStarter {
    async fn start(&self, workspace: &str, plugin: &InstalledPlugin, fullscreen: bool) -> Result<StartOutcome, String> {
        let hub = Hub { inner: self.hub.upgrade().ok_or("hub stopped")? };
        if plugin.spec.runtime_kind == RuntimeKind::Window {
            return Ok(window_or_deferred(plugin, fullscreen, ""));
        }
        let name = plugin.spec.name.clone();
        let methods = hub.start_plugin(workspace, &name).await.map_err(|e| e.to_string())?;
        if methods.iter().any(|m| m == "run") {
            let v = hub.call(workspace, &name, "run", vec![]).await.map_err(|e| e.to_string())?;
            return Ok(StartOutcome::Ran { plugin: name, result: Some(v.to_plain_json()) });
        }
        Ok(match plugin.spec.runtime_kind {
            RuntimeKind::Native => StartOutcome::Launched { plugin: name },
            _ => StartOutcome::Ran { plugin: name, result: None },
        })
    }
}

/// Lets an engine's plugins reach the hub that launched them.
struct SessionUpstream {
    session: Session,
}

#[async_trait]
impl Upstream for SessionUpstream {
    async fn call(&self, workspace: &str, target: &str, method: &str, args: Vec<HostValue>) -> Result<HostValue, CallError> {
        self.session.call(&format!("{workspace}/{target}"), method, args).await
    }
}

impl Hub {
    pub fn new(cfg: HubConfig) -> Result<Hub, HubError> {
        let store = open_store(&cfg.data_dir)?;
        let router = Arc::new(Router::new(cfg.call_timeout));
        let events = Arc::new(HubEvents::new(cfg.supervisor.log_capacity.max(1)));
        let mut sup_cfg = cfg.supervisor.clone();
        sup_cfg.data_root = cfg.data_dir.clone();
        let supervisor = Supervisor::new(sup_cfg, router.clone(), cfg.providers.clone(), events.clone());
        let (stop, _) = watch::channel(false);
        let inner = Arc::new(HubInner {
            cfg,
            store,
            router: router.clone(),
            supervisor,
            events,
            engines: Mutex::new(BTreeMap::new()),
            next_engine: AtomicU64::new(1),
            assignments: Mutex::new(HashMap::new()),
            running: Mutex::new(HashMap::new()),
            sessions: Mutex::new(Vec::new()),
            start_lock: tokio::sync::Mutex::new(()),
            addr: OnceLock::new(),
            stop,
        });
        router.set_fallback(Arc::new(AutoStart { hub: Arc::downgrade(&inner) }));
        Ok(Hub { inner })
    }

    pub fn config(&self) -> &HubConfig {
        &self.inner.cfg
    }

    pub fn store(&self) -> &Store {
        &self.inner.store
    }

    pub fn router(&self) -> &Arc<Router> {
        &self.inner.router
    }

    pub fn supervisor(&self) -> &Arc<Supervisor> {
        &self.inner.supervisor
    }

    pub fn events(&self) -> &Arc<HubEvents> {
        &self.inner.events
    }

    pub fn local_addr(&self) -> Option<SocketAddr> {
        self.inner.addr.get().copied()
    }

    /// Binds the listener and accepts connections in the background.
    pub async fn serve(&self) -> Result<SocketAddr, HubError> {
        let listener = tokio::net::TcpListener::bind(&self.inner.cfg.listen).await?;
        let mut addr = listener.local_addr()?;
        let _ = self.inner.addr.set(addr);
        if addr.ip().is_unspecified() {
            addr.set_ip(std::net::Ipv4Addr::LOCALHOST.into());
        }
        self.inner.supervisor.set_hub_addr(addr.to_string());
        let hub = self.clone();
        let mut stop = self.inner.stop.subscribe();
        tokio::spawn(async move {
            loop {
                tokio::select! {
                    r = listener.accept() => match r {
                        Ok((stream, _)) => {
                            let hub = hub.clone();
                            tokio::spawn(async move { conn::handle(hub, stream).await });
                        }
                        Err(e) => tracing::warn!("accept failed: {e}"),
                    },
                    _ = stop.wait_for(|s| *s) => break,
                }
            }
        });
        Ok(self.local_addr().expect("set above"))
    }

    /// Stops accepting, terminates native plugins and drops all links.
    pub async fn shutdown(&self) {
        self.inner.stop.send_replace(true);
        self.inner.supervisor.shutdown().await;
        let links: Vec<_> = std::mem::take(&mut *self.inner.engines.lock().unwrap()).into_values().collect();
        for l in links {
            l.session.close();
        }
        self.inner.events.close_all();
        for s in std::mem::take(&mut *self.inner.sessions.lock().unwrap()) {
            s.close();
        }
    }

    /// Calls this hub has forwarded and not yet seen answered, across all
    /// live sessions.
    pub fn pending_calls(&self) -> usize {
        let accepted: usize = self.live_sessions().iter().map(Session::pending_len).sum();
        let links: usize = self.inner.engines.lock().unwrap().values().map(|l| l.session.pending_len()).sum();
        accepted + links
    }

    fn live_sessions(&self) -> Vec<Session> {
        let mut sessions = self.inner.sessions.lock().unwrap();
        sessions.retain(|s| !s.is_closed());
        sessions.clone()
    }

    pub(crate) fn track(&self, session: &Session) {
        let mut sessions = self.inner.sessions.lock().unwrap();
        sessions.retain(|s| !s.is_closed());
        sessions.push(session.clone());
    }

    pub fn installer(&self) -> Installer {
        let fetcher: Arc<dyn Fetcher> = match &self.inner.cfg.fixture {
            Some(dir) => Arc::new(LocalDirFetcher::new(dir)),
            None => Arc::new(HttpFetcher::new()),
        };
        Installer::new(self.inner.store.clone(), fetcher)
            .with_content_host(self.inner.cfg.content_host.clone())
            .with_starter(Arc::new(HubStarter { hub: Arc::downgrade(&self.inner) }))
    }

    /// Calls a plugin of `workspace` with plain values, starting it if needed.
    pub async fn call(&self, workspace: &str, plugin: &str, method: &str, args: Vec<WireValue>) -> Result<WireValue, CallError> {
        let args = args.into_iter().map(HostValue::from_data).collect::<Result<Vec<_>, _>>()?;
        Ok(self.inner.router.call(workspace, plugin, method, args).await?.into_data()?)
    }

    /// Makes an installed plugin callable and returns its methods.
    pub async fn start_plugin(&self, workspace: &str, plugin: &str) -> Result<Vec<String>, StartError> {
        let _guard = self.inner.start_lock.lock().await;
        if let Some(methods) = self.inner.router.list(workspace).remove(plugin) {
            return Ok(methods);
        }
        let rec = self.inner.store.get_plugin(workspace, plugin).ok_or_else(|| StartError::NotInstalled {
            workspace: workspace.to_string(),
            plugin: plugin.to_string(),
        })?;
        let key = (workspace.to_string(), plugin.to_string());
        match rec.spec.runtime_kind {
            RuntimeKind::Window => Err(StartError::WindowPlugin(plugin.to_string())),
            RuntimeKind::Worker => {
                let events: Arc<dyn EventSink> = self.inner.events.clone();
                let (reg, instance) = load_worker(&self.inner.router, workspace, &rec.spec, events)?;
                self.inner.running.lock().unwrap().insert(key, Running::Worker(reg));
                Ok(instance.exports())
            }
            RuntimeKind::Native => {
                let engine = self.inner.assignments.lock().unwrap().get(&key).cloned();
                match engine {
                    Some(engine) => self.launch_remote(&engine, &rec, workspace).await,
                    None => {
                        self.inner.supervisor.launch(workspace, &rec.spec, rec.chosen_tag.as_deref()).await?;
                        self.inner.running.lock().unwrap().insert(key, Running::Native);
                        Ok(self.inner.router.list(workspace).remove(plugin).unwrap_or_default())
                    }
                }
            }
        }
    }

    async fn launch_remote(&self, engine: &str, rec: &InstalledPlugin, workspace: &str) -> Result<Vec<String>, StartError> {
        let link = self.engine(engine).ok_or_else(|| StartError::NoSuchEngine(engine.to_string()))?;
        let tag = rec.chosen_tag.clone().map_or(WireValue::Null, WireValue::Str);
        let v = link
            .session
            .call_wire(
                ENGINE_INTERFACE,
                "launch",
                vec![workspace.into(), rec.spec.raw_source.clone().into(), tag],
            )
            .await
            .map_err(StartError::Remote)?;
        let methods = system::string_list(&v).map_err(StartError::Remote)?;
        let name = &rec.spec.name;
        let endpoint = Arc::new(SessionEndpoint::new(link.session.clone(), format!("{workspace}/{name}")));
        let reg = self.inner.router.register_interface(workspace, name, methods.clone(), endpoint)?;
        self.inner
            .running
            .lock()
            .unwrap()
            .insert((workspace.to_string(), name.clone()), Running::Remote { engine: engine.to_string(), reg });
        Ok(methods)
    }

    /// Stops a running plugin wherever it runs. Returns whether it ran.
    pub async fn stop_plugin(&self, workspace: &str, plugin: &str) -> bool {
        let key = (workspace.to_string(), plugin.to_string());
        let running = self.inner.running.lock().unwrap().remove(&key);
        match running {
            Some(Running::Worker(reg)) => self.inner.router.unregister(workspace, plugin, Some(reg)),
            Some(Running::Native) => self.inner.supervisor.terminate(workspace, plugin).await,
            Some(Running::Remote { engine, reg }) => {
                self.inner.router.unregister(workspace, plugin, Some(reg));
                if let Some(link) = self.engine(&engine) {
                    let _ = link
                        .session
                        .call_wire(ENGINE_INTERFACE, "terminate", vec![workspace.into(), plugin.into()])
                        .await;
                }
                true
            }
            None => false,
        }
    }

    fn engine(&self, id: &str) -> Option<EngineLink> {
        self.inner.engines.lock().unwrap().get(id).cloned()
    }

    pub fn engines(&self) -> Vec<EngineInfo> {
        self.inner
            .engines
            .lock()
            .unwrap()
            .iter()
            .map(|(id, l)| EngineInfo { id: id.clone(), url: l.url.clone(), providers: l.providers.clone() })
            .collect()
    }

    /// Connects to a hub running in engine mode and returns the link id.
    pub async fn attach_engine(&self, url: &str, token: Option<&str>) -> Result<String, HubError> {
        let failed = |reason: String| HubError::ConnectFailed { url: url.to_string(), reason };
        let t = Transport::connect(url).await.map_err(|e| failed(e.to_string()))?;
        let handler = Arc::new(conn::ConnHandler::unscoped(Arc::downgrade(&self.inner)));
        let session = Session::open(t, Role::Hub, token, handler, self.inner.cfg.session.clone())
            .await
            .map_err(|e| match e {
                SessionError::AuthFailed => HubError::AuthFailed,
                other => failed(other.to_string()),
            })?;
        if session.peer_role() != Role::Engine {
            session.close();
            return Err(HubError::NotAnEngine(url.to_string()));
        }
        let status = session.call_wire(ENGINE_INTERFACE, "status", vec![]).await.map_err(HubError::Engine)?;
        let providers = match &status {
            WireValue::Map(m) => m.get("providers").and_then(|p| system::string_list(p).ok()).unwrap_or_default(),
            _ => Vec::new(),
        };
        let id = format!("engine-{}", self.inner.next_engine.fetch_add(1, Ordering::SeqCst));
        self.inner
            .engines
            .lock()
            .unwrap()
            .insert(id.clone(), EngineLink { url: url.to_string(), session: session.clone(), providers });
        let weak = Arc::downgrade(&self.inner);
        let link_id = id.clone();
        tokio::spawn(async move {
            session.closed().await;
            if let Some(inner) = weak.upgrade() {
                Hub { inner }.detach_engine(&link_id);
            }
        });
        Ok(id)
    }

    /// Drops a link; plugins it hosted stop being callable.
    pub fn detach_engine(&self, id: &str) -> bool {
        let Some(link) = self.inner.engines.lock().unwrap().remove(id) else {
            return false;
        };
        link.session.close();
        let mut running = self.inner.running.lock().unwrap();
        running.retain(|(ws, plugin), r| match r {
            Running::Remote { engine, reg } if engine == id => {
                self.inner.router.unregister(ws, plugin, Some(*reg));
                false
            }
            _ => true,
        });
        true
    }

    /// Chooses where a native plugin runs from its next start on: `"local"`
    /// or an engine id. A running plugin is stopped.
    pub async fn assign_engine(&self, workspace: &str, plugin: &str, engine: &str) -> Result<(), HubError> {
        if engine != "local" && self.engine(engine).is_none() {
            return Err(HubError::NoSuchEngine(engine.to_string()));
        }
        self.stop_plugin(workspace, plugin).await;
        let key = (workspace.to_string(), plugin.to_string());
        let mut assignments = self.inner.assignments.lock().unwrap();
        if engine == "local" {
            assignments.remove(&key);
        } else {
            assignments.insert(key, engine.to_string());
        }
        Ok(())
    }

    pub fn assignment(&self, workspace: &str, plugin: &str) -> String {
        self.inner
            .assignments
            .lock()
            .unwrap()
            .get(&(workspace.to_string(), plugin.to_string()))
            .cloned()
            .unwrap_or_else(|| "local".to_string())
    }

    pub(crate) fn set_upstream_session(&self, workspace: &str, session: &Session) {
        self.inner.router.set_upstream(workspace, Arc::new(SessionUpstream { session: session.clone() }));
    }
}
