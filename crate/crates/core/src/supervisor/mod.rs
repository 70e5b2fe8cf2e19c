//! Native plugins as supervised child processes.
//!
//! A launch provisions the plugin's environment, writes its source next to
//! it and spawns the shim with a one-time ticket as its token. The hub's
//! acceptor hands the ticket's session back here once the child has sent
//! its interface; only then is the plugin registered with the router.

pub mod env;

use std::collections::{HashMap, VecDeque};
use std::path::PathBuf;
use std::process::{ExitStatus, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use futures::future::BoxFuture;
use rand::RngCore;
use serde::Serialize;
use tokio::io::{AsyncBufReadExt, AsyncRead, BufReader};
use tokio::sync::{oneshot, watch};

pub use env::{
    env_dir, provision_env, CommandProvider, EnvError, EnvHandle, EnvProvider, EnvSpec, NullProvider, Outcome,
    ProviderFailure, ProviderRegistry,
};

use crate::host::EventSink;
use crate::plugin::{resolve_tag, PluginSpec, RuntimeKind, UnknownTag};
use crate::refs::PLUGIN_EXTENSION;
use crate::rpc::{RegistrationId, Router, RouterError, Session, SessionEndpoint};

#[derive(Debug, Clone)]
pub struct SupervisorConfig {
    /// Workspaces live under this directory; environments go below them.
    pub data_root: PathBuf,
    /// Program run as `<program> <shim_args..> shim --spec .. --connect .. --token ..`.
    pub shim_program: PathBuf,
    pub shim_args: Vec<String>,
    pub ready_timeout: Duration,
    pub kill_grace: Duration,
    pub restart_limit: u32,
    /// Added to every child's environment.
    pub extra_env: Vec<(String, String)>,
    pub log_capacity: usize,
}

impl SupervisorConfig {
    pub fn new(data_root: impl Into<PathBuf>) -> Self {
        SupervisorConfig {
            data_root: data_root.into(),
            shim_program: std::env::current_exe().unwrap_or_else(|_| PathBuf::from("hub")),
            shim_args: Vec::new(),
            ready_timeout: Duration::from_secs(30),
            kill_grace: Duration::from_secs(5),
            restart_limit: 0,
            extra_env: Vec::new(),
            log_capacity: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HandleState {
    Provisioning,
    Launching,
    Ready,
    Failed,
    Terminated,
}

impl HandleState {
    pub fn as_str(self) -> &'static str {
        match self {
            HandleState::Provisioning => "provisioning",
            HandleState::Launching => "launching",
            HandleState::Ready => "ready",
            HandleState::Failed => "failed",
            HandleState::Terminated => "terminated",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LaunchError {
    #[error("plugin {0:?} is not a native plugin")]
    NotNative(String),
    #[error(transparent)]
    UnknownTag(#[from] UnknownTag),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("could not spawn plugin process: {0}")]
    Spawn(String),
    #[error("plugin did not become ready in time")]
    ReadyTimeout,
    #[error("plugin process failed to authenticate")]
    AuthFailed,
    #[error(transparent)]
    Router(#[from] RouterError),
    #[error("the hub is not listening yet")]
    NoHubAddress,
    #[error("i/o error: {0}")]
    Io(String),
}

impl LaunchError {
    pub fn code(&self) -> &'static str {
        match self {
            LaunchError::NotNative(_) => "NotNative",
            LaunchError::UnknownTag(_) => "UnknownTag",
            LaunchError::Env(EnvError::UnknownProvider(_)) => "UnknownProvider",
            LaunchError::Env(EnvError::ProvisionFailed { .. }) => "ProvisionFailed",
            LaunchError::Env(EnvError::Io { .. }) | LaunchError::Io(_) => "IoError",
            LaunchError::Spawn(_) => "SpawnError",
            LaunchError::ReadyTimeout => "ReadyTimeout",
            LaunchError::AuthFailed => "AuthFailed",
            LaunchError::Router(RouterError::DuplicatePluginId { .. }) => "DuplicatePluginId",
            LaunchError::Router(RouterError::IllegalName(_)) => "IllegalName",
            LaunchError::NoHubAddress => "NoHubAddress",
        }
    }
}

/// A child that connected with a ticket and is waiting for its interface.
pub struct Ticket {
    pub workspace: String,
    pub plugin: String,
    ready: oneshot::Sender<(Session, Vec<String>)>,
}

impl Ticket {
    /// Reports the child's session and declared methods to the launcher.
    /// Returns false if the launch has already given up.
    pub fn ready(self, session: Session, methods: Vec<String>) -> bool {
        self.ready.send((session, methods)).is_ok()
    }
}

struct Proc {
    pid: u32,
    exited: watch::Receiver<bool>,
}

struct HandleInner {
    workspace: String,
    plugin: String,
    state: watch::Sender<HandleState>,
    restart_count: AtomicU32,
    logs: Mutex<VecDeque<String>>,
    log_capacity: usize,
    proc: Mutex<Option<Proc>>,
    session: Mutex<Option<Session>>,
    reg: Mutex<Option<RegistrationId>>,
    terminating: AtomicBool,
    spec_path: PathBuf,
    env_dir: PathBuf,
}

/// Shared view of one supervised plugin.
#[derive(Clone)]
pub struct PluginHandle {
    inner: Arc<HandleInner>,
}

impl std::fmt::Debug for PluginHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PluginHandle")
            .field("workspace", &self.inner.workspace)
            .field("plugin", &self.inner.plugin)
            .field("state", &self.state())
            .finish()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HandleStatus {
    pub workspace: String,
    pub plugin: String,
    pub state: HandleState,
    pub restart_count: u32,
    pub pid: Option<u32>,
    pub env_dir: PathBuf,
}

impl PluginHandle {
    pub fn workspace(&self) -> &str {
        &self.inner.workspace
    }

    pub fn plugin(&self) -> &str {
        &self.inner.plugin
    }

    pub fn state(&self) -> HandleState {
        *self.inner.state.borrow()
    }

    pub fn restart_count(&self) -> u32 {
        self.inner.restart_count.load(Ordering::SeqCst)
    }

    pub fn pid(&self) -> Option<u32> {
        self.inner.proc.lock().unwrap().as_ref().map(|p| p.pid)
    }

    pub fn env_dir(&self) -> &std::path::Path {
        &self.inner.env_dir
    }

    pub fn logs(&self) -> Vec<String> {
        self.inner.logs.lock().unwrap().iter().cloned().collect()
    }

    pub fn status(&self) -> HandleStatus {
        HandleStatus {
            workspace: self.inner.workspace.clone(),
            plugin: self.inner.plugin.clone(),
            state: self.state(),
            restart_count: self.restart_count(),
            pid: self.pid(),
            env_dir: self.inner.env_dir.clone(),
        }
    }

    /// Waits until the state satisfies `pred`, up to `timeout`.
    pub async fn wait_for(&self, timeout: Duration, pred: impl Fn(HandleState) -> bool) -> Option<HandleState> {
        let mut rx = self.inner.state.subscribe();
        let r = tokio::time::timeout(timeout, rx.wait_for(|s| pred(*s))).await;
        match r {
            Ok(Ok(s)) => Some(*s),
            _ => None,
        }
    }

    pub fn push_log(&self, line: String) {
        let mut logs = self.inner.logs.lock().unwrap();
        if logs.len() == self.inner.log_capacity {
            logs.pop_front();
        }
        logs.push_back(line);
    }

    fn set_state(&self, s: HandleState) {
        self.inner.state.send_replace(s);
    }

    fn is_alive(&self) -> Option<watch::Receiver<bool>> {
        let proc = self.inner.proc.lock().unwrap();
        proc.as_ref().filter(|p| !*p.exited.borrow()).map(|p| p.exited.clone())
    }
}

fn signal(pid: u32, sig: i32) {
    // SAFETY: plain kill(2) on a pid we spawned and have not yet reaped.
    unsafe {
        libc::kill(pid as libc::pid_t, sig);
    }
}

enum Waited {
    Ready(Session, Vec<String>),
    Exited,
    TimedOut,
}

pub struct Supervisor {
    cfg: SupervisorConfig,
    router: Arc<Router>,
    providers: ProviderRegistry,
    events: Arc<dyn EventSink>,
    hub_addr: RwLock<Option<String>>,
    tickets: Mutex<HashMap<String, Ticket>>,
    handles: Mutex<HashMap<(String, String), PluginHandle>>,
}

impl Supervisor {
    pub fn new(
        cfg: SupervisorConfig,
        router: Arc<Router>,
        providers: ProviderRegistry,
        events: Arc<dyn EventSink>,
    ) -> Arc<Self> {
        Arc::new(Supervisor {
            cfg,
            router,
            providers,
            events,
            hub_addr: RwLock::new(None),
            tickets: Mutex::new(HashMap::new()),
            handles: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &SupervisorConfig {
        &self.cfg
    }

    pub fn providers(&self) -> &ProviderRegistry {
        &self.providers
    }

    /// Address children connect back to.
    pub fn set_hub_addr(&self, addr: impl Into<String>) {
        *self.hub_addr.write().unwrap() = Some(addr.into());
    }

    pub fn is_pending_ticket(&self, token: &str) -> bool {
        self.tickets.lock().unwrap().contains_key(token)
    }

    pub fn claim_ticket(&self, token: &str) -> Option<Ticket> {
        self.tickets.lock().unwrap().remove(token)
    }

    pub fn handle(&self, workspace: &str, plugin: &str) -> Option<PluginHandle> {
        self.handles.lock().unwrap().get(&(workspace.to_string(), plugin.to_string())).cloned()
    }

    pub fn handles(&self) -> Vec<PluginHandle> {
        self.handles.lock().unwrap().values().cloned().collect()
    }

    /// Records a line in the plugin's log ring, if it is supervised here.
    pub fn record_log(&self, workspace: &str, plugin: &str, line: String) {
        if let Some(h) = self.handle(workspace, plugin) {
            h.push_log(line);
        }
    }

    pub async fn provision(&self, spec: &EnvSpec) -> Result<EnvHandle, EnvError> {
        provision_env(&self.cfg.data_root, spec, &self.providers).await
    }

    /// Launches `spec` as a child process; returns once it is ready. A
    /// plugin that is already ready is returned as is.
    pub async fn launch(
        self: &Arc<Self>,
        workspace: &str,
        spec: &PluginSpec,
        tag: Option<&str>,
    ) -> Result<PluginHandle, LaunchError> {
        if spec.runtime_kind != RuntimeKind::Native {
            return Err(LaunchError::NotNative(spec.name.clone()));
        }
        let resolved = resolve_tag(spec, tag)?;
        let key = (workspace.to_string(), spec.name.clone());
        if let Some(h) = self.handle(workspace, &spec.name) {
            if h.state() == HandleState::Ready {
                return Ok(h);
            }
            self.terminate(workspace, &spec.name).await;
        }
        let env_spec = EnvSpec { requirements: resolved.effective_requirements.clone(), workspace: workspace.to_string() };
        let dir = env_dir(&self.cfg.data_root, &env_spec);
        let (state, _) = watch::channel(HandleState::Provisioning);
        let handle = PluginHandle {
            inner: Arc::new(HandleInner {
                workspace: workspace.to_string(),
                plugin: spec.name.clone(),
                state,
                restart_count: AtomicU32::new(0),
                logs: Mutex::new(VecDeque::new()),
                log_capacity: self.cfg.log_capacity.max(1),
                proc: Mutex::new(None),
                session: Mutex::new(None),
                reg: Mutex::new(None),
                terminating: AtomicBool::new(false),
                spec_path: dir.join(format!("{}{PLUGIN_EXTENSION}", spec.name)),
                env_dir: dir,
            }),
        };
        self.handles.lock().unwrap().insert(key, handle.clone());

        let env = match self.provision(&env_spec).await {
            Ok(env) => env,
            Err(e) => {
                handle.push_log(format!("[supervisor] {e}"));
                handle.set_state(HandleState::Failed);
                return Err(e.into());
            }
        };
        for o in &env.outcomes {
            handle.push_log(format!("[env] {} {}", o.requirement, o.output.trim_end()));
        }
        if let Err(e) = tokio::fs::write(&handle.inner.spec_path, &spec.raw_source).await {
            handle.set_state(HandleState::Failed);
            return Err(LaunchError::Io(e.to_string()));
        }
        self.clone().start_child(handle.clone()).await?;
        Ok(handle)
    }

    fn start_child(self: Arc<Self>, handle: PluginHandle) -> BoxFuture<'static, Result<(), LaunchError>> {
        Box::pin(async move {
            handle.set_state(HandleState::Launching);
            let Some(hub_addr) = self.hub_addr.read().unwrap().clone() else {
                handle.set_state(HandleState::Failed);
                return Err(LaunchError::NoHubAddress);
            };
            let mut raw = [0u8; 16];
            rand::thread_rng().fill_bytes(&mut raw);
            let ticket = hex::encode(raw);
            let (ready_tx, ready_rx) = oneshot::channel();
            self.tickets.lock().unwrap().insert(
                ticket.clone(),
                Ticket { workspace: handle.workspace().to_string(), plugin: handle.plugin().to_string(), ready: ready_tx },
            );

            let mut cmd = tokio::process::Command::new(&self.cfg.shim_program);
            cmd.args(&self.cfg.shim_args)
                .arg("shim")
                .arg("--spec")
                .arg(&handle.inner.spec_path)
                .args(["--connect", &hub_addr, "--token", &ticket])
                .current_dir(&handle.inner.env_dir)
                .env_remove("HUB_TOKEN")
                .envs(self.cfg.extra_env.iter().map(|(k, v)| (k, v)))
                .stdin(Stdio::null())
                .stdout(Stdio::piped())
                .stderr(Stdio::piped())
                .kill_on_drop(true);
            let mut child = match cmd.spawn() {
                Ok(c) => c,
                Err(e) => {
                    self.tickets.lock().unwrap().remove(&ticket);
                    handle.push_log(format!("[supervisor] spawn failed: {e}"));
                    handle.set_state(HandleState::Failed);
                    return Err(LaunchError::Spawn(format!("{}: {e}", self.cfg.shim_program.display())));
                }
            };
            let pid = child.id().unwrap_or(0);
            let readers = [
                child.stdout.take().map(|s| self.pipe_lines(&handle, "stdout", s)),
                child.stderr.take().map(|s| self.pipe_lines(&handle, "stderr", s)),
            ];
            let (exit_tx, mut exit_rx) = watch::channel(false);
            *handle.inner.proc.lock().unwrap() = Some(Proc { pid, exited: exit_rx.clone() });
            tokio::spawn({
                let sup = self.clone();
                let handle = handle.clone();
                async move {
                    let status = child.wait().await;
                    exit_tx.send_replace(true);
                    sup.on_exit(handle, status.ok()).await;
                }
            });

            let waited = tokio::select! {
                r = ready_rx => match r {
                    Ok((session, methods)) => Waited::Ready(session, methods),
                    Err(_) => Waited::Exited,
                },
                _ = exit_rx.wait_for(|e| *e) => Waited::Exited,
                _ = tokio::time::sleep(self.cfg.ready_timeout) => Waited::TimedOut,
            };
            let (session, methods) = match waited {
                Waited::Ready(s, m) => (s, m),
                other => {
                    self.tickets.lock().unwrap().remove(&ticket);
                    handle.set_state(HandleState::Failed);
                    if let Some(rx) = handle.is_alive() {
                        self.kill_now(pid, rx).await;
                    }
                    for r in readers.into_iter().flatten() {
                        let _ = tokio::time::timeout(Duration::from_secs(2), r).await;
                    }
                    if matches!(other, Waited::Exited) && handle.logs().iter().any(|l| l.contains("AuthFailed")) {
                        return Err(LaunchError::AuthFailed);
                    }
                    return Err(LaunchError::ReadyTimeout);
                }
            };

            let endpoint = Arc::new(SessionEndpoint::new(session.clone(), handle.plugin()));
            match self.router.register_interface(handle.workspace(), handle.plugin(), methods, endpoint) {
                Ok(id) => *handle.inner.reg.lock().unwrap() = Some(id),
                Err(e) => {
                    session.close();
                    handle.set_state(HandleState::Failed);
                    if let Some(rx) = handle.is_alive() {
                        self.kill_now(pid, rx).await;
                    }
                    return Err(e.into());
                }
            }
            *handle.inner.session.lock().unwrap() = Some(session.clone());
            handle.set_state(HandleState::Ready);

            // A session that dies under a live process (garbage on the wire)
            // takes the process with it; the exit path handles restarts.
            tokio::spawn({
                let sup = self.clone();
                let handle = handle.clone();
                let exited = exit_rx.clone();
                async move {
                    session.closed().await;
                    if handle.inner.terminating.load(Ordering::SeqCst) {
                        return;
                    }
                    let current = handle.inner.session.lock().unwrap().as_ref().is_some_and(|s| s.same_as(&session));
                    if current {
                        sup.unregister(&handle);
                    }
                    if !*exited.borrow() {
                        handle.push_log("[supervisor] session lost, killing process".into());
                        sup.kill_now(pid, exited).await;
                    }
                }
            });
            Ok(())
        })
    }

    fn pipe_lines(
        &self,
        handle: &PluginHandle,
        stream: &'static str,
        pipe: impl AsyncRead + Unpin + Send + 'static,
    ) -> tokio::task::JoinHandle<()> {
        let handle = handle.clone();
        let events = self.events.clone();
        tokio::spawn(async move {
            let mut lines = BufReader::new(pipe).lines();
            while let Ok(Some(line)) = lines.next_line().await {
                events.log(handle.workspace(), handle.plugin(), stream, &line);
                handle.push_log(format!("[{stream}] {line}"));
            }
        })
    }

    async fn on_exit(self: Arc<Self>, handle: PluginHandle, status: Option<ExitStatus>) {
        let how = status.map_or_else(|| "unknown status".to_string(), |s| s.to_string());
        handle.push_log(format!("[supervisor] process exited: {how}"));
        if handle.inner.terminating.load(Ordering::SeqCst) {
            return;
        }
        if handle.state() != HandleState::Ready {
            return;
        }
        self.unregister(&handle);
        handle.set_state(HandleState::Failed);
        if handle.restart_count() < self.cfg.restart_limit {
            handle.inner.restart_count.fetch_add(1, Ordering::SeqCst);
            handle.push_log(format!("[supervisor] restart {}", handle.restart_count()));
            if let Err(e) = self.clone().start_child(handle.clone()).await {
                handle.push_log(format!("[supervisor] restart failed: {e}"));
            }
        }
    }

    fn unregister(&self, handle: &PluginHandle) {
        if let Some(id) = handle.inner.reg.lock().unwrap().take() {
            self.router.unregister(handle.workspace(), handle.plugin(), Some(id));
        }
        if let Some(s) = handle.inner.session.lock().unwrap().take() {
            s.close();
        }
    }

    async fn kill_now(&self, pid: u32, mut exited: watch::Receiver<bool>) {
        signal(pid, libc::SIGKILL);
        let _ = exited.wait_for(|e| *e).await;
    }

    /// Stops a plugin: its calls fail with `SessionClosed`, the process gets
    /// SIGTERM and, after the grace period, SIGKILL. Idempotent.
    pub async fn terminate(&self, workspace: &str, plugin: &str) -> bool {
        let Some(handle) = self.handle(workspace, plugin) else {
            return false;
        };
        if handle.inner.terminating.swap(true, Ordering::SeqCst) {
            return true;
        }
        self.unregister(&handle);
        if let Some(mut exited) = handle.is_alive() {
            let pid = handle.pid().unwrap_or(0);
            signal(pid, libc::SIGTERM);
            if tokio::time::timeout(self.cfg.kill_grace, exited.wait_for(|e| *e)).await.is_err() {
                handle.push_log("[supervisor] grace period over, killing".into());
                self.kill_now(pid, exited).await;
            }
        }
        handle.set_state(HandleState::Terminated);
        true
    }

    /// Terminates every supervised plugin.
    pub async fn shutdown(&self) {
        let keys: Vec<_> = self.handles.lock().unwrap().keys().cloned().collect();
        for (ws, p) in keys {
            self.terminate(&ws, &p).await;
        }
    }
}
