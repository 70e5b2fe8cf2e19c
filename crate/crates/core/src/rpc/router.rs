//! Workspace-partitioned plugin registry and call routing.
//!
//! A caller sees the same contract whether the target is an in-host worker,
//! a native process behind a session, or a plugin proxied through a remote
//! engine: each is just an [`Endpoint`].

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use async_trait::async_trait;

use super::error::CallError;
use super::marshal::HostValue;
use super::session::Session;
use crate::names::{is_system_name, is_valid_name};

#[async_trait]
pub trait Endpoint: Send + Sync {
    async fn invoke(&self, method: &str, args: Vec<HostValue>) -> Result<HostValue, CallError>;
}

/// Forwards calls to `target` over a session.
pub struct SessionEndpoint {
    session: Session,
    target: String,
}

impl SessionEndpoint {
    pub fn new(session: Session, target: impl Into<String>) -> Self {
        SessionEndpoint { session, target: target.into() }
    }
}

#[async_trait]
impl Endpoint for SessionEndpoint {
    async fn invoke(&self, method: &str, args: Vec<HostValue>) -> Result<HostValue, CallError> {
        self.session.call(&self.target, method, args).await
    }
}

/// Where a workspace sends calls for plugins it does not host itself (an
/// engine forwards them to the hub that launched its plugins).
#[async_trait]
pub trait Upstream: Send + Sync {
    async fn call(&self, workspace: &str, target: &str, method: &str, args: Vec<HostValue>) -> Result<HostValue, CallError>;
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RouterError {
    #[error("plugin {plugin_id:?} is already registered in workspace {workspace:?}")]
    DuplicatePluginId { workspace: String, plugin_id: String },
    #[error("illegal plugin id {0:?}")]
    IllegalName(String),
}

/// Identifies one registration so a stale owner cannot remove its successor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RegistrationId(u64);

#[derive(Clone)]
struct Entry {
    id: RegistrationId,
    methods: Arc<Vec<String>>,
    endpoint: Arc<dyn Endpoint>,
}

pub struct Router {
    plugins: RwLock<HashMap<String, HashMap<String, Entry>>>,
    upstreams: RwLock<HashMap<String, Arc<dyn Upstream>>>,
    fallback: RwLock<Option<Arc<dyn Upstream>>>,
    next_reg: AtomicU64,
    call_timeout: Duration,
}

impl Default for Router {
    fn default() -> Self {
        Router::new(Duration::from_secs(300))
    }
}

impl Router {
    pub fn new(call_timeout: Duration) -> Self {
        Router {
            plugins: RwLock::new(HashMap::new()),
            upstreams: RwLock::new(HashMap::new()),
            fallback: RwLock::new(None),
            next_reg: AtomicU64::new(1),
            call_timeout,
        }
    }

    pub fn call_timeout(&self) -> Duration {
        self.call_timeout
    }

    pub fn register_interface(
        &self,
        workspace: &str,
        plugin_id: &str,
        methods: Vec<String>,
        endpoint: Arc<dyn Endpoint>,
    ) -> Result<RegistrationId, RouterError> {
        if !is_valid_name(plugin_id) || is_system_name(plugin_id) {
            return Err(RouterError::IllegalName(plugin_id.to_string()));
        }
        let mut plugins = self.plugins.write().unwrap();
        let ws = plugins.entry(workspace.to_string()).or_default();
        if ws.contains_key(plugin_id) {
            return Err(RouterError::DuplicatePluginId {
                workspace: workspace.to_string(),
                plugin_id: plugin_id.to_string(),
            });
        }
        let id = RegistrationId(self.next_reg.fetch_add(1, Ordering::SeqCst));
        ws.insert(plugin_id.to_string(), Entry { id, methods: Arc::new(methods), endpoint });
        Ok(id)
    }

    /// Removes a registration; with `only` set, only if it is still that one.
    pub fn unregister(&self, workspace: &str, plugin_id: &str, only: Option<RegistrationId>) -> bool {
        let mut plugins = self.plugins.write().unwrap();
        let Some(ws) = plugins.get_mut(workspace) else {
            return false;
        };
        match ws.get(plugin_id) {
            Some(e) if only.is_none_or(|id| id == e.id) => {
                ws.remove(plugin_id);
                if ws.is_empty() {
                    plugins.remove(workspace);
                }
                true
            }
            _ => false,
        }
    }

    pub fn set_upstream(&self, workspace: &str, upstream: Arc<dyn Upstream>) {
        self.upstreams.write().unwrap().insert(workspace.to_string(), upstream);
    }

    pub fn clear_upstream(&self, workspace: &str) {
        self.upstreams.write().unwrap().remove(workspace);
    }

    /// Consulted for unknown targets in workspaces without an upstream.
    pub fn set_fallback(&self, fallback: Arc<dyn Upstream>) {
        *self.fallback.write().unwrap() = Some(fallback);
    }

    pub fn is_registered(&self, workspace: &str, plugin_id: &str) -> bool {
        self.lookup(workspace, plugin_id).is_some()
    }

    /// Registered plugins of a workspace with their methods, by name.
    pub fn list(&self, workspace: &str) -> BTreeMap<String, Vec<String>> {
        self.plugins
            .read()
            .unwrap()
            .get(workspace)
            .map(|ws| ws.iter().map(|(k, e)| (k.clone(), e.methods.to_vec())).collect())
            .unwrap_or_default()
    }

    fn lookup(&self, workspace: &str, plugin_id: &str) -> Option<Entry> {
        self.plugins.read().unwrap().get(workspace)?.get(plugin_id).cloned()
    }

    /// Looks `name` up in the caller's workspace only.
    pub fn get_plugin(self: &Arc<Self>, workspace: &str, name: &str) -> Result<PluginProxy, CallError> {
        let entry = self
            .lookup(workspace, name)
            .ok_or_else(|| CallError::NoSuchPlugin(name.to_string()))?;
        Ok(PluginProxy {
            router: self.clone(),
            workspace: workspace.to_string(),
            name: name.to_string(),
            methods: entry.methods,
        })
    }

    pub async fn call(
        &self,
        workspace: &str,
        target: &str,
        method: &str,
        args: Vec<HostValue>,
    ) -> Result<HostValue, CallError> {
        let Some(entry) = self.lookup(workspace, target) else {
            let upstream = self.upstreams.read().unwrap().get(workspace).cloned();
            let upstream = upstream.or_else(|| self.fallback.read().unwrap().clone());
            return match upstream {
                Some(up) => up.call(workspace, target, method, args).await,
                None => Err(CallError::NoSuchPlugin(target.to_string())),
            };
        };
        if !entry.methods.iter().any(|m| m == method) {
            return Err(CallError::NoSuchMethod { plugin: target.to_string(), method: method.to_string() });
        }
        match tokio::time::timeout(self.call_timeout, entry.endpoint.invoke(method, args)).await {
            Ok(r) => r,
            Err(_) => Err(CallError::Timeout),
        }
    }
}

/// Handle returned by [`Router::get_plugin`]; binds calls to one plugin.
#[derive(Clone)]
pub struct PluginProxy {
    router: Arc<Router>,
    workspace: String,
    name: String,
    methods: Arc<Vec<String>>,
}

impl PluginProxy {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn methods(&self) -> &[String] {
        &self.methods
    }

    pub async fn call(&self, method: &str, args: Vec<HostValue>) -> Result<HostValue, CallError> {
        self.router.call(&self.workspace, &self.name, method, args).await
    }
}
