//! In-host execution of worker plugins and the bridge scripts use to reach
//! other plugins of their workspace.

use std::sync::{Arc, Weak};

use async_trait::async_trait;

use crate::plugin::{PluginSpec, RuntimeKind};
use crate::rpc::{CallError, Endpoint, HostValue, RegistrationId, Router, RouterError, WireValue};
use crate::script::{instantiate, parse_script, Bridge, PluginInstance, ScriptError};

/// Receives log and progress output of running plugins.
pub trait EventSink: Send + Sync {
    fn log(&self, workspace: &str, plugin: &str, level: &str, text: &str);
    fn progress(&self, workspace: &str, plugin: &str, fraction: f64);
}

pub struct NullSink;

impl EventSink for NullSink {
    fn log(&self, _: &str, _: &str, _: &str, _: &str) {}
    fn progress(&self, _: &str, _: &str, _: f64) {}
}

/// Routes a script's `call(...)` through the router, confined to the
/// plugin's own workspace.
pub struct RouterBridge {
    router: Weak<Router>,
    workspace: String,
    plugin: String,
    events: Arc<dyn EventSink>,
}

impl RouterBridge {
    pub fn new(router: &Arc<Router>, workspace: &str, plugin: &str, events: Arc<dyn EventSink>) -> Self {
        RouterBridge {
            router: Arc::downgrade(router),
            workspace: workspace.to_string(),
            plugin: plugin.to_string(),
            events,
        }
    }
}

#[async_trait]
impl Bridge for RouterBridge {
    async fn call(&self, plugin: &str, method: &str, args: Vec<WireValue>) -> Result<WireValue, CallError> {
        let router = self.router.upgrade().ok_or(CallError::SessionClosed)?;
        let args = args.into_iter().map(HostValue::from_data).collect::<Result<Vec<_>, _>>()?;
        Ok(router.call(&self.workspace, plugin, method, args).await?.into_data()?)
    }

    fn log(&self, level: &str, text: &str) {
        self.events.log(&self.workspace, &self.plugin, level, text);
    }

    fn progress(&self, fraction: f64) {
        self.events.progress(&self.workspace, &self.plugin, fraction);
    }
}

/// Serves router calls from a script instance.
pub struct WorkerEndpoint {
    instance: Arc<PluginInstance>,
}

impl WorkerEndpoint {
    pub fn new(instance: Arc<PluginInstance>) -> Self {
        WorkerEndpoint { instance }
    }
}

#[async_trait]
impl Endpoint for WorkerEndpoint {
    async fn invoke(&self, method: &str, args: Vec<HostValue>) -> Result<HostValue, CallError> {
        let args = args.into_iter().map(HostValue::into_data).collect::<Result<Vec<_>, _>>()?;
        let out = self
            .instance
            .invoke(method, args)
            .await
            .map_err(|e| e.into_call_error(self.instance.plugin_id()))?;
        Ok(HostValue::from_data(out)?)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("plugin {0:?} has no script section")]
    NoScript(String),
    #[error("plugin {0:?} is a window plugin and runs in a client")]
    WindowPlugin(String),
    #[error("script error in {plugin:?}: {source}")]
    Script {
        plugin: String,
        #[source]
        source: ScriptError,
    },
    #[error(transparent)]
    Router(#[from] RouterError),
}

pub fn compile_plugin(spec: &PluginSpec) -> Result<crate::script::Program, LoadError> {
    let text = spec.script().ok_or_else(|| LoadError::NoScript(spec.name.clone()))?;
    parse_script(text).map_err(|source| LoadError::Script { plugin: spec.name.clone(), source })
}

/// Compiles a worker (or, for the shim, native) plugin and registers it.
pub fn load_worker(
    router: &Arc<Router>,
    workspace: &str,
    spec: &PluginSpec,
    events: Arc<dyn EventSink>,
) -> Result<(RegistrationId, Arc<PluginInstance>), LoadError> {
    if spec.runtime_kind == RuntimeKind::Window {
        return Err(LoadError::WindowPlugin(spec.name.clone()));
    }
    let program = Arc::new(compile_plugin(spec)?);
    let bridge = Arc::new(RouterBridge::new(router, workspace, &spec.name, events));
    let instance = Arc::new(instantiate(program, bridge, &spec.name));
    let id = router.register_interface(
        workspace,
        &spec.name,
        instance.exports(),
        Arc::new(WorkerEndpoint::new(instance.clone())),
    )?;
    Ok((id, instance))
}
