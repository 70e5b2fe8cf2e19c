//! Child-process side of a native plugin: load the spec, connect back to
//! the hub, declare the interface and serve calls with the script runtime.

use std::path::PathBuf;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use async_trait::async_trait;
use tokio::io::AsyncWriteExt;

use crate::host::{compile_plugin, LoadError};
use crate::plugin::{parse_plugin_file, ParseError};
use crate::rpc::{
    CallError, HostValue, Role, RpcMessage, Session, SessionConfig, SessionError, SessionHandler, Transport,
    TransportError, WireValue,
};
use crate::script::{instantiate, Bridge, PluginInstance};

/// Environment variable selecting a deliberate misbehaviour, for testing
/// containment.
pub const FAULT_ENV: &str = "HUB_SHIM_FAULT";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShimFault {
    /// Never connects.
    NoConnect,
    /// Authenticates, then exits without declaring an interface.
    ExitBeforeIface,
    /// Answers the first call with bytes that are not a frame.
    Garbage,
    /// Accepts calls and never answers.
    Hang,
    /// Exits abruptly on the first call.
    CrashOnCall,
}

impl FromStr for ShimFault {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "no-connect" => ShimFault::NoConnect,
            "exit-before-iface" => ShimFault::ExitBeforeIface,
            "garbage" => ShimFault::Garbage,
            "hang" => ShimFault::Hang,
            "crash-on-call" => ShimFault::CrashOnCall,
            other => return Err(format!("unknown shim fault {other:?}")),
        })
    }
}

/// Faults to inject, as a comma-separated list of `fault` (every plugin) or
/// `plugin=fault` entries.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaultPlan(Vec<(Option<String>, ShimFault)>);

impl FaultPlan {
    pub fn for_plugin(&self, name: &str) -> Option<ShimFault> {
        self.0.iter().find(|(p, _)| p.as_deref().is_none_or(|p| p == name)).map(|(_, f)| *f)
    }
}

impl FromStr for FaultPlan {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut plan = Vec::new();
        for entry in s.split(',').map(str::trim).filter(|e| !e.is_empty()) {
            plan.push(match entry.split_once('=') {
                Some((plugin, fault)) => (Some(plugin.to_string()), fault.parse()?),
                None => (None, entry.parse()?),
            });
        }
        Ok(FaultPlan(plan))
    }
}

#[derive(Debug, Clone)]
pub struct ShimOptions {
    pub spec: PathBuf,
    pub connect: String,
    pub token: Option<String>,
    pub faults: FaultPlan,
}

#[derive(Debug, thiserror::Error)]
pub enum ShimError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("cannot connect to {addr}: {source}")]
    Connect {
        addr: String,
        #[source]
        source: TransportError,
    },
    #[error("AuthFailed: the hub rejected the token")]
    AuthFailed,
    #[error(transparent)]
    Session(SessionError),
}

struct SessionBridge {
    plugin: String,
    session: OnceLock<Session>,
}

impl SessionBridge {
    fn session(&self) -> Result<&Session, CallError> {
        self.session.get().ok_or(CallError::SessionClosed)
    }
}

#[async_trait]
impl Bridge for SessionBridge {
    async fn call(&self, plugin: &str, method: &str, args: Vec<WireValue>) -> Result<WireValue, CallError> {
        self.session()?.call_wire(plugin, method, args).await
    }

    fn log(&self, level: &str, text: &str) {
        if let Ok(s) = self.session() {
            let _ = s.send(RpcMessage::Log { plugin_id: self.plugin.clone(), level: level.into(), text: text.into() });
        }
    }

    fn progress(&self, fraction: f64) {
        if let Ok(s) = self.session() {
            let _ = s.send(RpcMessage::Progress { plugin_id: self.plugin.clone(), fraction });
        }
    }
}

struct ShimHandler {
    instance: Arc<PluginInstance>,
    fault: Option<ShimFault>,
    raw: tokio::sync::Mutex<Option<tokio::net::TcpStream>>,
}

#[async_trait]
impl SessionHandler for ShimHandler {
    async fn on_call(&self, _s: &Session, target: &str, method: &str, args: Vec<HostValue>) -> Result<HostValue, CallError> {
        match self.fault {
            Some(ShimFault::CrashOnCall) => std::process::exit(101),
            Some(ShimFault::Hang) => futures::future::pending::<()>().await,
            Some(ShimFault::Garbage) => {
                if let Some(raw) = self.raw.lock().await.as_mut() {
                    let _ = raw.write_all(b"\x00\x00\x00\x08garbage!\xff\xfe").await;
                    let _ = raw.flush().await;
                }
                futures::future::pending::<()>().await;
            }
            _ => {}
        }
        if target != self.instance.plugin_id() {
            return Err(CallError::NoSuchPlugin(target.to_string()));
        }
        let args = args.into_iter().map(HostValue::into_data).collect::<Result<Vec<_>, _>>()?;
        let out = self
            .instance
            .invoke(method, args)
            .await
            .map_err(|e| e.into_call_error(self.instance.plugin_id()))?;
        Ok(HostValue::from_data(out)?)
    }
}

async fn connect(addr: &str, keep_raw: bool) -> Result<(Transport, Option<tokio::net::TcpStream>), TransportError> {
    if !keep_raw || addr.starts_with("ws://") || addr.starts_with("wss://") {
        return Ok((Transport::connect(addr).await?, None));
    }
    let stream = tokio::net::TcpStream::connect(addr.strip_prefix("tcp://").unwrap_or(addr)).await?;
    let std_stream = stream.into_std()?;
    let twin = std_stream.try_clone()?;
    Ok((
        Transport::from_stream(tokio::net::TcpStream::from_std(std_stream)?),
        Some(tokio::net::TcpStream::from_std(twin)?),
    ))
}

/// Runs until the hub closes the session.
pub async fn run_shim(opts: ShimOptions) -> Result<(), ShimError> {
    let source = std::fs::read_to_string(&opts.spec).map_err(|source| ShimError::Read { path: opts.spec.clone(), source })?;
    let spec = parse_plugin_file(&source)?;
    let program = Arc::new(compile_plugin(&spec)?);
    let fault = opts.faults.for_plugin(&spec.name);
    if fault == Some(ShimFault::NoConnect) {
        futures::future::pending::<()>().await;
    }
    let bridge = Arc::new(SessionBridge { plugin: spec.name.clone(), session: OnceLock::new() });
    let instance = Arc::new(instantiate(program, bridge.clone(), &spec.name));
    let (transport, raw) = connect(&opts.connect, fault == Some(ShimFault::Garbage))
        .await
        .map_err(|source| ShimError::Connect { addr: opts.connect.clone(), source })?;
    let handler = Arc::new(ShimHandler { instance: instance.clone(), fault, raw: tokio::sync::Mutex::new(raw) });
    let session = Session::open(transport, Role::Plugin, opts.token.as_deref(), handler, SessionConfig::default())
        .await
        .map_err(|e| match e {
            SessionError::AuthFailed => ShimError::AuthFailed,
            other => ShimError::Session(other),
        })?;
    let _ = bridge.session.set(session.clone());
    if fault == Some(ShimFault::ExitBeforeIface) {
        std::process::exit(1);
    }
    eprintln!("shim: {} serving {} method(s)", spec.name, instance.exports().len());
    session
        .send(RpcMessage::Iface { plugin_id: spec.name.clone(), methods: instance.exports() })
        .map_err(|_| ShimError::Session(SessionError::Protocol("session closed before iface".into())))?;
    session.closed().await;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fault_plans() {
        let plan: FaultPlan = "calc=garbage, hang".parse().unwrap();
        assert_eq!(plan.for_plugin("calc"), Some(ShimFault::Garbage));
        assert_eq!(plan.for_plugin("other"), Some(ShimFault::Hang));
        let plan: FaultPlan = "slow=hang".parse().unwrap();
        assert_eq!(plan.for_plugin("fast"), None);
        assert_eq!("".parse::<FaultPlan>().unwrap(), FaultPlan::default());
        assert!("calc=explode".parse::<FaultPlan>().is_err());
    }
}
