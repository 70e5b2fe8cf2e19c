#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use plughub::rpc::{NoHandler, Role, RpcMessage, Session, SessionConfig, SessionHandler, Transport};
use plughub::server::{Hub, HubConfig};

pub const HUB_BIN: &str = env!("CARGO_BIN_EXE_hub");

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/repos")
}

pub fn fixture_file(rel: &str) -> String {
    std::fs::read_to_string(fixtures().join(rel)).unwrap()
}

pub fn config(dir: &Path) -> HubConfig {
    let mut cfg = HubConfig::new(dir);
    cfg.listen = "127.0.0.1:0".into();
    cfg.fixture = Some(fixtures());
    cfg.supervisor.shim_program = HUB_BIN.into();
    cfg.supervisor.ready_timeout = Duration::from_secs(20);
    cfg.supervisor.kill_grace = Duration::from_millis(500);
    cfg
}

pub async fn start(cfg: HubConfig) -> (Hub, String) {
    let hub = Hub::new(cfg).unwrap();
    let addr = hub.serve().await.unwrap();
    (hub, addr.to_string())
}

pub async fn client(addr: &str, token: Option<&str>) -> Session {
    let t = Transport::connect(addr).await.unwrap();
    Session::open(t, Role::Client, token, Arc::new(NoHandler), SessionConfig::default()).await.unwrap()
}

/// Client that keeps every log and progress message it is sent.
#[derive(Default)]
pub struct Collector(pub Mutex<Vec<RpcMessage>>);

impl SessionHandler for Collector {
    fn on_message(&self, _s: &Session, msg: RpcMessage) {
        self.0.lock().unwrap().push(msg);
    }
}

pub async fn collecting_client(addr: &str, token: Option<&str>) -> (Session, Arc<Collector>) {
    let c = Arc::new(Collector::default());
    let t = Transport::connect(addr).await.unwrap();
    let s = Session::open(t, Role::Client, token, c.clone(), SessionConfig::default()).await.unwrap();
    (s, c)
}

pub fn plugin(name: &str, kind: &str, extra: &str, script: &str) -> String {
    format!(
        "<config lang=\"json\">\n{{\"name\":\"{name}\", \"type\":\"{kind}\", \"version\":\"0.1.0\", \"api_version\":\"0.1\"{extra}}}\n</config>\n<script lang=\"pluginscript\">\n{script}\n</script>\n"
    )
}

fn ensure_workspace(hub: &Hub, ws: &str) {
    if hub.store().workspace(ws).is_none() {
        hub.store().create_workspace(ws).unwrap();
    }
}

pub fn install(hub: &Hub, ws: &str, source: &str) {
    ensure_workspace(hub, ws);
    hub.store().install_plugin(ws, source, "test", None, None, false).unwrap();
}

pub fn install_tagged(hub: &Hub, ws: &str, source: &str, tag: &str) {
    ensure_workspace(hub, ws);
    hub.store().install_plugin(ws, source, "test", None, Some(tag), false).unwrap();
}

/// Polls until `f` holds or the timeout passes.
pub async fn eventually(timeout: Duration, mut f: impl FnMut() -> bool) -> bool {
    let end = tokio::time::Instant::now() + timeout;
    while tokio::time::Instant::now() < end {
        if f() {
            return true;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    f()
}

/// exp(x) summed as a Taylor series after range reduction, independent of
/// the platform `exp`.
pub fn exp_oracle(x: f64) -> f64 {
    let k = (x / std::f64::consts::LN_2).round();
    let r = x - k * std::f64::consts::LN_2;
    let (mut term, mut sum) = (1.0f64, 1.0f64);
    for n in 1..40 {
        term *= r / n as f64;
        sum += term;
    }
    sum * 2f64.powi(k as i32)
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    ((got - want) / want).abs()
}
