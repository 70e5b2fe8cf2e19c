use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex, Weak};
use std::time::Duration;

use async_trait::async_trait;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;

use super::{system, Hub, HubInner, ENGINE_INTERFACE, HUB_INTERFACE};
use crate::host::EventSink;
use crate::registry::DEFAULT_WORKSPACE;
use crate::rpc::{
    accept_handshake, CallError, HostValue, RegistrationId, Role, RpcMessage, Session, SessionEndpoint,
    SessionHandler, Transport,
};
use crate::supervisor::Ticket;

/// Served at `/` under `--ui` when no built workbench is configured. It
/// understands the `#/app?...` and `#/workflow?...` routes well enough to
/// show what was asked for.
pub const FALLBACK_PAGE: &str = r##"<!doctype html>
<html>
<head><meta charset="utf-8"><title>plughub</title></head>
<body>
<h1>plughub</h1>
<pre id="route"></pre>
<pre id="status">connecting</pre>
<script>
function show() {
  var h = location.hash || "#/";
  var q = h.indexOf("?");
  var path = q < 0 ? h.slice(1) : h.slice(1, q);
  var params = new URLSearchParams(q < 0 ? "" : h.slice(q + 1));
  var out = { route: path, params: Object.fromEntries(params) };
  if (path === "/workflow" && params.get("def")) {
    try {
      var b = params.get("def").replace(/-/g, "+").replace(/_/g, "/");
      out.workflow = JSON.parse(atob(b));
    } catch (e) { out.error = String(e); }
  }
  document.getElementById("route").textContent = JSON.stringify(out, null, 2);
}
window.addEventListener("hashchange", show);
show();
var ws = new WebSocket((location.protocol === "https:" ? "wss://" : "ws://") + location.host + "/ws");
ws.onopen = function () { document.getElementById("status").textContent = "connected"; };
ws.onclose = function () { document.getElementById("status").textContent = "disconnected"; };
</script>
</body>
</html>
"##;

const MAX_HEAD: usize = 16 * 1024;

pub(super) async fn handle(hub: Hub, stream: TcpStream) {
    let _ = stream.set_nodelay(true);
    let mut first = [0u8; 1];
    match tokio::time::timeout(Duration::from_secs(10), stream.peek(&mut first)).await {
        Ok(Ok(1)) => {}
        _ => return,
    }
    if first[0] == b'G' {
        http(hub, stream).await;
    } else {
        accept(hub, Transport::from_stream(stream)).await;
    }
}

struct Request {
    path: String,
    upgrade: bool,
    head_len: usize,
}

/// Peeks until the request head is complete so a websocket upgrade can still
/// read it from the socket.
async fn peek_head(stream: &TcpStream) -> Option<Request> {
    let mut buf = vec![0u8; MAX_HEAD];
    let deadline = tokio::time::Instant::now() + Duration::from_secs(10);
    let mut seen = 0;
    loop {
        let n = tokio::time::timeout_at(deadline, stream.peek(&mut buf)).await.ok()?.ok()?;
        if let Some(end) = buf[..n].windows(4).position(|w| w == b"\r\n\r\n") {
            return parse_head(&buf[..end + 4]);
        }
        if n == buf.len() || (n == seen && n == 0) {
            return None;
        }
        if n == seen {
            tokio::time::sleep(Duration::from_millis(5)).await;
            if tokio::time::Instant::now() >= deadline {
                return None;
            }
        }
        seen = n;
    }
}

fn parse_head(head: &[u8]) -> Option<Request> {
    let text = std::str::from_utf8(head).ok()?;
    let mut lines = text.split("\r\n");
    let mut parts = lines.next()?.split_whitespace();
    if parts.next()? != "GET" {
        return None;
    }
    let target = parts.next()?;
    let path = target.split(['?', '#']).next().unwrap_or("/").to_string();
    let upgrade = lines.any(|l| {
        l.split_once(':').is_some_and(|(k, v)| {
            k.trim().eq_ignore_ascii_case("upgrade") && v.trim().eq_ignore_ascii_case("websocket")
        })
    });
    Some(Request { path, upgrade, head_len: head.len() })
}

async fn http(hub: Hub, mut stream: TcpStream) {
    let Some(req) = peek_head(&stream).await else {
        let _ = respond(&mut stream, 400, "text/plain", b"bad request").await;
        return;
    };
    if req.path == "/ws" && req.upgrade {
        match tokio_tungstenite::accept_async(stream).await {
            Ok(ws) => accept(hub, Transport::from_websocket(ws)).await,
            Err(e) => tracing::debug!("websocket upgrade failed: {e}"),
        }
        return;
    }
    let mut head = vec![0u8; req.head_len];
    if stream.read_exact(&mut head).await.is_err() {
        return;
    }
    let cfg = hub.config();
    if !cfg.ui {
        let _ = respond(&mut stream, 404, "text/plain", b"not found").await;
        return;
    }
    let (status, ctype, body) = match ui_file(cfg.ui_dir.as_deref(), &req.path).await {
        Some((ctype, body)) => (200, ctype, body),
        None => (404, "text/plain", b"not found".to_vec()),
    };
    let _ = respond(&mut stream, status, ctype, &body).await;
}

async fn ui_file(dir: Option<&Path>, path: &str) -> Option<(&'static str, Vec<u8>)> {
    let rel = path.trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let Some(dir) = dir else {
        return (rel == "index.html").then(|| ("text/html; charset=utf-8", FALLBACK_PAGE.as_bytes().to_vec()));
    };
    let rel = PathBuf::from(rel);
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return None;
    }
    let body = tokio::fs::read(dir.join(&rel)).await.ok()?;
    let ctype = match rel.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "html" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript",
        "css" => "text/css",
        "json" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "wasm" => "application/wasm",
        _ => "application/octet-stream",
    };
    Some((ctype, body))
}

async fn respond(stream: &mut TcpStream, status: u16, ctype: &str, body: &[u8]) -> std::io::Result<()> {
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        _ => "Not Found",
    };
    let head = format!(
        "HTTP/1.1 {status} {reason}\r\ncontent-type: {ctype}\r\ncontent-length: {}\r\nconnection: close\r\n\r\n",
        body.len()
    );
    stream.write_all(head.as_bytes()).await?;
    stream.write_all(body).await?;
    stream.shutdown().await
}

async fn accept(hub: Hub, t: Transport) {
    let inner = hub.inner.clone();
    let token = inner.cfg.token.clone();
    let sup = inner.supervisor.clone();
    let check = move |presented: &str| token.as_deref().is_none_or(|t| t == presented) || sup.is_pending_ticket(presented);
    let role = if inner.cfg.engine_mode { Role::Engine } else { Role::Hub };
    let (t, peer) = match accept_handshake(t, role, Some(&check), &inner.cfg.session).await {
        Ok(ok) => ok,
        Err(e) => {
            tracing::debug!("handshake failed: {e}");
            return;
        }
    };
    let ticket = peer.token.as_deref().and_then(|tok| inner.supervisor.claim_ticket(tok));
    let handler = match ticket {
        Some(ticket) => ConnHandler::launched(Arc::downgrade(&inner), ticket),
        None if peer.role == Role::Plugin => ConnHandler::external(Arc::downgrade(&inner)),
        None => ConnHandler::unscoped(Arc::downgrade(&inner)),
    };
    let listener = matches!(handler.kind, Kind::Unscoped) && peer.role != Role::Plugin;
    let session = Session::spawn(t, peer.role, Arc::new(handler), inner.cfg.session.clone());
    hub.track(&session);
    if listener {
        inner.events.subscribe(session.clone());
    }
}

enum Kind {
    /// A native plugin started by the supervisor.
    Launched { workspace: String, plugin: String, ticket: Mutex<Option<Ticket>> },
    /// A plugin process nobody launched; it names its own workspace.
    External { registered: Mutex<Vec<(String, String, RegistrationId)>> },
    Unscoped,
}

pub(crate) struct ConnHandler {
    hub: Weak<HubInner>,
    kind: Kind,
}

impl ConnHandler {
    pub(crate) fn unscoped(hub: Weak<HubInner>) -> Self {
        ConnHandler { hub, kind: Kind::Unscoped }
    }

    fn launched(hub: Weak<HubInner>, ticket: Ticket) -> Self {
        ConnHandler {
            hub,
            kind: Kind::Launched {
                workspace: ticket.workspace.clone(),
                plugin: ticket.plugin.clone(),
                ticket: Mutex::new(Some(ticket)),
            },
        }
    }

    fn external(hub: Weak<HubInner>) -> Self {
        ConnHandler { hub, kind: Kind::External { registered: Mutex::new(Vec::new()) } }
    }

    fn hub(&self) -> Result<Hub, CallError> {
        self.hub.upgrade().map(|inner| Hub { inner }).ok_or(CallError::SessionClosed)
    }

    fn source_of(&self, plugin_id: &str) -> (String, String) {
        match &self.kind {
            Kind::Launched { workspace, plugin, .. } => (workspace.clone(), plugin.clone()),
            _ => split_qualified(plugin_id),
        }
    }
}

/// `ws/plugin`, or a bare name in the default workspace.
pub(crate) fn split_qualified(id: &str) -> (String, String) {
    match id.split_once('/') {
        Some((ws, p)) => (ws.to_string(), p.to_string()),
        None => (DEFAULT_WORKSPACE.to_string(), id.to_string()),
    }
}

#[async_trait]
impl SessionHandler for ConnHandler {
    async fn on_call(&self, session: &Session, target: &str, method: &str, args: Vec<HostValue>) -> Result<HostValue, CallError> {
        let hub = self.hub()?;
        if let Kind::Launched { workspace, .. } = &self.kind {
            return hub.inner.router.call(workspace, target, method, args).await;
        }
        if target == HUB_INTERFACE || (target == ENGINE_INTERFACE && hub.inner.cfg.engine_mode) {
            let args = args.into_iter().map(HostValue::into_data).collect::<Result<Vec<_>, _>>()?;
            let v = if target == HUB_INTERFACE {
                system::hub_call(&hub, method, args).await?
            } else {
                system::engine_call(&hub, session, method, args).await?
            };
            return Ok(HostValue::from_data(v)?);
        }
        let (ws, plugin) = split_qualified(target);
        hub.inner.router.call(&ws, &plugin, method, args).await
    }

    fn on_message(&self, session: &Session, msg: RpcMessage) {
        let Ok(hub) = self.hub() else { return };
        match msg {
            RpcMessage::Iface { plugin_id, methods } => match &self.kind {
                Kind::Launched { ticket, .. } => {
                    if let Some(t) = ticket.lock().unwrap().take() {
                        t.ready(session.clone(), methods);
                    }
                }
                Kind::External { registered } => {
                    let (ws, name) = split_qualified(&plugin_id);
                    let endpoint = Arc::new(SessionEndpoint::new(session.clone(), plugin_id.clone()));
                    match hub.inner.router.register_interface(&ws, &name, methods, endpoint) {
                        Ok(id) => registered.lock().unwrap().push((ws, name, id)),
                        Err(e) => {
                            tracing::warn!("external plugin {plugin_id:?} rejected: {e}");
                            let _ = session.send(RpcMessage::err(0, "DuplicatePluginId", e.to_string()));
                        }
                    }
                }
                Kind::Unscoped => {}
            },
            RpcMessage::Log { plugin_id, level, text } => {
                let (ws, plugin) = self.source_of(&plugin_id);
                if matches!(self.kind, Kind::Launched { .. }) {
                    hub.inner.supervisor.record_log(&ws, &plugin, format!("[{level}] {text}"));
                }
                hub.inner.events.log(&ws, &plugin, &level, &text);
            }
            RpcMessage::Progress { plugin_id, fraction } => {
                let (ws, plugin) = self.source_of(&plugin_id);
                hub.inner.events.progress(&ws, &plugin, fraction);
            }
            _ => {}
        }
    }

    fn on_close(&self, _session: &Session) {
        let Kind::External { registered } = &self.kind else { return };
        let Some(inner) = self.hub.upgrade() else { return };
        for (ws, name, id) in registered.lock().unwrap().drain(..) {
            inner.router.unregister(&ws, &name, Some(id));
        }
    }
}
