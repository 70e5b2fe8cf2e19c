//! A session is one authenticated peer connection.
//!
//! Outgoing frames funnel through a single writer task, so frames never
//! interleave. Incoming calls run on their own tasks; results and errors
//! complete entries in the pending map, which are removed exactly once
//! (on result, on err, on timeout or on close).

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::JoinHandle;

use super::codec::encode_frame;
use super::error::CallError;
use super::marshal::{marshal_value, unmarshal_value, HostFunction, HostValue};
use super::message::{AuthStep, Role, RpcMessage, PROTOCOL_VERSION};
use super::transport::{Transport, TransportError};
use super::value::{CallbackRef, WireValue};

/// Call target reserved for invoking exported callbacks; the method is the
/// decimal callback id.
pub const CALLBACK_TARGET: &str = "__cb__";

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub handshake_timeout: Duration,
    pub call_timeout: Duration,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            handshake_timeout: Duration::from_secs(10),
            call_timeout: Duration::from_secs(300),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("protocol version mismatch: local {local:?}, peer {peer:?}")]
    VersionMismatch { local: String, peer: String },
    #[error("authentication failed")]
    AuthFailed,
    #[error("handshake timed out")]
    HandshakeTimeout,
    #[error("handshake protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// What the acceptor learned about its peer during the handshake.
#[derive(Debug, Clone)]
pub struct PeerInfo {
    pub role: Role,
    pub token: Option<String>,
}

/// Receives everything a session's peer sends besides results.
#[async_trait]
pub trait SessionHandler: Send + Sync + 'static {
    async fn on_call(
        &self,
        _session: &Session,
        target: &str,
        _method: &str,
        _args: Vec<HostValue>,
    ) -> Result<HostValue, CallError> {
        Err(CallError::NoSuchPlugin(target.to_string()))
    }

    /// `iface`, `log` and `progress` messages.
    fn on_message(&self, _session: &Session, _msg: RpcMessage) {}

    fn on_close(&self, _session: &Session) {}
}

/// Handler for peers that only place calls.
pub struct NoHandler;

impl SessionHandler for NoHandler {}

async fn recv_handshake(t: &mut Transport) -> Result<RpcMessage, SessionError> {
    match t.source.recv().await? {
        Some(m) => Ok(m),
        None => Err(SessionError::Protocol("stream closed during handshake".into())),
    }
}

/// Connector side of the handshake: hello exchange, then auth when the
/// acceptor asks for it. Without a token the empty one is presented.
pub async fn connect_handshake(
    mut t: Transport,
    role: Role,
    token: Option<&str>,
    cfg: &SessionConfig,
) -> Result<(Transport, Role), SessionError> {
    let steps = async {
        send_raw(&mut t, RpcMessage::hello(role)).await?;
        let (peer_role, auth_required) = match recv_handshake(&mut t).await? {
            RpcMessage::Hello { protocol_version, role, auth_required } => {
                if protocol_version != PROTOCOL_VERSION {
                    return Err(SessionError::VersionMismatch {
                        local: PROTOCOL_VERSION.into(),
                        peer: protocol_version,
                    });
                }
                (role, auth_required)
            }
            RpcMessage::Err { code, message, .. } if code == "VersionMismatch" => {
                return Err(SessionError::VersionMismatch { local: PROTOCOL_VERSION.into(), peer: message })
            }
            other => return Err(SessionError::Protocol(format!("expected hello, got {}", other.kind()))),
        };
        if auth_required {
            let token = token.unwrap_or_default();
            send_raw(&mut t, RpcMessage::Auth(AuthStep::Token(token.to_string()))).await?;
            match t.source.recv().await {
                Ok(Some(RpcMessage::Auth(AuthStep::Accepted))) => {}
                Ok(Some(RpcMessage::Err { .. })) | Ok(None) | Err(_) => return Err(SessionError::AuthFailed),
                Ok(Some(other)) => {
                    return Err(SessionError::Protocol(format!("expected auth, got {}", other.kind())))
                }
            }
        }
        Ok(peer_role)
    };
    let outcome = tokio::time::timeout(cfg.handshake_timeout, steps).await;
    match outcome {
        Ok(Ok(peer_role)) => Ok((t, peer_role)),
        Ok(Err(e)) => {
            t.sink.close().await;
            Err(e)
        }
        Err(_) => {
            t.sink.close().await;
            Err(SessionError::HandshakeTimeout)
        }
    }
}

/// Acceptor side. With a `check`, the connector must present a token the
/// check accepts; otherwise `err(AuthFailed)` is sent and the stream closed.
pub async fn accept_handshake(
    mut t: Transport,
    role: Role,
    check: Option<&(dyn Fn(&str) -> bool + Send + Sync)>,
    cfg: &SessionConfig,
) -> Result<(Transport, PeerInfo), SessionError> {
    let steps = async {
        let peer_role = match recv_handshake(&mut t).await? {
            RpcMessage::Hello { protocol_version, role, .. } => {
                if protocol_version != PROTOCOL_VERSION {
                    let _ = send_raw(&mut t, RpcMessage::err(0, "VersionMismatch", PROTOCOL_VERSION)).await;
                    return Err(SessionError::VersionMismatch {
                        local: PROTOCOL_VERSION.into(),
                        peer: protocol_version,
                    });
                }
                role
            }
            other => return Err(SessionError::Protocol(format!("expected hello, got {}", other.kind()))),
        };
        let mut hello = RpcMessage::hello(role);
        if let RpcMessage::Hello { auth_required, .. } = &mut hello {
            *auth_required = check.is_some();
        }
        send_raw(&mut t, hello).await?;
        let mut presented = None;
        if let Some(check) = check {
            match recv_handshake(&mut t).await? {
                RpcMessage::Auth(AuthStep::Token(token)) if check(&token) => {
                    presented = Some(token);
                }
                _ => {
                    let _ = send_raw(&mut t, RpcMessage::err(0, "AuthFailed", "bad token")).await;
                    return Err(SessionError::AuthFailed);
                }
            }
            send_raw(&mut t, RpcMessage::Auth(AuthStep::Accepted)).await?;
        }
        Ok(PeerInfo { role: peer_role, token: presented })
    };
    let outcome = tokio::time::timeout(cfg.handshake_timeout, steps).await;
    match outcome {
        Ok(Ok(info)) => Ok((t, info)),
        Ok(Err(e)) => {
            t.sink.close().await;
            Err(e)
        }
        Err(_) => {
            t.sink.close().await;
            Err(SessionError::HandshakeTimeout)
        }
    }
}

async fn send_raw(t: &mut Transport, msg: RpcMessage) -> Result<(), SessionError> {
    let frame = encode_frame(&msg).map_err(TransportError::from)?;
    t.sink.send_frame(frame).await?;
    Ok(())
}

enum Outgoing {
    Frame(Vec<u8>),
    Close,
}

type Pending = oneshot::Sender<Result<WireValue, CallError>>;

struct Inner {
    peer_role: Role,
    cfg: SessionConfig,
    out: mpsc::UnboundedSender<Outgoing>,
    next_id: AtomicU64,
    pending: Mutex<HashMap<u64, Pending>>,
    next_cb: AtomicU64,
    callbacks: Mutex<HashMap<u64, HostFunction>>,
    closed: AtomicBool,
    closed_tx: watch::Sender<bool>,
    reader: Mutex<Option<JoinHandle<()>>>,
    handler: Arc<dyn SessionHandler>,
}

/// Cheap-to-clone handle to a live session.
#[derive(Clone)]
pub struct Session {
    inner: Arc<Inner>,
}

impl Session {
    /// Runs the connector handshake and starts the session.
    pub async fn open(
        t: Transport,
        role: Role,
        token: Option<&str>,
        handler: Arc<dyn SessionHandler>,
        cfg: SessionConfig,
    ) -> Result<Session, SessionError> {
        let (t, peer_role) = connect_handshake(t, role, token, &cfg).await?;
        Ok(Session::spawn(t, peer_role, handler, cfg))
    }

    /// Starts reader and writer tasks on a transport whose handshake is done.
    pub fn spawn(t: Transport, peer_role: Role, handler: Arc<dyn SessionHandler>, cfg: SessionConfig) -> Session {
        let Transport { mut sink, mut source } = t;
        let (out, mut out_rx) = mpsc::unbounded_channel::<Outgoing>();
        let (closed_tx, _) = watch::channel(false);
        let session = Session {
            inner: Arc::new(Inner {
                peer_role,
                cfg,
                out,
                next_id: AtomicU64::new(1),
                pending: Mutex::new(HashMap::new()),
                next_cb: AtomicU64::new(1),
                callbacks: Mutex::new(HashMap::new()),
                closed: AtomicBool::new(false),
                closed_tx,
                reader: Mutex::new(None),
                handler,
            }),
        };

        let writer_session = session.clone();
        tokio::spawn(async move {
            while let Some(item) = out_rx.recv().await {
                match item {
                    Outgoing::Frame(frame) => {
                        if let Err(e) = sink.send_frame(frame).await {
                            tracing::debug!("session write failed: {e}");
                            writer_session.shutdown();
                            break;
                        }
                    }
                    Outgoing::Close => break,
                }
            }
            sink.close().await;
        });

        let reader_session = session.clone();
        let reader = tokio::spawn(async move {
            loop {
                match source.recv().await {
                    Ok(Some(msg)) => reader_session.dispatch(msg),
                    Ok(None) => break,
                    Err(e) => {
                        tracing::debug!("session read failed: {e}");
                        break;
                    }
                }
            }
            reader_session.shutdown();
        });
        *session.inner.reader.lock().unwrap() = Some(reader);
        session
    }

    pub fn peer_role(&self) -> Role {
        self.inner.peer_role
    }

    pub fn config(&self) -> &SessionConfig {
        &self.inner.cfg
    }

    pub fn is_closed(&self) -> bool {
        self.inner.closed.load(Ordering::SeqCst)
    }

    /// Number of calls still awaiting a result.
    pub fn pending_len(&self) -> usize {
        self.inner.pending.lock().unwrap().len()
    }

    /// Number of callbacks this side currently exports.
    pub fn exported_callbacks(&self) -> usize {
        self.inner.callbacks.lock().unwrap().len()
    }

    pub fn same_as(&self, other: &Session) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
    }

    /// Resolves once the session has closed.
    pub async fn closed(&self) {
        let mut rx = self.inner.closed_tx.subscribe();
        let _ = rx.wait_for(|c| *c).await;
    }

    pub fn send(&self, msg: RpcMessage) -> Result<(), CallError> {
        let frame = encode_frame(&msg).map_err(|e| CallError::remote("EncodeError", e))?;
        if self.is_closed() {
            return Err(CallError::SessionClosed);
        }
        self.inner
            .out
            .send(Outgoing::Frame(frame))
            .map_err(|_| CallError::SessionClosed)
    }

    /// Calls `target.method` on the peer with plain wire arguments.
    pub async fn call_wire(&self, target: &str, method: &str, args: Vec<WireValue>) -> Result<WireValue, CallError> {
        let id = self.inner.next_id.fetch_add(1, Ordering::SeqCst);
        let (tx, rx) = oneshot::channel();
        {
            let mut pending = self.inner.pending.lock().unwrap();
            if self.is_closed() {
                return Err(CallError::SessionClosed);
            }
            pending.insert(id, tx);
        }
        let sent = self.send(RpcMessage::Call {
            id,
            target: target.to_string(),
            method: method.to_string(),
            args,
        });
        if let Err(e) = sent {
            self.inner.pending.lock().unwrap().remove(&id);
            return Err(e);
        }
        match tokio::time::timeout(self.inner.cfg.call_timeout, rx).await {
            Ok(Ok(result)) => result,
            Ok(Err(_)) => Err(CallError::SessionClosed),
            Err(_) => {
                self.inner.pending.lock().unwrap().remove(&id);
                Err(CallError::Timeout)
            }
        }
    }

    /// Calls with host values, marshaling functions as callbacks.
    pub async fn call(&self, target: &str, method: &str, args: Vec<HostValue>) -> Result<HostValue, CallError> {
        let args = args
            .iter()
            .map(|a| marshal_value(a, self))
            .collect::<Result<Vec<_>, _>>()?;
        let value = self.call_wire(target, method, args).await?;
        Ok(unmarshal_value(value, self))
    }

    pub(crate) fn register_callback(&self, f: HostFunction) -> CallbackRef {
        let cb_id = self.inner.next_cb.fetch_add(1, Ordering::SeqCst);
        let persistent = f.is_persistent();
        self.inner.callbacks.lock().unwrap().insert(cb_id, f);
        CallbackRef { cb_id, persistent }
    }

    /// Closes the session: pending calls fail with `SessionClosed`, exported
    /// callbacks are dropped. Idempotent.
    pub fn close(&self) {
        self.shutdown();
    }

    fn shutdown(&self) {
        if self.inner.closed.swap(true, Ordering::SeqCst) {
            return;
        }
        let drained: Vec<Pending> = {
            let mut pending = self.inner.pending.lock().unwrap();
            pending.drain().map(|(_, tx)| tx).collect()
        };
        for tx in drained {
            let _ = tx.send(Err(CallError::SessionClosed));
        }
        self.inner.callbacks.lock().unwrap().clear();
        let _ = self.inner.out.send(Outgoing::Close);
        if let Some(reader) = self.inner.reader.lock().unwrap().take() {
            reader.abort();
        }
        self.inner.closed_tx.send_replace(true);
        self.inner.handler.on_close(self);
    }

    fn complete(&self, id: u64, result: Result<WireValue, CallError>) {
        let tx = self.inner.pending.lock().unwrap().remove(&id);
        match tx {
            Some(tx) => {
                let _ = tx.send(result);
            }
            None => tracing::debug!("result for unknown call id {id}"),
        }
    }

    fn dispatch(&self, msg: RpcMessage) {
        match msg {
            RpcMessage::Result { id, value } => self.complete(id, Ok(value)),
            RpcMessage::Err { id, code, message } => self.complete(id, Err(CallError::from_wire(&code, &message))),
            RpcMessage::Call { id, target, method, args } => {
                let session = self.clone();
                tokio::spawn(async move {
                    let reply = session.serve_call(&target, &method, args).await;
                    let reply = reply.and_then(|v| Ok(marshal_value(&v, &session)?));
                    let msg = match reply {
                        Ok(value) => RpcMessage::Result { id, value },
                        Err(e) => RpcMessage::err(id, e.code(), e.wire_message()),
                    };
                    if let Err(CallError::Remote { code, message }) = session.send(msg) {
                        let _ = session.send(RpcMessage::err(id, code, message));
                    }
                });
            }
            RpcMessage::ReleaseCb { cb_id } => {
                self.inner.callbacks.lock().unwrap().remove(&cb_id);
            }
            RpcMessage::Ping => {
                let _ = self.send(RpcMessage::Pong);
            }
            RpcMessage::Pong | RpcMessage::Hello { .. } | RpcMessage::Auth(_) => {}
            other => self.inner.handler.on_message(self, other),
        }
    }

    async fn serve_call(&self, target: &str, method: &str, args: Vec<WireValue>) -> Result<HostValue, CallError> {
        let args: Vec<HostValue> = args.into_iter().map(|a| unmarshal_value(a, self)).collect();
        if target == CALLBACK_TARGET {
            let f = method
                .parse::<u64>()
                .ok()
                .and_then(|id| self.inner.callbacks.lock().unwrap().get(&id).cloned())
                .ok_or_else(|| CallError::remote("NoSuchCallback", method))?;
            return f.call(args).await;
        }
        let handler = self.inner.handler.clone();
        handler.on_call(self, target, method, args).await
    }
}
