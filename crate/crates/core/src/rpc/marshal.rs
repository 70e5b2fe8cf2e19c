//! Host values and their mapping onto the wire value model.
//!
//! Host functions cross a session as [`CallbackRef`]s registered in that
//! session's callback table; incoming callback refs become
//! [`RemoteCallback`] proxies that route invocations back to their origin.

use std::collections::BTreeMap;
use std::fmt;
use std::future::Future;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use futures::future::BoxFuture;
use futures::FutureExt;

use super::error::CallError;
use super::message::RpcMessage;
use super::session::{Session, CALLBACK_TARGET};
use super::value::{CallbackRef, NdArray, WireValue};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MarshalError {
    #[error("unsupported type: {0}")]
    UnsupportedType(String),
}

impl From<MarshalError> for CallError {
    fn from(e: MarshalError) -> Self {
        CallError::remote("UnsupportedType", e)
    }
}

type DynFn = dyn Fn(Vec<HostValue>) -> BoxFuture<'static, Result<HostValue, CallError>> + Send + Sync;

/// A function exported from this side of a session.
#[derive(Clone)]
pub struct HostFunction {
    f: Arc<DynFn>,
    persistent: bool,
}

impl HostFunction {
    pub fn new<F, Fut>(f: F) -> Self
    where
        F: Fn(Vec<HostValue>) -> Fut + Send + Sync + 'static,
        Fut: Future<Output = Result<HostValue, CallError>> + Send + 'static,
    {
        HostFunction { f: Arc::new(move |args| f(args).boxed()), persistent: false }
    }

    /// Persistent callbacks survive their first invocation.
    pub fn persistent(mut self) -> Self {
        self.persistent = true;
        self
    }

    pub fn is_persistent(&self) -> bool {
        self.persistent
    }

    pub async fn call(&self, args: Vec<HostValue>) -> Result<HostValue, CallError> {
        (self.f)(args).await
    }
}

/// Proxy for a function owned by the peer of `session`.
#[derive(Clone)]
pub struct RemoteCallback {
    session: Session,
    cb: CallbackRef,
    released: Arc<AtomicBool>,
}

impl RemoteCallback {
    pub fn cb_ref(&self) -> CallbackRef {
        self.cb
    }

    pub fn is_released(&self) -> bool {
        self.released.load(Ordering::SeqCst)
    }

    /// Invokes the origin function. A non-persistent callback is released
    /// (a `release_cb` is sent) once its first result has been delivered.
    pub async fn call(&self, args: Vec<HostValue>) -> Result<HostValue, CallError> {
        if self.is_released() {
            return Err(CallError::remote("CallbackReleased", format!("callback {}", self.cb.cb_id)));
        }
        let result = self.session.call(CALLBACK_TARGET, &self.cb.cb_id.to_string(), args).await;
        if !self.cb.persistent && result.is_ok() {
            self.release();
        }
        result
    }

    pub fn release(&self) {
        if !self.released.swap(true, Ordering::SeqCst) {
            let _ = self.session.send(RpcMessage::ReleaseCb { cb_id: self.cb.cb_id });
        }
    }
}

/// Values as seen by host code: the wire model with live functions in
/// place of callback refs.
#[derive(Clone)]
pub enum HostValue {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    List(Vec<HostValue>),
    Map(BTreeMap<String, HostValue>),
    NdArray(NdArray),
    Function(HostFunction),
    Remote(RemoteCallback),
}

impl HostValue {
    /// Converts callback-free wire data. Callback refs need a session and
    /// are refused here.
    pub fn from_data(w: WireValue) -> Result<HostValue, MarshalError> {
        Ok(match w {
            WireValue::Null => HostValue::Null,
            WireValue::Bool(b) => HostValue::Bool(b),
            WireValue::Int(i) => HostValue::Int(i),
            WireValue::Float(f) => HostValue::Float(f),
            WireValue::Str(s) => HostValue::Str(s),
            WireValue::List(l) => HostValue::List(l.into_iter().map(HostValue::from_data).collect::<Result<_, _>>()?),
            WireValue::Map(m) => HostValue::Map(
                m.into_iter()
                    .map(|(k, v)| Ok((k, HostValue::from_data(v)?)))
                    .collect::<Result<_, MarshalError>>()?,
            ),
            WireValue::NdArray(a) => HostValue::NdArray(a),
            WireValue::Callback(cb) => {
                return Err(MarshalError::UnsupportedType(format!(
                    "callback {} outside a session",
                    cb.cb_id
                )))
            }
        })
    }

    /// Converts to plain wire data; functions are refused.
    pub fn into_data(self) -> Result<WireValue, MarshalError> {
        Ok(match self {
            HostValue::Null => WireValue::Null,
            HostValue::Bool(b) => WireValue::Bool(b),
            HostValue::Int(i) => WireValue::Int(i),
            HostValue::Float(f) => WireValue::Float(f),
            HostValue::Str(s) => WireValue::Str(s),
            HostValue::List(l) => WireValue::List(l.into_iter().map(HostValue::into_data).collect::<Result<_, _>>()?),
            HostValue::Map(m) => WireValue::Map(
                m.into_iter()
                    .map(|(k, v)| Ok((k, v.into_data()?)))
                    .collect::<Result<_, MarshalError>>()?,
            ),
            HostValue::NdArray(a) => WireValue::NdArray(a),
            HostValue::Function(_) | HostValue::Remote(_) => {
                return Err(MarshalError::UnsupportedType("function values are not plain data".into()))
            }
        })
    }

    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            HostValue::Int(i) => Some(i as f64),
            HostValue::Float(f) => Some(f),
            _ => None,
        }
    }

    /// Calls a function value, local or remote.
    pub async fn invoke(&self, args: Vec<HostValue>) -> Result<HostValue, CallError> {
        match self {
            HostValue::Function(f) => f.call(args).await,
            HostValue::Remote(r) => r.call(args).await,
            _ => Err(CallError::remote("TypeError", "value is not callable")),
        }
    }
}

impl fmt::Debug for HostValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HostValue::Null => f.write_str("Null"),
            HostValue::Bool(b) => write!(f, "Bool({b})"),
            HostValue::Int(i) => write!(f, "Int({i})"),
            HostValue::Float(x) => write!(f, "Float({x})"),
            HostValue::Str(s) => write!(f, "Str({s:?})"),
            HostValue::List(l) => f.debug_tuple("List").field(l).finish(),
            HostValue::Map(m) => f.debug_tuple("Map").field(m).finish(),
            HostValue::NdArray(a) => f.debug_tuple("NdArray").field(a).finish(),
            HostValue::Function(func) => write!(f, "Function(persistent={})", func.persistent),
            HostValue::Remote(r) => write!(f, "Remote({:?})", r.cb),
        }
    }
}

/// Structural equality on data; function values never compare equal.
impl PartialEq for HostValue {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (HostValue::Null, HostValue::Null) => true,
            (HostValue::Bool(a), HostValue::Bool(b)) => a == b,
            (HostValue::Int(a), HostValue::Int(b)) => a == b,
            (HostValue::Float(a), HostValue::Float(b)) => a == b,
            (HostValue::Str(a), HostValue::Str(b)) => a == b,
            (HostValue::List(a), HostValue::List(b)) => a == b,
            (HostValue::Map(a), HostValue::Map(b)) => a == b,
            (HostValue::NdArray(a), HostValue::NdArray(b)) => a == b,
            _ => false,
        }
    }
}

impl From<f64> for HostValue {
    fn from(v: f64) -> Self {
        HostValue::Float(v)
    }
}

impl From<i64> for HostValue {
    fn from(v: i64) -> Self {
        HostValue::Int(v)
    }
}

impl From<bool> for HostValue {
    fn from(v: bool) -> Self {
        HostValue::Bool(v)
    }
}

impl From<&str> for HostValue {
    fn from(v: &str) -> Self {
        HostValue::Str(v.to_string())
    }
}

impl From<String> for HostValue {
    fn from(v: String) -> Self {
        HostValue::Str(v)
    }
}

impl From<NdArray> for HostValue {
    fn from(v: NdArray) -> Self {
        HostValue::NdArray(v)
    }
}

impl From<HostFunction> for HostValue {
    fn from(v: HostFunction) -> Self {
        HostValue::Function(v)
    }
}

/// Maps a host value onto the wire for transmission on `session`.
/// Functions are registered in the session's callback table; proxies of
/// callbacks owned by other peers are re-exported as forwarders.
pub fn marshal_value(v: &HostValue, session: &Session) -> Result<WireValue, MarshalError> {
    Ok(match v {
        HostValue::Null => WireValue::Null,
        HostValue::Bool(b) => WireValue::Bool(*b),
        HostValue::Int(i) => WireValue::Int(*i),
        HostValue::Float(f) => WireValue::Float(*f),
        HostValue::Str(s) => WireValue::Str(s.clone()),
        HostValue::List(l) => WireValue::List(l.iter().map(|i| marshal_value(i, session)).collect::<Result<_, _>>()?),
        HostValue::Map(m) => WireValue::Map(
            m.iter()
                .map(|(k, v)| Ok((k.clone(), marshal_value(v, session)?)))
                .collect::<Result<_, MarshalError>>()?,
        ),
        HostValue::NdArray(a) => WireValue::NdArray(a.clone()),
        HostValue::Function(f) => WireValue::Callback(session.register_callback(f.clone())),
        HostValue::Remote(r) => {
            if r.is_released() || r.session.is_closed() {
                return Err(MarshalError::UnsupportedType(format!(
                    "callback {} is no longer reachable",
                    r.cb.cb_id
                )));
            }
            let origin = r.clone();
            let mut forwarder = HostFunction::new(move |args| {
                let origin = origin.clone();
                async move { origin.call(args).await }
            });
            forwarder.persistent = r.cb.persistent;
            WireValue::Callback(session.register_callback(forwarder))
        }
    })
}

/// Maps wire data received on `session` to host values; callback refs
/// become proxies bound to that session.
pub fn unmarshal_value(w: WireValue, session: &Session) -> HostValue {
    match w {
        WireValue::Callback(cb) => HostValue::Remote(RemoteCallback {
            session: session.clone(),
            cb,
            released: Arc::new(AtomicBool::new(false)),
        }),
        WireValue::List(l) => HostValue::List(l.into_iter().map(|i| unmarshal_value(i, session)).collect()),
        WireValue::Map(m) => HostValue::Map(m.into_iter().map(|(k, v)| (k, unmarshal_value(v, session))).collect()),
        other => HostValue::from_data(other).expect("callback-free value"),
    }
}
