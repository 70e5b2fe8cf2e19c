use std::fmt;

/// Failure of a routed or session-level call. Carried over the wire as an
/// `err` message whose `code` is [`CallError::code`].
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CallError {
    #[error("no such plugin: {0:?}")]
    NoSuchPlugin(String),
    #[error("plugin {plugin:?} has no method {method:?}")]
    NoSuchMethod { plugin: String, method: String },
    #[error("{code}: {message}")]
    Remote { code: String, message: String },
    #[error("call timed out")]
    Timeout,
    #[error("session closed")]
    SessionClosed,
}

impl CallError {
    pub fn remote(code: impl Into<String>, message: impl fmt::Display) -> Self {
        CallError::Remote { code: code.into(), message: message.to_string() }
    }

    pub fn code(&self) -> &str {
        match self {
            CallError::NoSuchPlugin(_) => "NoSuchPlugin",
            CallError::NoSuchMethod { .. } => "NoSuchMethod",
            CallError::Remote { code, .. } => code,
            CallError::Timeout => "CallTimeout",
            CallError::SessionClosed => "SessionClosed",
        }
    }

    /// The `message` field used on the wire.
    pub fn wire_message(&self) -> String {
        match self {
            CallError::NoSuchPlugin(name) => name.clone(),
            CallError::NoSuchMethod { plugin, method } => format!("{plugin}.{method}"),
            CallError::Remote { message, .. } => message.clone(),
            CallError::Timeout | CallError::SessionClosed => self.to_string(),
        }
    }

    pub fn from_wire(code: &str, message: &str) -> CallError {
        match code {
            "NoSuchPlugin" => CallError::NoSuchPlugin(message.to_string()),
            "NoSuchMethod" => match message.rsplit_once('.') {
                Some((plugin, method)) => CallError::NoSuchMethod {
                    plugin: plugin.to_string(),
                    method: method.to_string(),
                },
                None => CallError::remote(code, message),
            },
            "CallTimeout" => CallError::Timeout,
            "SessionClosed" => CallError::SessionClosed,
            other => CallError::remote(other, message),
        }
    }
}
