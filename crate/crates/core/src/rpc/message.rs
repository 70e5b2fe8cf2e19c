//! Protocol messages exchanged on a session.

use std::fmt;
use std::str::FromStr;

use super::value::WireValue;

pub const PROTOCOL_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Hub,
    Plugin,
    Engine,
    Client,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Hub => "hub",
            Role::Plugin => "plugin",
            Role::Engine => "engine",
            Role::Client => "client",
        }
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hub" => Ok(Role::Hub),
            "plugin" => Ok(Role::Plugin),
            "engine" => Ok(Role::Engine),
            "client" => Ok(Role::Client),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Second handshake step: the connector presents a token, the acceptor
/// acknowledges it (`{"ok":true,"t":"auth"}`) or answers with `err` and
/// closes the stream.
#[derive(Debug, Clone, PartialEq)]
pub enum AuthStep {
    Token(String),
    Accepted,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RpcMessage {
    Hello {
        protocol_version: String,
        role: Role,
        /// Set by the acceptor when the connector must send `auth`.
        auth_required: bool,
    },
    Auth(AuthStep),
    Iface {
        plugin_id: String,
        methods: Vec<String>,
    },
    Call {
        id: u64,
        target: String,
        method: String,
        args: Vec<WireValue>,
    },
    Result {
        id: u64,
        value: WireValue,
    },
    Err {
        id: u64,
        code: String,
        message: String,
    },
    ReleaseCb {
        cb_id: u64,
    },
    Log {
        plugin_id: String,
        level: String,
        text: String,
    },
    Progress {
        plugin_id: String,
        fraction: f64,
    },
    Ping,
    Pong,
}

impl RpcMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            RpcMessage::Hello { .. } => "hello",
            RpcMessage::Auth(_) => "auth",
            RpcMessage::Iface { .. } => "iface",
            RpcMessage::Call { .. } => "call",
            RpcMessage::Result { .. } => "result",
            RpcMessage::Err { .. } => "err",
            RpcMessage::ReleaseCb { .. } => "release_cb",
            RpcMessage::Log { .. } => "log",
            RpcMessage::Progress { .. } => "progress",
            RpcMessage::Ping => "ping",
            RpcMessage::Pong => "pong",
        }
    }

    pub fn hello(role: Role) -> Self {
        RpcMessage::Hello {
            protocol_version: PROTOCOL_VERSION.to_string(),
            role,
            auth_required: false,
        }
    }

    pub fn err(id: u64, code: impl Into<String>, message: impl Into<String>) -> Self {
        RpcMessage::Err {
            id,
            code: code.into(),
            message: message.into(),
        }
    }

    /// Bit-level equality (see [`WireValue::bit_eq`]).
    pub fn bit_eq(&self, other: &RpcMessage) -> bool {
        match (self, other) {
            (
                RpcMessage::Call { id, target, method, args },
                RpcMessage::Call { id: i2, target: t2, method: m2, args: a2 },
            ) => {
                id == i2
                    && target == t2
                    && method == m2
                    && args.len() == a2.len()
                    && args.iter().zip(a2).all(|(a, b)| a.bit_eq(b))
            }
            (RpcMessage::Result { id, value }, RpcMessage::Result { id: i2, value: v2 }) => {
                id == i2 && value.bit_eq(v2)
            }
            (
                RpcMessage::Progress { plugin_id, fraction },
                RpcMessage::Progress { plugin_id: p2, fraction: f2 },
            ) => plugin_id == p2 && fraction.to_bits() == f2.to_bits(),
            _ => self == other,
        }
    }
}
