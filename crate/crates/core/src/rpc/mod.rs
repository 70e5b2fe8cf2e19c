//! Correlated, asynchronous, bidirectional message protocol.

pub mod codec;
pub mod error;
pub mod marshal;
pub mod message;
pub mod router;
pub mod session;
pub mod transport;
pub mod value;

pub use codec::{decode_exact, decode_frame, encode_frame, CodecError, Decoded, MAX_FRAME_LEN};
pub use error::CallError;
pub use marshal::{marshal_value, unmarshal_value, HostFunction, HostValue, MarshalError, RemoteCallback};
pub use message::{AuthStep, Role, RpcMessage, PROTOCOL_VERSION};
pub use router::{Endpoint, PluginProxy, RegistrationId, Router, RouterError, SessionEndpoint, Upstream};
pub use session::{
    accept_handshake, connect_handshake, NoHandler, PeerInfo, Session, SessionConfig, SessionError, SessionHandler,
    CALLBACK_TARGET,
};
pub use transport::{FrameSink, FrameSource, Transport, TransportError};
pub use value::{CallbackRef, DType, NdArray, WireValue};
