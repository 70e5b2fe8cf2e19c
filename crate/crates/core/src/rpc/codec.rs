//! Frame codec.
//!
//! A frame is a 4-byte big-endian header length `H`, then `H` bytes of
//! canonical JSON header (sorted keys, no whitespace), then the binary
//! attachments in the order the header's `att` array declares them.
//!
//! Values inside the header use native JSON for null, bool, int, finite
//! float, string and list. Everything else is a single-key tagged object:
//!
//! | value          | header form                                      |
//! |----------------|--------------------------------------------------|
//! | map            | `{"map":{...}}`                                  |
//! | nd-array       | `{"nd":{"att":i,"dtype":"f64","shape":[..]}}`    |
//! | callback ref   | `{"cb":{"id":k,"persistent":false}}`             |
//! | non-finite f64 | `{"f64bits":"7ff8000000000000"}`                 |
//!
//! Attachments are numbered depth-first in message order.

use serde_json::{json, Map, Number, Value as Json};

use super::message::{AuthStep, Role, RpcMessage};
use super::value::{CallbackRef, DType, NdArray, WireValue};

/// Frames larger than this are refused in both directions.
pub const MAX_FRAME_LEN: usize = 64 * 1024 * 1024;

const LEN_PREFIX: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("frame of {0} bytes exceeds the 64 MiB cap")]
    OversizeFrame(usize),
    #[error("invalid message: {0}")]
    InvalidMessage(String),
    #[error("header length prefix {0} is out of range")]
    BadMagicLength(u32),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("attachments declare {declared} bytes but {available} are present")]
    AttachmentLengthMismatch { declared: u64, available: u64 },
    #[error("unknown message kind {0:?}")]
    UnknownKind(String),
}

/// Outcome of decoding from the front of a byte buffer.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoded {
    /// A whole frame was decoded; `consumed` bytes belong to it.
    Message(RpcMessage, usize),
    /// The buffer holds a prefix of a frame; at least `n` more bytes are needed.
    NeedMoreBytes(usize),
}

pub fn encode_frame(msg: &RpcMessage) -> Result<Vec<u8>, CodecError> {
    let mut attachments: Vec<Vec<u8>> = Vec::new();
    let mut header = encode_header(msg, &mut attachments)?;
    if !attachments.is_empty() {
        let lens: Vec<Json> = attachments.iter().map(|a| json!(a.len())).collect();
        header.insert("att".into(), Json::Array(lens));
    }
    let header = serde_json::to_vec(&Json::Object(header))
        .map_err(|e| CodecError::InvalidMessage(e.to_string()))?;
    let total = LEN_PREFIX + header.len() + attachments.iter().map(Vec::len).sum::<usize>();
    if total > MAX_FRAME_LEN {
        return Err(CodecError::OversizeFrame(total));
    }
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(&(header.len() as u32).to_be_bytes());
    out.extend_from_slice(&header);
    for a in &attachments {
        out.extend_from_slice(a);
    }
    Ok(out)
}

/// Streaming decode from the start of `buf`.
pub fn decode_frame(buf: &[u8]) -> Result<Decoded, CodecError> {
    if buf.len() < LEN_PREFIX {
        return Ok(Decoded::NeedMoreBytes(LEN_PREFIX - buf.len()));
    }
    let hlen = u32::from_be_bytes([buf[0], buf[1], buf[2], buf[3]]);
    if hlen == 0 || hlen as usize > MAX_FRAME_LEN - LEN_PREFIX {
        return Err(CodecError::BadMagicLength(hlen));
    }
    let header_end = LEN_PREFIX + hlen as usize;
    if buf.len() < header_end {
        return Ok(Decoded::NeedMoreBytes(header_end - buf.len()));
    }
    let header: Json = serde_json::from_slice(&buf[LEN_PREFIX..header_end])
        .map_err(|e| CodecError::MalformedHeader(e.to_string()))?;
    let Json::Object(header) = header else {
        return Err(CodecError::MalformedHeader("header is not an object".into()));
    };
    let att_lens = attachment_lengths(&header)?;
    let att_total: u64 = att_lens
        .iter()
        .try_fold(0u64, |acc, &l| acc.checked_add(l))
        .filter(|&t| t <= (MAX_FRAME_LEN - header_end) as u64)
        .ok_or(CodecError::OversizeFrame(MAX_FRAME_LEN + 1))?;
    let frame_end = header_end + att_total as usize;
    if buf.len() < frame_end {
        return Ok(Decoded::NeedMoreBytes(frame_end - buf.len()));
    }
    let mut attachments = Vec::with_capacity(att_lens.len());
    let mut at = header_end;
    for len in att_lens {
        attachments.push(&buf[at..at + len as usize]);
        at += len as usize;
    }
    let mut cursor = AttachmentCursor { parts: attachments, next: 0 };
    let msg = decode_header(&header, &mut cursor)?;
    if cursor.next != cursor.parts.len() {
        return Err(CodecError::MalformedHeader(format!(
            "{} attachments declared, {} referenced",
            cursor.parts.len(),
            cursor.next
        )));
    }
    Ok(Decoded::Message(msg, frame_end))
}

/// Decodes a buffer that must hold exactly one frame, as delivered by
/// message-oriented transports (one websocket binary message per frame).
pub fn decode_exact(frame: &[u8]) -> Result<RpcMessage, CodecError> {
    match decode_frame(frame)? {
        Decoded::Message(msg, consumed) if consumed == frame.len() => Ok(msg),
        Decoded::Message(_, consumed) => Err(CodecError::AttachmentLengthMismatch {
            declared: consumed as u64,
            available: frame.len() as u64,
        }),
        Decoded::NeedMoreBytes(n) => {
            if frame.len() < LEN_PREFIX {
                return Err(CodecError::MalformedHeader("truncated length prefix".into()));
            }
            let hlen = u32::from_be_bytes([frame[0], frame[1], frame[2], frame[3]]) as usize;
            if frame.len() < LEN_PREFIX + hlen {
                return Err(CodecError::MalformedHeader("truncated header".into()));
            }
            let available = (frame.len() - LEN_PREFIX - hlen) as u64;
            Err(CodecError::AttachmentLengthMismatch {
                declared: available + n as u64,
                available,
            })
        }
    }
}

fn attachment_lengths(header: &Map<String, Json>) -> Result<Vec<u64>, CodecError> {
    match header.get("att") {
        None => Ok(Vec::new()),
        Some(Json::Array(items)) => items
            .iter()
            .map(|v| {
                v.as_u64()
                    .ok_or_else(|| CodecError::MalformedHeader("attachment length".into()))
            })
            .collect(),
        Some(_) => Err(CodecError::MalformedHeader("att must be an array".into())),
    }
}

fn encode_header(
    msg: &RpcMessage,
    atts: &mut Vec<Vec<u8>>,
) -> Result<Map<String, Json>, CodecError> {
    let mut h = Map::new();
    h.insert("t".into(), json!(msg.kind()));
    match msg {
        RpcMessage::Hello { protocol_version, role, auth_required } => {
            h.insert("protocol_version".into(), json!(protocol_version));
            h.insert("role".into(), json!(role.as_str()));
            if *auth_required {
                h.insert("auth_required".into(), json!(true));
            }
        }
        RpcMessage::Auth(AuthStep::Token(token)) => {
            h.insert("token".into(), json!(token));
        }
        RpcMessage::Auth(AuthStep::Accepted) => {
            h.insert("ok".into(), json!(true));
        }
        RpcMessage::Iface { plugin_id, methods } => {
            h.insert("plugin_id".into(), json!(plugin_id));
            h.insert("methods".into(), json!(methods));
        }
        RpcMessage::Call { id, target, method, args } => {
            h.insert("id".into(), json!(id));
            h.insert("target".into(), json!(target));
            h.insert("method".into(), json!(method));
            let args = args.iter().map(|a| encode_value(a, atts)).collect();
            h.insert("args".into(), Json::Array(args));
        }
        RpcMessage::Result { id, value } => {
            h.insert("id".into(), json!(id));
            h.insert("value".into(), encode_value(value, atts));
        }
        RpcMessage::Err { id, code, message } => {
            h.insert("id".into(), json!(id));
            h.insert("code".into(), json!(code));
            h.insert("message".into(), json!(message));
        }
        RpcMessage::ReleaseCb { cb_id } => {
            h.insert("cb_id".into(), json!(cb_id));
        }
        RpcMessage::Log { plugin_id, level, text } => {
            h.insert("plugin_id".into(), json!(plugin_id));
            h.insert("level".into(), json!(level));
            h.insert("text".into(), json!(text));
        }
        RpcMessage::Progress { plugin_id, fraction } => {
            if !(0.0..=1.0).contains(fraction) {
                return Err(CodecError::InvalidMessage(format!(
                    "progress fraction {fraction} outside [0,1]"
                )));
            }
            h.insert("plugin_id".into(), json!(plugin_id));
            h.insert("fraction".into(), encode_float(*fraction));
        }
        RpcMessage::Ping | RpcMessage::Pong => {}
    }
    Ok(h)
}

fn encode_float(f: f64) -> Json {
    match Number::from_f64(f) {
        Some(n) => Json::Number(n),
        None => json!({ "f64bits": format!("{:016x}", f.to_bits()) }),
    }
}

fn encode_value(v: &WireValue, atts: &mut Vec<Vec<u8>>) -> Json {
    match v {
        WireValue::Null => Json::Null,
        WireValue::Bool(b) => json!(b),
        WireValue::Int(i) => json!(i),
        WireValue::Float(f) => encode_float(*f),
        WireValue::Str(s) => json!(s),
        WireValue::List(items) => Json::Array(items.iter().map(|i| encode_value(i, atts)).collect()),
        WireValue::Map(m) => {
            let inner: Map<String, Json> =
                m.iter().map(|(k, v)| (k.clone(), encode_value(v, atts))).collect();
            json!({ "map": inner })
        }
        WireValue::NdArray(a) => {
            let idx = atts.len();
            atts.push(a.data().to_vec());
            json!({ "nd": { "att": idx, "dtype": a.dtype().as_str(), "shape": a.shape() } })
        }
        WireValue::Callback(cb) => json!({ "cb": { "id": cb.cb_id, "persistent": cb.persistent } }),
    }
}

struct AttachmentCursor<'a> {
    parts: Vec<&'a [u8]>,
    next: usize,
}

fn malformed(what: impl Into<String>) -> CodecError {
    CodecError::MalformedHeader(what.into())
}

fn field<'a>(h: &'a Map<String, Json>, key: &str) -> Result<&'a Json, CodecError> {
    h.get(key).ok_or_else(|| malformed(format!("missing field {key:?}")))
}

fn str_field(h: &Map<String, Json>, key: &str) -> Result<String, CodecError> {
    field(h, key)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| malformed(format!("field {key:?} must be a string")))
}

fn u64_field(h: &Map<String, Json>, key: &str) -> Result<u64, CodecError> {
    field(h, key)?
        .as_u64()
        .ok_or_else(|| malformed(format!("field {key:?} must be an unsigned integer")))
}

fn decode_header(h: &Map<String, Json>, cur: &mut AttachmentCursor<'_>) -> Result<RpcMessage, CodecError> {
    let kind = str_field(h, "t")?;
    let msg = match kind.as_str() {
        "hello" => {
            let role = str_field(h, "role")?.parse::<Role>().map_err(malformed)?;
            let auth_required = match h.get("auth_required") {
                None => false,
                Some(v) => v.as_bool().ok_or_else(|| malformed("auth_required must be bool"))?,
            };
            RpcMessage::Hello {
                protocol_version: str_field(h, "protocol_version")?,
                role,
                auth_required,
            }
        }
        "auth" => match (h.get("token"), h.get("ok")) {
            (Some(Json::String(t)), None) => RpcMessage::Auth(AuthStep::Token(t.clone())),
            (None, Some(Json::Bool(true))) => RpcMessage::Auth(AuthStep::Accepted),
            _ => return Err(malformed("auth needs a token or ok:true")),
        },
        "iface" => {
            let methods = field(h, "methods")?
                .as_array()
                .ok_or_else(|| malformed("methods must be an array"))?
                .iter()
                .map(|m| m.as_str().map(str::to_string).ok_or_else(|| malformed("method name")))
                .collect::<Result<_, _>>()?;
            RpcMessage::Iface { plugin_id: str_field(h, "plugin_id")?, methods }
        }
        "call" => {
            let args = field(h, "args")?
                .as_array()
                .ok_or_else(|| malformed("args must be an array"))?
                .iter()
                .map(|a| decode_value(a, cur))
                .collect::<Result<_, _>>()?;
            RpcMessage::Call {
                id: u64_field(h, "id")?,
                target: str_field(h, "target")?,
                method: str_field(h, "method")?,
                args,
            }
        }
        "result" => RpcMessage::Result {
            id: u64_field(h, "id")?,
            value: decode_value(field(h, "value")?, cur)?,
        },
        "err" => RpcMessage::Err {
            id: u64_field(h, "id")?,
            code: str_field(h, "code")?,
            message: str_field(h, "message")?,
        },
        "release_cb" => RpcMessage::ReleaseCb { cb_id: u64_field(h, "cb_id")? },
        "log" => RpcMessage::Log {
            plugin_id: str_field(h, "plugin_id")?,
            level: str_field(h, "level")?,
            text: str_field(h, "text")?,
        },
        "progress" => {
            let fraction = match decode_value(field(h, "fraction")?, cur)? {
                WireValue::Float(f) => f,
                WireValue::Int(i) => i as f64,
                _ => return Err(malformed("fraction must be a number")),
            };
            if !(0.0..=1.0).contains(&fraction) {
                return Err(malformed(format!("progress fraction {fraction} outside [0,1]")));
            }
            RpcMessage::Progress { plugin_id: str_field(h, "plugin_id")?, fraction }
        }
        "ping" => RpcMessage::Ping,
        "pong" => RpcMessage::Pong,
        other => return Err(CodecError::UnknownKind(other.to_string())),
    };
    Ok(msg)
}

fn decode_value(j: &Json, cur: &mut AttachmentCursor<'_>) -> Result<WireValue, CodecError> {
    Ok(match j {
        Json::Null => WireValue::Null,
        Json::Bool(b) => WireValue::Bool(*b),
        Json::Number(n) => {
            if n.is_f64() {
                WireValue::Float(n.as_f64().unwrap_or(f64::NAN))
            } else if let Some(i) = n.as_i64() {
                WireValue::Int(i)
            } else {
                return Err(malformed(format!("integer {n} out of int64 range")));
            }
        }
        Json::String(s) => WireValue::Str(s.clone()),
        Json::Array(items) => WireValue::List(
            items.iter().map(|i| decode_value(i, cur)).collect::<Result<_, _>>()?,
        ),
        Json::Object(o) => {
            let (tag, body) = match o.iter().next() {
                Some(entry) if o.len() == 1 => entry,
                _ => return Err(malformed("tagged value must have exactly one key")),
            };
            match tag.as_str() {
                "map" => {
                    let Json::Object(m) = body else {
                        return Err(malformed("map body must be an object"));
                    };
                    WireValue::Map(
                        m.iter()
                            .map(|(k, v)| Ok((k.clone(), decode_value(v, cur)?)))
                            .collect::<Result<_, CodecError>>()?,
                    )
                }
                "nd" => decode_nd(body, cur)?,
                "cb" => {
                    let Json::Object(m) = body else {
                        return Err(malformed("cb body must be an object"));
                    };
                    WireValue::Callback(CallbackRef {
                        cb_id: u64_field(m, "id")?,
                        persistent: field(m, "persistent")?
                            .as_bool()
                            .ok_or_else(|| malformed("persistent must be bool"))?,
                    })
                }
                "f64bits" => {
                    let bits = body
                        .as_str()
                        .filter(|s| s.len() == 16)
                        .and_then(|s| u64::from_str_radix(s, 16).ok())
                        .ok_or_else(|| malformed("f64bits must be 16 hex digits"))?;
                    WireValue::Float(f64::from_bits(bits))
                }
                other => return Err(malformed(format!("unknown value tag {other:?}"))),
            }
        }
    })
}

fn decode_nd(body: &Json, cur: &mut AttachmentCursor<'_>) -> Result<WireValue, CodecError> {
    let Json::Object(m) = body else {
        return Err(malformed("nd body must be an object"));
    };
    let idx = u64_field(m, "att")? as usize;
    if idx != cur.next {
        return Err(malformed(format!("attachment {idx} referenced out of order")));
    }
    let part = *cur
        .parts
        .get(idx)
        .ok_or_else(|| malformed(format!("attachment {idx} not declared")))?;
    cur.next += 1;
    let dtype_name = str_field(m, "dtype")?;
    let dtype = DType::parse(&dtype_name).ok_or_else(|| malformed(format!("dtype {dtype_name:?}")))?;
    let shape = field(m, "shape")?
        .as_array()
        .ok_or_else(|| malformed("shape must be an array"))?
        .iter()
        .map(|d| d.as_u64().ok_or_else(|| malformed("shape entries are non-negative integers")))
        .collect::<Result<Vec<_>, _>>()?;
    if shape.iter().any(|&d| d > i64::MAX as u64) {
        return Err(malformed("shape entry exceeds int64"));
    }
    NdArray::new(dtype, shape, part.to_vec())
        .map(WireValue::NdArray)
        .map_err(|e| malformed(e.to_string()))
}
