//! The wire value model.

use std::collections::BTreeMap;
use std::fmt;

use serde_json::{Map, Number, Value as Json};

/// Element type of an [`NdArray`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    U8,
    I8,
    I16,
    I32,
    I64,
    F32,
    F64,
}

impl DType {
    pub const ALL: [DType; 7] = [
        DType::U8,
        DType::I8,
        DType::I16,
        DType::I32,
        DType::I64,
        DType::F32,
        DType::F64,
    ];

    pub fn size(self) -> usize {
        match self {
            DType::U8 | DType::I8 => 1,
            DType::I16 => 2,
            DType::I32 | DType::F32 => 4,
            DType::I64 | DType::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::U8 => "u8",
            DType::I8 => "i8",
            DType::I16 => "i16",
            DType::I32 => "i32",
            DType::I64 => "i64",
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Option<DType> {
        DType::ALL.into_iter().find(|d| d.as_str() == s)
    }
}

/// A dense row-major array. `data` holds little-endian element bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NdArray {
    dtype: DType,
    shape: Vec<u64>,
    data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("nd-array data is {actual} bytes, shape {shape:?} of {dtype:?} needs {expected}")]
pub struct ShapeMismatch {
    pub dtype: DType,
    pub shape: Vec<u64>,
    pub expected: u128,
    pub actual: usize,
}

impl NdArray {
    pub fn new(dtype: DType, shape: Vec<u64>, data: Vec<u8>) -> Result<Self, ShapeMismatch> {
        let expected = Self::byte_len(dtype, &shape);
        if expected != Some(data.len() as u128) {
            return Err(ShapeMismatch {
                dtype,
                expected: expected.unwrap_or(u128::MAX),
                shape,
                actual: data.len(),
            });
        }
        Ok(NdArray { dtype, shape, data })
    }

    pub fn from_f64(shape: Vec<u64>, values: &[f64]) -> Result<Self, ShapeMismatch> {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        NdArray::new(DType::F64, shape, data)
    }

    /// Element size times the product of the shape, or `None` on overflow.
    pub fn byte_len(dtype: DType, shape: &[u64]) -> Option<u128> {
        shape
            .iter()
            .try_fold(dtype.size() as u128, |acc, &d| acc.checked_mul(d as u128))
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn shape(&self) -> &[u64] {
        &self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }
}

/// Reference to a function living on the other side of a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CallbackRef {
    pub cb_id: u64,
    pub persistent: bool,
}

/// Every value that can cross a session.
#[derive(Debug, Clone, PartialEq)]
pub enum WireValue {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    List(Vec<WireValue>),
    Map(BTreeMap<String, WireValue>),
    NdArray(NdArray),
    Callback(CallbackRef),
}

impl WireValue {
    pub fn kind_name(&self) -> &'static str {
        match self {
            WireValue::Null => "null",
            WireValue::Bool(_) => "bool",
            WireValue::Int(_) => "int",
            WireValue::Float(_) => "float",
            WireValue::Str(_) => "string",
            WireValue::List(_) => "list",
            WireValue::Map(_) => "map",
            WireValue::NdArray(_) => "ndarray",
            WireValue::Callback(_) => "callback",
        }
    }

    /// Numeric view used by arithmetic; ints widen to float.
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            WireValue::Int(i) => Some(i as f64),
            WireValue::Float(f) => Some(f),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            WireValue::Str(s) => Some(s),
            _ => None,
        }
    }

    /// Bit-level equality: floats compare by their bit patterns, so NaN
    /// payloads and signed zeros are distinguished.
    pub fn bit_eq(&self, other: &WireValue) -> bool {
        match (self, other) {
            (WireValue::Float(a), WireValue::Float(b)) => a.to_bits() == b.to_bits(),
            (WireValue::List(a), WireValue::List(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bit_eq(y))
            }
            (WireValue::Map(a), WireValue::Map(b)) => {
                a.len() == b.len()
                    && a.iter().zip(b).all(|((ka, va), (kb, vb))| ka == kb && va.bit_eq(vb))
            }
            _ => self == other,
        }
    }

    /// Plain JSON view for operators: numbers, strings, arrays and objects.
    /// Integral floats lose their float-ness; nd-arrays and callbacks become
    /// descriptive objects. Use [`crate::rpc::codec`] for the lossless form.
    pub fn to_plain_json(&self) -> Json {
        match self {
            WireValue::Null => Json::Null,
            WireValue::Bool(b) => Json::Bool(*b),
            WireValue::Int(i) => Json::from(*i),
            WireValue::Float(f) => Number::from_f64(*f)
                .map(Json::Number)
                .unwrap_or_else(|| Json::String(f.to_string())),
            WireValue::Str(s) => Json::String(s.clone()),
            WireValue::List(items) => Json::Array(items.iter().map(|v| v.to_plain_json()).collect()),
            WireValue::Map(m) => Json::Object(
                m.iter()
                    .map(|(k, v)| (k.clone(), v.to_plain_json()))
                    .collect::<Map<_, _>>(),
            ),
            WireValue::NdArray(a) => serde_json::json!({
                "dtype": a.dtype().as_str(),
                "shape": a.shape(),
                "bytes": a.data().len(),
            }),
            WireValue::Callback(cb) => serde_json::json!({
                "callback": cb.cb_id,
                "persistent": cb.persistent,
            }),
        }
    }

    /// Inverse of [`WireValue::to_plain_json`] for operator input: JSON
    /// integers become `Int`, other numbers `Float`, objects `Map`.
    pub fn from_plain_json(j: &Json) -> WireValue {
        match j {
            Json::Null => WireValue::Null,
            Json::Bool(b) => WireValue::Bool(*b),
            Json::Number(n) => match n.as_i64() {
                Some(i) => WireValue::Int(i),
                None => WireValue::Float(n.as_f64().unwrap_or(f64::NAN)),
            },
            Json::String(s) => WireValue::Str(s.clone()),
            Json::Array(a) => WireValue::List(a.iter().map(WireValue::from_plain_json).collect()),
            Json::Object(o) => WireValue::Map(
                o.iter()
                    .map(|(k, v)| (k.clone(), WireValue::from_plain_json(v)))
                    .collect(),
            ),
        }
    }
}

/// Operator-facing text: floats print in shortest round-trip decimal form
/// without a forced fraction (`1`, `2.718281828459045`), containers as JSON.
impl fmt::Display for WireValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WireValue::Float(x) => write!(f, "{x}"),
            WireValue::List(items) => {
                f.write_str("[")?;
                for (i, v) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{v}")?;
                }
                f.write_str("]")
            }
            WireValue::Map(m) => {
                f.write_str("{")?;
                for (i, (k, v)) in m.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{}:{v}", Json::String(k.clone()))?;
                }
                f.write_str("}")
            }
            other => write!(f, "{}", other.to_plain_json()),
        }
    }
}

impl From<f64> for WireValue {
    fn from(v: f64) -> Self {
        WireValue::Float(v)
    }
}

impl From<i64> for WireValue {
    fn from(v: i64) -> Self {
        WireValue::Int(v)
    }
}

impl From<&str> for WireValue {
    fn from(v: &str) -> Self {
        WireValue::Str(v.to_string())
    }
}

impl From<String> for WireValue {
    fn from(v: String) -> Self {
        WireValue::Str(v)
    }
}

impl From<bool> for WireValue {
    fn from(v: bool) -> Self {
        WireValue::Bool(v)
    }
}

impl From<NdArray> for WireValue {
    fn from(v: NdArray) -> Self {
        WireValue::NdArray(v)
    }
}
