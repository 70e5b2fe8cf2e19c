//! Stack machine for compiled PluginScript.
//!
//! The machine runs synchronously until it finishes or reaches a `call(...)`
//! into another plugin; it then yields the request, the async driver awaits
//! the bridge, and the machine resumes with the result. Tail calls reuse
//! their frame, so unbounded tail recursion is limited only by fuel.

use std::sync::Arc;

use async_trait::async_trait;

use super::{BinOp, Builtin, Op, Program};
use crate::rpc::{CallError, WireValue};

/// Evaluation steps allowed per invocation.
pub const DEFAULT_FUEL: u64 = 1_000_000;

/// Host capabilities available to a running script.
#[async_trait]
pub trait Bridge: Send + Sync {
    async fn call(&self, plugin: &str, method: &str, args: Vec<WireValue>) -> Result<WireValue, CallError>;

    fn log(&self, _level: &str, _text: &str) {}

    fn progress(&self, _fraction: f64) {}
}

/// Bridge for isolated programs: every cross-plugin call fails.
pub struct NoBridge;

#[async_trait]
impl Bridge for NoBridge {
    async fn call(&self, plugin: &str, _method: &str, _args: Vec<WireValue>) -> Result<WireValue, CallError> {
        Err(CallError::NoSuchPlugin(plugin.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum InvokeError {
    #[error("no function named {0:?}")]
    NoSuchFunction(String),
    #[error("{function} takes {expected} argument(s), {got} given")]
    ArityMismatch { function: String, expected: usize, got: usize },
    #[error("runtime error at {line}:{col}: {message}")]
    Runtime { message: String, line: u32, col: u32 },
    #[error("fuel exhausted after {0} steps")]
    FuelExhausted(u64),
    #[error("cross-plugin call failed: {0}")]
    Bridge(CallError),
}

impl InvokeError {
    /// The error a caller of `plugin` observes, identical for in-host and
    /// out-of-process execution.
    pub fn into_call_error(self, plugin: &str) -> CallError {
        match self {
            InvokeError::NoSuchFunction(method) => CallError::NoSuchMethod { plugin: plugin.to_string(), method },
            e @ InvokeError::ArityMismatch { .. } => CallError::remote("ArityMismatch", e),
            e @ InvokeError::Runtime { .. } => CallError::remote("RuntimeError", e),
            e @ InvokeError::FuelExhausted(_) => CallError::remote("FuelExhausted", e),
            InvokeError::Bridge(inner) => CallError::remote("BridgeError", inner),
        }
    }
}

struct Frame {
    func: usize,
    pc: usize,
    base: usize,
}

enum Yield {
    Done(WireValue),
    Bridge { plugin: String, method: String, args: Vec<WireValue> },
}

struct Machine<'p> {
    program: &'p Program,
    stack: Vec<WireValue>,
    frames: Vec<Frame>,
    fuel: u64,
    budget: u64,
}

impl<'p> Machine<'p> {
    fn new(program: &'p Program, func: usize, args: Vec<WireValue>, fuel: u64) -> Self {
        Machine { program, stack: args, frames: vec![Frame { func, pc: 0, base: 0 }], fuel, budget: fuel }
    }

    fn run(&mut self, bridge: &dyn Bridge) -> Result<Yield, InvokeError> {
        loop {
            if self.fuel == 0 {
                return Err(InvokeError::FuelExhausted(self.budget));
            }
            self.fuel -= 1;
            let frame = self.frames.last_mut().expect("machine has a frame while running");
            let chunk = self.program.chunk(frame.func);
            let (line, col) = chunk.spans[frame.pc];
            let op = &chunk.ops[frame.pc];
            frame.pc += 1;
            let base = frame.base;
            let fail = |message: String| InvokeError::Runtime { message, line, col };
            match op {
                Op::Const(v) => self.stack.push(v.clone()),
                Op::Load(i) => self.stack.push(self.stack[base + i].clone()),
                Op::Neg => {
                    let v = self.pop();
                    let n = v.as_f64().ok_or_else(|| fail(format!("cannot negate a {}", v.kind_name())))?;
                    self.stack.push(WireValue::Float(-n));
                }
                Op::Bin(op) => {
                    let r = self.pop();
                    let l = self.pop();
                    self.stack.push(binary(*op, l, r).map_err(fail)?);
                }
                Op::Builtin(b, n) => {
                    let args = self.stack.split_off(self.stack.len() - n);
                    self.stack.push(builtin(*b, args, bridge).map_err(fail)?);
                }
                Op::Call(idx) => {
                    let arity = self.program.chunk(*idx).arity;
                    let base = self.stack.len() - arity;
                    self.frames.push(Frame { func: *idx, pc: 0, base });
                }
                Op::TailCall(idx) => {
                    let arity = self.program.chunk(*idx).arity;
                    let args_at = self.stack.len() - arity;
                    self.stack.drain(base..args_at);
                    let frame = self.frames.last_mut().expect("frame");
                    frame.func = *idx;
                    frame.pc = 0;
                }
                Op::Bridge(n) => {
                    let mut args = self.stack.split_off(self.stack.len() - n);
                    let rest = args.split_off(2);
                    let method = args.pop().expect("two leading args");
                    let plugin = args.pop().expect("two leading args");
                    match (plugin, method) {
                        (WireValue::Str(plugin), WireValue::Str(method)) => {
                            return Ok(Yield::Bridge { plugin, method, args: rest });
                        }
                        _ => return Err(fail("call() needs plugin and method names as strings".into())),
                    }
                }
                Op::Return => {
                    let result = self.pop();
                    self.stack.truncate(base);
                    self.frames.pop();
                    if self.frames.is_empty() {
                        return Ok(Yield::Done(result));
                    }
                    self.stack.push(result);
                }
            }
        }
    }

    fn pop(&mut self) -> WireValue {
        self.stack.pop().expect("compiled code keeps the stack balanced")
    }
}

fn number(v: &WireValue, what: &str) -> Result<f64, String> {
    v.as_f64().ok_or_else(|| format!("{what} expects numbers, got {}", v.kind_name()))
}

fn binary(op: BinOp, l: WireValue, r: WireValue) -> Result<WireValue, String> {
    if let (BinOp::Add, WireValue::Str(a), WireValue::Str(b)) = (op, &l, &r) {
        return Ok(WireValue::Str(format!("{a}{b}")));
    }
    let sym = match op {
        BinOp::Add => "+",
        BinOp::Sub => "-",
        BinOp::Mul => "*",
        BinOp::Div => "/",
        BinOp::Pow => "^",
    };
    let (a, b) = (number(&l, sym)?, number(&r, sym)?);
    let v = match op {
        BinOp::Add => a + b,
        BinOp::Sub => a - b,
        BinOp::Mul => a * b,
        BinOp::Div => {
            if b == 0.0 {
                return Err("division by zero".into());
            }
            a / b
        }
        BinOp::Pow => a.powf(b),
    };
    Ok(WireValue::Float(v))
}

fn builtin(b: Builtin, args: Vec<WireValue>, bridge: &dyn Bridge) -> Result<WireValue, String> {
    let unary = |name: &str, f: fn(f64) -> f64| -> Result<WireValue, String> { Ok(WireValue::Float(f(number(&args[0], name)?))) };
    match b {
        Builtin::Exp => unary("exp", f64::exp),
        Builtin::Log => unary("log", f64::ln),
        Builtin::Sqrt => unary("sqrt", f64::sqrt),
        Builtin::Abs => unary("abs", f64::abs),
        Builtin::Min | Builtin::Max => {
            let name = if b == Builtin::Min { "min" } else { "max" };
            let nums = args.iter().map(|a| number(a, name)).collect::<Result<Vec<_>, _>>()?;
            let pick = if b == Builtin::Min { f64::min } else { f64::max };
            Ok(WireValue::Float(nums.into_iter().reduce(pick).expect("arity checked")))
        }
        Builtin::Trace => {
            let v = args.into_iter().next().expect("arity checked");
            let text = match &v {
                WireValue::Str(s) => s.clone(),
                other => other.to_string(),
            };
            bridge.log("info", &text);
            Ok(v)
        }
        Builtin::Progress => {
            let f = number(&args[0], "progress")?;
            if !(0.0..=1.0).contains(&f) {
                return Err(format!("progress fraction {f} outside [0,1]"));
            }
            bridge.progress(f);
            Ok(WireValue::Float(f))
        }
    }
}

/// A program bound to a plugin id and a host bridge. Holds no mutable
/// state, so concurrent invocations never contend.
pub struct PluginInstance {
    plugin_id: String,
    program: Arc<Program>,
    bridge: Arc<dyn Bridge>,
    fuel: u64,
}

pub fn instantiate(program: Arc<Program>, bridge: Arc<dyn Bridge>, plugin_id: &str) -> PluginInstance {
    PluginInstance { plugin_id: plugin_id.to_string(), program, bridge, fuel: DEFAULT_FUEL }
}

impl PluginInstance {
    pub fn with_fuel(mut self, fuel: u64) -> Self {
        self.fuel = fuel;
        self
    }

    pub fn plugin_id(&self) -> &str {
        &self.plugin_id
    }

    /// Exported interface: the program's functions in definition order.
    pub fn exports(&self) -> Vec<String> {
        self.program.function_names()
    }

    pub async fn invoke(&self, fname: &str, args: Vec<WireValue>) -> Result<WireValue, InvokeError> {
        let idx = self
            .program
            .lookup(fname)
            .ok_or_else(|| InvokeError::NoSuchFunction(fname.to_string()))?;
        let arity = self.program.chunk(idx).arity;
        if args.len() != arity {
            return Err(InvokeError::ArityMismatch { function: fname.to_string(), expected: arity, got: args.len() });
        }
        let mut machine = Machine::new(&self.program, idx, args, self.fuel);
        loop {
            match machine.run(self.bridge.as_ref())? {
                Yield::Done(v) => return Ok(v),
                Yield::Bridge { plugin, method, args } => {
                    let v = self.bridge.call(&plugin, &method, args).await.map_err(InvokeError::Bridge)?;
                    machine.stack.push(v);
                }
            }
        }
    }
}
