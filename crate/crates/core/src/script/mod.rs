//! PluginScript: the sandboxed expression dialect run by worker plugins and
//! by the native-plugin shim.
//!
//! ```text
//! program := {fndef}
//! fndef   := "fn" ident "(" [ident {"," ident}] ")" "=" expr
//! expr    := term {("+"|"-") term}
//! term    := factor {("*"|"/") factor}
//! factor  := ["-"] power
//! power   := atom ["^" factor]
//! atom    := number | string | ident | ident "(" [expr {"," expr}] ")" | "(" expr ")"
//! ```
//!
//! Builtins: `exp log sqrt abs min max`, `call(plugin, method, args...)`
//! for cross-plugin calls, `trace(x)` to log a value and `progress(f)` to
//! report progress. The interpreter has no file, network, clock or
//! environment access; its only effects go through the [`Bridge`].

mod lexer;
mod parser;
mod vm;

use std::collections::HashMap;

pub use parser::{BinOp, Expr, ExprKind, FunctionDef};
pub use vm::{instantiate, Bridge, InvokeError, NoBridge, PluginInstance, DEFAULT_FUEL};

use crate::rpc::WireValue;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScriptError {
    #[error("syntax error at {line}:{col}: expected {expected}, found {found}")]
    Syntax { line: u32, col: u32, expected: String, found: String },
    #[error("function {name:?} defined twice (second at {line}:{col})")]
    DuplicateFunction { name: String, line: u32, col: u32 },
    #[error("parameter {name:?} repeated at {line}:{col}")]
    DuplicateParam { name: String, line: u32, col: u32 },
    #[error("unknown name {name:?} at {line}:{col}")]
    UnknownName { name: String, line: u32, col: u32 },
    #[error("{name} takes {expected} argument(s), {got} given at {line}:{col}")]
    WrongArgCount { name: String, expected: String, got: usize, line: u32, col: u32 },
}

impl ScriptError {
    pub fn position(&self) -> (u32, u32) {
        match *self {
            ScriptError::Syntax { line, col, .. }
            | ScriptError::DuplicateFunction { line, col, .. }
            | ScriptError::DuplicateParam { line, col, .. }
            | ScriptError::UnknownName { line, col, .. }
            | ScriptError::WrongArgCount { line, col, .. } => (line, col),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Builtin {
    Exp,
    Log,
    Sqrt,
    Abs,
    Min,
    Max,
    Trace,
    Progress,
}

impl Builtin {
    fn lookup(name: &str) -> Option<(Builtin, usize, Option<usize>)> {
        Some(match name {
            "exp" => (Builtin::Exp, 1, Some(1)),
            "log" => (Builtin::Log, 1, Some(1)),
            "sqrt" => (Builtin::Sqrt, 1, Some(1)),
            "abs" => (Builtin::Abs, 1, Some(1)),
            "min" => (Builtin::Min, 1, None),
            "max" => (Builtin::Max, 1, None),
            "trace" => (Builtin::Trace, 1, Some(1)),
            "progress" => (Builtin::Progress, 1, Some(1)),
            _ => return None,
        })
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Const(WireValue),
    Load(usize),
    Neg,
    Bin(BinOp),
    Builtin(Builtin, usize),
    Call(usize),
    TailCall(usize),
    Bridge(usize),
    Return,
}

#[derive(Debug, Clone)]
pub(crate) struct Chunk {
    pub arity: usize,
    pub ops: Vec<Op>,
    /// Source position of each op, for runtime errors.
    pub spans: Vec<(u32, u32)>,
}

/// A parsed and compiled script.
#[derive(Debug, Clone)]
pub struct Program {
    functions: Vec<FunctionDef>,
    chunks: Vec<Chunk>,
    index: HashMap<String, usize>,
}

impl Program {
    pub fn functions(&self) -> &[FunctionDef] {
        &self.functions
    }

    /// Function names in definition order.
    pub fn function_names(&self) -> Vec<String> {
        self.functions.iter().map(|f| f.name.clone()).collect()
    }

    pub(crate) fn lookup(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub(crate) fn chunk(&self, idx: usize) -> &Chunk {
        &self.chunks[idx]
    }
}

pub fn parse_script(text: &str) -> Result<Program, ScriptError> {
    let functions = parser::parse_functions(text)?;
    let index: HashMap<String, usize> = functions.iter().enumerate().map(|(i, f)| (f.name.clone(), i)).collect();
    let chunks = functions
        .iter()
        .map(|f| compile_function(f, &functions, &index))
        .collect::<Result<_, _>>()?;
    Ok(Program { functions, chunks, index })
}

struct Emitter<'a> {
    def: &'a FunctionDef,
    functions: &'a [FunctionDef],
    index: &'a HashMap<String, usize>,
    chunk: Chunk,
}

impl Emitter<'_> {
    fn emit(&mut self, op: Op, e: &Expr) {
        self.chunk.ops.push(op);
        self.chunk.spans.push((e.line, e.col));
    }

    fn arg_count(name: &str, min: usize, max: Option<usize>, got: usize, e: &Expr) -> Result<(), ScriptError> {
        if got < min || max.is_some_and(|m| got > m) {
            let expected = match max {
                Some(m) if m == min => min.to_string(),
                Some(m) => format!("{min}..{m}"),
                None => format!("at least {min}"),
            };
            return Err(ScriptError::WrongArgCount { name: name.to_string(), expected, got, line: e.line, col: e.col });
        }
        Ok(())
    }

    fn expr(&mut self, e: &Expr, tail: bool) -> Result<(), ScriptError> {
        match &e.kind {
            ExprKind::Number(n) => self.emit(Op::Const(WireValue::Float(*n)), e),
            ExprKind::Str(s) => self.emit(Op::Const(WireValue::Str(s.clone())), e),
            ExprKind::Var(name) => match self.def.params.iter().position(|p| p == name) {
                Some(i) => self.emit(Op::Load(i), e),
                None => return Err(ScriptError::UnknownName { name: name.clone(), line: e.line, col: e.col }),
            },
            ExprKind::Neg(inner) => {
                self.expr(inner, false)?;
                self.emit(Op::Neg, e);
            }
            ExprKind::Bin(op, l, r) => {
                self.expr(l, false)?;
                self.expr(r, false)?;
                self.emit(Op::Bin(*op), e);
            }
            ExprKind::Call(name, args) => {
                if let Some(&idx) = self.index.get(name) {
                    let arity = self.functions[idx].params.len();
                    Self::arg_count(name, arity, Some(arity), args.len(), e)?;
                    for a in args {
                        self.expr(a, false)?;
                    }
                    self.emit(if tail { Op::TailCall(idx) } else { Op::Call(idx) }, e);
                } else if name == "call" {
                    Self::arg_count(name, 2, None, args.len(), e)?;
                    for a in args {
                        self.expr(a, false)?;
                    }
                    self.emit(Op::Bridge(args.len()), e);
                } else if let Some((b, min, max)) = Builtin::lookup(name) {
                    Self::arg_count(name, min, max, args.len(), e)?;
                    for a in args {
                        self.expr(a, false)?;
                    }
                    self.emit(Op::Builtin(b, args.len()), e);
                } else {
                    return Err(ScriptError::UnknownName { name: name.clone(), line: e.line, col: e.col });
                }
            }
        }
        Ok(())
    }
}

fn compile_function(
    def: &FunctionDef,
    functions: &[FunctionDef],
    index: &HashMap<String, usize>,
) -> Result<Chunk, ScriptError> {
    let mut em = Emitter {
        def,
        functions,
        index,
        chunk: Chunk { arity: def.params.len(), ops: Vec::new(), spans: Vec::new() },
    };
    em.expr(&def.body, true)?;
    em.emit(Op::Return, &def.body);
    Ok(em.chunk)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn body(src: &str) -> ExprKind {
        parse_script(src).unwrap().functions()[0].body.kind.clone()
    }

    fn num(n: f64) -> Box<Expr> {
        Box::new(Expr { kind: ExprKind::Number(n), line: 0, col: 0 })
    }

    fn strip(e: &Expr) -> Expr {
        let kind = match &e.kind {
            ExprKind::Neg(i) => ExprKind::Neg(Box::new(strip(i))),
            ExprKind::Bin(op, l, r) => ExprKind::Bin(*op, Box::new(strip(l)), Box::new(strip(r))),
            ExprKind::Call(n, a) => ExprKind::Call(n.clone(), a.iter().map(strip).collect()),
            k => k.clone(),
        };
        Expr { kind, line: 0, col: 0 }
    }

    #[test]
    fn calculator_program() {
        let p = parse_script("fn calc_exp(x) = exp(x)").unwrap();
        assert_eq!(p.function_names(), vec!["calc_exp"]);
        assert_eq!(p.functions()[0].params, vec!["x"]);
    }

    #[test]
    fn mul_binds_tighter_than_add() {
        let p = parse_script("fn f(x) = x + 2*3").unwrap();
        let e = strip(&p.functions()[0].body);
        let var = Box::new(Expr { kind: ExprKind::Var("x".into()), line: 0, col: 0 });
        let prod = Box::new(Expr { kind: ExprKind::Bin(BinOp::Mul, num(2.0), num(3.0)), line: 0, col: 0 });
        assert_eq!(e.kind, ExprKind::Bin(BinOp::Add, var, prod));
    }

    #[test]
    fn pow_is_right_associative_and_binds_over_negation() {
        let e = strip(&parse_script("fn f() = 2^3^2").unwrap().functions()[0].body);
        let inner = Box::new(Expr { kind: ExprKind::Bin(BinOp::Pow, num(3.0), num(2.0)), line: 0, col: 0 });
        assert_eq!(e.kind, ExprKind::Bin(BinOp::Pow, num(2.0), inner));
        assert!(matches!(body("fn f() = -2^2"), ExprKind::Neg(_)));
    }

    #[test]
    fn syntax_errors_carry_position() {
        let err = parse_script("fn f(x = ").unwrap_err();
        assert!(matches!(err, ScriptError::Syntax { line: 1, col: 8, .. }), "{err:?}");
        let err = parse_script("fn ok() = 1\n\nfn bad() = (1 + ").unwrap_err();
        assert_eq!(err.position().0, 3);
        assert!(matches!(parse_script("fn f() = \"open"), Err(ScriptError::Syntax { .. })));
        assert!(matches!(parse_script("fn f() = 1 $"), Err(ScriptError::Syntax { .. })));
    }

    #[test]
    fn resolution_errors() {
        assert!(matches!(parse_script("fn f(x) = 1\nfn f(y) = 2"), Err(ScriptError::DuplicateFunction { .. })));
        assert!(matches!(parse_script("fn f(x, x) = 1"), Err(ScriptError::DuplicateParam { .. })));
        assert!(matches!(parse_script("fn f() = y"), Err(ScriptError::UnknownName { .. })));
        assert!(matches!(parse_script("fn f() = nope(1)"), Err(ScriptError::UnknownName { .. })));
        assert!(matches!(parse_script("fn f() = exp(1, 2)"), Err(ScriptError::WrongArgCount { .. })));
        assert!(matches!(parse_script("fn f() = call(\"p\")"), Err(ScriptError::WrongArgCount { .. })));
    }

    #[test]
    fn comments_and_forward_references() {
        let p = parse_script("# header\nfn a(x) = b(x) # trailing\nfn b(y) = y * 2\n").unwrap();
        assert_eq!(p.function_names(), vec!["a", "b"]);
        assert!(parse_script("").unwrap().functions().is_empty());
    }
}
