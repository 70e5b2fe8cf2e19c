//! Recursive-descent parser for PluginScript.

use super::lexer::{tokenize, Tok, Token};
use super::ScriptError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExprKind {
    Number(f64),
    Str(String),
    Var(String),
    Call(String, Vec<Expr>),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    pub kind: ExprKind,
    pub line: u32,
    pub col: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionDef {
    pub name: String,
    pub params: Vec<String>,
    pub body: Expr,
    pub line: u32,
    pub col: u32,
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error(&self, expected: &str) -> ScriptError {
        let t = self.peek();
        ScriptError::Syntax { line: t.line, col: t.col, expected: expected.to_string(), found: t.tok.describe() }
    }

    fn expect(&mut self, tok: Tok, expected: &str) -> Result<Token, ScriptError> {
        if self.peek().tok == tok {
            Ok(self.bump())
        } else {
            Err(self.error(expected))
        }
    }

    fn ident(&mut self, expected: &str) -> Result<(String, Token), ScriptError> {
        match &self.peek().tok {
            Tok::Ident(name) => {
                let name = name.clone();
                Ok((name, self.bump()))
            }
            _ => Err(self.error(expected)),
        }
    }

    fn fndef(&mut self) -> Result<FunctionDef, ScriptError> {
        let kw = self.expect(Tok::Fn, "`fn`")?;
        let (name, _) = self.ident("function name")?;
        self.expect(Tok::LParen, "`(`")?;
        let mut params = Vec::new();
        if self.peek().tok != Tok::RParen {
            loop {
                let (p, tok) = self.ident("parameter name")?;
                if params.contains(&p) {
                    return Err(ScriptError::DuplicateParam { name: p, line: tok.line, col: tok.col });
                }
                params.push(p);
                if self.peek().tok == Tok::Comma {
                    self.bump();
                } else {
                    break;
                }
            }
        }
        self.expect(Tok::RParen, "`,` or `)`")?;
        self.expect(Tok::Eq, "`=`")?;
        let body = self.expr()?;
        Ok(FunctionDef { name, params, body, line: kw.line, col: kw.col })
    }

    fn expr(&mut self) -> Result<Expr, ScriptError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek().tok {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            let t = self.bump();
            let rhs = self.term()?;
            lhs = Expr { kind: ExprKind::Bin(op, Box::new(lhs), Box::new(rhs)), line: t.line, col: t.col };
        }
    }

    fn term(&mut self) -> Result<Expr, ScriptError> {
        let mut lhs = self.factor()?;
        loop {
            let op = match self.peek().tok {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            let t = self.bump();
            let rhs = self.factor()?;
            lhs = Expr { kind: ExprKind::Bin(op, Box::new(lhs), Box::new(rhs)), line: t.line, col: t.col };
        }
    }

    fn factor(&mut self) -> Result<Expr, ScriptError> {
        if self.peek().tok == Tok::Minus {
            let t = self.bump();
            let inner = self.power()?;
            return Ok(Expr { kind: ExprKind::Neg(Box::new(inner)), line: t.line, col: t.col });
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ScriptError> {
        let base = self.atom()?;
        if self.peek().tok == Tok::Caret {
            let t = self.bump();
            // right operand is a factor, so `^` associates to the right
            let exp = self.factor()?;
            return Ok(Expr { kind: ExprKind::Bin(BinOp::Pow, Box::new(base), Box::new(exp)), line: t.line, col: t.col });
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ScriptError> {
        let t = self.peek().clone();
        let kind = match t.tok {
            Tok::Number(n) => {
                self.bump();
                ExprKind::Number(n)
            }
            Tok::Str(s) => {
                self.bump();
                ExprKind::Str(s)
            }
            Tok::Ident(name) => {
                self.bump();
                if self.peek().tok == Tok::LParen {
                    self.bump();
                    let mut args = Vec::new();
                    if self.peek().tok != Tok::RParen {
                        loop {
                            args.push(self.expr()?);
                            if self.peek().tok == Tok::Comma {
                                self.bump();
                            } else {
                                break;
                            }
                        }
                    }
                    self.expect(Tok::RParen, "`,` or `)`")?;
                    ExprKind::Call(name, args)
                } else {
                    ExprKind::Var(name)
                }
            }
            Tok::LParen => {
                self.bump();
                let e = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                return Ok(e);
            }
            _ => return Err(self.error("expression")),
        };
        Ok(Expr { kind, line: t.line, col: t.col })
    }
}

pub fn parse_functions(src: &str) -> Result<Vec<FunctionDef>, ScriptError> {
    let mut p = Parser { toks: tokenize(src)?, pos: 0 };
    let mut fns: Vec<FunctionDef> = Vec::new();
    while p.peek().tok != Tok::Eof {
        let f = p.fndef()?;
        if fns.iter().any(|g| g.name == f.name) {
            return Err(ScriptError::DuplicateFunction { name: f.name, line: f.line, col: f.col });
        }
        fns.push(f);
    }
    Ok(fns)
}
