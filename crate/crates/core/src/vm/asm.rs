//! Line-oriented text form of programs.
//!
//! ```text
//! .program kf n=2 N=1
//! TRANSPOSE B2 F
//! MUL x1 F x0
//! MUL B7 h1:1x2 x1
//! AFF B7 y1 B7 1 -1
//! ```
//!
//! Each instruction line is `OPCODE dst src1 [src2] [W1] [W2]`. Operands may
//! carry a `:RxC` view; weights are a scalar or a literal like `[1,0;0,1]`.

use std::fmt;

use nalgebra::DMatrix;

use super::{Instruction, Mode, Operand, Program, Reg, Weight};
use crate::error::{Error, Result};

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.reg)?;
        if let Some((r, c)) = self.shape {
            write!(f, ":{r}x{c}")?;
        }
        Ok(())
    }
}

impl fmt::Display for Weight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Weight::Scalar(c) => write!(f, "{c}"),
            Weight::Matrix(w) => {
                let rows: Vec<String> = w
                    .row_iter()
                    .map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
                    .collect();
                write!(f, "[{}]", rows.join(";"))
            }
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.opcode(), self.dst())?;
        for s in self.sources() {
            write!(f, " {s}")?;
        }
        if let Instruction::Aff { w1, w2, .. } = self {
            write!(f, " {w1} {w2}")?;
        }
        Ok(())
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, ".program {} n={} N={}", self.mode.name(), self.n, self.horizon)?;
        if self.trace {
            writeln!(f, ".trace")?;
        }
        for ins in &self.instructions {
            writeln!(f, "{ins}")?;
        }
        Ok(())
    }
}

fn parse_err(line: usize, message: impl fmt::Display) -> Error {
    Error::Parse(format!("line {line}: {message}"))
}

fn parse_index(s: &str, line: usize) -> Result<usize> {
    s.parse().map_err(|_| parse_err(line, format!("bad index `{s}`")))
}

fn parse_reg(s: &str, line: usize) -> Result<Reg> {
    Ok(match s {
        "F" => Reg::F,
        "Q" => Reg::Q,
        "sigma" => Reg::Sigma,
        "fhat" => Reg::FHat,
        _ => {
            let (head, tail) = s.split_at(s.find(|c: char| c.is_ascii_digit()).unwrap_or(s.len()));
            match head {
                "B" => Reg::B(
                    tail.parse()
                        .map_err(|_| parse_err(line, format!("bad buffer `{s}`")))?,
                ),
                "x" => Reg::X(parse_index(tail, line)?),
                "h" => Reg::H(parse_index(tail, line)?),
                "y" => Reg::Y(parse_index(tail, line)?),
                _ => return Err(parse_err(line, format!("unknown register `{s}`"))),
            }
        }
    })
}

fn parse_operand(s: &str, line: usize) -> Result<Operand> {
    let (name, shape) = match s.split_once(':') {
        Some((name, shape)) => {
            let (r, c) = shape
                .split_once('x')
                .ok_or_else(|| parse_err(line, format!("bad shape `{shape}`")))?;
            (name, Some((parse_index(r, line)?, parse_index(c, line)?)))
        }
        None => (s, None),
    };
    Ok(Operand {
        reg: parse_reg(name, line)?,
        shape,
    })
}

fn parse_number(s: &str, line: usize) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| parse_err(line, format!("bad number `{s}`")))
}

fn parse_weight(s: &str, line: usize) -> Result<Weight> {
    let Some(body) = s.strip_prefix('[').and_then(|b| b.strip_suffix(']')) else {
        return Ok(Weight::Scalar(parse_number(s, line)?));
    };
    let rows = body
        .split(';')
        .map(|r| r.split(',').map(|v| parse_number(v, line)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(parse_err(line, "ragged weight matrix"));
    }
    Ok(Weight::Matrix(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j])))
}

fn parse_instruction(tokens: &[&str], line: usize) -> Result<Instruction> {
    let arity = |k: usize| -> Result<Vec<Operand>> {
        if tokens.len() != k + 1 {
            return Err(parse_err(
                line,
                format!("{} takes {k} operands, got {}", tokens[0], tokens.len() - 1),
            ));
        }
        tokens[1..].iter().map(|t| parse_operand(t, line)).collect()
    };
    Ok(match tokens[0] {
        "MUL" => {
            let o = arity(3)?;
            Instruction::Mul { dst: o[0], a: o[1], b: o[2] }
        }
        "DIV" => {
            let o = arity(3)?;
            Instruction::Div {
                dst: o[0],
                src: o[1],
                divisor: o[2],
            }
        }
        "TRANSPOSE" => {
            let o = arity(2)?;
            Instruction::Transpose { dst: o[0], src: o[1] }
        }
        "MAP" => {
            let o = arity(2)?;
            Instruction::Map { dst: o[0], src: o[1] }
        }
        "AFF" => {
            if tokens.len() != 6 {
                return Err(parse_err(line, "AFF takes dst, two sources and two weights"));
            }
            Instruction::Aff {
                dst: parse_operand(tokens[1], line)?,
                a: parse_operand(tokens[2], line)?,
                b: parse_operand(tokens[3], line)?,
                w1: parse_weight(tokens[4], line)?,
                w2: parse_weight(tokens[5], line)?,
            }
        }
        op => return Err(parse_err(line, format!("unknown opcode `{op}`"))),
    })
}

/// Parses the text produced by `Program`'s `Display`.
pub fn parse_program(text: &str) -> Result<Program> {
    let mut header: Option<(Mode, usize, usize)> = None;
    let mut trace = false;
    let mut instructions = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = content.split_whitespace().collect();
        match tokens[0] {
            ".program" => {
                if tokens.len() != 4 {
                    return Err(parse_err(line, "expected `.program <mode> n=<n> N=<N>`"));
                }
                let mode = match tokens[1] {
                    "kf" => Mode::Kf,
                    "dual-kf" => Mode::DualKf,
                    m => return Err(parse_err(line, format!("unknown mode `{m}`"))),
                };
                let field = |tok: &str, key: &str| -> Result<usize> {
                    let v = tok
                        .strip_prefix(key)
                        .ok_or_else(|| parse_err(line, format!("expected `{key}<value>`")))?;
                    parse_index(v, line)
                };
                header = Some((mode, field(tokens[2], "n=")?, field(tokens[3], "N=")?));
            }
            ".trace" => trace = true,
            _ => {
                if header.is_none() {
                    return Err(parse_err(line, "instruction before `.program` header"));
                }
                instructions.push(parse_instruction(&tokens, line)?);
            }
        }
    }
    let (mode, n, horizon) = header.ok_or_else(|| Error::Parse("missing `.program` header".into()))?;
    Ok(Program {
        n,
        horizon,
        mode,
        instructions,
        trace,
    })
}
