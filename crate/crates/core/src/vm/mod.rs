//! Register/tape machine over `A_cat = [A_append, A_input]`.
//!
//! Every register names a rectangular region of the tape. Instructions read
//! operands in row-major order, optionally reshaped by a per-use shape, and
//! write their result into the destination region.

mod asm;
mod programs;

pub use asm::parse_program;
pub use programs::{compile_dual_kf_program, compile_dual_kf_program_with, compile_kf_program, DualOptions};

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::codec::{decode, ContextMatrix, Geometry, Scheme};
use crate::error::{Error, Result};
use crate::filters::{unvec_row_major, vec_row_major, MIN_DENOMINATOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Kf,
    DualKf,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Kf => "kf",
            Mode::DualKf => "dual-kf",
        }
    }
}

/// Register names. `X(0)` is the initial state slot, `X(t)` the state
/// estimate written at step `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Reg {
    F,
    Q,
    Sigma,
    B(u8),
    FHat,
    X(usize),
    H(usize),
    Y(usize),
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reg::F => f.write_str("F"),
            Reg::Q => f.write_str("Q"),
            Reg::Sigma => f.write_str("sigma"),
            Reg::B(k) => write!(f, "B{k}"),
            Reg::FHat => f.write_str("fhat"),
            Reg::X(t) => write!(f, "x{t}"),
            Reg::H(t) => write!(f, "h{t}"),
            Reg::Y(t) => write!(f, "y{t}"),
        }
    }
}

/// A rectangular block of the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub row: usize,
    pub col: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Region {
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row..self.row + self.rows).contains(&row) && (self.col..self.col + self.cols).contains(&col)
    }
}

/// Register table for one `(n, N, mode)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub n: usize,
    pub horizon: usize,
    pub mode: Mode,
    pub rows: usize,
    pub append_cols: usize,
    pub input: Geometry,
    regions: BTreeMap<Reg, Region>,
}

impl Layout {
    /// Buffers of `A_append` are laid out left to right from row 0.
    pub fn new(n: usize, horizon: usize, mode: Mode, input_scheme: Scheme) -> Result<Self> {
        let expected = match mode {
            Mode::Kf => matches!(input_scheme, Scheme::Scalar | Scheme::ScalarNoCov),
            Mode::DualKf => input_scheme == Scheme::ScalarNoParams,
        };
        if !expected {
            return Err(Error::Config(format!(
                "{} tapes cannot be built from {input_scheme} contexts",
                mode.name()
            )));
        }
        let input = Geometry::new(input_scheme, n, 1, horizon)?;
        let n2 = n * n;
        let mut buffers: Vec<(Reg, usize, usize)> = Vec::new();
        if mode == Mode::DualKf {
            buffers.push((Reg::F, n, n));
        }
        buffers.extend([
            (Reg::B(1), n, n),
            (Reg::B(2), n, n),
            (Reg::B(3), 1, n),
            (Reg::B(4), n, 1),
            (Reg::B(5), 1, 1),
            (Reg::B(6), 1, 1),
            (Reg::B(7), 1, 1),
            (Reg::B(8), n, 1),
            (Reg::B(9), n, n),
        ]);
        if mode == Mode::DualKf {
            buffers.extend([
                (Reg::B(10), n, n2),
                (Reg::B(11), 1, n2),
                (Reg::B(12), n2, n2),
                (Reg::B(13), n2, 1),
                (Reg::B(14), n2, n2),
                (Reg::B(15), 1, n),
                (Reg::B(16), 1, 1),
                (Reg::B(17), n2, 1),
                (Reg::FHat, n2, 1),
            ]);
        }
        let mut regions = BTreeMap::new();
        let mut col = 0;
        for (reg, rows, cols) in buffers {
            regions.insert(reg, Region { row: 0, col, rows, cols });
            col += cols;
        }
        let append_cols = col;
        let at = |row, c, rows, cols| Region {
            row,
            col: append_cols + c,
            rows,
            cols,
        };
        if let Some(fc) = input.f_col() {
            regions.insert(Reg::F, at(1, fc, n, n));
        }
        regions.insert(Reg::Q, at(1, input.q_col(), n, n));
        regions.insert(Reg::Sigma, at(0, input.sigma_col(), 1, 1));
        regions.insert(Reg::X(0), at(1, input.sigma_col(), n, 1));
        for t in 1..=horizon {
            regions.insert(Reg::H(t), at(1, input.h_col(t), n, 1));
            regions.insert(Reg::Y(t), at(0, input.y_col(t), 1, 1));
            regions.insert(Reg::X(t), at(1, input.y_col(t), n, 1));
        }
        let rows = (n + 1).max(if mode == Mode::DualKf { n2 } else { 0 });
        Ok(Self {
            n,
            horizon,
            mode,
            rows,
            append_cols,
            input,
            regions,
        })
    }

    pub fn cols(&self) -> usize {
        self.append_cols + self.input.cols()
    }

    pub fn region(&self, reg: Reg) -> Option<Region> {
        self.regions.get(&reg).copied()
    }

    pub fn registers(&self) -> impl Iterator<Item = (Reg, Region)> + '_ {
        self.regions.iter().map(|(r, g)| (*r, *g))
    }
}

/// A register use with an optional reshaping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Operand {
    pub reg: Reg,
    pub shape: Option<(usize, usize)>,
}

impl Operand {
    pub fn shaped(reg: Reg, rows: usize, cols: usize) -> Self {
        Self {
            reg,
            shape: Some((rows, cols)),
        }
    }
}

impl From<Reg> for Operand {
    fn from(reg: Reg) -> Self {
        Self { reg, shape: None }
    }
}

/// Weight of an affine instruction; a scalar `c` stands for `c·I`.
#[derive(Debug, Clone, PartialEq)]
pub enum Weight {
    Scalar(f64),
    Matrix(DMatrix<f64>),
}

impl Weight {
    fn shape_of(&self, input: (usize, usize)) -> Option<(usize, usize)> {
        match self {
            Weight::Scalar(_) => Some(input),
            Weight::Matrix(w) => (w.ncols() == input.0).then_some((w.nrows(), input.1)),
        }
    }

    fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Weight::Scalar(c) => m * *c,
            Weight::Matrix(w) => w * m,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Instruction {
    Mul { dst: Operand, a: Operand, b: Operand },
    Div { dst: Operand, src: Operand, divisor: Operand },
    Aff { dst: Operand, a: Operand, b: Operand, w1: Weight, w2: Weight },
    Transpose { dst: Operand, src: Operand },
    Map { dst: Operand, src: Operand },
}

impl Instruction {
    pub fn mul(dst: impl Into<Operand>, a: impl Into<Operand>, b: impl Into<Operand>) -> Self {
        Instruction::Mul {
            dst: dst.into(),
            a: a.into(),
            b: b.into(),
        }
    }

    pub fn div(dst: impl Into<Operand>, src: impl Into<Operand>, divisor: impl Into<Operand>) -> Self {
        Instruction::Div {
            dst: dst.into(),
            src: src.into(),
            divisor: divisor.into(),
        }
    }

    pub fn aff(dst: impl Into<Operand>, a: impl Into<Operand>, b: impl Into<Operand>, w1: f64, w2: f64) -> Self {
        Instruction::Aff {
            dst: dst.into(),
            a: a.into(),
            b: b.into(),
            w1: Weight::Scalar(w1),
            w2: Weight::Scalar(w2),
        }
    }

    pub fn transpose(dst: impl Into<Operand>, src: impl Into<Operand>) -> Self {
        Instruction::Transpose {
            dst: dst.into(),
            src: src.into(),
        }
    }

    pub fn map(dst: impl Into<Operand>, src: impl Into<Operand>) -> Self {
        Instruction::Map {
            dst: dst.into(),
            src: src.into(),
        }
    }

    pub fn opcode(&self) -> &'static str {
        match self {
            Instruction::Mul { .. } => "MUL",
            Instruction::Div { .. } => "DIV",
            Instruction::Aff { .. } => "AFF",
            Instruction::Transpose { .. } => "TRANSPOSE",
            Instruction::Map { .. } => "MAP",
        }
    }

    pub fn dst(&self) -> Operand {
        match self {
            Instruction::Mul { dst, .. }
            | Instruction::Div { dst, .. }
            | Instruction::Aff { dst, .. }
            | Instruction::Transpose { dst, .. }
            | Instruction::Map { dst, .. } => *dst,
        }
    }

    pub fn sources(&self) -> Vec<Operand> {
        match self {
            Instruction::Mul { a, b, .. } | Instruction::Aff { a, b, .. } => vec![*a, *b],
            Instruction::Div { src, divisor, .. } => vec![*src, *divisor],
            Instruction::Transpose { src, .. } | Instruction::Map { src, .. } => vec![*src],
        }
    }
}

/// A straight-line program for a fixed `(n, N, mode)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub n: usize,
    pub horizon: usize,
    pub mode: Mode,
    pub instructions: Vec<Instruction>,
    pub trace: bool,
}

impl Program {
    /// Indices of the instructions that write the observation prediction
    /// `h_t x̂⁻_t`, one per step.
    pub fn observation_points(&self) -> Vec<usize> {
        self.instructions
            .iter()
            .enumerate()
            .filter_map(|(i, ins)| match ins {
                Instruction::Mul { dst, a, .. } if dst.reg == Reg::B(7) && matches!(a.reg, Reg::H(_)) => Some(i),
                _ => None,
            })
            .collect()
    }

    /// Checks every operand against `layout`; all shape errors surface here.
    pub fn validate(&self, layout: &Layout) -> Result<()> {
        if (self.n, self.horizon, self.mode) != (layout.n, layout.horizon, layout.mode) {
            return Err(Error::Program {
                index: 0,
                message: format!(
                    "program is for n={}, N={}, {} but the tape is for n={}, N={}, {}",
                    self.n,
                    self.horizon,
                    self.mode.name(),
                    layout.n,
                    layout.horizon,
                    layout.mode.name()
                ),
            });
        }
        for (index, ins) in self.instructions.iter().enumerate() {
            check_instruction(ins, layout).map_err(|message| Error::Program { index, message })?;
        }
        Ok(())
    }
}

fn operand_shape(op: &Operand, layout: &Layout) -> std::result::Result<(usize, usize), String> {
    let region = layout
        .region(op.reg)
        .ok_or_else(|| format!("register {} does not exist in this layout", op.reg))?;
    match op.shape {
        None => Ok(region.shape()),
        Some((r, c)) if r * c == region.len() => Ok((r, c)),
        Some((r, c)) => Err(format!(
            "register {} has {} entries and cannot be viewed as {r}x{c}",
            op.reg,
            region.len()
        )),
    }
}

fn mul_shape(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    if a.1 == b.0 {
        Some((a.0, b.1))
    } else if a == (1, 1) {
        Some(b)
    } else if b == (1, 1) {
        Some(a)
    } else {
        None
    }
}

fn map_shape(src: (usize, usize), dst: (usize, usize)) -> bool {
    let len = src.0 * src.1;
    let vector = src.0 == 1 || src.1 == 1;
    vector && (dst == (len, len * len) || dst.0 * dst.0 == len && dst.0 == dst.1)
}

fn check_instruction(ins: &Instruction, layout: &Layout) -> std::result::Result<(), String> {
    let dst = operand_shape(&ins.dst(), layout)?;
    let srcs = ins
        .sources()
        .iter()
        .map(|s| operand_shape(s, layout))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let fmt = |s: (usize, usize)| format!("{}x{}", s.0, s.1);
    let expected = match ins {
        Instruction::Mul { .. } => mul_shape(srcs[0], srcs[1])
            .ok_or_else(|| format!("cannot multiply {} by {}", fmt(srcs[0]), fmt(srcs[1])))?,
        Instruction::Div { .. } => {
            if srcs[1] != (1, 1) {
                return Err(format!("divisor must be 1x1, got {}", fmt(srcs[1])));
            }
            srcs[0]
        }
        Instruction::Aff { w1, w2, .. } => {
            let s1 = w1
                .shape_of(srcs[0])
                .ok_or_else(|| format!("W1 does not conform to {}", fmt(srcs[0])))?;
            let s2 = w2
                .shape_of(srcs[1])
                .ok_or_else(|| format!("W2 does not conform to {}", fmt(srcs[1])))?;
            if s1 != s2 {
                return Err(format!("affine terms have shapes {} and {}", fmt(s1), fmt(s2)));
            }
            s1
        }
        Instruction::Transpose { .. } => (srcs[0].1, srcs[0].0),
        Instruction::Map { .. } => {
            if !map_shape(srcs[0], dst) {
                return Err(format!("MAP cannot turn {} into {}", fmt(srcs[0]), fmt(dst)));
            }
            dst
        }
    };
    if expected != dst {
        return Err(format!("result is {} but destination is {}", fmt(expected), fmt(dst)));
    }
    Ok(())
}

/// `A_cat` together with its register table.
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    pub data: DMatrix<f64>,
    pub layout: Layout,
}

impl Tape {
    /// Zero tape with initialized buffers and no input.
    pub fn blank(layout: Layout) -> Self {
        let mut tape = Self {
            data: DMatrix::zeros(layout.rows, layout.cols()),
            layout,
        };
        let n = tape.layout.n;
        tape.set(Reg::B(1), &DMatrix::identity(n, n)).expect("B1 exists");
        if tape.layout.mode == Mode::DualKf {
            tape.set(Reg::F, &DMatrix::identity(n, n)).expect("F exists");
            tape.set(Reg::B(12), &DMatrix::identity(n * n, n * n)).expect("B12 exists");
            let fhat = vec_row_major(&DMatrix::identity(n, n));
            tape.set(Reg::FHat, &DMatrix::from_column_slice(n * n, 1, fhat.as_slice()))
                .expect("fhat exists");
        }
        tape
    }

    fn region(&self, reg: Reg) -> Result<Region> {
        self.layout
            .region(reg)
            .ok_or_else(|| Error::Config(format!("register {reg} does not exist in this layout")))
    }

    /// Register contents in their declared shape.
    pub fn get(&self, reg: Reg) -> Result<DMatrix<f64>> {
        let g = self.region(reg)?;
        Ok(self.data.view((g.row, g.col), (g.rows, g.cols)).into_owned())
    }

    pub fn set(&mut self, reg: Reg, value: &DMatrix<f64>) -> Result<()> {
        let g = self.region(reg)?;
        if value.shape() != g.shape() {
            return Err(crate::error::dim_err(format!("register {reg}"), g.shape(), value.shape()));
        }
        self.data.view_mut((g.row, g.col), (g.rows, g.cols)).copy_from(value);
        Ok(())
    }

    fn read(&self, op: &Operand) -> DMatrix<f64> {
        let g = self.layout.region(op.reg).expect("validated operand");
        let (r, c) = op.shape.unwrap_or(g.shape());
        let block = self.data.view((g.row, g.col), (g.rows, g.cols));
        if (r, c) == g.shape() {
            return block.into_owned();
        }
        let flat: Vec<f64> = block.transpose().iter().copied().collect();
        DMatrix::from_row_slice(r, c, &flat)
    }

    fn write(&mut self, op: &Operand, value: &DMatrix<f64>) {
        let g = self.layout.region(op.reg).expect("validated operand");
        let mut block = self.data.view_mut((g.row, g.col), (g.rows, g.cols));
        if value.shape() == g.shape() {
            block.copy_from(value);
        } else {
            let flat: Vec<f64> = value.transpose().iter().copied().collect();
            block.copy_from(&DMatrix::from_row_slice(g.rows, g.cols, &flat));
        }
    }

    fn exec(&mut self, ins: &Instruction, index: usize) -> Result<()> {
        let value = match ins {
            Instruction::Mul { a, b, .. } => {
                let (a, b) = (self.read(a), self.read(b));
                if a.ncols() == b.nrows() {
                    a * b
                } else if a.shape() == (1, 1) {
                    b * a[0]
                } else {
                    a * b[0]
                }
            }
            Instruction::Div { src, divisor, .. } => {
                let d = self.read(divisor)[0];
                if !(d.abs() > MIN_DENOMINATOR) {
                    return Err(Error::Runtime {
                        index,
                        message: format!("division by {d:e}"),
                    });
                }
                self.read(src) / d
            }
            Instruction::Aff { a, b, w1, w2, .. } => w1.apply(&self.read(a)) + w2.apply(&self.read(b)),
            Instruction::Transpose { src, .. } => self.read(src).transpose(),
            Instruction::Map { dst, src } => {
                let s = self.read(src);
                let v = DVector::from_iterator(s.len(), s.transpose().iter().copied());
                let g = self.layout.region(dst.reg).expect("validated operand");
                let (rows, _) = dst.shape.unwrap_or(g.shape());
                if v.len() == rows {
                    crate::filters::regressor_blocks(&v)
                } else {
                    unvec_row_major(&v, rows).map_err(|e| Error::Runtime {
                        index,
                        message: e.to_string(),
                    })?
                }
            }
        };
        self.write(&ins.dst(), &value);
        Ok(())
    }
}

/// Places `ctx` after a freshly initialized `A_append`.
pub fn build_tape(ctx: &ContextMatrix, mode: Mode) -> Result<Tape> {
    if ctx.m != 1 {
        return Err(Error::Config(format!(
            "tapes need scalar measurements, got m={}",
            ctx.m
        )));
    }
    let layout = Layout::new(ctx.n, ctx.horizon, mode, ctx.scheme)?;
    decode(ctx)?;
    let mut tape = Tape::blank(layout);
    let c0 = tape.layout.append_cols;
    tape.data
        .view_mut((0, c0), (ctx.data.nrows(), ctx.data.ncols()))
        .copy_from(&ctx.data);
    Ok(tape)
}

/// One destination write.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub index: usize,
    pub dst: Reg,
    /// Destination region after the write, in its declared shape.
    pub value: DMatrix<f64>,
}

/// Validates `program` against `tape` and runs it. The trace is empty unless
/// `program.trace` is set.
pub fn run_program(tape: &mut Tape, program: &Program) -> Result<Vec<TraceEntry>> {
    let mut trace = Vec::new();
    execute(tape, program, |index, reg, tape| {
        if program.trace {
            trace.push(TraceEntry {
                index,
                dst: reg,
                value: tape.get(reg).expect("validated register"),
            });
        }
    })?;
    Ok(trace)
}

fn execute(tape: &mut Tape, program: &Program, mut hook: impl FnMut(usize, Reg, &Tape)) -> Result<()> {
    program.validate(&tape.layout)?;
    for (index, ins) in program.instructions.iter().enumerate() {
        tape.exec(ins, index)?;
        hook(index, ins.dst().reg, tape);
    }
    Ok(())
}

/// Result of running a filter program over a prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct VmRun {
    /// `predictions[t - 1] = h_t x̂⁻_t`.
    pub predictions: Vec<f64>,
    /// `x̂_0..x̂_N`.
    pub states: Vec<DVector<f64>>,
    pub tape: Tape,
}

/// Builds the tape for `ctx`, runs `program` and collects the observation
/// predictions and state estimates.
pub fn run_filter_program(ctx: &ContextMatrix, program: &Program) -> Result<VmRun> {
    let mut tape = build_tape(ctx, program.mode)?;
    let points = program.observation_points();
    let mut predictions = Vec::with_capacity(points.len());
    let mut next = points.iter().peekable();
    execute(&mut tape, program, |index, _, tape| {
        if next.peek() == Some(&&index) {
            next.next();
            predictions.push(tape.get(Reg::B(7)).expect("B7 exists")[0]);
        }
    })?;
    let states = (0..=program.horizon)
        .map(|t| tape.get(Reg::X(t)).map(|m| m.column(0).into_owned()))
        .collect::<Result<_>>()?;
    Ok(VmRun {
        predictions,
        states,
        tape,
    })
}
