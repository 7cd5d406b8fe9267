//! The Kalman and dual Kalman recursions as tape programs.

use super::{Instruction as I, Mode, Operand, Program, Reg};
use crate::error::{Error, Result};

const B1: Reg = Reg::B(1);
const B2: Reg = Reg::B(2);
const B3: Reg = Reg::B(3);
const B4: Reg = Reg::B(4);
const B5: Reg = Reg::B(5);
const B6: Reg = Reg::B(6);
const B7: Reg = Reg::B(7);
const B8: Reg = Reg::B(8);
const B9: Reg = Reg::B(9);
const B10: Reg = Reg::B(10);
const B11: Reg = Reg::B(11);
const B12: Reg = Reg::B(12);
const B13: Reg = Reg::B(13);
const B14: Reg = Reg::B(14);
const B15: Reg = Reg::B(15);
const B16: Reg = Reg::B(16);
const B17: Reg = Reg::B(17);

fn check_dims(n: usize, horizon: usize) -> Result<()> {
    if n == 0 || horizon == 0 {
        return Err(Error::Config(format!(
            "programs need n >= 1 and N >= 1, got n={n}, N={horizon}"
        )));
    }
    Ok(())
}

/// One predict/update step on the state; `x̂⁺_{i-1}` sits in `X(i-1)` and the
/// step writes `x̂⁺_i` to `X(i)`.
fn state_step(n: usize, i: usize, out: &mut Vec<I>) {
    let (curr, next, h, y) = (Reg::X(i - 1), Reg::X(i), Reg::H(i), Reg::Y(i));
    out.extend([
        I::transpose(B2, Reg::F),
        I::mul(next, Reg::F, curr),
        I::mul(B1, Reg::F, B1),
        I::mul(B1, B1, B2),
        I::aff(B1, B1, Reg::Q, 1.0, 1.0),
        I::transpose(B3, h),
        I::mul(B4, B1, h),
        I::mul(B5, B3, B4),
        I::aff(B6, B5, Reg::Sigma, 1.0, 1.0),
        I::div(B4, B4, B6),
        I::mul(B7, Operand::shaped(h, 1, n), next),
        I::aff(B7, y, B7, 1.0, -1.0),
        I::mul(B8, B7, B4),
        I::aff(next, next, B8, 1.0, 1.0),
        I::mul(B9, B4, B3),
        I::mul(B9, B9, B1),
        I::aff(B1, B1, B9, 1.0, -1.0),
    ]);
}

/// Kalman filter with scalar measurements over `N` steps.
pub fn compile_kf_program(n: usize, horizon: usize) -> Result<Program> {
    check_dims(n, horizon)?;
    let mut instructions = Vec::with_capacity(17 * horizon);
    for i in 1..=horizon {
        state_step(n, i, &mut instructions);
    }
    Ok(Program {
        n,
        horizon,
        mode: Mode::Kf,
        instructions,
        trace: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DualOptions {
    /// When false the transition estimate is never updated and `F` keeps
    /// whatever the tape holds.
    pub update_transition: bool,
}

impl Default for DualOptions {
    fn default() -> Self {
        Self {
            update_transition: true,
        }
    }
}

pub fn compile_dual_kf_program(n: usize, horizon: usize) -> Result<Program> {
    compile_dual_kf_program_with(n, horizon, DualOptions::default())
}

/// Dual Kalman filter: the state step followed by a scalar-measurement
/// update of `f̂ = vec(F)` with regressor `h X(x̂⁺_{i-1})`.
pub fn compile_dual_kf_program_with(n: usize, horizon: usize, options: DualOptions) -> Result<Program> {
    check_dims(n, horizon)?;
    let mut instructions = Vec::new();
    for i in 1..=horizon {
        state_step(n, i, &mut instructions);
        if !options.update_transition {
            continue;
        }
        instructions.extend([
            I::map(B10, Reg::X(i - 1)),
            I::mul(B11, B3, B10),
            I::transpose(B13, B11),
            I::mul(B11, B11, B12),
            I::mul(B5, B11, B13),
            I::mul(B13, B12, B13),
            I::mul(B15, B3, Reg::Q),
            I::mul(B16, B15, Reg::H(i)),
            I::aff(B5, B5, B16, 1.0, 1.0),
            I::aff(B6, B5, Reg::Sigma, 1.0, 1.0),
            I::div(B13, B13, B6),
            I::mul(B17, B7, B13),
            I::aff(Reg::FHat, Reg::FHat, B17, 1.0, 1.0),
            I::mul(B11, B3, B10),
            I::mul(B14, B13, B11),
            I::mul(B14, B14, B12),
            I::aff(B12, B12, B14, 1.0, -1.0),
            I::map(Reg::F, Reg::FHat),
        ]);
    }
    Ok(Program {
        n,
        horizon,
        mode: Mode::DualKf,
        instructions,
        trace: false,
    })
}
