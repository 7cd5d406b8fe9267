//! Random system generation and curriculum schedules.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::{simulate, standard_normal_matrix, standard_normal_vector, SystemParams, Trajectory};

/// Haar-distributed orthonormal matrix: QR of a Gaussian matrix with the
/// signs of `diag(R)` folded back into `Q`.
pub fn sample_orthonormal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    assert!(n >= 1, "orthonormal sample needs n >= 1");
    let g = standard_normal_matrix(n, n, rng);
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// `F = (1 - alpha) I + alpha U_F`.
pub fn sample_f_strategy1<R: Rng + ?Sized>(n: usize, alpha: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Range {
            name: "alpha",
            value: alpha,
            allowed: "[0, 1]",
        });
    }
    let u = sample_orthonormal(n, rng);
    Ok(DMatrix::identity(n, n) * (1.0 - alpha) + u * alpha)
}

/// `U diag(s) U^T`.
pub fn conjugate_diagonal(u: &DMatrix<f64>, diag: &DVector<f64>) -> DMatrix<f64> {
    let scaled = DMatrix::from_fn(u.nrows(), u.ncols(), |i, j| u[(i, j)] * diag[j]);
    let out = scaled * u.transpose();
    (&out + out.transpose()) * 0.5
}

fn symmetric_uniform_spectrum<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let u = sample_orthonormal(n, rng);
    let s = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..=1.0));
    conjugate_diagonal(&u, &s)
}

/// `F = U_F Σ_F U_F^T` with `Σ_F` entries from `U[-1, 1]`.
pub fn sample_f_strategy2<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    symmetric_uniform_spectrum(n, rng)
}

/// `U Σ U^T` with `Σ` entries from `U[0, cap]`.
pub fn sample_covariance<R: Rng + ?Sized>(n: usize, sigma2_cap: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    check_cap(sigma2_cap)?;
    let u = sample_orthonormal(n, rng);
    let s = DVector::from_fn(n, |_, _| uniform_upto(sigma2_cap, rng));
    Ok(conjugate_diagonal(&u, &s))
}

/// Diagonal `R` with entries from `U[0, cap]`.
pub fn sample_r<R: Rng + ?Sized>(m: usize, sigma2_cap: f64, rng: &mut R) -> Result<DMatrix<f64>> {
    check_cap(sigma2_cap)?;
    let d = DVector::from_fn(m, |_, _| uniform_upto(sigma2_cap, rng));
    Ok(DMatrix::from_diagonal(&d))
}

/// Control matrix `B = U_B Σ_B U_B^T`, `Σ_B` entries from `U[-1, 1]`.
pub fn sample_b<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    symmetric_uniform_spectrum(n, rng)
}

/// Standard Gaussian controls normalized to unit length.
pub fn sample_controls<R: Rng + ?Sized>(n: usize, n_steps: usize, rng: &mut R) -> Vec<DVector<f64>> {
    (0..n_steps)
        .map(|_| loop {
            let v = standard_normal_vector(n, rng);
            let norm = v.norm();
            if norm > 0.0 {
                break v / norm;
            }
        })
        .collect()
}

fn check_cap(cap: f64) -> Result<()> {
    if cap >= 0.0 && cap.is_finite() {
        Ok(())
    } else {
        Err(Error::Range {
            name: "sigma2_cap",
            value: cap,
            allowed: "[0, inf)",
        })
    }
}

fn uniform_upto<R: Rng + ?Sized>(cap: f64, rng: &mut R) -> f64 {
    if cap == 0.0 {
        0.0
    } else {
        rng.gen_range(0.0..=cap)
    }
}

/// A value as a function of the training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    Constant {
        value: f64,
    },
    /// Linear interpolation from `start` to `end` over `ramp_steps`, then flat.
    LinearRamp {
        start: f64,
        end: f64,
        ramp_steps: u64,
    },
    /// `start + increment * floor(step / period)`, capped.
    Staircase {
        start: f64,
        increment: f64,
        period: u64,
        cap: f64,
    },
}

impl Schedule {
    pub fn value(&self, step: u64) -> f64 {
        match *self {
            Schedule::Constant { value } => value,
            Schedule::LinearRamp { start, end, ramp_steps } => {
                if ramp_steps == 0 || step >= ramp_steps {
                    end
                } else {
                    start + (end - start) * (step as f64 / ramp_steps as f64)
                }
            }
            Schedule::Staircase {
                start,
                increment,
                period,
                cap,
            } => {
                let stairs = if period == 0 { 0 } else { step / period };
                (start + increment * stairs as f64).min(cap)
            }
        }
    }

    /// Noise-cap ramp: 0 to 0.025 over 100000 steps.
    pub fn noise_ramp() -> Self {
        Schedule::LinearRamp {
            start: 0.0,
            end: 0.025,
            ramp_steps: 100_000,
        }
    }

    /// Strategy-1 mixing ramp: 0 to 1 over 50000 steps.
    pub fn alpha_ramp() -> Self {
        Schedule::LinearRamp {
            start: 0.0,
            end: 1.0,
            ramp_steps: 50_000,
        }
    }

    /// Context-length curriculum: 10, +2 every 2000 steps, capped at 40.
    pub fn context_length_curriculum() -> Self {
        Schedule::Staircase {
            start: 10.0,
            increment: 2.0,
            period: 2000,
            cap: 40.0,
        }
    }
}

/// How Strategy 1 picks its mixing weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum AlphaMode {
    /// Fresh `U[0, 1]` draw per example.
    Uniform,
    Scheduled { schedule: Schedule },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// `(1 - alpha) I + alpha U`.
    MixedRotation,
    /// `U Σ U^T`, `Σ ~ U[-1, 1]`.
    SymmetricStable,
}

impl Strategy {
    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            1 => Ok(Strategy::MixedRotation),
            2 => Ok(Strategy::SymmetricStable),
            _ => Err(Error::Config(format!("unknown strategy {i}, expected 1 or 2"))),
        }
    }
}

/// Everything needed to draw one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n: usize,
    pub m: usize,
    pub strategy: Strategy,
    pub sigma_q2: Schedule,
    pub sigma_r2: Schedule,
    pub alpha: AlphaMode,
    pub context_length: Schedule,
    #[serde(default)]
    pub with_control: bool,
    pub seed: u64,
}

impl SamplerConfig {
    /// Evaluation defaults: n=8, scalar measurements, both caps 0.025, N=40.
    pub fn evaluation(strategy: Strategy, seed: u64) -> Self {
        Self {
            n: 8,
            m: 1,
            strategy,
            sigma_q2: Schedule::Constant { value: 0.025 },
            sigma_r2: Schedule::Constant { value: 0.025 },
            alpha: AlphaMode::Uniform,
            context_length: Schedule::Constant { value: 40.0 },
            with_control: false,
            seed,
        }
    }

    /// Training curricula for all scheduled quantities.
    pub fn training(n: usize, m: usize, strategy: Strategy, seed: u64) -> Self {
        Self {
            n,
            m,
            strategy,
            sigma_q2: Schedule::noise_ramp(),
            sigma_r2: Schedule::noise_ramp(),
            alpha: AlphaMode::Scheduled {
                schedule: Schedule::alpha_ramp(),
            },
            context_length: Schedule::context_length_curriculum(),
            with_control: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::Config(format!("dimensions must be positive (n={}, m={})", self.n, self.m)));
        }
        for (name, s) in [("sigma_q2", &self.sigma_q2), ("sigma_r2", &self.sigma_r2)] {
            if !schedule_within(s, 0.0, f64::INFINITY) {
                return Err(Error::Config(format!("{name} schedule must stay nonnegative")));
            }
        }
        if let AlphaMode::Scheduled { schedule } = &self.alpha {
            if !schedule_within(schedule, 0.0, 1.0) {
                return Err(Error::Config("alpha schedule must stay within [0, 1]".into()));
            }
        }
        if !schedule_within(&self.context_length, 1.0, f64::INFINITY) {
            return Err(Error::Config("context length schedule must be at least 1".into()));
        }
        Ok(())
    }

    pub fn context_length_at(&self, step: u64) -> usize {
        self.context_length.value(step).round() as usize
    }

    /// RNG for example `index`, independent of generation order.
    pub fn example_rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

fn schedule_within(s: &Schedule, lo: f64, hi: f64) -> bool {
    let endpoints = match *s {
        Schedule::Constant { value } => vec![value],
        Schedule::LinearRamp { start, end, .. } => vec![start, end],
        Schedule::Staircase { start, cap, .. } => vec![start, cap],
    };
    endpoints.iter().all(|v| *v >= lo && *v <= hi)
}

/// Draws one system and simulates it with all schedules evaluated at `step`.
pub fn sample_example<R: Rng + ?Sized>(
    cfg: &SamplerConfig,
    step: u64,
    rng: &mut R,
) -> Result<(SystemParams, Trajectory)> {
    cfg.validate()?;
    let (n, m) = (cfg.n, cfg.m);
    let n_steps = cfg.context_length_at(step);

    let f = match cfg.strategy {
        Strategy::MixedRotation => {
            let alpha = match cfg.alpha {
                AlphaMode::Uniform => rng.gen_range(0.0..=1.0),
                AlphaMode::Scheduled { schedule } => schedule.value(step).clamp(0.0, 1.0),
            };
            sample_f_strategy1(n, alpha, rng)?
        }
        Strategy::SymmetricStable => sample_f_strategy2(n, rng),
    };
    let q = sample_covariance(n, cfg.sigma_q2.value(step), rng)?;
    let r = sample_r(m, cfg.sigma_r2.value(step), rng)?;
    let h_seq = (0..n_steps).map(|_| standard_normal_matrix(m, n, rng)).collect();
    let (b, u_seq) = if cfg.with_control {
        (Some(sample_b(n, rng)), Some(sample_controls(n, n_steps, rng)))
    } else {
        (None, None)
    };
    let params = SystemParams::new(f, q, r, h_seq, b, u_seq)?;
    let sim_seed: u64 = rng.gen();
    let traj = simulate(&params, None, n_steps, sim_seed)?;
    Ok((params, traj))
}
