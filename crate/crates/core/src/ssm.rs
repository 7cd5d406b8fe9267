//! Linear state-space model types and trajectory simulation.
//!
//! The model is
//!
//! ```text
//! x_{k+1} = F x_k + B u_k + q_k,   q_k ~ N(0, Q)
//! y_t     = H_t x_t + r_t,         r_t ~ N(0, R),  t = 1..N
//! ```
//!
//! `u_seq[k]` drives the transition `x_k -> x_{k+1}`, so the control sitting next
//! to `H_t` in a prompt is `u_seq[t - 1]`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_FLOOR: f64 = -1e-10;

/// One sampled dynamical system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    pub f: DMatrix<f64>,
    pub q: DMatrix<f64>,
    /// Diagonal measurement noise covariance.
    pub r: DMatrix<f64>,
    pub h_seq: Vec<DMatrix<f64>>,
    pub b: Option<DMatrix<f64>>,
    pub u_seq: Option<Vec<DVector<f64>>>,
}

impl SystemParams {
    /// Builds and validates a parameter set.
    pub fn new(
        f: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        h_seq: Vec<DMatrix<f64>>,
        b: Option<DMatrix<f64>>,
        u_seq: Option<Vec<DVector<f64>>>,
    ) -> Result<Self> {
        let params = Self {
            f,
            q,
            r,
            h_seq,
            b,
            u_seq,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn n(&self) -> usize {
        self.f.nrows()
    }

    pub fn m(&self) -> usize {
        self.r.nrows()
    }

    /// Number of measurement steps `N`.
    pub fn horizon(&self) -> usize {
        self.h_seq.len()
    }

    /// Diagonal of `R`.
    pub fn noise_variances(&self) -> DVector<f64> {
        self.r.diagonal()
    }

    /// The `(B, u_{t-1})` pair applied on the transition into step `t` (1-based).
    pub fn control_into(&self, t: usize) -> Option<(&DMatrix<f64>, &DVector<f64>)> {
        match (&self.b, &self.u_seq) {
            (Some(b), Some(u)) if t >= 1 && t <= u.len() => Some((b, &u[t - 1])),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.f.nrows();
        if n == 0 || self.f.ncols() != n {
            return Err(dim_err("F", (n.max(1), n.max(1)), self.f.shape()));
        }
        if self.q.shape() != (n, n) {
            return Err(dim_err("Q", (n, n), self.q.shape()));
        }
        let asym = (&self.q - self.q.transpose()).amax();
        if asym > SYMMETRY_TOL {
            return Err(Error::Config(format!("Q is not symmetric (max |Q - Q^T| = {asym:.3e})")));
        }
        let min_eig = SymmetricEigen::new(self.q.clone()).eigenvalues.min();
        if min_eig < PSD_FLOOR {
            return Err(Error::Config(format!("Q is not positive semidefinite (min eigenvalue {min_eig:.3e})")));
        }

        let m = self.r.nrows();
        if m == 0 || self.r.ncols() != m {
            return Err(dim_err("R", (m.max(1), m.max(1)), self.r.shape()));
        }
        for i in 0..m {
            for j in 0..m {
                let v = self.r[(i, j)];
                if i != j && v != 0.0 {
                    return Err(Error::Config(format!("R must be diagonal, found R[{i},{j}] = {v}")));
                }
                if i == j && !(v >= 0.0) {
                    return Err(Error::Config(format!("R diagonal entry {i} is negative ({v})")));
                }
            }
        }

        for (t, h) in self.h_seq.iter().enumerate() {
            if h.shape() != (m, n) {
                return Err(dim_err(format!("H_{}", t + 1), (m, n), h.shape()));
            }
        }

        match (&self.b, &self.u_seq) {
            (None, None) => {}
            (Some(b), Some(u)) => {
                if b.shape() != (n, n) {
                    return Err(dim_err("B", (n, n), b.shape()));
                }
                if u.len() != self.h_seq.len() {
                    return Err(Error::Config(format!(
                        "u_seq has {} entries but H_seq has {}",
                        u.len(),
                        self.h_seq.len()
                    )));
                }
                for (k, uk) in u.iter().enumerate() {
                    if uk.len() != n {
                        return Err(dim_err(format!("u_{k}"), (n, 1), (uk.len(), 1)));
                    }
                }
            }
            (Some(_), None) => return Err(Error::Config("B is present but u_seq is missing".into())),
            (None, Some(_)) => return Err(Error::Config("u_seq is present but B is missing".into())),
        }
        Ok(())
    }
}

/// Noise draws recorded during simulation, kept for exact replay.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRecord {
    /// `q_0..q_{N-1}`.
    pub process: Vec<DVector<f64>>,
    /// `r_1..r_N`.
    pub measurement: Vec<DVector<f64>>,
}

/// Simulated states `x_0..x_N` and observations `y_1..y_N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub x_seq: Vec<DVector<f64>>,
    pub y_seq: Vec<DVector<f64>>,
    pub seed: u64,
    noise: NoiseRecord,
}

impl Trajectory {
    /// Assembles a trajectory from stored data (no noise annex).
    pub fn from_parts(x_seq: Vec<DVector<f64>>, y_seq: Vec<DVector<f64>>, seed: u64) -> Self {
        Self {
            x_seq,
            y_seq,
            seed,
            noise: NoiseRecord {
                process: Vec::new(),
                measurement: Vec::new(),
            },
        }
    }

    pub fn horizon(&self) -> usize {
        self.y_seq.len()
    }

    pub fn noise(&self) -> &NoiseRecord {
        &self.noise
    }
}

/// Zero-mean Gaussian sampler for a fixed PSD covariance.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    factor: DMatrix<f64>,
}

impl GaussianSampler {
    /// Factors `cov = L L^T`. Cholesky is tried first, then a jittered
    /// Cholesky, then a clamped eigendecomposition for exactly singular inputs.
    pub fn new(cov: &DMatrix<f64>) -> Result<Self> {
        let n = cov.nrows();
        if n == 0 || cov.ncols() != n {
            return Err(dim_err("covariance", (n.max(1), n.max(1)), cov.shape()));
        }
        if cov.iter().all(|&v| v == 0.0) {
            return Ok(Self {
                factor: DMatrix::zeros(n, n),
            });
        }
        if let Some(ch) = cov.clone().cholesky() {
            return Ok(Self { factor: ch.l() });
        }
        let jittered = cov + DMatrix::identity(n, n) * 1e-12;
        if let Some(ch) = jittered.cholesky() {
            return Ok(Self { factor: ch.l() });
        }
        let sym = (cov + cov.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        if eig.eigenvalues.min() < PSD_FLOOR {
            return Err(Error::Numerical {
                message: "covariance is not positive semidefinite".into(),
                condition: None,
            });
        }
        let mut factor = eig.eigenvectors;
        for (j, lambda) in eig.eigenvalues.iter().enumerate() {
            let s = lambda.max(0.0).sqrt();
            factor.column_mut(j).scale_mut(s);
        }
        Ok(Self { factor })
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = standard_normal_vector(self.dim(), rng);
        &self.factor * z
    }
}

pub fn standard_normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

pub fn standard_normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Simulates `n_steps` transitions and measurements.
///
/// When `x0` is `None` the initial state is drawn from `N(0, I)`.
pub fn simulate(params: &SystemParams, x0: Option<&DVector<f64>>, n_steps: usize, seed: u64) -> Result<Trajectory> {
    if n_steps == 0 {
        return Err(Error::Config("simulation horizon must be at least 1".into()));
    }
    params.validate()?;
    if params.horizon() != n_steps {
        return Err(Error::Config(format!(
            "H_seq has {} matrices but {} steps were requested",
            params.horizon(),
            n_steps
        )));
    }
    let n = params.n();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = match x0 {
        Some(x) if x.len() != n => return Err(dim_err("x0", (n, 1), (x.len(), 1))),
        Some(x) => x.clone(),
        None => standard_normal_vector(n, &mut rng),
    };

    let process = GaussianSampler::new(&params.q)?;
    let meas_sd = params.noise_variances().map(f64::sqrt);

    let mut x_seq = Vec::with_capacity(n_steps + 1);
    let mut y_seq = Vec::with_capacity(n_steps);
    let mut q_draws = Vec::with_capacity(n_steps);
    let mut r_draws = Vec::with_capacity(n_steps);
    x_seq.push(x0);

    for t in 1..=n_steps {
        let q = process.sample(&mut rng);
        let mut x = &params.f * &x_seq[t - 1] + &q;
        if let Some((b, u)) = params.control_into(t) {
            x += b * u;
        }
        let z = standard_normal_vector(meas_sd.len(), &mut rng);
        let r = meas_sd.component_mul(&z);
        let y = &params.h_seq[t - 1] * &x + &r;
        x_seq.push(x);
        y_seq.push(y);
        q_draws.push(q);
        r_draws.push(r);
    }

    Ok(Trajectory {
        x_seq,
        y_seq,
        seed,
        noise: NoiseRecord {
            process: q_draws,
            measurement: r_draws,
        },
    })
}
