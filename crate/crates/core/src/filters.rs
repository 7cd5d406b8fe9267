//! Kalman filter recursions: joint matrix update, scalar-measurement update,
//! row-by-row sequential update for diagonal `R`, and the dual filter that
//! also tracks the transition matrix.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::{dim_err, Error, Result};
use crate::ssm::SystemParams;

/// Largest innovation-covariance condition number accepted by [`kf_update`].
pub const MAX_CONDITION: f64 = 1e12;
/// Smallest scalar innovation variance accepted by the scalar updates.
pub const MIN_DENOMINATOR: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Prior,
    Posterior,
}

/// Mean and covariance at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
    pub t: usize,
    pub phase: Phase,
}

impl FilterState {
    /// `x̂_0 = 0`, `P_0 = I`.
    pub fn initial(n: usize) -> Self {
        Self {
            x: DVector::zeros(n),
            p: DMatrix::identity(n, n),
            t: 0,
            phase: Phase::Posterior,
        }
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }
}

pub(crate) fn symmetrize(p: &DMatrix<f64>) -> DMatrix<f64> {
    (p + p.transpose()) * 0.5
}

fn check_square(what: &str, m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.shape() != (n, n) {
        return Err(dim_err(what, (n, n), m.shape()));
    }
    Ok(())
}

/// Prediction step: `x̂⁻ = F x̂⁺ (+ B u)`, `P⁻ = F P⁺ Fᵀ + Q`.
pub fn kf_predict(
    s: &FilterState,
    f: &DMatrix<f64>,
    q: &DMatrix<f64>,
    control: Option<(&DMatrix<f64>, &DVector<f64>)>,
) -> Result<FilterState> {
    let n = s.n();
    check_square("F", f, n)?;
    check_square("Q", q, n)?;
    let mut x = f * &s.x;
    if let Some((b, u)) = control {
        check_square("B", b, n)?;
        if u.len() != n {
            return Err(dim_err("u", (n, 1), (u.len(), 1)));
        }
        x += b * u;
    }
    let p = f * &s.p * f.transpose() + q;
    Ok(FilterState {
        x,
        p: symmetrize(&p),
        t: s.t + 1,
        phase: Phase::Prior,
    })
}

/// Joint update with an `m × m` innovation covariance solve.
pub fn kf_update(s: &FilterState, h: &DMatrix<f64>, r: &DMatrix<f64>, y: &DVector<f64>) -> Result<FilterState> {
    let n = s.n();
    let m = h.nrows();
    if h.ncols() != n {
        return Err(dim_err("H", (m, n), h.shape()));
    }
    check_square("R", r, m)?;
    if y.len() != m {
        return Err(dim_err("y", (m, 1), (y.len(), 1)));
    }

    let ph_t = &s.p * h.transpose();
    let innov_cov = h * &ph_t + r;
    let sv = innov_cov.clone().svd(false, false).singular_values;
    let (smax, smin) = (sv.max(), sv.min());
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(cond < MAX_CONDITION) {
        return Err(Error::Numerical {
            message: "innovation covariance is near-singular".into(),
            condition: Some(cond),
        });
    }
    let lu = innov_cov.lu();
    // K = P Hᵀ S⁻¹, solved as S Kᵀ = H P (S symmetric).
    let k_t = lu.solve(&ph_t.transpose()).ok_or_else(|| Error::Numerical {
        message: "innovation covariance solve failed".into(),
        condition: Some(cond),
    })?;
    let k = k_t.transpose();
    let innovation = y - h * &s.x;
    let x = &s.x + &k * innovation;
    let p = (DMatrix::identity(n, n) - &k * h) * &s.p;
    Ok(FilterState {
        x,
        p: symmetrize(&p),
        t: s.t,
        phase: Phase::Posterior,
    })
}

/// Scalar-measurement update using a single division instead of an inverse.
pub fn kf_update_scalar(s: &FilterState, h: &RowDVector<f64>, sigma2: f64, y: f64) -> Result<FilterState> {
    let n = s.n();
    if h.len() != n {
        return Err(dim_err("h", (1, n), (1, h.len())));
    }
    let ph_t = &s.p * h.transpose();
    let denom = (h * &ph_t)[0] + sigma2;
    if !(denom > MIN_DENOMINATOR) {
        return Err(Error::Numerical {
            message: format!("scalar innovation variance {denom:e} is not positive"),
            condition: None,
        });
    }
    let gain = ph_t / denom;
    let innovation = y - (h * &s.x)[0];
    let x = &s.x + &gain * innovation;
    let p = (DMatrix::identity(n, n) - &gain * h) * &s.p;
    Ok(FilterState {
        x,
        p: symmetrize(&p),
        t: s.t,
        phase: Phase::Posterior,
    })
}

/// Processes the rows of a vector measurement one at a time; requires a
/// diagonal `R` with positive entries.
pub fn kf_update_sequential(
    s: &FilterState,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<FilterState> {
    let n = s.n();
    let m = h.nrows();
    if h.ncols() != n {
        return Err(dim_err("H", (m, n), h.shape()));
    }
    check_square("R", r, m)?;
    if y.len() != m {
        return Err(dim_err("y", (m, 1), (y.len(), 1)));
    }
    for i in 0..m {
        for j in 0..m {
            if i != j && r[(i, j)] != 0.0 {
                return Err(Error::Config("sequential update requires a diagonal R".into()));
            }
        }
        if !(r[(i, i)] > 0.0) {
            return Err(Error::Config(format!(
                "sequential update requires positive noise variances, R[{i},{i}] = {}",
                r[(i, i)]
            )));
        }
    }
    let mut cur = s.clone();
    for j in 0..m {
        cur = kf_update_scalar(&cur, &h.row(j).into_owned(), r[(j, j)], y[j])?;
    }
    Ok(cur)
}

/// `ŷ = H_next (F x̂⁺ + B u)`.
pub fn predict_observation(
    x_post: &DVector<f64>,
    f: &DMatrix<f64>,
    h_next: &DMatrix<f64>,
    control: Option<(&DMatrix<f64>, &DVector<f64>)>,
) -> Result<DVector<f64>> {
    let n = x_post.len();
    check_square("F", f, n)?;
    if h_next.ncols() != n {
        return Err(dim_err("H_next", (h_next.nrows(), n), h_next.shape()));
    }
    let mut x = f * x_post;
    if let Some((b, u)) = control {
        check_square("B", b, n)?;
        if u.len() != n {
            return Err(dim_err("u", (n, 1), (u.len(), 1)));
        }
        x += b * u;
    }
    Ok(h_next * x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdateForm {
    #[default]
    Joint,
    Sequential,
}

/// Per-step output of a forward pass.
#[derive(Debug, Clone)]
pub struct FilterOutput {
    /// Posteriors `x̂⁺_0..x̂⁺_N` (index 0 is the initial state).
    pub filtered: Vec<FilterState>,
    /// Priors `x̂⁻_1..x̂⁻_N`.
    pub priors: Vec<FilterState>,
    /// `predictions[t - 1] = H_t x̂⁻_t`, the forecast of `y_t` from `y_1..y_{t-1}`.
    pub predictions: Vec<DVector<f64>>,
}

/// Forward pass from `x̂_0 = 0`, `P_0 = I`.
pub fn kf_run(params: &SystemParams, y_seq: &[DVector<f64>], form: UpdateForm) -> Result<FilterOutput> {
    kf_run_from(params, y_seq, FilterState::initial(params.n()), form)
}

pub fn kf_run_from(
    params: &SystemParams,
    y_seq: &[DVector<f64>],
    init: FilterState,
    form: UpdateForm,
) -> Result<FilterOutput> {
    if y_seq.len() > params.horizon() {
        return Err(Error::Config(format!(
            "{} observations but only {} measurement matrices",
            y_seq.len(),
            params.horizon()
        )));
    }
    let mut filtered = Vec::with_capacity(y_seq.len() + 1);
    let mut priors = Vec::with_capacity(y_seq.len());
    let mut predictions = Vec::with_capacity(y_seq.len());
    filtered.push(init);
    for (i, y) in y_seq.iter().enumerate() {
        let t = i + 1;
        let h = &params.h_seq[i];
        let prior = kf_predict(&filtered[i], &params.f, &params.q, params.control_into(t))?;
        predictions.push(h * &prior.x);
        let post = match form {
            UpdateForm::Joint => kf_update(&prior, h, &params.r, y)?,
            UpdateForm::Sequential => kf_update_sequential(&prior, h, &params.r, y)?,
        };
        priors.push(prior);
        filtered.push(post);
    }
    Ok(FilterOutput {
        filtered,
        priors,
        predictions,
    })
}

/// Row-major vectorization: `f[i n + j] = F[i, j]`.
pub fn vec_row_major(f: &DMatrix<f64>) -> DVector<f64> {
    let (r, c) = f.shape();
    DVector::from_fn(r * c, |k, _| f[(k / c, k % c)])
}

pub fn unvec_row_major(v: &DVector<f64>, n: usize) -> Result<DMatrix<f64>> {
    if v.len() != n * n {
        return Err(dim_err("vec(F)", (n * n, 1), (v.len(), 1)));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| v[i * n + j]))
}

/// `n × n²` block matrix with `xᵀ` on each block row, so `X vec(F) = F x`.
pub fn regressor_blocks(x: &DVector<f64>) -> DMatrix<f64> {
    let n = x.len();
    let mut out = DMatrix::zeros(n, n * n);
    for i in 0..n {
        for j in 0..n {
            out[(i, i * n + j)] = x[j];
        }
    }
    out
}

/// State filter plus a filter over `f = vec(F)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualFilterState {
    pub state: FilterState,
    pub f_hat: DVector<f64>,
    pub p_f: DMatrix<f64>,
}

impl DualFilterState {
    /// `f̂_0 = vec(I)`, `P_f,0 = I`.
    pub fn initial(n: usize) -> Self {
        Self {
            state: FilterState::initial(n),
            f_hat: vec_row_major(&DMatrix::identity(n, n)),
            p_f: DMatrix::identity(n * n, n * n),
        }
    }

    pub fn transition_estimate(&self) -> DMatrix<f64> {
        let n = self.state.n();
        DMatrix::from_fn(n, n, |i, j| self.f_hat[i * n + j])
    }

    /// Forecast `h F̂ x̂⁺` of the next scalar measurement.
    pub fn predict_observation(&self, h: &RowDVector<f64>) -> f64 {
        (h * (self.transition_estimate() * &self.state.x))[0]
    }
}

/// One dual step for a scalar measurement.
///
/// The state is predicted and updated under the current `F̂`; then `f̂` is
/// updated with regressor `H_f = h X` built from the previous posterior,
/// under measurement noise `R_f = h Q hᵀ + σ²`.
pub fn dual_kf_step(
    s: &DualFilterState,
    h: &RowDVector<f64>,
    sigma2: f64,
    q: &DMatrix<f64>,
    y: f64,
) -> Result<DualFilterState> {
    let n = s.state.n();
    if s.f_hat.len() != n * n || s.p_f.shape() != (n * n, n * n) {
        return Err(dim_err("P_f", (n * n, n * n), s.p_f.shape()));
    }
    let f_est = s.transition_estimate();
    let prior = kf_predict(&s.state, &f_est, q, None)?;
    let state = kf_update_scalar(&prior, h, sigma2, y)?;

    let regressor = h * regressor_blocks(&s.state.x);
    let r_f = (h * q * h.transpose())[0] + sigma2;
    let pf_ht = &s.p_f * regressor.transpose();
    let denom = (&regressor * &pf_ht)[0] + r_f;
    if !(denom > MIN_DENOMINATOR) {
        return Err(Error::Numerical {
            message: format!("transition-filter innovation variance {denom:e} is not positive"),
            condition: None,
        });
    }
    let gain = pf_ht / denom;
    let innovation = y - (&regressor * &s.f_hat)[0];
    let f_hat = &s.f_hat + &gain * innovation;
    let p_f = (DMatrix::identity(n * n, n * n) - &gain * &regressor) * &s.p_f;

    Ok(DualFilterState {
        state,
        f_hat,
        p_f: symmetrize(&p_f),
    })
}

/// Output of a dual forward pass.
#[derive(Debug, Clone)]
pub struct DualOutput {
    /// States after each step, index 0 is the initial state.
    pub states: Vec<DualFilterState>,
    /// `predictions[t - 1] = h_t F̂_{t-1} x̂⁺_{t-1}`.
    pub predictions: Vec<f64>,
}

pub fn dual_kf_run(
    q: &DMatrix<f64>,
    sigma2: f64,
    h_seq: &[RowDVector<f64>],
    y_seq: &[f64],
) -> Result<DualOutput> {
    let n = q.nrows();
    if h_seq.len() != y_seq.len() {
        return Err(Error::Config(format!(
            "{} measurement rows but {} observations",
            h_seq.len(),
            y_seq.len()
        )));
    }
    let mut states = Vec::with_capacity(y_seq.len() + 1);
    let mut predictions = Vec::with_capacity(y_seq.len());
    states.push(DualFilterState::initial(n));
    for (h, &y) in h_seq.iter().zip(y_seq) {
        let cur = states.last().expect("non-empty");
        predictions.push(cur.predict_observation(h));
        let next = dual_kf_step(cur, h, sigma2, q, y)?;
        states.push(next);
    }
    Ok(DualOutput { states, predictions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector, SymmetricEigen};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use crate::sampler::{sample_covariance, sample_f_strategy2};
    use crate::ssm::{simulate, standard_normal_matrix, standard_normal_vector};

    fn state(x: DVector<f64>, p: DMatrix<f64>) -> FilterState {
        FilterState {
            x,
            p,
            t: 1,
            phase: Phase::Prior,
        }
    }

    fn random_spd<R: Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
        let a = standard_normal_matrix(n, n, rng);
        &a * a.transpose() + DMatrix::identity(n, n) * 0.1
    }

    #[test]
    fn predict_identity_keeps_state() {
        let s = state(dvector![1.0, -2.0], dmatrix![2.0, 0.3; 0.3, 1.0]);
        let out = kf_predict(&s, &DMatrix::identity(2, 2), &DMatrix::zeros(2, 2), None).unwrap();
        assert_eq!(out.x, s.x);
        assert_eq!(out.p, s.p);
        let out = kf_predict(&s, &DMatrix::identity(2, 2), &DMatrix::identity(2, 2), None).unwrap();
        assert_eq!(out.p, &s.p + DMatrix::identity(2, 2));
    }

    #[test]
    fn predict_rotation_swaps_variances() {
        let s = state(dvector![0.0, 0.0], dmatrix![1.0, 0.0; 0.0, 2.0]);
        let f = dmatrix![0.0, 1.0; -1.0, 0.0];
        let out = kf_predict(&s, &f, &DMatrix::zeros(2, 2), None).unwrap();
        assert_eq!(out.p, dmatrix![2.0, 0.0; 0.0, 1.0]);
    }

    #[test]
    fn predict_rejects_bad_dimensions() {
        let s = FilterState::initial(2);
        assert!(kf_predict(&s, &DMatrix::identity(3, 3), &DMatrix::zeros(2, 2), None).is_err());
        let b = DMatrix::identity(2, 2);
        let u = dvector![1.0];
        assert!(kf_predict(&s, &DMatrix::identity(2, 2), &DMatrix::zeros(2, 2), Some((&b, &u))).is_err());
    }

    #[test]
    fn update_exact_measurement_limit() {
        let s = state(dvector![0.0, 0.0], DMatrix::identity(2, 2));
        let y = dvector![3.0, -1.0];
        let out = kf_update(&s, &DMatrix::identity(2, 2), &(DMatrix::identity(2, 2) * 1e-15), &y).unwrap();
        assert!((out.x - y).amax() < 1e-6);
    }

    #[test]
    fn zero_innovation_leaves_mean_unchanged() {
        let s = state(dvector![0.4, -1.1], dmatrix![1.0, 0.2; 0.2, 0.5]);
        let h = dmatrix![1.0, 2.0];
        let y = &h * &s.x;
        let out = kf_update(&s, &h, &dmatrix![0.3], &y).unwrap();
        assert_eq!(out.x, s.x);
        let out = kf_update_scalar(&s, &h.row(0).into_owned(), 0.3, y[0]).unwrap();
        assert_eq!(out.x, s.x);
    }

    #[test]
    fn hand_computed_scalar_gain() {
        // K = P hᵀ / (h P hᵀ + σ²) = (1, 0)/2.
        let s = state(dvector![0.0, 0.0], DMatrix::identity(2, 2));
        let h = dmatrix![1.0, 0.0];
        let out = kf_update(&s, &h, &dmatrix![1.0], &dvector![2.0]).unwrap();
        assert!((&out.x - dvector![1.0, 0.0]).amax() < 1e-15);
        assert!((&out.p - dmatrix![0.5, 0.0; 0.0, 1.0]).amax() < 1e-15);
        let sc = kf_update_scalar(&s, &h.row(0).into_owned(), 1.0, 2.0).unwrap();
        assert!((sc.x - &out.x).amax() <= 1e-12);
        assert!((sc.p - &out.p).amax() <= 1e-12);
    }

    #[test]
    fn uninformative_measurement() {
        let s = state(dvector![0.5, 0.7], DMatrix::identity(2, 2));
        let out = kf_update_scalar(&s, &RowDVector::from_vec(vec![1.0, -1.0]), 1e12, 100.0).unwrap();
        assert!((out.x - &s.x).amax() < 1e-9);
    }

    #[test]
    fn near_singular_innovation_is_reported() {
        let s = state(dvector![0.0, 0.0], DMatrix::zeros(2, 2));
        let err = kf_update(&s, &DMatrix::identity(2, 2), &dmatrix![1.0, 0.0; 0.0, 1e-14], &dvector![1.0, 1.0])
            .unwrap_err();
        match err {
            Error::Numerical { condition, .. } => assert!(condition.unwrap() >= MAX_CONDITION),
            e => panic!("unexpected {e}"),
        }
        let err = kf_update_scalar(&s, &RowDVector::from_vec(vec![1.0, 0.0]), 0.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::Numerical { .. }));
    }

    #[test]
    fn scalar_matches_joint_update_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for trial in 0..1000 {
            let n = 1 + trial % 8;
            let s = state(standard_normal_vector(n, &mut rng), random_spd(n, &mut rng));
            let h = standard_normal_matrix(1, n, &mut rng);
            let sigma2 = rng.gen_range(0.01..1.0);
            let y = rng.gen_range(-3.0..3.0);
            let a = kf_update(&s, &h, &dmatrix![sigma2], &dvector![y]).unwrap();
            let b = kf_update_scalar(&s, &h.row(0).into_owned(), sigma2, y).unwrap();
            assert!((a.x - b.x).amax() <= 1e-10 * (1.0 + s.x.amax()));
            assert!((a.p - b.p).amax() <= 1e-10 * (1.0 + s.p.amax()));
        }
    }

    #[test]
    fn sequential_single_row_equals_scalar() {
        let s = state(dvector![1.0, 2.0, 3.0], DMatrix::identity(3, 3) * 0.7);
        let h = dmatrix![0.2, -0.4, 1.0];
        let a = kf_update_sequential(&s, &h, &dmatrix![0.05], &dvector![1.5]).unwrap();
        let b = kf_update_scalar(&s, &h.row(0).into_owned(), 0.05, 1.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sequential_matches_joint_update_for_diagonal_r() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..1000 {
            let n = 4;
            let m = 1 + trial % 4;
            let s = state(standard_normal_vector(n, &mut rng), random_spd(n, &mut rng));
            let h = standard_normal_matrix(m, n, &mut rng);
            let r = DMatrix::from_diagonal(&DVector::from_fn(m, |_, _| rng.gen_range(0.01..1.0)));
            let y = standard_normal_vector(m, &mut rng);
            let a = kf_update(&s, &h, &r, &y).unwrap();
            let b = kf_update_sequential(&s, &h, &r, &y).unwrap();
            assert!((a.x - b.x).amax() <= 1e-8);
            assert!((a.p - b.p).amax() <= 1e-8);
        }
    }

    #[test]
    fn sequential_zero_row_is_a_no_op_for_that_row() {
        let s = state(dvector![1.0, -1.0], dmatrix![1.0, 0.1; 0.1, 2.0]);
        let h = dmatrix![0.0, 0.0; 1.0, 0.5];
        let r = dmatrix![0.1, 0.0; 0.0, 0.2];
        let y = dvector![50.0, 0.3];
        let seq = kf_update_sequential(&s, &h, &r, &y).unwrap();
        let only_second = kf_update_scalar(&s, &h.row(1).into_owned(), 0.2, 0.3).unwrap();
        assert!((seq.x - only_second.x).amax() < 1e-15);
    }

    #[test]
    fn sequential_rejects_nondiagonal_or_zero_noise() {
        let s = FilterState::initial(2);
        let h = DMatrix::identity(2, 2);
        let y = dvector![0.0, 0.0];
        assert!(kf_update_sequential(&s, &h, &dmatrix![1.0, 0.1; 0.1, 1.0], &y).is_err());
        assert!(kf_update_sequential(&s, &h, &dmatrix![1.0, 0.0; 0.0, 0.0], &y).is_err());
    }

    #[test]
    fn predict_observation_cases() {
        let x = dvector![1.0, 2.0];
        let f = dmatrix![0.5, 1.0; -1.0, 0.0];
        assert_eq!(predict_observation(&x, &f, &DMatrix::zeros(1, 2), None).unwrap(), dvector![0.0]);
        let h = dmatrix![3.0, -1.0];
        assert_eq!(
            predict_observation(&x, &DMatrix::identity(2, 2), &h, None).unwrap(),
            dvector![1.0]
        );
        // F x = (2.5, -1); h F x = 7.5 + 1 = 8.5.
        assert_eq!(predict_observation(&x, &f, &h, None).unwrap(), dvector![8.5]);
        let b = DMatrix::identity(2, 2);
        let u = dvector![1.0, 0.0];
        assert_eq!(predict_observation(&x, &f, &h, Some((&b, &u))).unwrap(), dvector![11.5]);
    }

    #[test]
    fn run_with_no_observations() {
        let params = SystemParams::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::identity(1, 1),
            vec![],
            None,
            None,
        )
        .unwrap();
        let out = kf_run(&params, &[], UpdateForm::Joint).unwrap();
        assert_eq!(out.filtered.len(), 1);
        assert_eq!(out.filtered[0], FilterState::initial(2));
        assert!(out.predictions.is_empty());
    }

    #[test]
    fn run_converges_on_exact_static_model() {
        let n = 2;
        let n_steps = 20;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for seed in 0..20 {
            let params = SystemParams::new(
                DMatrix::identity(n, n),
                DMatrix::zeros(n, n),
                DMatrix::identity(n, n) * 1e-8,
                vec![DMatrix::identity(n, n); n_steps],
                None,
                None,
            )
            .unwrap();
            let x0 = standard_normal_vector(n, &mut rng);
            let tr = simulate(&params, Some(&x0), n_steps, seed).unwrap();
            let out = kf_run(&params, &tr.y_seq, UpdateForm::Joint).unwrap();
            assert!((&out.filtered[n_steps].x - &x0).amax() < 1e-3);
        }
    }

    #[test]
    fn update_never_increases_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for seed in 0..30 {
            let n = 4;
            let n_steps = 30;
            let f = sample_f_strategy2(n, &mut rng);
            let q = sample_covariance(n, 0.025, &mut rng).unwrap();
            let h_seq = (0..n_steps).map(|_| standard_normal_matrix(1, n, &mut rng)).collect();
            let params = SystemParams::new(f, q, dmatrix![0.02], h_seq, None, None).unwrap();
            let tr = simulate(&params, None, n_steps, seed).unwrap();
            let out = kf_run(&params, &tr.y_seq, UpdateForm::Joint).unwrap();
            for (prior, post) in out.priors.iter().zip(&out.filtered[1..]) {
                let diff = &prior.p - &post.p;
                assert!(SymmetricEigen::new(diff).eigenvalues.min() >= -1e-9);
                assert!((&post.p - post.p.transpose()).amax() <= 1e-9);
            }
        }
    }

    #[test]
    fn vectorization_round_trip_and_regressor_identity() {
        let f = dmatrix![1.0, 2.0, 3.0; 4.0, 5.0, 6.0; 7.0, 8.0, 9.0];
        let v = vec_row_major(&f);
        assert_eq!(v, dvector![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        assert_eq!(unvec_row_major(&v, 3).unwrap(), f);
        let x = dvector![0.5, -1.0, 2.0];
        assert!((regressor_blocks(&x) * &v - &f * &x).amax() < 1e-15);
        assert_eq!(
            regressor_blocks(&dvector![1.0, 2.0]),
            dmatrix![1.0, 2.0, 0.0, 0.0; 0.0, 0.0, 1.0, 2.0]
        );
    }

    #[test]
    fn dual_zero_regressor_keeps_f() {
        let s = DualFilterState::initial(3);
        let h = RowDVector::from_vec(vec![1.0, 0.5, -0.2]);
        let next = dual_kf_step(&s, &h, 0.1, &DMatrix::zeros(3, 3), 0.7).unwrap();
        assert_eq!(next.f_hat, s.f_hat);
        assert_eq!(next.p_f, s.p_f);
    }

    #[test]
    fn dual_scalar_case_matches_hand_recursion() {
        // n = 1: two interleaved scalar filters.
        let h_vals = [0.8, -1.3, 0.4, 1.1, -0.6];
        let y_vals = [0.3, -0.9, 0.2, 0.5, -0.1];
        let (q, s2) = (0.02, 0.05);

        let mut dual = DualFilterState::initial(1);
        let (mut x, mut p, mut fh, mut pf) = (0.0f64, 1.0f64, 1.0f64, 1.0f64);
        for (&h, &y) in h_vals.iter().zip(&y_vals) {
            let x_prev = x;
            let xm = fh * x;
            let pm = fh * fh * p + q;
            let k = pm * h / (h * pm * h + s2);
            x = xm + k * (y - h * xm);
            p = (1.0 - k * h) * pm;
            let hf = h * x_prev;
            let kf = pf * hf / (hf * pf * hf + h * q * h + s2);
            fh += kf * (y - hf * fh);
            pf *= 1.0 - kf * hf;

            dual = dual_kf_step(&dual, &RowDVector::from_vec(vec![h]), s2, &dmatrix![q], y).unwrap();
            assert!((dual.state.x[0] - x).abs() < 1e-14);
            assert!((dual.state.p[(0, 0)] - p).abs() < 1e-14);
            assert!((dual.f_hat[0] - fh).abs() < 1e-14);
            assert!((dual.p_f[(0, 0)] - pf).abs() < 1e-14);
        }
    }

    #[test]
    fn dual_identifies_transition_matrix_under_process_noise() {
        let n = 2;
        let n_steps = 200;
        let q = DMatrix::identity(n, n) * 0.025;
        let mut improved = 0;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let f = crate::sampler::sample_f_strategy1(n, 1.0, &mut rng).unwrap();
            let h_seq: Vec<DMatrix<f64>> = (0..n_steps).map(|_| standard_normal_matrix(1, n, &mut rng)).collect();
            let params = SystemParams::new(f.clone(), q.clone(), dmatrix![0.025], h_seq, None, None).unwrap();
            let tr = simulate(&params, None, n_steps, seed).unwrap();
            let rows: Vec<RowDVector<f64>> = params.h_seq.iter().map(|h| h.row(0).into_owned()).collect();
            let ys: Vec<f64> = tr.y_seq.iter().map(|y| y[0]).collect();
            let out = dual_kf_run(&params.q, 0.025, &rows, &ys).unwrap();
            let e10 = (out.states[10].transition_estimate() - &f).norm();
            let e200 = (out.states[200].transition_estimate() - &f).norm();
            if e200 < e10 {
                improved += 1;
            }
        }
        assert!(improved >= 90, "improved on {improved}/100 seeds");
    }
}
