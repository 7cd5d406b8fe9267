//! Prompt matrices and the dataset / prediction file formats.
//!
//! Column layout of the scalar prompt (`0`-based, `n + 1` rows):
//!
//! ```text
//! col      0..n   n..2n   2n     2n+1   2n+2   ...   2n+2N-1   2n+2N
//! row 0    0      0       σ²     0      y_1    ...   0         y_N
//! rows 1.. F      Q       0      h_1ᵀ   0      ...   h_Nᵀ      0
//! ```
//!
//! Vector prompts stack one `σ_j² / y⁽ʲ⁾` row per measurement component on top
//! and one `n`-row group per component below; the `j`-th group holds the
//! `j`-th row of every `H_t`, and `F`, `Q` sit in the first group only.
//! Control prompts insert a zero column after `σ²` and carry `(h_t, u_t, y_t)`
//! triples. The no-params prompt drops the `F` block.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::ssm::{SystemParams, Trajectory};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Scalar,
    Vector,
    Control,
    ScalarNoCov,
    ScalarNoParams,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [
        Scheme::Scalar,
        Scheme::Vector,
        Scheme::Control,
        Scheme::ScalarNoCov,
        Scheme::ScalarNoParams,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Scalar => "scalar",
            Scheme::Vector => "vector",
            Scheme::Control => "control",
            Scheme::ScalarNoCov => "scalar-no-cov",
            Scheme::ScalarNoParams => "scalar-no-params",
        }
    }

    pub fn has_transition(self) -> bool {
        self != Scheme::ScalarNoParams
    }

    pub fn has_covariances(self) -> bool {
        self != Scheme::ScalarNoCov
    }

    pub fn scalar_only(self) -> bool {
        self != Scheme::Vector
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown scheme `{s}`")))
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Column and row positions of every block for one `(scheme, n, m, N)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub scheme: Scheme,
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
}

impl Geometry {
    pub fn new(scheme: Scheme, n: usize, m: usize, horizon: usize) -> Result<Self> {
        if n == 0 || m == 0 || horizon == 0 {
            return Err(Error::Config(format!(
                "prompt dimensions must be positive, got n={n}, m={m}, N={horizon}"
            )));
        }
        if scheme.scalar_only() && m != 1 {
            return Err(Error::Config(format!(
                "scheme {scheme} needs scalar measurements, got m={m}"
            )));
        }
        Ok(Self {
            scheme,
            n,
            m,
            horizon,
        })
    }

    pub fn rows(&self) -> usize {
        self.m * (self.n + 1)
    }

    pub fn cols(&self) -> usize {
        self.first_step_col() + self.stride() * self.horizon
    }

    pub fn f_col(&self) -> Option<usize> {
        self.scheme.has_transition().then_some(0)
    }

    pub fn q_col(&self) -> usize {
        if self.scheme.has_transition() {
            self.n
        } else {
            0
        }
    }

    pub fn sigma_col(&self) -> usize {
        self.q_col() + self.n
    }

    fn stride(&self) -> usize {
        if self.scheme == Scheme::Control {
            3
        } else {
            2
        }
    }

    fn first_step_col(&self) -> usize {
        self.sigma_col() + if self.scheme == Scheme::Control { 2 } else { 1 }
    }

    /// First row of the `j`-th state row group.
    pub fn group_row(&self, j: usize) -> usize {
        self.m + j * self.n
    }

    /// Column of `h_t` for `t` in `1..=N`.
    pub fn h_col(&self, t: usize) -> usize {
        self.first_step_col() + self.stride() * (t - 1)
    }

    pub fn u_col(&self, t: usize) -> Option<usize> {
        (self.scheme == Scheme::Control).then(|| self.h_col(t) + 1)
    }

    pub fn y_col(&self, t: usize) -> usize {
        self.h_col(t) + self.stride() - 1
    }

    /// Columns holding `y_1..y_N`; the prediction for `y_t` is read at the `t`-th.
    pub fn target_positions(&self) -> Vec<usize> {
        (1..=self.horizon).map(|t| self.y_col(t)).collect()
    }
}

/// An encoded prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextMatrix {
    pub data: DMatrix<f64>,
    pub scheme: Scheme,
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    pub target_positions: Vec<usize>,
}

impl ContextMatrix {
    pub fn geometry(&self) -> Geometry {
        Geometry {
            scheme: self.scheme,
            n: self.n,
            m: self.m,
            horizon: self.horizon,
        }
    }

    /// Wraps raw prompt data, checking its shape.
    pub fn from_data(data: DMatrix<f64>, scheme: Scheme, n: usize, m: usize, horizon: usize) -> Result<Self> {
        let g = Geometry::new(scheme, n, m, horizon)?;
        if data.shape() != (g.rows(), g.cols()) {
            return Err(dim_err(format!("{scheme} context"), (g.rows(), g.cols()), data.shape()));
        }
        Ok(Self {
            data,
            scheme,
            n,
            m,
            horizon,
            target_positions: g.target_positions(),
        })
    }
}

/// Fields recovered from a prompt; `None` marks a withheld block.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedContext {
    pub f: Option<DMatrix<f64>>,
    pub q: Option<DMatrix<f64>>,
    /// Measurement noise variances `σ_j²`.
    pub r: Option<DVector<f64>>,
    pub h_seq: Vec<DMatrix<f64>>,
    pub y_seq: Vec<DVector<f64>>,
    pub u_seq: Option<Vec<DVector<f64>>>,
}

fn assemble(g: &Geometry, parts: &DecodedContext) -> DMatrix<f64> {
    let n = g.n;
    let mut data = DMatrix::zeros(g.rows(), g.cols());
    let top = g.group_row(0);
    if let (Some(col), Some(f)) = (g.f_col(), &parts.f) {
        data.view_mut((top, col), (n, n)).copy_from(f);
    }
    if let Some(q) = &parts.q {
        data.view_mut((top, g.q_col()), (n, n)).copy_from(q);
    }
    if let Some(r) = &parts.r {
        for j in 0..g.m {
            data[(j, g.sigma_col())] = r[j];
        }
    }
    for t in 1..=g.horizon {
        let h = &parts.h_seq[t - 1];
        for j in 0..g.m {
            data.view_mut((g.group_row(j), g.h_col(t)), (n, 1))
                .copy_from(&h.row(j).transpose());
            data[(j, g.y_col(t))] = parts.y_seq[t - 1][j];
        }
        if let (Some(col), Some(u_seq)) = (g.u_col(t), &parts.u_seq) {
            data.view_mut((top, col), (n, 1)).copy_from(&u_seq[t - 1]);
        }
    }
    data
}

/// Encodes one example; withheld blocks are left as zeros.
pub fn encode(params: &SystemParams, traj: &Trajectory, scheme: Scheme) -> Result<ContextMatrix> {
    let (n, m) = (params.n(), params.m());
    let horizon = traj.horizon();
    let g = Geometry::new(scheme, n, m, horizon)?;
    if params.h_seq.len() != horizon {
        return Err(Error::Config(format!(
            "{} measurement matrices for {} observations",
            params.h_seq.len(),
            horizon
        )));
    }
    if let Some(bad) = traj.y_seq.iter().find(|y| y.len() != m) {
        return Err(dim_err("observation", (m, 1), (bad.len(), 1)));
    }
    let controlled = params.u_seq.is_some();
    if controlled != (scheme == Scheme::Control) {
        return Err(Error::Config(if controlled {
            format!("scheme {scheme} cannot carry control inputs")
        } else {
            "control scheme needs a system with control inputs".into()
        }));
    }
    let parts = DecodedContext {
        f: scheme.has_transition().then(|| params.f.clone()),
        q: scheme.has_covariances().then(|| params.q.clone()),
        r: scheme.has_covariances().then(|| params.noise_variances()),
        h_seq: params.h_seq.clone(),
        y_seq: traj.y_seq.clone(),
        u_seq: params.u_seq.clone(),
    };
    Ok(ContextMatrix {
        data: assemble(&g, &parts),
        scheme,
        n,
        m,
        horizon,
        target_positions: g.target_positions(),
    })
}

/// Recovers all non-withheld fields; any nonzero entry outside the layout is
/// rejected.
pub fn decode(ctx: &ContextMatrix) -> Result<DecodedContext> {
    let g = Geometry::new(ctx.scheme, ctx.n, ctx.m, ctx.horizon)?;
    let data = &ctx.data;
    if data.shape() != (g.rows(), g.cols()) {
        return Err(dim_err(format!("{} context", ctx.scheme), (g.rows(), g.cols()), data.shape()));
    }
    let n = g.n;
    let top = g.group_row(0);
    let block = |col: usize| data.view((top, col), (n, n)).into_owned();
    let parts = DecodedContext {
        f: g.f_col().map(block),
        q: ctx.scheme.has_covariances().then(|| block(g.q_col())),
        r: ctx
            .scheme
            .has_covariances()
            .then(|| DVector::from_fn(g.m, |j, _| data[(j, g.sigma_col())])),
        h_seq: (1..=g.horizon)
            .map(|t| DMatrix::from_fn(g.m, n, |j, k| data[(g.group_row(j) + k, g.h_col(t))]))
            .collect(),
        y_seq: (1..=g.horizon)
            .map(|t| DVector::from_fn(g.m, |j, _| data[(j, g.y_col(t))]))
            .collect(),
        u_seq: (ctx.scheme == Scheme::Control).then(|| {
            (1..=g.horizon)
                .map(|t| data.column(g.u_col(t).expect("control column")).rows(top, n).into_owned())
                .collect()
        }),
    };
    let rebuilt = assemble(&g, &parts);
    if let Some((idx, _)) = rebuilt
        .iter()
        .zip(data.iter())
        .enumerate()
        .find(|(_, (a, b))| a.to_bits() != b.to_bits())
    {
        let (row, col) = (idx % g.rows(), idx / g.rows());
        return Err(Error::Schema(format!(
            "malformed {} context: unexpected entry {} at ({row}, {col})",
            ctx.scheme,
            data[(row, col)]
        )));
    }
    Ok(parts)
}

/// Zeros `Q` and every `σ_j²` of a scalar prompt.
pub fn withhold_covariances(ctx: &ContextMatrix) -> Result<ContextMatrix> {
    if ctx.scheme != Scheme::Scalar {
        return Err(Error::Config(format!(
            "covariances can only be withheld from a scalar context, got {}",
            ctx.scheme
        )));
    }
    let g = ctx.geometry();
    let mut data = ctx.data.clone();
    data.view_mut((g.group_row(0), g.q_col()), (g.n, g.n)).fill(0.0);
    data.view_mut((0, g.sigma_col()), (g.m, 1)).fill(0.0);
    ContextMatrix::from_data(data, Scheme::ScalarNoCov, g.n, g.m, g.horizon)
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Schema(format!("{what} is a ragged array")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub(crate) fn vectors_to_rows(v: &[DVector<f64>]) -> Vec<Vec<f64>> {
    v.iter().map(|x| x.iter().copied().collect()).collect()
}

pub(crate) fn rows_to_vectors(rows: &[Vec<f64>]) -> Vec<DVector<f64>> {
    rows.iter().map(|r| DVector::from_column_slice(r)).collect()
}

/// Ground-truth system parameters stored next to each prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsRecord {
    #[serde(rename = "F")]
    pub f: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetExample {
    /// Row-major prompt.
    pub context: Vec<Vec<f64>>,
    /// `y_1..y_N`, one row per step.
    pub targets: Vec<Vec<f64>>,
    /// `x_0..x_N`, one row per step.
    pub states: Vec<Vec<f64>>,
    pub params: ParamsRecord,
    /// Simulation seed of the trajectory.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub version: u32,
    pub scheme: Scheme,
    pub n: usize,
    pub m: usize,
    #[serde(rename = "N")]
    pub horizon: usize,
    pub count: usize,
    pub seed: u64,
    pub examples: Vec<DatasetExample>,
}

impl DatasetExample {
    pub fn new(params: &SystemParams, traj: &Trajectory, scheme: Scheme) -> Result<Self> {
        let ctx = encode(params, traj, scheme)?;
        Ok(Self {
            context: matrix_to_rows(&ctx.data),
            targets: vectors_to_rows(&traj.y_seq),
            states: vectors_to_rows(&traj.x_seq),
            params: ParamsRecord {
                f: matrix_to_rows(&params.f),
                q: matrix_to_rows(&params.q),
                r: matrix_to_rows(&params.r),
                b: params.b.as_ref().map(matrix_to_rows),
            },
            seed: traj.seed,
        })
    }

    pub fn context(&self, scheme: Scheme, n: usize, m: usize, horizon: usize) -> Result<ContextMatrix> {
        ContextMatrix::from_data(rows_to_matrix(&self.context, "context")?, scheme, n, m, horizon)
    }

    /// Rebuilds the system and trajectory; measurement rows and controls come
    /// from the prompt.
    pub fn to_example(&self, scheme: Scheme, n: usize, m: usize, horizon: usize) -> Result<(SystemParams, Trajectory)> {
        let decoded = decode(&self.context(scheme, n, m, horizon)?)?;
        let params = SystemParams::new(
            rows_to_matrix(&self.params.f, "F")?,
            rows_to_matrix(&self.params.q, "Q")?,
            rows_to_matrix(&self.params.r, "R")?,
            decoded.h_seq,
            self.params.b.as_deref().map(|b| rows_to_matrix(b, "B")).transpose()?,
            decoded.u_seq,
        )?;
        let traj = Trajectory::from_parts(rows_to_vectors(&self.states), rows_to_vectors(&self.targets), self.seed);
        if traj.x_seq.len() != horizon + 1 || traj.x_seq.iter().any(|x| x.len() != n) {
            return Err(Error::Schema(format!("states must be {} rows of length {n}", horizon + 1)));
        }
        if traj.y_seq.len() != horizon || traj.y_seq.iter().any(|y| y.len() != m) {
            return Err(Error::Schema(format!("targets must be {horizon} rows of length {m}")));
        }
        Ok((params, traj))
    }
}

impl DatasetFile {
    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.scheme, self.n, self.m, self.horizon)
    }

    /// Checks version, counts and per-example shapes.
    pub fn validate(&self) -> Result<()> {
        check_version(self.version)?;
        if self.count != self.examples.len() {
            return Err(Error::Schema(format!(
                "count is {} but the file holds {} examples",
                self.count,
                self.examples.len()
            )));
        }
        let g = self.geometry()?;
        for (id, ex) in self.examples.iter().enumerate() {
            let rows_ok = ex.context.len() == g.rows() && ex.context.iter().all(|r| r.len() == g.cols());
            if !rows_ok {
                return Err(Error::Schema(format!(
                    "example {id}: context is not {}x{}",
                    g.rows(),
                    g.cols()
                )));
            }
        }
        Ok(())
    }

    pub fn example(&self, id: usize) -> Result<(SystemParams, Trajectory)> {
        self.examples[id].to_example(self.scheme, self.n, self.m, self.horizon)
    }
}

fn check_version(version: u32) -> Result<()> {
    if version != FORMAT_VERSION {
        return Err(Error::Schema(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    Ok(())
}

/// Predictions of one algorithm over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub version: u32,
    pub algorithm: String,
    pub scheme: Scheme,
    pub n: usize,
    pub m: usize,
    #[serde(rename = "N")]
    pub horizon: usize,
    pub count: usize,
    /// Prompt columns the predictions belong to.
    pub positions: Vec<usize>,
    pub examples: Vec<PredictionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: usize,
    /// `predictions[t - 1]` estimates `y_t` from `y_1..y_{t-1}`.
    pub predictions: Vec<Vec<f64>>,
    /// `x̂_0..x̂_N` when the algorithm tracks a state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_estimates: Option<Vec<Vec<f64>>>,
}

impl PredictionFile {
    pub fn validate(&self) -> Result<()> {
        check_version(self.version)?;
        let g = Geometry::new(self.scheme, self.n, self.m, self.horizon)?;
        if self.count != self.examples.len() {
            return Err(Error::Schema(format!(
                "count is {} but the file holds {} examples",
                self.count,
                self.examples.len()
            )));
        }
        if self.positions != g.target_positions() {
            return Err(Error::Schema("prediction positions do not match the scheme's target positions".into()));
        }
        for rec in &self.examples {
            if rec.predictions.len() != self.horizon || rec.predictions.iter().any(|p| p.len() != self.m) {
                return Err(Error::Alignment {
                    id: rec.id,
                    message: format!("expected {} predictions of length {}", self.horizon, self.m),
                });
            }
        }
        Ok(())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    let probe: VersionProbe = serde_json::from_str(&text)?;
    check_version(probe.version)?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u32,
}

pub fn write_dataset(path: impl AsRef<Path>, file: &DatasetFile) -> Result<()> {
    file.validate()?;
    write_json(path.as_ref(), file)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<DatasetFile> {
    let file: DatasetFile = read_json(path.as_ref())?;
    file.validate()?;
    Ok(file)
}

pub fn write_predictions(path: impl AsRef<Path>, file: &PredictionFile) -> Result<()> {
    file.validate()?;
    write_json(path.as_ref(), file)
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<PredictionFile> {
    let file: PredictionFile = read_json(path.as_ref())?;
    file.validate()?;
    Ok(file)
}
