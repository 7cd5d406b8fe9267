//! Batch evaluation: run algorithms over a shared dataset, compare their
//! observation predictions (MSPD) and score their state estimates.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::baselines::{min_norm_estimate, ols_estimate, ridge_estimate, RegressionProblem};
use crate::codec::{
    encode, read_predictions, vectors_to_rows, DatasetExample, DatasetFile, PredictionFile, PredictionRecord, Scheme,
    FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::filters::{dual_kf_run, kf_run, UpdateForm};
use crate::sampler::{sample_example, SamplerConfig};
use crate::ssm::{SystemParams, Trajectory};
use crate::vm::{compile_dual_kf_program, compile_kf_program, run_filter_program, Program};

#[derive(Debug, Clone, PartialEq)]
pub enum AlgorithmId {
    Kf,
    KfSeq,
    DualKf,
    VmKf,
    VmDual,
    Sgd { alpha: f64 },
    Ols,
    Ridge { lambda: f64 },
    External { path: PathBuf },
}

impl fmt::Display for AlgorithmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlgorithmId::Kf => f.write_str("kf"),
            AlgorithmId::KfSeq => f.write_str("kf-seq"),
            AlgorithmId::DualKf => f.write_str("dual-kf"),
            AlgorithmId::VmKf => f.write_str("vm-kf"),
            AlgorithmId::VmDual => f.write_str("vm-dual"),
            AlgorithmId::Sgd { alpha } => write!(f, "sgd({alpha})"),
            AlgorithmId::Ols => f.write_str("ols"),
            AlgorithmId::Ridge { lambda } => write!(f, "ridge({lambda})"),
            AlgorithmId::External { path } => write!(f, "external({})", path.display()),
        }
    }
}

impl FromStr for AlgorithmId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, arg) = match s.split_once('(') {
            Some((name, rest)) => {
                let arg = rest
                    .strip_suffix(')')
                    .ok_or_else(|| Error::Parse(format!("unbalanced parentheses in `{s}`")))?;
                (name, Some(arg))
            }
            None => (s, None),
        };
        let number = |what: &'static str| -> Result<f64> {
            let arg = arg.ok_or_else(|| Error::Parse(format!("`{name}` needs a parameter, e.g. {name}(0.01)")))?;
            arg.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad {what} `{arg}`")))
        };
        let id = match name {
            "kf" => AlgorithmId::Kf,
            "kf-seq" => AlgorithmId::KfSeq,
            "dual-kf" => AlgorithmId::DualKf,
            "vm-kf" => AlgorithmId::VmKf,
            "vm-dual" => AlgorithmId::VmDual,
            "ols" => AlgorithmId::Ols,
            "sgd" => AlgorithmId::Sgd {
                alpha: number("learning rate")?,
            },
            "ridge" => AlgorithmId::Ridge {
                lambda: number("regularization")?,
            },
            "external" => AlgorithmId::External {
                path: PathBuf::from(arg.ok_or_else(|| Error::Parse("external(...) needs a path".into()))?),
            },
            _ => return Err(Error::Parse(format!("unknown algorithm `{s}`"))),
        };
        if arg.is_some() && !matches!(name, "sgd" | "ridge" | "external") {
            return Err(Error::Parse(format!("`{name}` takes no parameter")));
        }
        id.validate()?;
        Ok(id)
    }
}

impl AlgorithmId {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AlgorithmId::Sgd { alpha } if !(alpha > 0.0 && alpha.is_finite()) => Err(Error::Range {
                name: "alpha",
                value: alpha,
                allowed: "(0, inf)",
            }),
            AlgorithmId::Ridge { lambda } if !(lambda >= 0.0 && lambda.is_finite()) => Err(Error::Range {
                name: "lambda",
                value: lambda,
                allowed: "[0, inf)",
            }),
            _ => Ok(()),
        }
    }

    /// Defaults compared in evaluation runs.
    pub fn default_set() -> Vec<AlgorithmId> {
        vec![
            AlgorithmId::Kf,
            AlgorithmId::Sgd { alpha: 0.01 },
            AlgorithmId::Sgd { alpha: 0.05 },
            AlgorithmId::Ridge { lambda: 0.01 },
            AlgorithmId::Ridge { lambda: 0.05 },
            AlgorithmId::Ols,
        ]
    }
}

impl Serialize for AlgorithmId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AlgorithmId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Draws `count` examples at training step `step` and encodes them.
pub fn generate_dataset(cfg: &SamplerConfig, scheme: Scheme, count: usize, step: u64) -> Result<DatasetFile> {
    cfg.validate()?;
    let horizon = cfg.context_length_at(step);
    crate::codec::Geometry::new(scheme, cfg.n, cfg.m, horizon)?;
    let examples = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = cfg.example_rng(i as u64);
            let (params, traj) = sample_example(cfg, step, &mut rng)?;
            DatasetExample::new(&params, &traj, scheme)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetFile {
        version: FORMAT_VERSION,
        scheme,
        n: cfg.n,
        m: cfg.m,
        horizon,
        count,
        seed: cfg.seed,
        examples,
    })
}

/// Re-encodes every example of `file` under another scheme.
pub fn reencode(file: &DatasetFile, scheme: Scheme) -> Result<DatasetFile> {
    let examples = (0..file.examples.len())
        .into_par_iter()
        .map(|id| {
            let (params, traj) = file.example(id)?;
            DatasetExample::new(&params, &traj, scheme)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetFile {
        scheme,
        examples,
        ..file.clone()
    })
}

struct Outcome {
    predictions: Vec<DVector<f64>>,
    states: Option<Vec<DVector<f64>>>,
}

fn scalar_inputs(params: &SystemParams, traj: &Trajectory, what: &str) -> Result<()> {
    if params.m() != 1 {
        return Err(Error::Config(format!("{what} needs scalar measurements, got m={}", params.m())));
    }
    if params.u_seq.is_some() {
        return Err(Error::Config(format!("{what} does not support control inputs")));
    }
    if traj.horizon() != params.horizon() {
        return Err(Error::Config("trajectory and measurement horizon differ".into()));
    }
    Ok(())
}

fn scalars(v: Vec<f64>) -> Vec<DVector<f64>> {
    v.into_iter().map(|p| DVector::from_element(1, p)).collect()
}

/// Estimates fitted on the first `t` measurements for `t = 0..N`.
fn regression_path(params: &SystemParams, traj: &Trajectory, fit: impl Fn(&RegressionProblem) -> Result<DVector<f64>>) -> Result<Vec<DVector<f64>>> {
    (0..=traj.horizon())
        .map(|t| {
            let p = RegressionProblem::from_steps(&params.h_seq, &traj.y_seq, t, params.n())?;
            fit(&p)
        })
        .collect()
}

fn least_squares(p: &RegressionProblem) -> Result<DVector<f64>> {
    match ols_estimate(p) {
        Ok(x) => Ok(x),
        Err(Error::Numerical { .. }) => Ok(min_norm_estimate(p)),
        Err(e) => Err(e),
    }
}

fn sgd_path(params: &SystemParams, traj: &Trajectory, alpha: f64) -> Vec<DVector<f64>> {
    let mut x = DVector::zeros(params.n());
    let mut path = vec![x.clone()];
    for (h, y) in params.h_seq.iter().zip(&traj.y_seq) {
        for (row, &yj) in h.row_iter().zip(y.iter()) {
            let residual = (row * &x)[0] - yj;
            x -= row.transpose() * (2.0 * alpha * residual);
        }
        path.push(x.clone());
    }
    path
}

fn run_one(alg: &AlgorithmId, params: &SystemParams, traj: &Trajectory, programs: &Programs) -> Result<Outcome> {
    let kf = |form| -> Result<Outcome> {
        let out = kf_run(params, &traj.y_seq, form)?;
        Ok(Outcome {
            predictions: out.predictions,
            states: Some(out.filtered.into_iter().map(|s| s.x).collect()),
        })
    };
    let from_path = |path: Vec<DVector<f64>>| Outcome {
        predictions: params.h_seq.iter().zip(&path).map(|(h, x)| h * x).collect(),
        states: Some(path),
    };
    match alg {
        AlgorithmId::Kf => kf(UpdateForm::Joint),
        AlgorithmId::KfSeq => kf(UpdateForm::Sequential),
        AlgorithmId::DualKf => {
            scalar_inputs(params, traj, "dual-kf")?;
            let h_rows: Vec<_> = params.h_seq.iter().map(|h| h.row(0).into_owned()).collect();
            let ys: Vec<f64> = traj.y_seq.iter().map(|y| y[0]).collect();
            let out = dual_kf_run(&params.q, params.r[(0, 0)], &h_rows, &ys)?;
            Ok(Outcome {
                predictions: scalars(out.predictions),
                states: Some(out.states.into_iter().map(|s| s.state.x).collect()),
            })
        }
        AlgorithmId::VmKf | AlgorithmId::VmDual => {
            scalar_inputs(params, traj, "tape programs")?;
            let (scheme, program) = if *alg == AlgorithmId::VmKf {
                (Scheme::Scalar, &programs.kf)
            } else {
                (Scheme::ScalarNoParams, &programs.dual)
            };
            let program = program.as_ref().expect("program compiled for vm algorithms");
            let run = run_filter_program(&encode(params, traj, scheme)?, program)?;
            Ok(Outcome {
                predictions: scalars(run.predictions),
                states: Some(run.states),
            })
        }
        AlgorithmId::Sgd { alpha } => Ok(from_path(sgd_path(params, traj, *alpha))),
        AlgorithmId::Ols => Ok(from_path(regression_path(params, traj, least_squares)?)),
        AlgorithmId::Ridge { lambda } => Ok(from_path(regression_path(params, traj, |p| {
            if *lambda == 0.0 {
                least_squares(p)
            } else {
                ridge_estimate(p, *lambda)
            }
        })?)),
        AlgorithmId::External { .. } => unreachable!("external predictions are read, not computed"),
    }
}

struct Programs {
    kf: Option<Program>,
    dual: Option<Program>,
}

/// Runs `alg` on every example of `dataset`.
pub fn run_algorithm(alg: &AlgorithmId, dataset: &DatasetFile) -> Result<PredictionFile> {
    alg.validate()?;
    dataset.validate()?;
    let g = dataset.geometry()?;
    if let AlgorithmId::External { path } = alg {
        let file = read_predictions(path)?;
        check_matches_dataset(&file, dataset)?;
        return Ok(file);
    }
    let programs = Programs {
        kf: (*alg == AlgorithmId::VmKf)
            .then(|| compile_kf_program(dataset.n, dataset.horizon))
            .transpose()?,
        dual: (*alg == AlgorithmId::VmDual)
            .then(|| compile_dual_kf_program(dataset.n, dataset.horizon))
            .transpose()?,
    };
    let examples = (0..dataset.examples.len())
        .into_par_iter()
        .map(|id| {
            let (params, traj) = dataset.example(id)?;
            let out = run_one(alg, &params, &traj, &programs)?;
            Ok(PredictionRecord {
                id,
                predictions: vectors_to_rows(&out.predictions),
                state_estimates: out.states.as_deref().map(vectors_to_rows),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictionFile {
        version: FORMAT_VERSION,
        algorithm: alg.to_string(),
        scheme: dataset.scheme,
        n: dataset.n,
        m: dataset.m,
        horizon: dataset.horizon,
        count: examples.len(),
        positions: g.target_positions(),
        examples,
    })
}

fn check_matches_dataset(file: &PredictionFile, dataset: &DatasetFile) -> Result<()> {
    let same = (file.scheme, file.n, file.m, file.horizon, file.count)
        == (dataset.scheme, dataset.n, dataset.m, dataset.horizon, dataset.count);
    if !same {
        return Err(Error::Alignment {
            id: 0,
            message: format!("prediction file `{}` was produced for a different dataset shape", file.algorithm),
        });
    }
    check_ids(file)
}

fn check_ids(file: &PredictionFile) -> Result<()> {
    match file.examples.iter().enumerate().find(|(i, r)| r.id != *i) {
        Some((i, _)) => Err(Error::Alignment {
            id: i,
            message: format!("`{}` lists example ids out of order", file.algorithm),
        }),
        None => Ok(()),
    }
}

fn check_aligned(a: &PredictionFile, b: &PredictionFile) -> Result<()> {
    a.validate()?;
    b.validate()?;
    if (a.scheme, a.n, a.m, a.horizon, &a.positions) != (b.scheme, b.n, b.m, b.horizon, &b.positions) {
        return Err(Error::Alignment {
            id: 0,
            message: format!("`{}` and `{}` cover different prompt layouts", a.algorithm, b.algorithm),
        });
    }
    let first_mismatch = a
        .examples
        .iter()
        .zip(&b.examples)
        .position(|(x, y)| x.id != y.id)
        .or_else(|| (a.examples.len() != b.examples.len()).then(|| a.examples.len().min(b.examples.len())));
    if let Some(i) = first_mismatch {
        let id = a.examples.get(i).or_else(|| b.examples.get(i)).map_or(i, |r| r.id);
        return Err(Error::Alignment {
            id,
            message: format!("`{}` and `{}` disagree on the example set", a.algorithm, b.algorithm),
        });
    }
    Ok(())
}

fn squared_differences(a: &PredictionFile, b: &PredictionFile, t: usize) -> Vec<f64> {
    a.examples
        .iter()
        .zip(&b.examples)
        .map(|(x, y)| {
            let (p, q) = (&x.predictions[t - 1], &y.predictions[t - 1]);
            p.iter().zip(q).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / p.len() as f64
        })
        .collect()
}

fn check_length(t: usize, horizon: usize) -> Result<()> {
    if t == 0 || t > horizon {
        return Err(Error::Config(format!("context length {t} is outside 1..={horizon}")));
    }
    Ok(())
}

/// Mean over examples of the squared difference between the two predictions
/// of `y_t`; vector predictions are averaged over components.
pub fn mspd(a: &PredictionFile, b: &PredictionFile, t: usize) -> Result<f64> {
    check_aligned(a, b)?;
    check_length(t, a.horizon)?;
    Ok(mean(&squared_differences(a, b, t)))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn standard_error(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mu = mean(v);
    let var = v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (v.len() - 1) as f64;
    (var / v.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MspdPoint {
    pub context_length: usize,
    pub mspd: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MspdCurve {
    pub algorithm_a: String,
    pub algorithm_b: String,
    pub batch: usize,
    pub points: Vec<MspdPoint>,
}

pub fn mspd_curve(a: &PredictionFile, b: &PredictionFile) -> Result<MspdCurve> {
    check_aligned(a, b)?;
    let points = (1..=a.horizon)
        .map(|t| {
            let d = squared_differences(a, b, t);
            MspdPoint {
                context_length: t,
                mspd: mean(&d),
                stderr: standard_error(&d),
            }
        })
        .collect();
    Ok(MspdCurve {
        algorithm_a: a.algorithm.clone(),
        algorithm_b: b.algorithm.clone(),
        batch: a.count,
        points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMsePoint {
    pub context_length: usize,
    /// Mean of `‖x̂_t − x_t‖²`.
    pub mse_final: f64,
    /// Mean of `(1/t) Σ_{k≤t} ‖x̂_k − x_k‖²`.
    pub mse_all: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMseTable {
    pub algorithm: String,
    pub batch: usize,
    pub points: Vec<StateMsePoint>,
}

/// State error of `preds` against the simulated states of `dataset`.
pub fn state_mse(preds: &PredictionFile, dataset: &DatasetFile) -> Result<StateMseTable> {
    check_matches_dataset(preds, dataset)?;
    let horizon = dataset.horizon;
    let mut errors = Vec::with_capacity(preds.examples.len());
    for (rec, ex) in preds.examples.iter().zip(&dataset.examples) {
        let est = rec.state_estimates.as_ref().ok_or_else(|| Error::Alignment {
            id: rec.id,
            message: format!("`{}` carries no state estimates", preds.algorithm),
        })?;
        if est.len() != horizon + 1 || est.iter().any(|x| x.len() != dataset.n) {
            return Err(Error::Alignment {
                id: rec.id,
                message: format!("expected {} state estimates of length {}", horizon + 1, dataset.n),
            });
        }
        let e: Vec<f64> = (1..=horizon)
            .map(|t| est[t].iter().zip(&ex.states[t]).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect();
        errors.push(e);
    }
    let points = (1..=horizon)
        .map(|t| {
            let finals: Vec<f64> = errors.iter().map(|e| e[t - 1]).collect();
            let alls: Vec<f64> = errors.iter().map(|e| e[..t].iter().sum::<f64>() / t as f64).collect();
            StateMsePoint {
                context_length: t,
                mse_final: mean(&finals),
                mse_all: mean(&alls),
            }
        })
        .collect();
    Ok(StateMseTable {
        algorithm: preds.algorithm.clone(),
        batch: preds.count,
        points,
    })
}

/// An evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub sampler: SamplerConfig,
    pub scheme: Scheme,
    pub count: usize,
    #[serde(default)]
    pub step: u64,
    pub algorithms: Vec<AlgorithmId>,
    /// Pairs to compare; every unordered pair when absent.
    #[serde(default)]
    pub pairs: Option<Vec<(AlgorithmId, AlgorithmId)>>,
}

impl ExperimentConfig {
    /// Batch of 5000 with the default algorithm set.
    pub fn standard(sampler: SamplerConfig) -> Self {
        Self {
            sampler,
            scheme: Scheme::Scalar,
            count: 5000,
            step: 0,
            algorithms: AlgorithmId::default_set(),
            pairs: None,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        if self.count == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.algorithms.is_empty() {
            return Err(Error::Config("no algorithms to evaluate".into()));
        }
        for alg in &self.algorithms {
            alg.validate()?;
        }
        for (a, b) in self.pairs.iter().flatten() {
            for alg in [a, b] {
                if !self.algorithms.contains(alg) {
                    return Err(Error::Config(format!("pair names `{alg}`, which is not in the algorithm list")));
                }
            }
        }
        Ok(())
    }

    fn resolved_pairs(&self) -> Vec<(usize, usize)> {
        let index = |alg: &AlgorithmId| self.algorithms.iter().position(|a| a == alg).expect("validated pair");
        match &self.pairs {
            Some(pairs) => pairs.iter().map(|(a, b)| (index(a), index(b))).collect(),
            None => (0..self.algorithms.len())
                .flat_map(|i| (i + 1..self.algorithms.len()).map(move |j| (i, j)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config: ExperimentConfig,
    pub horizon: usize,
    pub curves: Vec<MspdCurve>,
    pub state_mse: Vec<StateMseTable>,
    pub notes: Vec<String>,
}

/// Generates the shared batch, runs every algorithm on it and compares them.
pub fn evaluate(config: &ExperimentConfig) -> Result<EvaluationReport> {
    config.validate()?;
    let dataset = generate_dataset(&config.sampler, config.scheme, config.count, config.step)?;
    evaluate_dataset(config, &dataset)
}

/// As [`evaluate`] on an existing dataset.
pub fn evaluate_dataset(config: &ExperimentConfig, dataset: &DatasetFile) -> Result<EvaluationReport> {
    config.validate()?;
    let preds = config
        .algorithms
        .iter()
        .map(|alg| run_algorithm(alg, dataset))
        .collect::<Result<Vec<_>>>()?;
    let curves = config
        .resolved_pairs()
        .into_iter()
        .map(|(i, j)| mspd_curve(&preds[i], &preds[j]))
        .collect::<Result<Vec<_>>>()?;
    let state_mse = preds
        .iter()
        .filter(|p| p.examples.iter().all(|r| r.state_estimates.is_some()))
        .map(|p| state_mse(p, dataset))
        .collect::<Result<Vec<_>>>()?;
    let mut notes = Vec::new();
    if config.algorithms.iter().any(|a| matches!(a, AlgorithmId::Sgd { .. })) {
        notes.push("sgd makes a single online pass over the context".to_string());
    }
    if config
        .algorithms
        .iter()
        .any(|a| matches!(a, AlgorithmId::Ols | AlgorithmId::Ridge { lambda: 0.0 }))
    {
        notes.push("ols falls back to the minimum-norm solution while the context has fewer rows than unknowns".to_string());
    }
    Ok(EvaluationReport {
        config: config.clone(),
        horizon: dataset.horizon,
        curves,
        state_mse,
        notes,
    })
}

pub const MSPD_CSV_HEADER: &str = "context_length,algorithm_a,algorithm_b,mspd,stderr,batch";
pub const STATE_CSV_HEADER: &str = "context_length,algorithm,mse_final,mse_all,batch";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn mspd_csv(curves: &[MspdCurve]) -> String {
    let mut out = format!("{MSPD_CSV_HEADER}\n");
    for c in curves {
        for p in &c.points {
            out.push_str(&format!(
                "{},{},{},{:e},{:e},{}\n",
                p.context_length,
                csv_field(&c.algorithm_a),
                csv_field(&c.algorithm_b),
                p.mspd,
                p.stderr,
                c.batch
            ));
        }
    }
    out
}

pub fn state_csv(tables: &[StateMseTable]) -> String {
    let mut out = format!("{STATE_CSV_HEADER}\n");
    for t in tables {
        for p in &t.points {
            out.push_str(&format!(
                "{},{},{:e},{:e},{}\n",
                p.context_length,
                csv_field(&t.algorithm),
                p.mse_final,
                p.mse_all,
                t.batch
            ));
        }
    }
    out
}

/// Writes `mspd.csv`, `state_mse.csv` and `report.json` into `dir`.
pub fn write_report(dir: impl AsRef<Path>, report: &EvaluationReport) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("mspd.csv"), mspd_csv(&report.curves))?;
    fs::write(dir.join("state_mse.csv"), state_csv(&report.state_mse))?;
    let mut f = fs::File::create(dir.join("report.json"))?;
    serde_json::to_writer_pretty(&mut f, report)?;
    f.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, DMatrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use crate::sampler::{Schedule, Strategy};
    use crate::ssm::{simulate, standard_normal_matrix, standard_normal_vector};

    fn dataset(n: usize, horizon: usize, count: usize, strategy: Strategy, seed: u64) -> DatasetFile {
        let mut cfg = SamplerConfig::evaluation(strategy, seed);
        cfg.n = n;
        cfg.context_length = Schedule::Constant { value: horizon as f64 };
        generate_dataset(&cfg, Scheme::Scalar, count, 0).unwrap()
    }

    #[test]
    fn algorithm_ids_parse_and_print() {
        for s in ["kf", "kf-seq", "dual-kf", "vm-kf", "vm-dual", "ols", "sgd(0.01)", "ridge(0.05)", "ridge(0)", "external(out/p.json)"] {
            let id: AlgorithmId = s.parse().unwrap();
            assert_eq!(id.to_string(), s);
        }
        for bad in ["sgd", "sgd(0)", "sgd(-1)", "ridge(-0.1)", "ridge(x)", "kf(1)", "lstm", "sgd(0.1"] {
            assert!(bad.parse::<AlgorithmId>().is_err(), "{bad}");
        }
        let json = serde_json::to_string(&AlgorithmId::Sgd { alpha: 0.05 }).unwrap();
        assert_eq!(json, "\"sgd(0.05)\"");
        assert_eq!(serde_json::from_str::<AlgorithmId>(&json).unwrap(), AlgorithmId::Sgd { alpha: 0.05 });
    }

    #[test]
    fn mspd_of_identical_files_is_zero() {
        let d = dataset(2, 6, 20, Strategy::SymmetricStable, 1);
        let kf = run_algorithm(&AlgorithmId::Kf, &d).unwrap();
        for t in 1..=6 {
            assert_eq!(mspd(&kf, &kf, t).unwrap(), 0.0);
        }
    }

    #[test]
    fn constant_offset_gives_its_square() {
        let d = dataset(2, 5, 10, Strategy::SymmetricStable, 2);
        let a = run_algorithm(&AlgorithmId::Ols, &d).unwrap();
        let mut b = a.clone();
        for r in &mut b.examples {
            for p in &mut r.predictions {
                p[0] += 0.125;
            }
        }
        for t in 1..=5 {
            assert!((mspd(&a, &b, t).unwrap() - 0.015625).abs() < 1e-15);
        }
    }

    #[test]
    fn mspd_is_symmetric_and_obeys_the_triangle_bound() {
        let d = dataset(3, 8, 40, Strategy::MixedRotation, 3);
        let a = run_algorithm(&AlgorithmId::Kf, &d).unwrap();
        let b = run_algorithm(&AlgorithmId::Sgd { alpha: 0.05 }, &d).unwrap();
        let c = run_algorithm(&AlgorithmId::Ridge { lambda: 0.05 }, &d).unwrap();
        for t in 1..=8 {
            assert_eq!(mspd(&a, &b, t).unwrap(), mspd(&b, &a, t).unwrap());
            let bound = 2.0 * mspd(&a, &b, t).unwrap() + 2.0 * mspd(&b, &c, t).unwrap();
            assert!(mspd(&a, &c, t).unwrap() <= bound);
        }
    }

    #[test]
    fn misaligned_files_name_the_first_bad_example() {
        let d = dataset(2, 4, 5, Strategy::SymmetricStable, 4);
        let a = run_algorithm(&AlgorithmId::Kf, &d).unwrap();
        let mut b = a.clone();
        b.examples[3].id = 7;
        match mspd(&a, &b, 1).unwrap_err() {
            Error::Alignment { id, .. } => assert_eq!(id, 3),
            e => panic!("unexpected {e}"),
        }
        let mut c = a.clone();
        c.examples.pop();
        c.count -= 1;
        assert!(matches!(mspd(&a, &c, 1), Err(Error::Alignment { id: 4, .. })));
        assert!(mspd(&a, &a, 0).is_err());
        assert!(mspd(&a, &a, 5).is_err());
    }

    #[test]
    fn kf_versus_ols_matches_direct_average() {
        let d = dataset(2, 10, 100, Strategy::SymmetricStable, 5);
        let kf = run_algorithm(&AlgorithmId::Kf, &d).unwrap();
        let ols = run_algorithm(&AlgorithmId::Ols, &d).unwrap();
        let text_a = serde_json::to_value(&kf).unwrap();
        let text_b = serde_json::to_value(&ols).unwrap();
        for t in 1..=10 {
            let mut total = 0.0;
            for i in 0..100 {
                let pa = text_a["examples"][i]["predictions"][t - 1][0].as_f64().unwrap();
                let pb = text_b["examples"][i]["predictions"][t - 1][0].as_f64().unwrap();
                total += (pa - pb).powi(2);
            }
            assert!((mspd(&kf, &ols, t).unwrap() - total / 100.0).abs() <= 1e-15 * (1.0 + total));
        }
    }

    #[test]
    fn vm_and_direct_filter_agree() {
        let d = dataset(3, 12, 8, Strategy::MixedRotation, 6);
        let kf = run_algorithm(&AlgorithmId::Kf, &d).unwrap();
        let vm = run_algorithm(&AlgorithmId::VmKf, &d).unwrap();
        let dual = run_algorithm(&AlgorithmId::DualKf, &d).unwrap();
        let vm_dual = run_algorithm(&AlgorithmId::VmDual, &d).unwrap();
        for t in 1..=12 {
            assert!(mspd(&kf, &vm, t).unwrap() <= 1e-18);
            assert!(mspd(&dual, &vm_dual, t).unwrap() <= 1e-16);
        }
    }

    #[test]
    fn ols_and_ridge_zero_coincide() {
        let d = dataset(3, 15, 30, Strategy::SymmetricStable, 7);
        let ols = run_algorithm(&AlgorithmId::Ols, &d).unwrap();
        let ridge = run_algorithm(&AlgorithmId::Ridge { lambda: 0.0 }, &d).unwrap();
        for t in 1..=15 {
            assert!(mspd(&ols, &ridge, t).unwrap() <= 1e-20);
        }
    }

    #[test]
    fn baselines_predict_from_the_past_only() {
        let d = dataset(2, 6, 3, Strategy::SymmetricStable, 8);
        for alg in [AlgorithmId::Ols, AlgorithmId::Sgd { alpha: 0.01 }, AlgorithmId::Ridge { lambda: 0.01 }] {
            let p = run_algorithm(&alg, &d).unwrap();
            for r in &p.examples {
                assert_eq!(r.predictions[0], vec![0.0]);
                assert_eq!(r.state_estimates.as_ref().unwrap()[0], vec![0.0, 0.0]);
            }
        }
        let (params, traj) = d.example(0).unwrap();
        let ols = run_algorithm(&AlgorithmId::Ols, &d).unwrap();
        let p = RegressionProblem::from_steps(&params.h_seq, &traj.y_seq, 4, 2).unwrap();
        let x = ols_estimate(&p).unwrap();
        let expected = (&params.h_seq[4] * x)[0];
        assert!((ols.examples[0].predictions[4][0] - expected).abs() < 1e-12);
    }

    #[test]
    fn sgd_path_matches_baseline_function() {
        let d = dataset(3, 9, 2, Strategy::MixedRotation, 9);
        let (params, traj) = d.example(1).unwrap();
        let path = sgd_path(&params, &traj, 0.05);
        for t in 0..=9 {
            let p = RegressionProblem::from_steps(&params.h_seq, &traj.y_seq, t, 3).unwrap();
            let x = crate::baselines::sgd_estimate(&p, 0.05, 1).unwrap();
            assert!((&path[t] - x).amax() < 1e-14);
        }
    }

    #[test]
    fn vector_measurements_are_supported_by_kf_and_baselines() {
        let mut cfg = SamplerConfig::evaluation(Strategy::SymmetricStable, 10);
        cfg.n = 3;
        cfg.m = 2;
        cfg.context_length = Schedule::Constant { value: 6.0 };
        let d = generate_dataset(&cfg, Scheme::Vector, 20, 0).unwrap();
        let kf = run_algorithm(&AlgorithmId::Kf, &d).unwrap();
        let seq = run_algorithm(&AlgorithmId::KfSeq, &d).unwrap();
        let ols = run_algorithm(&AlgorithmId::Ols, &d).unwrap();
        for t in 1..=6 {
            assert!(mspd(&kf, &seq, t).unwrap() <= 1e-16);
            assert!(mspd(&kf, &ols, t).unwrap().is_finite());
        }
        assert!(run_algorithm(&AlgorithmId::VmKf, &d).is_err());
        assert!(run_algorithm(&AlgorithmId::DualKf, &d).is_err());
    }

    #[test]
    fn noiseless_identity_system_has_zero_state_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 3;
        let examples = (0..10)
            .map(|_| {
                let h_seq: Vec<DMatrix<f64>> = (0..n).map(|_| standard_normal_matrix(1, n, &mut rng)).collect();
                let params = SystemParams::new(
                    DMatrix::identity(n, n),
                    DMatrix::zeros(n, n),
                    dmatrix![0.0],
                    h_seq,
                    None,
                    None,
                )
                .unwrap();
                let x0 = standard_normal_vector(n, &mut rng);
                let traj = simulate(&params, Some(&x0), n, 0).unwrap();
                DatasetExample::new(&params, &traj, Scheme::Scalar).unwrap()
            })
            .collect();
        let d = DatasetFile {
            version: FORMAT_VERSION,
            scheme: Scheme::Scalar,
            n,
            m: 1,
            horizon: n,
            count: 10,
            seed: 0,
            examples,
        };
        for alg in [AlgorithmId::Kf, AlgorithmId::Ols] {
            let table = state_mse(&run_algorithm(&alg, &d).unwrap(), &d).unwrap();
            assert!(table.points[n - 1].mse_final < 1e-18, "{alg}");
        }
    }

    #[test]
    fn state_mse_columns() {
        let d = dataset(2, 5, 10, Strategy::SymmetricStable, 12);
        let mut p = run_algorithm(&AlgorithmId::Kf, &d).unwrap();
        for (r, ex) in p.examples.iter_mut().zip(&d.examples) {
            let mut est = ex.states.clone();
            est[2][0] += 1.0;
            r.state_estimates = Some(est);
        }
        let table = state_mse(&p, &d).unwrap();
        assert_eq!(table.points[0].mse_final, 0.0);
        assert_eq!(table.points[1].mse_final, 1.0);
        assert_eq!(table.points[1].mse_all, 0.5);
        assert!((table.points[4].mse_all - 0.2).abs() < 1e-15);
        p.examples[0].state_estimates = None;
        assert!(state_mse(&p, &d).is_err());
    }

    #[test]
    fn evaluation_is_reproducible_and_writes_files() {
        let mut sampler = SamplerConfig::evaluation(Strategy::SymmetricStable, 13);
        sampler.n = 2;
        sampler.context_length = Schedule::Constant { value: 5.0 };
        let cfg = ExperimentConfig {
            count: 25,
            algorithms: vec![AlgorithmId::Kf, AlgorithmId::VmKf, AlgorithmId::Ols],
            ..ExperimentConfig::standard(sampler)
        };
        let a = evaluate(&cfg).unwrap();
        let b = evaluate(&cfg).unwrap();
        assert_eq!(mspd_csv(&a.curves), mspd_csv(&b.curves));
        assert_eq!(a.curves.len(), 3);
        assert_eq!(a.state_mse.len(), 3);
        let csv = mspd_csv(&a.curves);
        assert!(csv.starts_with("context_length,algorithm_a,algorithm_b,mspd,stderr,batch\n"));
        assert_eq!(csv.lines().count(), 1 + 3 * 5);

        let dir = tempfile::tempdir().unwrap();
        write_report(dir.path(), &a).unwrap();
        let back: EvaluationReport =
            serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back, a);
        assert!(fs::read_to_string(dir.path().join("state_mse.csv")).unwrap().starts_with(STATE_CSV_HEADER));
    }

    #[test]
    fn explicit_pairs_are_respected() {
        let mut sampler = SamplerConfig::evaluation(Strategy::SymmetricStable, 14);
        sampler.n = 2;
        sampler.context_length = Schedule::Constant { value: 3.0 };
        let mut cfg = ExperimentConfig {
            count: 4,
            algorithms: vec![AlgorithmId::Kf, AlgorithmId::Ols, AlgorithmId::Sgd { alpha: 0.01 }],
            pairs: Some(vec![(AlgorithmId::Ols, AlgorithmId::Kf)]),
            ..ExperimentConfig::standard(sampler)
        };
        let r = evaluate(&cfg).unwrap();
        assert_eq!(r.curves.len(), 1);
        assert_eq!((r.curves[0].algorithm_a.as_str(), r.curves[0].algorithm_b.as_str()), ("ols", "kf"));
        cfg.pairs = Some(vec![(AlgorithmId::Kf, AlgorithmId::Ridge { lambda: 1.0 })]);
        assert!(evaluate(&cfg).is_err());
    }

    #[test]
    fn reencoding_preserves_examples() {
        let d = dataset(2, 4, 6, Strategy::SymmetricStable, 15);
        let bare = reencode(&d, Scheme::ScalarNoParams).unwrap();
        for id in 0..6 {
            assert_eq!(bare.example(id).unwrap().0, d.example(id).unwrap().0);
        }
        let kf_a = run_algorithm(&AlgorithmId::Kf, &d).unwrap();
        let kf_b = run_algorithm(&AlgorithmId::Kf, &bare).unwrap();
        assert_eq!(kf_a.examples, kf_b.examples);
    }

    #[test]
    fn external_predictions_are_checked_against_the_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let d = dataset(2, 4, 6, Strategy::SymmetricStable, 16);
        let kf = run_algorithm(&AlgorithmId::Kf, &d).unwrap();
        let path = dir.path().join("ext.json");
        crate::codec::write_predictions(&path, &kf).unwrap();
        let ext = run_algorithm(&AlgorithmId::External { path: path.clone() }, &d).unwrap();
        assert_eq!(ext, kf);
        let other = dataset(2, 4, 5, Strategy::SymmetricStable, 16);
        assert!(matches!(
            run_algorithm(&AlgorithmId::External { path }, &other),
            Err(Error::Alignment { .. })
        ));
    }
}
