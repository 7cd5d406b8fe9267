use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use icl_kalman::codec::{encode, read_dataset, read_predictions, write_dataset, write_predictions, Scheme};
use icl_kalman::eval::{
    evaluate_dataset, generate_dataset, mspd_csv, mspd_curve, reencode, run_algorithm, write_report, AlgorithmId,
    ExperimentConfig,
};
use icl_kalman::sampler::{SamplerConfig, Schedule, Strategy};
use icl_kalman::vm::{
    compile_dual_kf_program, compile_kf_program, parse_program, run_filter_program, run_program, build_tape, Mode,
};
use icl_kalman::{Error, Result};

#[derive(Parser)]
#[command(name = "icl-kalman", version, about = "Kalman filtering baselines, tape programs and MSPD evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Scalar,
    Vector,
    Control,
    ScalarNoCov,
    ScalarNoParams,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Scalar => Scheme::Scalar,
            SchemeArg::Vector => Scheme::Vector,
            SchemeArg::Control => Scheme::Control,
            SchemeArg::ScalarNoCov => Scheme::ScalarNoCov,
            SchemeArg::ScalarNoParams => Scheme::ScalarNoParams,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Kf,
    DualKf,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a dataset of encoded examples.
    Generate {
        /// Experiment config (sampler, scheme, count, step); flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        strategy: Option<u8>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        /// Context length N.
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, value_enum)]
        scheme: Option<SchemeArg>,
        #[arg(long)]
        seed: Option<u64>,
        /// Training step at which schedules are evaluated.
        #[arg(long)]
        step: Option<u64>,
        /// Sample control inputs.
        #[arg(long)]
        control: bool,
    },
    /// Run one algorithm over a dataset and write its predictions.
    Filter {
        #[arg(long)]
        data: PathBuf,
        /// kf, kf-seq, dual-kf, vm-kf, vm-dual, sgd(a), ols, ridge(l) or external(path).
        #[arg(long)]
        algorithm: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compile and execute a tape program on one example.
    VmRun {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "kf")]
        mode: ModeArg,
        #[arg(long, default_value_t = 0)]
        example: usize,
        /// Run this assembly file instead of the compiled program.
        #[arg(long)]
        program: Option<PathBuf>,
        /// Write the compiled program as assembly.
        #[arg(long)]
        emit_asm: Option<PathBuf>,
        /// Write one JSON line per executed instruction.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Compute MSPD curves and state errors for an experiment config.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for mspd.csv, state_mse.csv and report.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Evaluate on this dataset instead of sampling one.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Re-encode a dataset under another prompt scheme.
    ExportContext {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        scheme: SchemeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// MSPD curve between two prediction files.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path)
}

#[derive(Serialize)]
struct TraceLine<'a> {
    index: usize,
    instruction: String,
    dst: String,
    value: &'a [f64],
    rows: usize,
    cols: usize,
}

#[derive(Serialize)]
struct VmSummary {
    mode: &'static str,
    example: usize,
    instructions: usize,
    predictions: Vec<f64>,
    final_state: Vec<f64>,
}

fn generate(
    config: Option<PathBuf>,
    out: PathBuf,
    overrides: (Option<u8>, Option<usize>, Option<usize>, Option<usize>, Option<usize>),
    scheme: Option<SchemeArg>,
    seed: Option<u64>,
    step: Option<u64>,
    control: bool,
) -> Result<()> {
    let (strategy, n, m, horizon, count) = overrides;
    let mut cfg = match &config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::standard(SamplerConfig::evaluation(Strategy::SymmetricStable, 0)),
    };
    if let Some(s) = strategy {
        cfg.sampler.strategy = Strategy::from_index(s)?;
    }
    if let Some(n) = n {
        cfg.sampler.n = n;
    }
    if let Some(m) = m {
        cfg.sampler.m = m;
    }
    if let Some(h) = horizon {
        cfg.sampler.context_length = Schedule::Constant { value: h as f64 };
    }
    if let Some(c) = count {
        cfg.count = c;
    }
    if let Some(s) = scheme {
        cfg.scheme = s.into();
    }
    if let Some(s) = seed {
        cfg.sampler.seed = s;
    }
    if let Some(s) = step {
        cfg.step = s;
    }
    cfg.sampler.with_control |= control || cfg.scheme == Scheme::Control;
    let data = generate_dataset(&cfg.sampler, cfg.scheme, cfg.count, cfg.step)?;
    write_dataset(&out, &data)?;
    eprintln!("wrote {} examples (n={}, m={}, N={}) to {}", data.count, data.n, data.m, data.horizon, out.display());
    Ok(())
}

fn vm_run(
    data: PathBuf,
    mode: ModeArg,
    example: usize,
    program: Option<PathBuf>,
    emit_asm: Option<PathBuf>,
    trace: Option<PathBuf>,
) -> Result<()> {
    let file = read_dataset(&data)?;
    if example >= file.count {
        return Err(Error::Config(format!("example {example} is out of range (dataset has {})", file.count)));
    }
    let (params, traj) = file.example(example)?;
    let (mode, scheme) = match mode {
        ModeArg::Kf => (Mode::Kf, Scheme::Scalar),
        ModeArg::DualKf => (Mode::DualKf, Scheme::ScalarNoParams),
    };
    let mut prog = match &program {
        Some(path) => parse_program(&fs::read_to_string(path)?)?,
        None => match mode {
            Mode::Kf => compile_kf_program(file.n, file.horizon)?,
            Mode::DualKf => compile_dual_kf_program(file.n, file.horizon)?,
        },
    };
    if prog.mode != mode {
        return Err(Error::Config(format!(
            "program is for mode {} but --mode is {}",
            prog.mode.name(),
            mode.name()
        )));
    }
    if let Some(path) = emit_asm {
        fs::write(path, prog.to_string())?;
    }
    let ctx = encode(&params, &traj, scheme)?;
    if let Some(path) = trace {
        prog.trace = true;
        let mut tape = build_tape(&ctx, mode)?;
        let entries = run_program(&mut tape, &prog)?;
        let mut w = BufWriter::new(fs::File::create(path)?);
        for e in &entries {
            let values: Vec<f64> = e.value.transpose().iter().copied().collect();
            let line = TraceLine {
                index: e.index,
                instruction: prog.instructions[e.index].to_string(),
                dst: e.dst.to_string(),
                value: &values,
                rows: e.value.nrows(),
                cols: e.value.ncols(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        prog.trace = false;
    }
    let run = run_filter_program(&ctx, &prog)?;
    let summary = VmSummary {
        mode: mode.name(),
        example,
        instructions: prog.instructions.len(),
        predictions: run.predictions,
        final_state: run.states.last().map(|x| x.iter().copied().collect()).unwrap_or_default(),
    };
    let stdout = io::stdout();
    let mut lock = stdout.lock();
    serde_json::to_writer_pretty(&mut lock, &summary)?;
    writeln!(lock)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            config,
            out,
            strategy,
            n,
            m,
            horizon,
            count,
            scheme,
            seed,
            step,
            control,
        } => generate(config, out, (strategy, n, m, horizon, count), scheme, seed, step, control),
        Command::Filter { data, algorithm, out } => {
            let alg: AlgorithmId = algorithm.parse()?;
            let dataset = read_dataset(&data)?;
            let preds = run_algorithm(&alg, &dataset)?;
            write_predictions(&out, &preds)?;
            eprintln!("wrote {alg} predictions for {} examples to {}", preds.count, out.display());
            Ok(())
        }
        Command::VmRun {
            data,
            mode,
            example,
            program,
            emit_asm,
            trace,
        } => vm_run(data, mode, example, program, emit_asm, trace),
        Command::Evaluate { config, out, seed, data } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.sampler.seed = s;
            }
            let dataset = match data {
                Some(path) => read_dataset(path)?,
                None => generate_dataset(&cfg.sampler, cfg.scheme, cfg.count, cfg.step)?,
            };
            let report = evaluate_dataset(&cfg, &dataset)?;
            write_report(&out, &report)?;
            eprintln!("wrote {} MSPD curves to {}", report.curves.len(), out.display());
            Ok(())
        }
        Command::ExportContext { data, scheme, out } => {
            let dataset = read_dataset(&data)?;
            let exported = reencode(&dataset, scheme.into())?;
            write_dataset(&out, &exported)?;
            Ok(())
        }
        Command::Compare { a, b, out } => {
            let curve = mspd_curve(&read_predictions(a)?, &read_predictions(b)?)?;
            let csv = mspd_csv(&[curve]);
            match out {
                Some(path) => fs::write(path, csv)?,
                None => print!("{csv}"),
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
