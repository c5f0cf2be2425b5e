//! `ptq`: synthetic dumps, calibration, quantization, evaluation and the
//! toy-network pipeline.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ptq_core::io::calibrate::{calibrate_dir, CalibConfig};
use ptq_core::io::dump::{read_dump, write_code_dump, write_dump, CodeDump};
use ptq_core::io::masks::tensor_mask_metrics;
use ptq_core::io::params::ParamFile;
use ptq_core::io::synth::{generate, SynthKind};
use ptq_core::quant::error_metrics;
use ptq_core::toy_net::{run_seeded, PlanConfig, DEFAULT_CALIB_SIZE, DEFAULT_EVAL_SIZE};

#[derive(Parser)]
#[command(name = "ptq", version, about = "Post-training quantization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic activation dump.
    Synth(SynthArgs),
    /// Calibrate quantizers from a directory of activation dumps.
    Calibrate(CalibrateArgs),
    /// Fake-quantize a dump with one hook's quantizer and emit its codes.
    Quantize(QuantizeArgs),
    /// Compare two dumps, as tensors or as binary masks.
    Evaluate(EvaluateArgs),
    /// Run the seeded toy-network calibration pipeline.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// softmax, gelu or outlier.
    #[arg(long)]
    kind: String,
    /// Comma-separated dimensions.
    #[arg(long, default_value = "64,64")]
    shape: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    /// TOML calibration config.
    #[arg(long)]
    config: PathBuf,
    /// Directory of `<hook>.<k>.ptq4` and `<hook>.grad.<k>.ptq4` files.
    #[arg(long)]
    dumps: PathBuf,
    /// Parameter file to write.
    #[arg(long)]
    out: PathBuf,
    /// Report path; stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    params: PathBuf,
    /// Hook entry to apply; optional when the file holds a single entry.
    #[arg(long)]
    hook: Option<String>,
    #[arg(long = "in")]
    input: PathBuf,
    /// Dequantized dump.
    #[arg(long)]
    out: PathBuf,
    /// Code dump; defaults to `<out stem>.codes.ptq4` next to `--out`.
    #[arg(long)]
    codes: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Reference dump.
    #[arg(long)]
    a: PathBuf,
    /// Approximation or prediction dump.
    #[arg(long)]
    b: PathBuf,
    /// Treat both dumps as masks (axis 0 indexes samples).
    #[arg(long)]
    masks: bool,
    /// Binarization threshold for `--masks`.
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// W{w}A{a}, e.g. W8A8 or W4A4.
    #[arg(long, default_value = "W8A8")]
    preset: String,
    #[arg(long, default_value_t = DEFAULT_CALIB_SIZE)]
    calib_size: usize,
    /// Held-out inputs scored after calibration; 0 skips the evaluation.
    #[arg(long, default_value_t = DEFAULT_EVAL_SIZE)]
    eval_size: usize,
    #[arg(long)]
    no_drq: bool,
    #[arg(long)]
    no_rorq: bool,
    #[arg(long)]
    no_search: bool,
    /// Report path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the calibrated parameter file.
    #[arg(long)]
    params: Option<PathBuf>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Quantize(a) => quantize(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Pipeline(a) => pipeline(a),
    }
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|d| {
            d.trim()
                .parse::<usize>()
                .with_context(|| format!("bad dimension {d:?} in shape {s:?}"))
        })
        .collect()
}

fn emit(text: &str, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json(v: &impl serde::Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn synth(a: SynthArgs) -> Result<()> {
    let t = generate(
        SynthKind::from_name(&a.kind)?,
        &parse_shape(&a.shape)?,
        a.seed,
    )?;
    write_dump(&t, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    Ok(())
}

fn calibrate(a: CalibrateArgs) -> Result<()> {
    let cfg =
        CalibConfig::read(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let (params, report, used) = calibrate_dir(&a.dumps, &cfg)?;
    params
        .write(&a.out)
        .with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!(
        "calibrated {} hooks from {used} samples per hook",
        params.hooks.len()
    );
    emit(&report.to_json()?, a.report.as_deref())
}

fn codes_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().unwrap_or_default().to_string_lossy();
    out.with_file_name(format!("{stem}.codes.ptq4"))
}

fn quantize(a: QuantizeArgs) -> Result<()> {
    let params =
        ParamFile::read(&a.params).with_context(|| format!("reading {}", a.params.display()))?;
    let hook = match (&a.hook, params.hooks.len()) {
        (Some(h), _) => h.clone(),
        (None, 1) => params.hooks.keys().next().expect("one entry").clone(),
        (None, n) => bail!("--hook is required: the parameter file has {n} entries"),
    };
    let q = params.get(&hook)?;
    let x = read_dump(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    write_dump(&q.fake(&x)?, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let codes = CodeDump {
        shape: x.shape().to_vec(),
        codes: q.encode(&x)?,
    };
    let cpath = a.codes.unwrap_or_else(|| codes_path(&a.out));
    write_code_dump(&codes, &cpath).with_context(|| format!("writing {}", cpath.display()))?;
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let x = read_dump(&a.a).with_context(|| format!("reading {}", a.a.display()))?;
    let y = read_dump(&a.b).with_context(|| format!("reading {}", a.b.display()))?;
    let text = if a.masks {
        to_json(&tensor_mask_metrics(&y, &x, a.threshold)?)?
    } else {
        if x.shape() != y.shape() {
            bail!("shapes differ: {:?} vs {:?}", x.shape(), y.shape());
        }
        to_json(&error_metrics(x.data(), y.data())?)?
    };
    emit(&text, None)
}

fn pipeline(a: PipelineArgs) -> Result<()> {
    let mut cfg = PlanConfig::preset(&a.preset)?;
    cfg.use_drq &= !a.no_drq;
    cfg.use_rorq &= !a.no_rorq;
    cfg.use_search &= !a.no_search;
    let (plan, report) = run_seeded(a.seed, &cfg, a.calib_size, a.eval_size)?;
    if let Some(p) = &a.params {
        plan.to_param_file()
            .write(p)
            .with_context(|| format!("writing {}", p.display()))?;
    }
    emit(&report.to_json()?, a.out.as_deref())
}
