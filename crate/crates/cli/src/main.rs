//! `shiftquant`: quantize float models, run inference, report statistics.
//!
//! Exit codes: 0 success, 1 runtime error (I/O, format, numeric), 2 usage
//! error (bad flags or an engine that cannot run the given model).

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use shiftquant::calibrate::CalibConfig;
use shiftquant::engine::{quantize_graph, QuantizedModel};
use shiftquant::graph::Graph;
use shiftquant::modelio::{
    load_model, load_quantized, read_tensor, save_quantized, write_tensor, QMODEL_MAGIC,
};
use shiftquant::report::{build_report, format_float};
use shiftquant::tensor::AnyTensor;
use shiftquant::Tensor;

#[derive(Parser)]
#[command(
    name = "shiftquant",
    version,
    about = "Bit-shift fixed-point quantization toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fold, fuse and calibrate a float model; write a quantized model.
    Quantize {
        /// Float model manifest (JSON).
        #[arg(long)]
        model: PathBuf,
        /// Float model tensor blob.
        #[arg(long)]
        blobs: PathBuf,
        /// Calibration tensor, NCHW float32.
        #[arg(long)]
        calib: PathBuf,
        #[arg(long, default_value_t = 8)]
        bits: u32,
        #[arg(long, default_value_t = 4)]
        tau: u32,
        /// Calibrate on the whole calibration batch instead of its first sample.
        #[arg(long)]
        calib_all: bool,
        /// Output quantized model file.
        #[arg(long)]
        out: PathBuf,
        /// Also write the calibration summary as CSV here.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Run a quantized or float model on an input tensor.
    Infer {
        /// Quantized model file, or float model manifest (with --blobs).
        #[arg(long)]
        model: PathBuf,
        /// Float model tensor blob; required for float manifests.
        #[arg(long)]
        blobs: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Engine::Int)]
        engine: Engine,
    },
    /// Per-module MSE, shift histogram and quant-op counts.
    Report {
        /// Quantized model file.
        #[arg(long)]
        model: PathBuf,
        /// Float model manifest the quantized model came from.
        #[arg(long)]
        float_model: PathBuf,
        /// Float model tensor blob.
        #[arg(long)]
        blobs: PathBuf,
        /// Evaluation tensor, NCHW float32; every sample is used.
        #[arg(long)]
        calib: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Engine {
    /// Integer-only engine (quantized models).
    Int,
    /// Float-emulation for quantized models; float reference for float models.
    Float,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

enum Failure {
    Usage(String),
    Runtime(shiftquant::Error),
}

impl From<shiftquant::Error> for Failure {
    fn from(e: shiftquant::Error) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Quantize {
            model,
            blobs,
            calib,
            bits,
            tau,
            calib_all,
            out,
            summary,
        } => cmd_quantize(
            &model,
            &blobs,
            &calib,
            bits,
            tau,
            calib_all,
            &out,
            summary.as_deref(),
        ),
        Command::Infer {
            model,
            blobs,
            input,
            out,
            engine,
        } => cmd_infer(&model, blobs.as_deref(), &input, &out, engine),
        Command::Report {
            model,
            float_model,
            blobs,
            calib,
            format,
        } => cmd_report(&model, &float_model, &blobs, &calib, format),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// Applies `SHIFTQUANT_THREADS` to the global worker pool.
fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("SHIFTQUANT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("SHIFTQUANT_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn read_f32(path: &Path) -> Result<Tensor<f32>, Failure> {
    Ok(read_tensor(path)?.into_f32()?)
}

#[allow(clippy::too_many_arguments)]
fn cmd_quantize(
    model: &Path,
    blobs: &Path,
    calib: &Path,
    bits: u32,
    tau: u32,
    calib_all: bool,
    out: &Path,
    summary: Option<&Path>,
) -> CmdResult {
    let g = load_model(model, blobs)?;
    let calib = read_f32(calib)?;
    calib.nchw()?;
    let inputs = if calib_all {
        vec![calib]
    } else {
        calib.split_batch().into_iter().take(1).collect()
    };
    let cfg = CalibConfig::new(inputs).with_bits(bits).with_tau(tau);
    let start = Instant::now();
    let (qmodel, result) = quantize_graph(&g, &cfg)?;
    let elapsed = start.elapsed();
    save_quantized(&qmodel, out)?;

    let mut csv = String::from("module,case,n_x,n_w,n_b,n_o,error,evaluations\n");
    for m in &result.modules {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            m.name,
            m.case.label(),
            m.n_x,
            m.n_w,
            m.n_b,
            m.n_o,
            format_float(m.error),
            m.evaluations
        ));
    }
    let mut stdout = std::io::stdout().lock();
    let _ = write!(stdout, "{csv}");
    let _ = writeln!(
        stdout,
        "# input n_x={} modules={} evaluations={} wall_time_s={:.3}",
        result.input.frac_bits,
        result.modules.len(),
        result.total_evaluations(),
        elapsed.as_secs_f64()
    );
    if let Some(path) = summary {
        fs::write(path, csv).map_err(|e| shiftquant::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}

fn is_quantized_file(path: &Path) -> Result<bool, Failure> {
    let bytes = fs::read(path).map_err(|e| shiftquant::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(bytes.starts_with(QMODEL_MAGIC))
}

fn cmd_infer(
    model: &Path,
    blobs: Option<&Path>,
    input: &Path,
    out: &Path,
    engine: Engine,
) -> CmdResult {
    let x = read_f32(input)?;
    let y = if is_quantized_file(model)? {
        let q: QuantizedModel = load_quantized(model)?;
        match engine {
            Engine::Int => q.infer(&x)?,
            Engine::Float => shiftquant::fixedpoint::dequantize(&q.run_emulated(&x)?),
        }
    } else {
        if engine == Engine::Int {
            return Err(Failure::Usage(
                "the int engine needs a quantized model; run `quantize` first".into(),
            ));
        }
        let blobs = blobs.ok_or_else(|| Failure::Usage("float models need --blobs".into()))?;
        let g: Graph = load_model(model, blobs)?;
        g.forward(&x.to_f64())?.to_f32()
    };
    write_tensor(out, &AnyTensor::F32(y))?;
    Ok(())
}

fn cmd_report(
    model: &Path,
    float_model: &Path,
    blobs: &Path,
    calib: &Path,
    format: Format,
) -> CmdResult {
    let q = load_quantized(model)?;
    let g = load_model(float_model, blobs)?;
    let x = read_f32(calib)?;
    let report = build_report(&q, &g, &x)?;
    let text = match format {
        Format::Csv => report.to_csv(),
        Format::Json => report.to_json(),
    };
    print!("{text}");
    Ok(())
}
