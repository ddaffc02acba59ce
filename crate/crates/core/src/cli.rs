// SPDX-License-Identifier: Apache-2.0

//! `linterp` command line.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage, 3 I/O or load failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::attribution::{fgsm_perturb, Attribution, PdNormalization};
use crate::checks::{verify, DEFAULT_VERIFY_TOL};
use crate::engine::{capture, InterpreterHandle, DEFAULT_MAX_ELEMS};
use crate::error::{Error, Result};
use crate::fixtures::write_fixtures;
use crate::io::{default_blob_path, encode_8bit, encode_netpbm, export_signed_map, load_image, load_model};
use crate::layers::UnitState;
use crate::model::ModelSpec;
use crate::spectral::{svd_topk, SvdConfig};
use crate::tensor::{flat_index, image_dims, Tensor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "linterp", version, about = "Linear interpreters of small CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Inputs {
    /// Model manifest (JSON).
    #[arg(long)]
    model: PathBuf,
    /// Weight blob; defaults to the manifest path with a `.bin` extension.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Reference input (PGM, PPM or PFM).
    #[arg(long)]
    image: PathBuf,
}

#[derive(Debug, Args)]
struct OutDir {
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct Pixel {
    /// Flat index in the domain.
    #[arg(long)]
    index: Option<usize>,
    /// `c,y,x` in the domain.
    #[arg(long, value_parser = parse_pixel)]
    pixel: Option<(usize, usize, usize)>,
}

fn parse_pixel(s: &str) -> std::result::Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [c, y, x] = parts.as_slice() else {
        return Err(format!("expected c,y,x, got '{s}'"));
    };
    let n = |v: &str| v.parse::<usize>().map_err(|_| format!("'{v}' is not an index"));
    Ok((n(c)?, n(y)?, n(x)?))
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Norm {
    PerStage,
    Global,
}

impl From<Norm> for PdNormalization {
    fn from(n: Norm) -> Self {
        match n {
            Norm::PerStage => PdNormalization::PerStage,
            Norm::Global => PdNormalization::Global,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Consistency, affinity and adjoint checks; prints a JSON summary.
    Verify {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, default_value_t = DEFAULT_VERIFY_TOL)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Flip the first ReLU mask before checking.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Export the residual `r`.
    Residual {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        out: OutDir,
    },
    /// Export the row of `F` for an output element.
    Row {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        pixel: Pixel,
        #[command(flatten)]
        out: OutDir,
    },
    /// Export the column of `F` for an input element.
    Column {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        pixel: Pixel,
        #[command(flatten)]
        out: OutDir,
    },
    /// Write `F` and `r` as CSV tables.
    Materialize {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, default_value_t = DEFAULT_MAX_ELEMS)]
        max_elems: usize,
        #[command(flatten)]
        out: OutDir,
    },
    /// Top-k singular triplets of `F`.
    Svd {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0.0)]
        momentum: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        #[command(flatten)]
        out: OutDir,
    },
    /// Per-layer bias contributions to one score and its pixel discussion.
    Decompose {
        #[command(flatten)]
        inputs: Inputs,
        /// Score index; defaults to the top score.
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, value_enum, default_value = "per-stage")]
        norm: Norm,
        #[command(flatten)]
        out: OutDir,
    },
    /// Per-pixel class votes.
    Votes {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, value_enum, default_value = "per-stage")]
        norm: Norm,
        #[command(flatten)]
        out: OutDir,
    },
    /// Fast-gradient-sign perturbation against one score.
    Fgsm {
        #[command(flatten)]
        inputs: Inputs,
        /// Score index; defaults to the top score.
        #[arg(long)]
        label: Option<usize>,
        #[arg(long)]
        eps: f64,
        #[command(flatten)]
        out: OutDir,
    },
    /// HTTP service for interactive exploration.
    Serve {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Regenerate the shipped fixture models and sample image.
    Fixtures {
        #[command(flatten)]
        out: OutDir,
    },
}

/// Writes to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Load(_) | Error::Parse(_) | Error::Json(_) => EXIT_IO,
        Error::Index { .. } | Error::Config(_) | Error::Shape(_) | Error::Refused(_) => EXIT_USAGE,
        Error::State(_) | Error::Contract(_) | Error::Numeric { .. } => EXIT_CHECK,
    }
}

fn load_model_input(inputs: &Inputs) -> Result<(ModelSpec, Tensor)> {
    let blob = inputs.weights.clone().unwrap_or_else(|| default_blob_path(&inputs.model));
    let model = load_model(&inputs.model, &blob)?;
    let image = load_image(&inputs.image)?;
    let x0 = if image.shape() == model.input_shape() {
        image
    } else if image.len() == model.input_shape().iter().product::<usize>() {
        image.reshape(model.input_shape())?
    } else {
        return Err(Error::Shape(format!(
            "image {:?} does not fit model input {:?}",
            image.shape(),
            model.input_shape()
        )));
    };
    Ok((model, x0))
}

fn open(inputs: &Inputs) -> Result<InterpreterHandle> {
    let (model, x0) = load_model_input(inputs)?;
    capture(model, &x0)
}

fn prepare(out: &OutDir) -> Result<&Path> {
    fs::create_dir_all(&out.out)?;
    Ok(&out.out)
}

fn resolve(pixel: &Pixel, shape: &[usize]) -> Result<usize> {
    let len: usize = shape.iter().product();
    match (pixel.index, pixel.pixel) {
        (Some(k), _) if k < len => Ok(k),
        (Some(k), _) => Err(Error::Index { index: k, len }),
        (None, Some((c, y, x))) => flat_index(shape, c, y, x),
        (None, None) => Err(Error::Config("one of --index or --pixel is required".into())),
    }
}

fn top_score(handle: &InterpreterHandle) -> usize {
    handle.reference_output().argmax()
}

fn fmt_row(values: impl IntoIterator<Item = f64>) -> String {
    let mut s = String::new();
    for (i, v) in values.into_iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{v}").expect("string write");
    }
    s
}

fn write_matrix_csv(path: &Path, rows: usize, cols: usize, get: impl Fn(usize, usize) -> f64) -> Result<()> {
    let mut s = String::from("row");
    for j in 0..cols {
        write!(s, ",{j}").expect("string write");
    }
    s.push('\n');
    for i in 0..rows {
        writeln!(s, "{i},{}", fmt_row((0..cols).map(|j| get(i, j)))).expect("string write");
    }
    fs::write(path, s)?;
    Ok(())
}

fn cmd_verify(inputs: &Inputs, tol: f64, seed: u64, inject_fault: bool) -> Result<i32> {
    let mut handle = open(inputs)?;
    if inject_fault {
        let (layer, mask) = handle
            .frozen()
            .states
            .iter()
            .enumerate()
            .find_map(|(i, s)| match s {
                UnitState::ReluMask(m) => Some((i, m.map(|v| 1.0 - v))),
                _ => None,
            })
            .ok_or_else(|| Error::Config("fault injection needs a ReLU layer".into()))?;
        handle = handle.with_unit_state(layer, UnitState::ReluMask(mask))?;
    }
    let report = verify(&handle, tol, seed)?;
    emit(&format!("{}\n", serde_json::to_string_pretty(&report)?))?;
    Ok(if report.pass { EXIT_OK } else { EXIT_CHECK })
}

fn cmd_probe(inputs: &Inputs, pixel: &Pixel, out: &OutDir, row: bool) -> Result<i32> {
    let handle = open(inputs)?;
    let dir = prepare(out)?;
    let (k, map, name) = if row {
        let k = resolve(pixel, handle.output_shape())?;
        (k, handle.row(k)?, "row")
    } else {
        let k = resolve(pixel, handle.input_shape())?;
        (k, handle.column(k)?, "column")
    };
    let e = export_signed_map(&map, &dir.join(format!("{name}_{k}")))?;
    emit(&format!("{}\n", e.pfm.display()))?;
    Ok(EXIT_OK)
}

fn cmd_materialize(inputs: &Inputs, max_elems: usize, out: &OutDir) -> Result<i32> {
    let handle = open(inputs)?;
    let (f, r) = handle.materialize(max_elems)?;
    let dir = prepare(out)?;
    write_matrix_csv(&dir.join("filter.csv"), f.rows, f.cols, |i, j| f.get(i, j))?;
    write_matrix_csv(&dir.join("residual.csv"), r.len(), 1, |i, _| r.data()[i])?;
    emit(&format!("{}×{}\n", f.rows, f.cols))?;
    Ok(EXIT_OK)
}

fn cmd_svd(inputs: &Inputs, cfg: &SvdConfig, out: &OutDir) -> Result<i32> {
    cfg.validate()?;
    let handle = open(inputs)?;
    let res = svd_topk(&handle, cfg)?;
    let dir = prepare(out)?;
    let mut sigma = String::new();
    let mut diag = String::from("index,sigma,iterations,converged,degenerate,residual,adjoint_residual\n");
    for (i, t) in res.triplets.iter().enumerate() {
        writeln!(sigma, "{}", t.sigma).expect("string write");
        writeln!(
            diag,
            "{i},{},{},{},{},{},{}",
            t.sigma, t.iterations, t.converged, t.degenerate, t.residual, t.adjoint_residual
        )
        .expect("string write");
        export_signed_map(&t.v, &dir.join(format!("eigen_input_{i}")))?;
        export_signed_map(&t.u, &dir.join(format!("eigen_output_{i}")))?;
    }
    fs::write(dir.join("sigma.txt"), &sigma)?;
    fs::write(dir.join("diagnostics.csv"), diag)?;
    emit(&sigma)?;
    Ok(EXIT_OK)
}

fn cmd_decompose(inputs: &Inputs, class: Option<usize>, norm: Norm, out: &OutDir) -> Result<i32> {
    let handle = open(inputs)?;
    let c = class.unwrap_or_else(|| top_score(&handle));
    let att = Attribution::new(&handle)?;
    let rep = att.contributions(c)?;
    let pd = att.pixel_discussion(c, norm.into())?;
    let dir = prepare(out)?;
    let share = |v: f64| if rep.score != 0.0 { v / rep.score } else { f64::NAN };
    let mut s = String::from("term,layers,value,share\n");
    writeln!(s, "input,,{},{}", rep.input_term, share(rep.input_term)).expect("string write");
    for t in &rep.stages {
        writeln!(s, "stage_{},{},{},{}", t.stage, t.label, t.term, share(t.term)).expect("string write");
    }
    writeln!(s, "residual,,{},{}", rep.residual(), share(rep.residual())).expect("string write");
    writeln!(s, "score,,{},1", rep.score).expect("string write");
    fs::write(dir.join("contributions.csv"), &s)?;
    export_signed_map(&pd.map, &dir.join(format!("pd_{c}")))?;
    emit(&s)?;
    if !pd.uniform_stages.is_empty() {
        log::warn!("stages {:?} had zero-sum back-projections; spread uniformly", pd.uniform_stages);
    }
    Ok(EXIT_OK)
}

fn cmd_votes(inputs: &Inputs, norm: Norm, out: &OutDir) -> Result<i32> {
    let handle = open(inputs)?;
    let att = Attribution::new(&handle)?;
    let votes = att.votes(norm.into())?;
    if votes.classes > 256 {
        return Err(Error::Refused(format!("{} classes do not fit an 8-bit label map", votes.classes)));
    }
    let dir = prepare(out)?;
    let (c, h, w) = image_dims(&votes.shape)?;
    let labels: Vec<u8> = votes.labels.iter().map(|&l| l as u8).collect();
    fs::write(dir.join("votes.pgm"), encode_netpbm(w, c * h, 1, &labels)?)?;
    let mut s = String::from("class,pixels\n");
    for (label, n) in votes.counts().into_iter().enumerate() {
        writeln!(s, "{label},{n}").expect("string write");
        let masked = votes.masked_input(handle.reference_input(), label)?;
        fs::write(dir.join(format!("mask_{label}.pgm")), encode_8bit(&masked.reshape(&[1, c * h, w])?)?)?;
    }
    fs::write(dir.join("votes.csv"), &s)?;
    emit(&s)?;
    Ok(EXIT_OK)
}

fn cmd_fgsm(inputs: &Inputs, label: Option<usize>, eps: f64, out: &OutDir) -> Result<i32> {
    let handle = open(inputs)?;
    let c = label.unwrap_or_else(|| top_score(&handle));
    let x1 = fgsm_perturb(&handle, c, eps, (0.0, 1.0))?;
    let before = handle.reference_output().data()[c];
    let after = handle.model().forward(&x1)?.data()[c];
    let dir = prepare(out)?;
    fs::write(dir.join("perturbed.pfm"), crate::io::encode_pfm(&x1)?)?;
    fs::write(dir.join("perturbed.pgm"), encode_8bit(&x1)?)?;
    let summary = serde_json::json!({ "label": c, "eps": eps, "score_before": before, "score_after": after });
    let text = format!("{}\n", serde_json::to_string_pretty(&summary)?);
    fs::write(dir.join("fgsm.json"), &text)?;
    emit(&text)?;
    Ok(EXIT_OK)
}

fn cmd_serve(inputs: &Inputs, host: &str, port: u16) -> Result<i32> {
    let (model, x0) = load_model_input(inputs)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let state = crate::service::ServiceState::pending();
        let listener = tokio::net::TcpListener::bind((host, port)).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        let capturing = state.clone();
        let model = Arc::new(model);
        tokio::task::spawn_blocking(move || match capture(model, &x0) {
            Ok(h) => capturing.set_ready(h),
            Err(e) => capturing.set_failed(e.to_string()),
        });
        axum::serve(listener, crate::service::router(state)).await?;
        Ok(EXIT_OK)
    })
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Verify {
            inputs,
            tol,
            seed,
            inject_fault,
        } => cmd_verify(&inputs, tol, seed, inject_fault),
        Command::Residual { inputs, out } => {
            let handle = open(&inputs)?;
            let dir = prepare(&out)?;
            let e = export_signed_map(handle.residual()?, &dir.join("residual"))?;
            emit(&format!("{}\n", e.pfm.display()))?;
            Ok(EXIT_OK)
        }
        Command::Row { inputs, pixel, out } => cmd_probe(&inputs, &pixel, &out, true),
        Command::Column { inputs, pixel, out } => cmd_probe(&inputs, &pixel, &out, false),
        Command::Materialize { inputs, max_elems, out } => cmd_materialize(&inputs, max_elems, &out),
        Command::Svd {
            inputs,
            k,
            steps,
            momentum,
            seed,
            tol,
            out,
        } => cmd_svd(
            &inputs,
            &SvdConfig {
                steps,
                momentum,
                k,
                seed,
                tol,
            },
            &out,
        ),
        Command::Decompose {
            inputs,
            class,
            norm,
            out,
        } => cmd_decompose(&inputs, class, norm, &out),
        Command::Votes { inputs, norm, out } => cmd_votes(&inputs, norm, &out),
        Command::Fgsm { inputs, label, eps, out } => cmd_fgsm(&inputs, label, eps, &out),
        Command::Serve { inputs, host, port } => cmd_serve(&inputs, &host, port),
        Command::Fixtures { out } => {
            write_fixtures(&out.out)?;
            Ok(EXIT_OK)
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
