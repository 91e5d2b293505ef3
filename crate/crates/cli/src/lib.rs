//! Command-line front end for `rcut`.
//!
//! Exit codes: 0 success, 1 unusable input or configuration, 2 backend
//! failure, 3 selftest failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use rcut_core::backend::server::serve;
use rcut_core::backend::{BackendMeta, BackendSpec, RefBackend, UniformBackend};
use rcut_core::eval::{run_dataset, write_records, EvalConfig, EvalReport, Method, TargetMode};
use rcut_core::pipeline::{explain, save_artifacts, ExplainOptions, Variant};
use rcut_core::rout::TargetSpec;
use rcut_core::selftest::run_selftest;
use rcut_core::vit::{Vit, VitConfig};
use rcut_core::{load_image, Error};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_BACKEND: i32 = 2;
pub const EXIT_SELFTEST: i32 = 3;

/// The φ values of the similarity-threshold ablation.
pub const PHI_SWEEP: [f64; 6] = [0.0, 0.05, 0.1, 0.15, 0.2, 0.25];

#[derive(Debug, Parser)]
#[command(name = "rcut", version, about = "Class-specific explainability maps for Vision Transformers")]
pub struct Cli {
    /// Upper bound on concurrent work (backend calls, images).
    #[arg(long, global = true, env = "RCUT_WORKERS")]
    pub workers: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Explain one image and write overlay, heat map and record.
    Explain(ExplainArgs),
    /// Score a method on an annotated dataset.
    Eval(EvalArgs),
    /// Run the offline invariant suite against the reference ViT.
    Selftest(SelftestArgs),
    /// Serve a backend over the line protocol on stdin/stdout.
    Serve(ServeArgs),
    /// Write seeded random reference-ViT weights.
    InitWeights(InitWeightsArgs),
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    /// `ref:<weights.rcut>` or `proc:<command line>`.
    #[arg(long)]
    pub backend: String,
    /// PNG or PPM input; resized to the backend's input size.
    #[arg(long)]
    pub image: PathBuf,
    /// rcut, rout or cut.
    #[arg(long, default_value = "rcut")]
    pub variant: String,
    /// pred, full or class:<id>.
    #[arg(long, default_value = "pred")]
    pub target: String,
    /// Cosine threshold for graph edges.
    #[arg(long, default_value_t = 0.05, allow_negative_numbers = true)]
    pub phi: f64,
    /// Directory for the artifacts.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// `ref:<weights.rcut>` or `proc:<command line>`.
    #[arg(long)]
    pub backend: String,
    /// JSON-lines annotation file.
    #[arg(long)]
    pub annotations: PathBuf,
    /// rcut, rout, cut, raw-attention or rollout.
    #[arg(long, default_value = "rcut")]
    pub method: String,
    /// pred, gt, full or class:<id>.
    #[arg(long, default_value = "pred")]
    pub target: String,
    /// Cosine threshold for graph edges.
    #[arg(long, default_value_t = 0.05, allow_negative_numbers = true, conflicts_with = "phi_sweep")]
    pub phi: f64,
    /// Comma-separated φ values; one report row each.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub phi_sweep: Option<Vec<f64>>,
    /// Binarization threshold for the localization box.
    #[arg(long, default_value_t = 0.2)]
    pub thres: f32,
    /// Leave images the model gets wrong out of the aggregates.
    #[arg(long)]
    pub filter_mispredicted: bool,
    /// Directory for per-image records and the report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    /// Seed for the generated fixtures.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Reference-ViT weights to serve.
    #[arg(long, conflicts_with = "stub", required_unless_present = "stub")]
    pub weights: Option<PathBuf>,
    /// Serve a conformance stub instead (only `uniform` exists).
    #[arg(long)]
    pub stub: Option<String>,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    #[arg(long, default_value_t = 8)]
    pub patch: usize,
    #[arg(long, default_value_t = 24)]
    pub dim: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Value of every token the stub returns.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    pub token_value: f32,
}

#[derive(Debug, Args)]
pub struct InitWeightsArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// desk or vit-base.
    #[arg(long, default_value = "desk")]
    pub config: String,
}

/// Parses `args` (program name first), runs the command, returns the exit
/// code. Diagnostics go to standard error.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let workers = match cli.workers {
        Some(0) => {
            eprintln!("error: --workers must be at least 1");
            return EXIT_INPUT;
        }
        Some(w) => w,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let result = match &cli.command {
        Command::Explain(a) => cmd_explain(a, workers, stdout),
        Command::Eval(a) => cmd_eval(a, workers, stdout),
        Command::Selftest(a) => cmd_selftest(a, stdout),
        Command::Serve(a) => cmd_serve(a),
        Command::InitWeights(a) => cmd_init_weights(a, stdout),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

/// 1 for input and configuration problems, 2 for everything the backend or
/// the numerics reported.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(core) if core.is_input_error() => EXIT_INPUT,
        Some(_) => EXIT_BACKEND,
        None => EXIT_INPUT,
    }
}

fn check_phi(phi: f64) -> anyhow::Result<()> {
    if !(-1.0..=1.0).contains(&phi) {
        return Err(Error::Config(format!("phi {phi} outside [-1, 1]")).into());
    }
    Ok(())
}

pub fn cmd_explain(args: &ExplainArgs, workers: usize, stdout: &mut dyn Write) -> anyhow::Result<i32> {
    check_phi(args.phi)?;
    let variant: Variant = args.variant.parse()?;
    let target: TargetSpec = args.target.parse()?;
    let spec: BackendSpec = args.backend.parse()?;
    let backend = spec.open(workers)?;
    let image = load_image(&args.image, backend.meta().image_size)?;
    let opts = ExplainOptions {
        target,
        variant,
        phi: args.phi,
        workers,
    };
    let result = explain(backend.as_ref(), &image, &opts)?;
    let paths = save_artifacts(&result, &args.out)?;
    writeln!(stdout, "predicted class {} (p = {:.4})", result.predicted_class, result.predicted_prob)?;
    match result.target_class {
        Some(c) => writeln!(stdout, "target class {c} ({})", result.target)?,
        None => writeln!(stdout, "target full output vector")?,
    }
    if result.degenerate {
        writeln!(stdout, "degenerate graph: channel-weighting map substituted")?;
    }
    for p in [&paths.overlay, &paths.tensors, &paths.record] {
        writeln!(stdout, "wrote {}", p.display())?;
    }
    Ok(EXIT_OK)
}

pub fn cmd_eval(args: &EvalArgs, workers: usize, stdout: &mut dyn Write) -> anyhow::Result<i32> {
    let method: Method = args.method.parse()?;
    let target: TargetMode = args.target.parse()?;
    if !(0.0..=1.0).contains(&args.thres) {
        return Err(Error::Config(format!("thres {} outside [0, 1]", args.thres)).into());
    }
    let phis = args.phi_sweep.clone().unwrap_or_else(|| vec![args.phi]);
    if phis.is_empty() {
        bail!(Error::Config("empty --phi-sweep".into()));
    }
    for &phi in &phis {
        check_phi(phi)?;
    }
    if !args.annotations.is_file() {
        return Err(Error::io(&args.annotations, std::io::ErrorKind::NotFound.into()).into());
    }
    let spec: BackendSpec = args.backend.parse()?;
    let backend = spec.open(workers)?;
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut rows: Vec<EvalReport> = Vec::new();
    for &phi in &phis {
        let cfg = EvalConfig {
            method,
            target,
            phi,
            thres: args.thres,
            filter_mispredicted: args.filter_mispredicted,
            workers,
        };
        let outcome = run_dataset(backend.as_ref(), &args.annotations, &cfg)?;
        if let Some(dir) = &args.out {
            write_records(&dir.join(format!("records_{method}_phi{phi}.jsonl")), &outcome.records)?;
        }
        writeln!(stdout, "{}", serde_json::to_string(&outcome.report)?)?;
        rows.push(outcome.report);
    }
    if let Some(dir) = &args.out {
        let path = dir.join("report.json");
        std::fs::write(&path, serde_json::to_string_pretty(&rows)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(EXIT_OK)
}

pub fn cmd_selftest(args: &SelftestArgs, stdout: &mut dyn Write) -> anyhow::Result<i32> {
    let report = run_selftest(args.seed, args.inject_fault.as_deref())?;
    for s in &report.suites {
        writeln!(stdout, "{:<10} {} passed, {} failed", s.name, s.passed, s.failed.len())?;
    }
    if report.all_passed() {
        writeln!(stdout, "selftest ok (seed {})", report.seed)?;
        Ok(EXIT_OK)
    } else {
        let failed = report.failures().join(", ");
        writeln!(stdout, "selftest FAILED: {failed}")?;
        eprintln!("failing properties: {failed}");
        Ok(EXIT_SELFTEST)
    }
}

pub fn cmd_serve(args: &ServeArgs) -> anyhow::Result<i32> {
    let stdin = std::io::stdin().lock();
    let stdout = std::io::stdout().lock();
    match (&args.weights, args.stub.as_deref()) {
        (Some(w), _) => serve(&RefBackend::from_file(w)?, stdin, stdout)?,
        (None, Some("uniform")) => {
            let meta = BackendMeta {
                image_size: args.image_size,
                patch: args.patch,
                dim: args.dim,
                classes: args.classes,
            };
            meta.validate()?;
            serve(&UniformBackend::new(meta, args.token_value), stdin, stdout)?
        }
        (None, other) => bail!(Error::Config(format!("unknown stub {other:?}, expected 'uniform'"))),
    }
    Ok(EXIT_OK)
}

pub fn cmd_init_weights(args: &InitWeightsArgs, stdout: &mut dyn Write) -> anyhow::Result<i32> {
    let cfg = match args.config.as_str() {
        "desk" => VitConfig::desk(),
        "vit-base" => VitConfig::vit_base(),
        other => bail!(Error::Config(format!("unknown config '{other}', expected desk or vit-base"))),
    };
    let vit = Vit::init_random(cfg, args.seed)?;
    write_weights(&vit, &args.out)?;
    writeln!(stdout, "wrote {}", args.out.display())?;
    Ok(EXIT_OK)
}

fn write_weights(vit: &Vit, out: &Path) -> anyhow::Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    vit.to_tensor_file()?.write(out)?;
    Ok(())
}
